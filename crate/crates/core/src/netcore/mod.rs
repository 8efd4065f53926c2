//! Residual SiLU MLPs with exact reverse-mode gradients.
//!
//! Every network in the crate is one shape:
//!
//! ```text
//! row = [ trunk input | embed_0 input | embed_1 input | ... ]
//! h_e   = MLP_e(embed_e input)                  (SiLU after every layer)
//! h     = SiLU(Linear([trunk input, h_0, h_1, ...]))
//! h     = h + Linear(SiLU(Linear(h)))           (× num_res_blocks)
//! out   = Linear(h)
//! ```
//!
//! Parameters live in one flat vector so that the optimizer, Polyak
//! averaging, and checkpoints all treat a network as a single slice.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointEntry};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::matrix::{gemm, Matrix};
use crate::rng::Rng;
use rand::Rng as _;

/// An auxiliary input branch (time or conditioning embedding).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedSpec {
    pub name: String,
    pub input_dim: usize,
    /// Hidden widths; each layer is followed by SiLU. Empty means the raw
    /// input is passed through to the concatenation.
    pub hidden: Vec<usize>,
}

impl EmbedSpec {
    pub fn new(name: &str, input_dim: usize, hidden: &[usize]) -> Self {
        Self {
            name: name.to_owned(),
            input_dim,
            hidden: hidden.to_vec(),
        }
    }

    fn output_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Width of the trunk part of each input row.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_res_blocks: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub embeds: Vec<EmbedSpec>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, num_res_blocks: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            num_res_blocks,
            output_dim,
            embeds: Vec::new(),
        }
    }

    pub fn with_embed(mut self, embed: EmbedSpec) -> Self {
        self.embeds.push(embed);
        self
    }

    /// Score network over `x_dim` with a time embedding and, when
    /// `cond_dim > 0`, a conditioning embedding.
    pub fn score(x_dim: usize, cond_dim: usize, trunk: usize, embed: usize, blocks: usize) -> Self {
        let mut spec =
            Self::new(x_dim, trunk, blocks, x_dim).with_embed(EmbedSpec::new("time", 1, &[embed, embed]));
        if cond_dim > 0 {
            spec = spec.with_embed(EmbedSpec::new("cond", cond_dim, &[embed, embed]));
        }
        spec
    }

    /// Plain regressor: dense layer, residual blocks, linear head.
    pub fn regressor(input_dim: usize, output_dim: usize, trunk: usize, blocks: usize) -> Self {
        Self::new(input_dim, trunk, blocks, output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim >= 1, "input_dim must be >= 1");
        ensure!(self.hidden_dim >= 1, "hidden_dim must be >= 1");
        ensure!(self.output_dim >= 1, "output_dim must be >= 1");
        for e in &self.embeds {
            ensure!(e.input_dim >= 1, "embed '{}' input_dim must be >= 1", e.name);
            ensure!(
                e.hidden.iter().all(|&h| h >= 1),
                "embed '{}' has a zero-width layer",
                e.name
            );
        }
        Ok(())
    }

    /// Width of a full input row (trunk plus every embed input).
    pub fn total_input_dim(&self) -> usize {
        self.input_dim + self.embeds.iter().map(|e| e.input_dim).sum::<usize>()
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    fn layout(&self) -> Layout {
        let mut slots = Vec::new();
        let mut off = 0;
        let mut push = |fan_in: usize, fan_out: usize| {
            let s = Slot {
                fan_in,
                fan_out,
                offset: off,
            };
            off += fan_in * fan_out + fan_out;
            slots.push(s);
            slots.len() - 1
        };
        let mut embeds = Vec::with_capacity(self.embeds.len());
        for e in &self.embeds {
            let mut prev = e.input_dim;
            let mut ids = Vec::with_capacity(e.hidden.len());
            for &h in &e.hidden {
                ids.push(push(prev, h));
                prev = h;
            }
            embeds.push(ids);
        }
        let concat = self.input_dim + self.embeds.iter().map(EmbedSpec::output_dim).sum::<usize>();
        let proj = push(concat, self.hidden_dim);
        let blocks = (0..self.num_res_blocks)
            .map(|_| (push(self.hidden_dim, self.hidden_dim), push(self.hidden_dim, self.hidden_dim)))
            .collect();
        let head = push(self.hidden_dim, self.output_dim);
        Layout {
            slots,
            embeds,
            proj,
            blocks,
            head,
            total: off,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Slot {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

#[derive(Debug, Clone)]
struct Layout {
    slots: Vec<Slot>,
    embeds: Vec<Vec<usize>>,
    proj: usize,
    blocks: Vec<(usize, usize)>,
    head: usize,
    total: usize,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn silu_matrix(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
    out
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    embeds: Vec<Vec<(Matrix, Matrix)>>,
    proj_in: Matrix,
    proj_pre: Matrix,
    blocks: Vec<(Matrix, Matrix, Matrix)>,
    head_in: Matrix,
}

/// Which loss [`Mlp::loss_and_grad`] reduces.
#[derive(Debug, Clone, Copy)]
pub enum LossKind<'a> {
    /// `mean_i ‖y_i − t_i‖²`.
    Mse { targets: &'a Matrix },
    /// Denoising score matching in its stable form, `mean_i ‖σ_i y_i + z_i‖²`.
    Dsm { sigmas: &'a [f64], noise: &'a Matrix },
}

/// A network: architecture plus flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<f64>,
}

impl Mlp {
    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn new(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut params = vec![0.0; layout.total];
        for s in &layout.slots {
            let bound = 1.0 / (s.fan_in as f64).sqrt();
            for v in &mut params[s.offset..s.offset + s.fan_in * s.fan_out + s.fan_out] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        ensure!(
            params.len() == spec.param_count(),
            "parameter count {} does not match spec ({})",
            params.len(),
            spec.param_count()
        );
        ensure!(params.iter().all(|v| v.is_finite()), "parameters must be finite");
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Zeroes every weight and bias of residual block `block`, turning it
    /// into the identity map.
    pub fn zero_block(&mut self, block: usize) {
        let layout = self.spec.layout();
        let (a, b) = layout.blocks[block];
        for id in [a, b] {
            let s = layout.slots[id];
            self.params[s.offset..s.offset + s.fan_in * s.fan_out + s.fan_out].fill(0.0);
        }
    }

    /// Mutable views of one layer's (weights `[fan_in × fan_out]`, bias).
    /// Layers are numbered in parameter order: embeds, projection, blocks, head.
    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let s = self.spec.layout().slots[layer];
        let (w, rest) = self.params[s.offset..].split_at_mut(s.fan_in * s.fan_out);
        (w, &mut rest[..s.fan_out])
    }

    pub fn num_layers(&self) -> usize {
        self.spec.layout().slots.len()
    }

    fn linear(&self, s: &Slot, x: &Matrix) -> Matrix {
        let n = x.rows();
        let mut z = Matrix::zeros(n, s.fan_out);
        let b = &self.params[s.bias_range()];
        for i in 0..n {
            z.row_mut(i).copy_from_slice(b);
        }
        gemm(
            n,
            s.fan_in,
            s.fan_out,
            x.as_slice(),
            false,
            &self.params[s.weight_range()],
            false,
            z.as_mut_slice(),
            true,
        );
        z
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        ensure!(
            inputs.cols() == self.spec.total_input_dim(),
            "input has {} columns, network expects {}",
            inputs.cols(),
            self.spec.total_input_dim()
        );
        Ok(())
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward_with_tape(inputs).map(|(out, _)| out)
    }

    pub fn forward_with_tape(&self, inputs: &Matrix) -> Result<(Matrix, Tape)> {
        self.check_input(inputs)?;
        let layout = self.spec.layout();

        let mut parts = vec![inputs.columns(0, self.spec.input_dim)];
        let mut embed_tape = Vec::with_capacity(layout.embeds.len());
        let mut col = self.spec.input_dim;
        for (e, ids) in self.spec.embeds.iter().zip(&layout.embeds) {
            let mut h = inputs.columns(col, e.input_dim);
            col += e.input_dim;
            let mut layers = Vec::with_capacity(ids.len());
            for &id in ids {
                let z = self.linear(&layout.slots[id], &h);
                let next = silu_matrix(&z);
                layers.push((h, z));
                h = next;
            }
            embed_tape.push(layers);
            parts.push(h);
        }
        let refs: Vec<&Matrix> = parts.iter().collect();
        let proj_in = Matrix::hcat(&refs);
        let proj_pre = self.linear(&layout.slots[layout.proj], &proj_in);
        let mut h = silu_matrix(&proj_pre);

        let mut blocks = Vec::with_capacity(layout.blocks.len());
        for &(a, b) in &layout.blocks {
            let z1 = self.linear(&layout.slots[a], &h);
            let a1 = silu_matrix(&z1);
            let z2 = self.linear(&layout.slots[b], &a1);
            let mut out = h.clone();
            out.as_mut_slice()
                .iter_mut()
                .zip(z2.as_slice())
                .for_each(|(o, d)| *o += d);
            blocks.push((h, z1, a1));
            h = out;
        }
        let out = self.linear(&layout.slots[layout.head], &h);
        let tape = Tape {
            embeds: embed_tape,
            proj_in,
            proj_pre,
            blocks,
            head_in: h,
        };
        Ok((out, tape))
    }

    /// Accumulates `∂L/∂θ` for a linear layer and returns `∂L/∂x`.
    fn linear_backward(&self, s: &Slot, x: &Matrix, dz: &Matrix, grads: &mut [f64], need_dx: bool) -> Option<Matrix> {
        let n = x.rows();
        gemm(
            s.fan_in,
            n,
            s.fan_out,
            x.as_slice(),
            true,
            dz.as_slice(),
            false,
            &mut grads[s.weight_range()],
            true,
        );
        let gb = &mut grads[s.bias_range()];
        for i in 0..n {
            for (g, d) in gb.iter_mut().zip(dz.row(i)) {
                *g += d;
            }
        }
        need_dx.then(|| {
            let mut dx = Matrix::zeros(n, s.fan_in);
            gemm(
                n,
                s.fan_out,
                s.fan_in,
                dz.as_slice(),
                false,
                &self.params[s.weight_range()],
                true,
                dx.as_mut_slice(),
                false,
            );
            dx
        })
    }

    /// Gradient of `Σ_ij d_out[i,j]·out[i,j]` with respect to the parameters.
    pub fn backward(&self, tape: &Tape, d_out: &Matrix) -> Vec<f64> {
        let layout = self.spec.layout();
        let mut grads = vec![0.0; layout.total];

        let mut dh = self
            .linear_backward(&layout.slots[layout.head], &tape.head_in, d_out, &mut grads, true)
            .expect("dx requested");
        for (&(a, b), (h_in, z1, a1)) in layout.blocks.iter().zip(&tape.blocks).rev() {
            let da1 = self
                .linear_backward(&layout.slots[b], a1, &dh, &mut grads, true)
                .expect("dx requested");
            let mut dz1 = da1;
            dz1.as_mut_slice()
                .iter_mut()
                .zip(z1.as_slice())
                .for_each(|(d, z)| *d *= silu_grad(*z));
            let dskip = self
                .linear_backward(&layout.slots[a], h_in, &dz1, &mut grads, true)
                .expect("dx requested");
            dh.as_mut_slice()
                .iter_mut()
                .zip(dskip.as_slice())
                .for_each(|(d, s)| *d += s);
        }
        let mut dz = dh;
        dz.as_mut_slice()
            .iter_mut()
            .zip(tape.proj_pre.as_slice())
            .for_each(|(d, z)| *d *= silu_grad(*z));
        let need_embed_grads = !layout.embeds.is_empty();
        let dproj_in =
            self.linear_backward(&layout.slots[layout.proj], &tape.proj_in, &dz, &mut grads, need_embed_grads);

        if let Some(dproj_in) = dproj_in {
            let mut col = self.spec.input_dim;
            for ((e, ids), layers) in self.spec.embeds.iter().zip(&layout.embeds).zip(&tape.embeds) {
                let width = e.output_dim();
                let mut dh = dproj_in.columns(col, width);
                col += width;
                for (i, (&id, (x, z))) in ids.iter().zip(layers).enumerate().rev() {
                    dh.as_mut_slice()
                        .iter_mut()
                        .zip(z.as_slice())
                        .for_each(|(d, z)| *d *= silu_grad(*z));
                    match self.linear_backward(&layout.slots[id], x, &dh, &mut grads, i > 0) {
                        Some(dx) => dh = dx,
                        None => break,
                    }
                }
            }
        }
        grads
    }

    /// Mean loss over the batch and its exact gradient.
    pub fn loss_and_grad(&self, inputs: &Matrix, loss: LossKind<'_>) -> Result<(f64, Vec<f64>)> {
        let n = inputs.rows();
        ensure!(n > 0, "batch must be non-empty");
        let (out, tape) = self.forward_with_tape(inputs)?;
        let d = out.cols();
        let mut resid = Matrix::zeros(n, d);
        let mut scales = vec![1.0; n];
        match loss {
            LossKind::Mse { targets } => {
                ensure!(
                    targets.rows() == n && targets.cols() == d,
                    "targets shape {}×{} does not match output {n}×{d}",
                    targets.rows(),
                    targets.cols()
                );
                for i in 0..n {
                    for j in 0..d {
                        resid.set(i, j, out.get(i, j) - targets.get(i, j));
                    }
                }
            }
            LossKind::Dsm { sigmas, noise } => {
                ensure!(sigmas.len() == n, "one sigma per row required");
                ensure!(noise.rows() == n && noise.cols() == d, "noise shape mismatch");
                for i in 0..n {
                    scales[i] = sigmas[i];
                    for j in 0..d {
                        resid.set(i, j, sigmas[i] * out.get(i, j) + noise.get(i, j));
                    }
                }
            }
        }
        let mut total = 0.0;
        for i in 0..n {
            let row: f64 = resid.row(i).iter().map(|r| r * r).sum();
            if !row.is_finite() {
                return Err(Error::numeric("loss_and_grad", Some(i)));
            }
            total += row;
        }
        let loss = total / n as f64;
        let mut d_out = resid;
        for i in 0..n {
            let k = 2.0 * scales[i] / n as f64;
            d_out.row_mut(i).iter_mut().for_each(|v| *v *= k);
        }
        Ok((loss, self.backward(&tape, &d_out)))
    }

    /// `target ← (1 − p)·target + p·source`.
    pub fn polyak_from(&mut self, source: &Mlp, p: f64) {
        debug_assert_eq!(self.spec, source.spec);
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = (1.0 - p) * *t + p * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn random_inputs(n: usize, d: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_weights_output_head_bias() {
        let spec = MlpSpec::new(3, 4, 0, 2);
        let mut net = Mlp::new(spec, &mut rng(1)).unwrap();
        net.params_mut().fill(0.0);
        let head = net.num_layers() - 1;
        net.layer_mut(head).1.copy_from_slice(&[0.25, -1.5]);
        let x = random_inputs(5, 3, &mut rng(2));
        let y = net.forward(&x).unwrap();
        for i in 0..5 {
            assert_eq!(y.row(i), &[0.25, -1.5]);
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let spec = MlpSpec::new(2, 6, 2, 3);
        let mut net = Mlp::new(spec.clone(), &mut rng(3)).unwrap();
        let x = random_inputs(7, 2, &mut rng(4));

        // Same net with block 1 removed entirely.
        let mut reduced = Mlp::new(MlpSpec::new(2, 6, 1, 3), &mut rng(9)).unwrap();
        let full_layout = spec.layout();
        let small_layout = reduced.spec.layout();
        for (dst, src) in [(0, 0), (1, 1), (2, 2), (3, 5)] {
            let s = full_layout.slots[src];
            let d = small_layout.slots[dst];
            let len = s.fan_in * s.fan_out + s.fan_out;
            reduced.params[d.offset..d.offset + len].copy_from_slice(&net.params[s.offset..s.offset + len]);
        }
        net.zero_block(1);
        let a = net.forward(&x).unwrap();
        let b = reduced.forward(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_matches_hand_evaluation() {
        // 2 → 3 → (no blocks) → 2.
        let spec = MlpSpec::new(2, 3, 0, 2);
        let net = Mlp::new(spec, &mut rng(11)).unwrap();
        let p = net.params();
        let (w1, b1) = (&p[0..6], &p[6..9]);
        let (w2, b2) = (&p[9..15], &p[15..17]);
        let x = [0.3, -0.7];
        let mut h = [0.0; 3];
        for j in 0..3 {
            let z = x[0] * w1[j] + x[1] * w1[3 + j] + b1[j];
            h[j] = z / (1.0 + (-z).exp());
        }
        let mut want = [0.0; 2];
        for k in 0..2 {
            want[k] = b2[k] + (0..3).map(|j| h[j] * w2[j * 2 + k]).sum::<f64>();
        }
        let y = net.forward(&Matrix::from_rows(&[x])).unwrap();
        for k in 0..2 {
            assert!((y.get(0, k) - want[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_model_closed_form_gradient() {
        // All weights zero, so y = b: MSE to t = 0 at b = 2 gives 4, dL/db = 4.
        let spec = MlpSpec::new(1, 1, 0, 1);
        let mut net = Mlp::new(spec, &mut rng(5)).unwrap();
        net.params_mut().fill(0.0);
        let head = net.num_layers() - 1;
        net.layer_mut(head).1[0] = 2.0;
        let x = Matrix::from_rows(&[[1.0]]);
        let t = Matrix::from_rows(&[[0.0]]);
        let (loss, g) = net.loss_and_grad(&x, LossKind::Mse { targets: &t }).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(*g.last().unwrap(), 4.0);
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let spec = MlpSpec::new(2, 5, 1, 2);
        let net = Mlp::new(spec, &mut rng(6)).unwrap();
        let x = random_inputs(4, 2, &mut rng(7));
        let y = net.forward(&x).unwrap();
        let (loss, g) = net.loss_and_grad(&x, LossKind::Mse { targets: &y }).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_loss_reports_row() {
        let spec = MlpSpec::new(1, 2, 0, 1);
        let net = Mlp::new(spec, &mut rng(8)).unwrap();
        let x = Matrix::from_rows(&[[0.0], [0.0], [0.0]]);
        let t = Matrix::from_rows(&[[0.0], [f64::NAN], [0.0]]);
        match net.loss_and_grad(&x, LossKind::Mse { targets: &t }) {
            Err(Error::Numeric { index, .. }) => assert_eq!(index, Some(1)),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let net = Mlp::new(MlpSpec::new(3, 4, 1, 1), &mut rng(1)).unwrap();
        let x = Matrix::zeros(2, 2);
        assert!(matches!(net.forward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn polyak_is_exact_convex_combination() {
        let spec = MlpSpec::new(2, 3, 1, 1);
        let src = Mlp::new(spec.clone(), &mut rng(1)).unwrap();
        let mut tgt = Mlp::new(spec, &mut rng(2)).unwrap();
        let old = tgt.params().to_vec();
        tgt.polyak_from(&src, 0.005);
        for ((t, o), s) in tgt.params().iter().zip(&old).zip(src.params()) {
            assert_eq!(*t, (1.0 - 0.005) * o + 0.005 * s);
        }
    }
}
