use tce_wasm::*;

#[test]
fn sampler_view_reports_its_own_moments() {
    let v = sample_gaussian_view([1.0, -1.0], 0.5, 200, 1, 0.16, 2000, 3).unwrap();
    assert_eq!(v.samples.len() + v.failed, 2000);
    for j in 0..2 {
        let mean = v.samples.iter().map(|p| p[j]).sum::<f64>() / v.samples.len() as f64;
        assert_eq!(mean, v.mean[j]);
    }
    assert!((v.mean[0] - 1.0).abs() < 0.1 && (v.mean[1] + 1.0).abs() < 0.1, "{:?}", v.mean);
}

#[test]
fn selection_grows_with_lambda() {
    let a = selection_view("drift-large", 0.1, 500, 1).unwrap();
    let b = selection_view("drift-large", 0.6, 500, 1).unwrap();
    assert_eq!(a.count, 50);
    assert_eq!(b.count, 300);
    assert!(a.selected.iter().zip(&b.selected).all(|(x, y)| !x || *y));
    assert_eq!(a.source, b.source);
    assert!(selection_view("no-such-pair", 0.1, 10, 1).is_err());
}

#[test]
fn bounds_view_orders_gap_and_bounds() {
    let v = bounds_view(4, 2, 11, 9).unwrap();
    assert_eq!(v.lambda.len(), 11);
    assert_eq!(v.lambda[10], 1.0);
    for k in 0..11 {
        assert!(v.gap[k] <= v.value_bound[k] && v.value_bound[k] <= v.tv_bound[k]);
    }
}
