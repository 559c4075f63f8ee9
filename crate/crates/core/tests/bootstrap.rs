use distrdd::inference::{bootstrap_sharp, pointwise_moments, BootstrapEnsemble};
use distrdd::pipeline::{estimate_sharp, EstimationOptions, SharpEstimate};
use distrdd::simlab::{dgp_sample, DgpId, DgpSpec};
use distrdd::Dataset;
use nalgebra::{DMatrix, DVector};

const B: usize = 2000;

fn setup(seed: u64) -> (Dataset, SharpEstimate) {
    let d = dgp_sample(&DgpSpec::new(DgpId::Additive, 10_000, seed)).unwrap();
    let opts = EstimationOptions::for_dataset(&d);
    let est = estimate_sharp(&d, &opts).unwrap();
    (d, est)
}

fn simpson(f: impl Fn(f64) -> f64, n: usize) -> f64 {
    let h = 1.0 / n as f64;
    let mut s = f(0.0) + f(1.0);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    s * h / 3.0
}

/// `int_0^1 K*(z)^2 dz` for the bias-corrected boundary equivalent kernel with
/// the triangular kernel, `p = 2`, pilot order 3; all moments by quadrature.
fn equivalent_kernel_variance() -> f64 {
    let k = |z: f64| 1.0 - z;
    let gram = |p: usize| {
        DMatrix::from_fn(p + 1, p + 1, |i, j| simpson(|z| z.powi((i + j) as i32) * k(z), 4000))
    };
    let g2 = gram(2);
    let g3 = gram(3);
    let lambda = DVector::from_fn(3, |i, _| simpson(|z| z.powi(i as i32 + 3) * k(z), 4000));
    let g2i = g2.try_inverse().unwrap();
    let g3i = g3.try_inverse().unwrap();
    let c = (g2i.row(0) * &lambda)[0];
    let kstar = |z: f64| {
        let r2 = DVector::from_vec(vec![1.0, z, z * z]);
        let r3 = DVector::from_vec(vec![1.0, z, z * z, z * z * z]);
        ((g2i.row(0) * r2)[0] - c * (g3i.row(3) * r3)[0]) * k(z)
    };
    simpson(|z| kstar(z).powi(2), 4000)
}

fn column(e: &BootstrapEnsemble, u: f64) -> usize {
    e.u_grid
        .iter()
        .position(|&v| (v - u).abs() < 1e-12)
        .unwrap()
}

#[test]
fn bootstrap_variance_matches_asymptotic_oracle() {
    let (d, est) = setup(11);
    let e = bootstrap_sharp(&d, &est, B, 5).unwrap();
    let (_, var) = pointwise_moments(&e);
    let k = column(&e, 0.5);
    // Y | x = 0 is N(0.5, 1) on the right and N(0, 1) on the left; f_X = 1/2
    let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let oracle = 2.0 * equivalent_kernel_variance() * 0.25 / (0.5 * phi0 * phi0);
    let ratio = var[k] / oracle;
    assert!((ratio - 1.0).abs() < 0.25, "bootstrap {} oracle {oracle}", var[k]);
}

#[test]
fn draws_are_centred() {
    let (d, est) = setup(12);
    let e = bootstrap_sharp(&d, &est, B, 6).unwrap();
    let (mean, var) = pointwise_moments(&e);
    for u in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let k = column(&e, u);
        let se = (var[k] / B as f64).sqrt();
        assert!(mean[k].abs() < 4.0 * se, "u = {u}: mean {} se {se}", mean[k]);
    }
}

#[test]
fn bootstrap_is_a_function_of_the_seed() {
    let (d, est) = setup(13);
    let a = bootstrap_sharp(&d, &est, 300, 42).unwrap();
    let b = bootstrap_sharp(&d, &est, 300, 42).unwrap();
    let c = bootstrap_sharp(&d, &est, 300, 43).unwrap();
    assert_eq!(a.draws, b.draws);
    assert_ne!(a.draws, c.draws);
    // a longer run extends the shorter one replicate by replicate
    let long = bootstrap_sharp(&d, &est, 400, 42).unwrap();
    assert_eq!(&long.draws[..a.draws.len()], &a.draws[..]);
}
