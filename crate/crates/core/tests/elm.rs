use minn::data::{Dataset, Standardizer, SyntheticSpec};
use minn::elm::{
    elm_hidden, elm_predict, fit_readout, mean_accuracy, perturb_hidden, refit_on_drift, Activation, ElmConfig, ElmModel,
    HiddenLayer,
};
use minn::par::Execution;
use minn::{Tensor, C64};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALL: [Activation; 4] = [Activation::Abs, Activation::Abs2, Activation::TanhMag, Activation::ReluReal];

fn task(spec: SyntheticSpec, seed: u64) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = spec.generate(&mut rng).unwrap();
    let (mut train, mut test) = data.split(0.3, &mut rng);
    let s = Standardizer::fit(&train);
    s.apply(&mut train);
    s.apply(&mut test);
    (train, test)
}

fn model(n_hidden: usize, features: usize, activation: Activation, seed: u64) -> ElmModel {
    let cfg = ElmConfig { n_hidden, activation, ..ElmConfig::default() };
    ElmModel::new(&cfg, features, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn plain(n_hidden: usize, features: usize, activation: Activation, seed: u64) -> ElmModel {
    let cfg = ElmConfig { n_hidden, activation, reference_antenna: false, ..ElmConfig::default() };
    ElmModel::new(&cfg, features, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn hidden_examples() {
    for act in ALL {
        let m = plain(5, 3, act, 1);
        assert!(elm_hidden(&[0.0; 3], &m).unwrap().iter().all(|&g| g == 0.0));
    }
    let mut m = plain(2, 2, Activation::Abs2, 1);
    m.h = Tensor::eye_complex(2);
    assert_eq!(elm_hidden(&[3.0, 4.0], &m).unwrap(), vec![9.0, 16.0]);
    assert!(elm_hidden(&[1.0], &m).is_err());
}

#[test]
fn hidden_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (act, reference) in ALL.iter().flat_map(|&a| [(a, false), (a, true)]) {
        let m = if reference { model(7, 4, act, 3) } else { plain(7, 4, act, 3) };
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let h = m.h.as_complex().unwrap();
        let cols = if reference { 5 } else { 4 };
        let g = elm_hidden(&x, &m).unwrap();
        for i in 0..7 {
            let mut z = if reference { h[i * cols + 4] } else { C64::new(0.0, 0.0) };
            for j in 0..4 {
                z += h[i * cols + j] * x[j];
            }
            let want = match act {
                Activation::Abs => (z.re * z.re + z.im * z.im).sqrt(),
                Activation::Abs2 => z.re * z.re + z.im * z.im,
                Activation::TanhMag => (z.re * z.re + z.im * z.im).sqrt().tanh(),
                Activation::ReluReal => z.re.max(0.0),
            };
            assert!((g[i] - want).abs() < 1e-12);
        }
    }
}

fn ridge_oracle(g: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let h = g.ncols();
    let a = g.transpose() * g + DMatrix::identity(h, h) * lambda;
    a.try_inverse().unwrap() * g.transpose() * y
}

#[test]
fn readout_orthogonal_and_shrinkage() {
    let s = 0.5f64.sqrt();
    let g = [s, s, s, -s];
    let y = [1.0, -1.0];
    let w = fit_readout(&g, 2, 2, &y, 1, 1e-12).unwrap();
    let want = [s * 1.0 + s * -1.0, s * 1.0 - s * -1.0];
    for (a, b) in w.iter().zip(want) {
        assert!((a - b).abs() < 1e-10);
    }
    let w = fit_readout(&g, 2, 2, &y, 1, 1e12).unwrap();
    assert!(w.iter().all(|v| v.abs() < 1e-11));
    assert!(matches!(fit_readout(&[f64::NAN, 1.0], 1, 2, &[1.0], 1, 1.0), Err(minn::Error::Data(_))));
}

#[test]
fn readout_matches_pseudo_inverse_on_separable_toy() {
    let g = [1.0, 2.0, 2.0, 1.0, -1.0, -2.0, -2.0, -1.5];
    let y = [1.0, 1.0, -1.0, -1.0];
    let w = fit_readout(&g, 4, 2, &y, 1, 1e-12).unwrap();
    let gm = DMatrix::from_row_slice(4, 2, &g);
    let pinv = gm.clone().pseudo_inverse(1e-14).unwrap() * DMatrix::from_row_slice(4, 1, &y);
    for i in 0..2 {
        assert!((w[i] - pinv[(i, 0)]).abs() < 1e-8);
    }
    let pred: Vec<f64> = (0..4).map(|r| g[r * 2] * w[0] + g[r * 2 + 1] * w[1]).collect();
    assert!(pred.iter().zip(&y).all(|(p, t)| p * t > 0.0));
}

#[test]
fn readout_matches_ridge_oracle_in_both_regimes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (n, h) in [(12, 5), (4, 9)] {
        let g: Vec<f64> = (0..n * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = fit_readout(&g, n, h, &y, 3, 0.1).unwrap();
        let want = ridge_oracle(&DMatrix::from_row_slice(n, h, &g), &DMatrix::from_row_slice(n, 3, &y), 0.1);
        for i in 0..h {
            for k in 0..3 {
                assert!((w[i * 3 + k] - want[(i, k)]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn predictions_and_state_errors() {
    let (train, _) = task(SyntheticSpec { samples: 40, ..SyntheticSpec::wbcd() }, 5);
    let mut m = model(64, 30, Activation::Abs, 6);
    assert!(matches!(elm_predict(train.row(0), &m), Err(minn::Error::State(_))));
    let cfg = ElmConfig { n_hidden: 64, ridge_lambda: Some(1e-10), ..ElmConfig::default() };
    let mut tight = ElmModel::new(&cfg, 30, 2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    tight.fit(&train, 0, Execution::available()).unwrap();
    assert_eq!(tight.accuracy(&train, 0, Execution::available()).unwrap(), 1.0);
    m.fit(&train, 0, Execution::available()).unwrap();
    let a: Vec<usize> = (0..train.len()).map(|i| elm_predict(train.row(i), &m).unwrap()).collect();
    let b: Vec<usize> = (0..train.len()).map(|i| elm_predict(train.row(i), &m).unwrap()).collect();
    assert_eq!(a, b);
}

#[test]
fn agrees_with_reference_elm() {
    let (train, test) = task(SyntheticSpec { samples: 72, ..SyntheticSpec::wbcd() }, 7);
    let mut m = model(40, 30, Activation::TanhMag, 8);
    m.fit(&train, 0, Execution::available()).unwrap();

    let h = m.h.as_complex().unwrap();
    let hidden = |x: &[f64]| -> Vec<f64> {
        (0..40)
            .map(|i| {
                let z: C64 = h[i * 31 + 30] + (0..30).map(|j| h[i * 31 + j] * x[j]).sum::<C64>();
                z.norm().tanh()
            })
            .collect()
    };
    let rows: Vec<f64> = (0..train.len()).flat_map(|i| hidden(train.row(i))).collect();
    let g = DMatrix::from_row_slice(train.len(), 40, &rows);
    let y = DMatrix::from_iterator(train.len(), 1, train.labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }));
    let w = ridge_oracle(&g, &y, m.ridge_lambda);
    for i in 0..test.len() {
        let s: f64 = hidden(test.row(i)).iter().enumerate().map(|(k, v)| v * w[(k, 0)]).sum();
        assert_eq!(elm_predict(test.row(i), &m).unwrap(), usize::from(s > 0.0));
    }
}

#[test]
fn refit_behaviour() {
    let (train, test) = task(SyntheticSpec::wbcd(), 9);
    let mut m = model(128, 30, Activation::Abs, 10);
    m.fit(&train, 0, Execution::available()).unwrap();
    let before = m.w.clone();
    let same = m.h.clone();
    refit_on_drift(&mut m, same, &train, 0, Execution::available()).unwrap();
    assert_eq!(m.w, before);
    let empty = train.take(0);
    let h = m.h.clone();
    assert!(matches!(
        refit_on_drift(&mut m, h, &empty, 0, Execution::available()),
        Err(minn::Error::Config(_))
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut base, mut drifted) = (0.0, 0.0);
    for t in 0..20 {
        let mut m = model(128, 30, Activation::Abs, 100 + t);
        m.fit(&train, 0, Execution::available()).unwrap();
        base += m.accuracy(&test, 0, Execution::available()).unwrap() / 20.0;
        let h = perturb_hidden(&m.h, 0.01, &mut rng);
        refit_on_drift(&mut m, h, &train, 0, Execution::available()).unwrap();
        drifted += m.accuracy(&test, 0, Execution::available()).unwrap() / 20.0;
    }
    assert!((base - drifted).abs() <= 0.01, "base {base} drifted {drifted}");
}

#[test]
fn mild_receiver_noise_barely_matters() {
    let (train, test) = task(SyntheticSpec::wbcd(), 12);
    let clean = ElmConfig { n_hidden: 128, ..ElmConfig::default() };
    let noisy = ElmConfig { snr_db: 25.0, ..clean.clone() };
    let a = mean_accuracy(&clean, &train, &test, 50, 1, Execution::available()).unwrap();
    let b = mean_accuracy(&noisy, &train, &test, 50, 1, Execution::available()).unwrap();
    assert!((a - b).abs() < 0.01, "clean {a} noisy {b}");
}

#[test]
fn capacity_helps_except_when_overfitting() {
    let widths = [32, 128, 256];
    for spec in [SyntheticSpec::wbcd(), SyntheticSpec::parkinsons()] {
        let (train, test) = task(spec, 13);
        let accs: Vec<f64> = widths
            .iter()
            .map(|&n| {
                let cfg = ElmConfig { n_hidden: n, ..ElmConfig::default() };
                mean_accuracy(&cfg, &train, &test, 50, 2, Execution::available()).unwrap()
            })
            .collect();
        assert!(accs.windows(2).all(|w| w[1] >= w[0]), "{spec:?}: {accs:?}");
    }
    let (train, test) = task(SyntheticSpec::high_dimensional(), 14);
    let accs: Vec<f64> = widths
        .iter()
        .map(|&n| {
            let cfg = ElmConfig { n_hidden: n, ..ElmConfig::default() };
            mean_accuracy(&cfg, &train, &test, 50, 3, Execution::available()).unwrap()
        })
        .collect();
    println!("high-dimensional accuracies {accs:?}");
}

#[test]
fn digital_counterpart_config() {
    let cfg = ElmConfig { hidden_layer: HiddenLayer::Gaussian, n_hidden: 3, ..ElmConfig::default() };
    let m = ElmModel::new(&cfg, 2, 2, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
    assert!(m.h.as_complex().unwrap().iter().all(|z| z.im == 0.0));
    assert!(ElmModel::new(&ElmConfig { n_hidden: 0, ..cfg }, 2, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}
