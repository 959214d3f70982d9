use minn::channel::ChannelConfig;
use minn::data::{load_mnist_dir, Dataset, Split};
use minn::minn::{EncoderConfig, Link, MinnConfig, MinnModel, PowerMode};
use minn::par::Execution;
use minn::tensor::finite_diff_check;
use minn::wave::SimSpec;
use minn::train::{
    evaluate, fit, fit_with, power_penalty, stream, task_loss, transfer_finetune, ChannelContext, LossKind, Metrics, Stage,
    TrainConfig, Trainer,
};
use minn::{Tape, Tensor, C64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Balanced Gaussian clusters: label `i % classes`.
fn clusters(n: usize, dim: usize, classes: usize, spread: f64, seed: u64) -> Dataset {
    let mut centers = ChaCha8Rng::seed_from_u64(1000);
    let mu: Vec<f64> = (0..classes * dim).map(|_| centers.sample(StandardNormal)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * dim);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &y in &labels {
        for j in 0..dim {
            x.push(mu[y * dim + j] + spread * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Dataset::new(x, labels, vec![dim], classes, Split::Train).unwrap()
}

fn flat(link: Link, power: PowerMode, hidden: Vec<usize>, decoder: Vec<usize>) -> MinnConfig {
    MinnConfig {
        link,
        power,
        encoder: EncoderConfig { conv_channels: vec![], hidden, ..Default::default() },
        decoder_hidden: decoder,
        ..Default::default()
    }
}

fn channel(snr_db: f64) -> ChannelConfig {
    ChannelConfig { n_tx: 4, n_rx: 4, snr_db, ..ChannelConfig::default() }
}

fn model(cfg: MinnConfig, ch: ChannelConfig, dim: usize, classes: usize, seed: u64) -> MinnModel {
    MinnModel::new(cfg, ch, None, &[dim], classes, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn softmax_ce(l: &[f64], t: usize) -> f64 {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
    -(l[t] - m - z.ln())
}

#[test]
fn task_loss_examples_and_oracle() {
    let mut t = Tape::new();
    let logits = t.constant(Tensor::real(&[2, 10], vec![0.7; 20]).unwrap());
    let l = task_loss(&mut t, logits, &[3, 9], LossKind::CrossEntropy).unwrap();
    assert!((t.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);

    let onehot = t.constant(Tensor::real(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap());
    let l = task_loss(&mut t, onehot, &[1], LossKind::Mse).unwrap();
    assert_eq!(t.value(l).item().unwrap(), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, c) = (5, 4);
    let v: Vec<f64> = (0..b * c).map(|_| rng.random_range(-3.0..3.0)).collect();
    let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let lv = t.constant(Tensor::real(&[b, c], v.clone()).unwrap());
    let ce = task_loss(&mut t, lv, &targets, LossKind::CrossEntropy).unwrap();
    let want: f64 = (0..b).map(|i| softmax_ce(&v[i * c..][..c], targets[i])).sum::<f64>() / b as f64;
    assert!((t.value(ce).item().unwrap() - want).abs() < 1e-12);
    let mse = task_loss(&mut t, lv, &targets, LossKind::Mse).unwrap();
    let want: f64 = (0..b * c)
        .map(|k| {
            let y = if targets[k / c] == k % c { 1.0 } else { 0.0 };
            (v[k] - y).powi(2)
        })
        .sum::<f64>()
        / (b * c) as f64;
    assert!((t.value(mse).item().unwrap() - want).abs() < 1e-12);

    assert!(matches!(task_loss(&mut t, lv, &[0, 1, 2, 3, 4], LossKind::Mse), Err(minn::Error::Range(_))));
}

#[test]
fn power_penalty_examples_and_gradient() {
    let mut t = Tape::new();
    let s = t.constant(Tensor::complex(&[1, 2, 1], vec![C64::new(1.0, 0.0), C64::new(0.0, 1.0)]).unwrap());
    let p0 = power_penalty(&mut t, s, 0.0).unwrap();
    assert_eq!(t.value(p0).item().unwrap(), 0.0);
    let p1 = power_penalty(&mut t, s, 1.0).unwrap();
    assert!((t.value(p1).item().unwrap() - 2.0).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v: Vec<C64> = (0..12).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
    let x = Tensor::complex(&[3, 4, 1], v).unwrap();
    let err = finite_diff_check(|t, s| power_penalty(t, s, 0.3), &x, 1e-6).unwrap();
    assert!(err < 1e-6, "{err}");
}

fn params_of(m: &MinnModel) -> Vec<Tensor> {
    m.params.values().to_vec()
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    let train = clusters(100, 6, 3, 0.5, 1);
    let mut m = model(flat(Link::Direct, PowerMode::HardNorm, vec![8], vec![8]), channel(10.0), 6, 3, 3);
    let before = params_of(&m);
    let cfg = TrainConfig { learning_rate: 0.0, batch_size: 16, ..Default::default() };
    let mut rng = stream(0, 1);
    let mut ctx = ChannelContext::new(&m, false, &mut rng).unwrap();
    let mut tr = Trainer::new(cfg, &m).unwrap();
    tr.train_epoch(&mut m, &train, &mut ctx, &mut rng).unwrap();
    assert_eq!(params_of(&m), before);
}

#[test]
fn one_step_matches_hand_computed_sgd() {
    let x = [0.5, -1.0, 2.0];
    let data = Dataset::new(x.to_vec(), vec![1], vec![3], 3, Split::Train).unwrap();
    let ch = ChannelConfig { n_tx: 2, ..ChannelConfig::default() };
    let mut m = model(flat(Link::Bypass, PowerMode::SoftPenalty, vec![], vec![]), ch, 3, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..m.params.len() {
        for v in m.params.get_mut(i).as_real_mut().unwrap() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let we = m.params.by_name("enc.out.w").unwrap().as_real().unwrap().to_vec();
    let be = m.params.by_name("enc.out.b").unwrap().as_real().unwrap().to_vec();
    let wd = m.params.by_name("dec.out.w").unwrap().as_real().unwrap().to_vec();
    let bd = m.params.by_name("dec.out.b").unwrap().as_real().unwrap().to_vec();

    let h: Vec<f64> = (0..4).map(|i| be[i] + (0..3).map(|a| x[a] * we[a * 4 + i]).sum::<f64>()).collect();
    let l: Vec<f64> = (0..3).map(|j| bd[j] + (0..4).map(|i| h[i] * wd[i * 3 + j]).sum::<f64>()).collect();
    let y = [0.0, 1.0, 0.0];
    let g: Vec<f64> = (0..3).map(|j| 2.0 * (l[j] - y[j]) / 3.0).collect();
    let dh: Vec<f64> = (0..4).map(|i| (0..3).map(|j| wd[i * 3 + j] * g[j]).sum()).collect();

    let lr = 0.1;
    let cfg = TrainConfig { learning_rate: lr, batch_size: 1, loss: LossKind::Mse, ..Default::default() };
    let mut rng = stream(0, 1);
    let mut ctx = ChannelContext::new(&m, false, &mut rng).unwrap();
    let mut tr = Trainer::new(cfg, &m).unwrap();
    tr.train_epoch(&mut m, &data, &mut ctx, &mut rng).unwrap();

    let check = |name: &str, want: Vec<f64>| {
        let got = m.params.by_name(name).unwrap().as_real().unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{name}: {a} vs {b}");
        }
    };
    check("enc.out.w", (0..12).map(|k| we[k] - lr * x[k / 4] * dh[k % 4]).collect());
    check("enc.out.b", (0..4).map(|i| be[i] - lr * dh[i]).collect());
    check("dec.out.w", (0..12).map(|k| wd[k] - lr * h[k / 3] * g[k % 3]).collect());
    check("dec.out.b", (0..3).map(|j| bd[j] - lr * g[j]).collect());
}

#[test]
fn shards_sum_to_the_full_batch_gradient() {
    let train = clusters(48, 5, 3, 0.5, 6);
    let run = |shards: usize| {
        let mut m = model(flat(Link::Bypass, PowerMode::HardNorm, vec![6], vec![6]), channel(10.0), 5, 3, 7);
        let cfg = TrainConfig { batch_size: 16, grad_shards: shards, ..Default::default() };
        let mut rng = stream(0, 1);
        let mut ctx = ChannelContext::new(&m, false, &mut rng).unwrap();
        let mut tr = Trainer::new(cfg, &m).unwrap();
        tr.train_epoch(&mut m, &train, &mut ctx, &mut rng).unwrap();
        params_of(&m)
    };
    let (a, b) = (run(1), run(3));
    for (x, y) in a.iter().zip(&b) {
        assert!(x.max_abs_diff(y).unwrap() < 1e-12);
    }
}

#[test]
fn divergence_names_the_step() {
    let train = clusters(64, 5, 3, 0.5, 8);
    let mut m = model(flat(Link::Bypass, PowerMode::SoftPenalty, vec![], vec![]), channel(10.0), 5, 3, 9);
    let cfg = TrainConfig { learning_rate: 1e200, batch_size: 8, loss: LossKind::Mse, ..Default::default() };
    let mut rng = stream(0, 1);
    let mut ctx = ChannelContext::new(&m, false, &mut rng).unwrap();
    let mut tr = Trainer::new(cfg, &m).unwrap();
    match tr.train_epoch(&mut m, &train, &mut ctx, &mut rng) {
        Err(minn::Error::Divergence(msg)) => assert!(msg.contains("step"), "{msg}"),
        other => panic!("expected divergence, got {other:?}"),
    }
}

fn small_run(exec: Execution, cfg: &TrainConfig) -> (Metrics, Vec<Tensor>) {
    let train = clusters(200, 8, 4, 0.8, 10);
    let test = clusters(80, 8, 4, 0.8, 11);
    let mut m = model(flat(Link::Direct, PowerMode::HardNorm, vec![8], vec![8]), channel(10.0), 8, 4, 12);
    let (metrics, _) = fit_with(&mut m, &train, &test, cfg, exec).unwrap();
    (metrics, params_of(&m))
}

#[test]
fn fixed_seed_is_reproducible_in_both_execution_modes() {
    let cfg = TrainConfig { epochs: 2, batch_size: 32, grad_shards: 2, seed: 3, ..Default::default() };
    let a = small_run(Execution::Parallel, &cfg);
    let b = small_run(Execution::Parallel, &cfg);
    let c = small_run(Execution::Sequential, &cfg);
    assert_eq!(a, b);
    assert_eq!(a, c);
    for r in &a.0.rows {
        assert!((0.0..=1.0).contains(&r.accuracy) && r.tx_power >= 0.0);
    }
    let csv = a.0.to_csv_string().unwrap();
    assert!(csv.starts_with("epoch,loss,accuracy,tx_power,snr_db,seed\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn schedule_semantics() {
    let plain = TrainConfig { epochs: 2, batch_size: 32, seed: 4, ..Default::default() };
    let staged = TrainConfig { snr_schedule: vec![Stage { snr_db: 10.0, epochs: 2 }], ..plain.clone() };
    assert_eq!(small_run(Execution::Sequential, &plain), small_run(Execution::Sequential, &staged));

    let train = clusters(200, 8, 4, 0.8, 10);
    let test = clusters(80, 8, 4, 0.8, 11);
    let two = vec![Stage { snr_db: 30.0, epochs: 1 }, Stage { snr_db: 5.0, epochs: 1 }];
    let fresh = || model(flat(Link::Direct, PowerMode::HardNorm, vec![8], vec![8]), channel(10.0), 8, 4, 12);

    let mut first = fresh();
    let one = TrainConfig { snr_schedule: two[..1].to_vec(), ..plain.clone() };
    fit_with(&mut first, &train, &test, &one, Execution::Sequential).unwrap();

    let mut m = fresh();
    let mut rng = stream(plain.seed, 1);
    let mut ctx = ChannelContext::new(&m, false, &mut rng).unwrap();
    let mut tr = Trainer::new(plain.clone(), &m).unwrap();
    tr.exec = Execution::Sequential;
    let mut metrics = Metrics::default();
    ctx.set_snr(30.0);
    tr.run_stage(&mut m, &train, &test, &mut ctx, 1, &mut rng, &mut metrics).unwrap();
    assert_eq!(params_of(&m), params_of(&first));
    tr.lr *= plain.stage_decay;
    ctx.set_snr(5.0);
    tr.run_stage(&mut m, &train, &test, &mut ctx, 1, &mut rng, &mut metrics).unwrap();

    let mut both = fresh();
    let full = TrainConfig { snr_schedule: two, ..plain.clone() };
    let (mb, _) = fit_with(&mut both, &train, &test, &full, Execution::Sequential).unwrap();
    assert_eq!(params_of(&m), params_of(&both));
    assert_eq!(metrics, mb);

    let mut rng = stream(0, 1);
    let mut ctx = ChannelContext::new(&m, false, &mut rng).unwrap();
    let mut tr = Trainer::new(plain, &m).unwrap();
    let err = transfer_finetune(&mut m, &train, &test, &[], &mut tr, &mut ctx, &mut rng);
    assert!(matches!(err, Err(minn::Error::Config(_))));
}

#[test]
fn evaluate_examples() {
    let ch = ChannelConfig { n_tx: 2, ..ChannelConfig::default() };
    let mut m = model(flat(Link::Bypass, PowerMode::SoftPenalty, vec![], vec![]), ch, 4, 4, 13);
    for name in ["enc.out.w", "dec.out.w"] {
        let i = m.params.index_of(name).unwrap();
        for (k, v) in m.params.get_mut(i).as_real_mut().unwrap().iter_mut().enumerate() {
            *v = if k % 5 == 0 { 1.0 } else { 0.0 };
        }
    }
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let x: Vec<f64> = labels.iter().flat_map(|&y| (0..4).map(move |j| if j == y { 1.0 } else { 0.0 })).collect();
    let data = Dataset::new(x, labels, vec![4], 4, Split::Test).unwrap();
    let mut rng = stream(0, 1);
    let mut ctx = ChannelContext::new(&m, false, &mut rng).unwrap();
    let ev = evaluate(&m, &data, &mut ctx, f64::INFINITY, 1, 0, Execution::available()).unwrap();
    assert_eq!(ev.accuracy, 1.0);

    let test = clusters(1000, 6, 10, 0.5, 14);
    let m = model(flat(Link::Direct, PowerMode::HardNorm, vec![], vec![16]), channel(-40.0), 6, 10, 15);
    let mut ctx = ChannelContext::new(&m, false, &mut rng).unwrap();
    let ev = evaluate(&m, &test, &mut ctx, -40.0, 10, 16, Execution::available()).unwrap();
    assert!((ev.accuracy - 0.1).abs() < 0.02, "{}", ev.accuracy);

    let cfg = MinnConfig { p_max: 3.0, ..flat(Link::Direct, PowerMode::HardNorm, vec![], vec![]) };
    let m = model(cfg, channel(10.0), 6, 10, 17);
    let mut ctx = ChannelContext::new(&m, false, &mut rng).unwrap();
    let ev = evaluate(&m, &test, &mut ctx, 10.0, 2, 18, Execution::available()).unwrap();
    assert!((ev.tx_power - 3.0).abs() < 1e-12, "{}", ev.tx_power);
}

#[test]
fn noisy_gradients_are_unbiased() {
    let m = model(flat(Link::Direct, PowerMode::SoftPenalty, vec![], vec![]), channel(10.0), 5, 3, 19);
    let mut rng = stream(1, 1);
    let mut ctx = ChannelContext::new(&m, true, &mut rng).unwrap();
    ctx.set_snr(0.0);
    let ch = ctx.batch(&m, 4, &mut rng).unwrap().unwrap();
    let data = clusters(4, 5, 3, 0.5, 20);
    let (x, y) = data.batch(&[0, 1, 2, 3]);
    let w = m.params.index_of("enc.out.w").unwrap();
    let grad = |noise: minn::minn::Noise| {
        let mut t = Tape::new();
        let vars = m.params.bind(&mut t, true);
        let f = m.forward(&mut t, &vars, &x, Some(&ch), noise).unwrap();
        let l = task_loss(&mut t, f.logits, &y, LossKind::Mse).unwrap();
        t.backward(l).unwrap().take(vars[w]).unwrap().as_real().unwrap().to_vec()
    };
    let clean = grad(minn::minn::Noise::Off);
    let draws = 10_000;
    let mut mean = vec![0.0; clean.len()];
    let mut nrng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..draws {
        for (a, g) in mean.iter_mut().zip(grad(minn::minn::Noise::Sample(&mut nrng))) {
            *a += g / draws as f64;
        }
    }
    let diff: f64 = mean.iter().zip(&clean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = clean.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff / norm < 0.05, "relative error {}", diff / norm);
}

#[test]
fn penalty_warmup_ramps_linearly() {
    let m = model(flat(Link::Direct, PowerMode::SoftPenalty, vec![4], vec![]), channel(10.0), 8, 4, 1);
    let t = Trainer::new(TrainConfig { gamma: 0.5, gamma_warmup: 4, ..Default::default() }, &m).unwrap();
    let seen: Vec<f64> = (1..=7).map(|e| t.gamma_at(e)).collect();
    assert_eq!(seen, vec![0.0, 0.125, 0.25, 0.375, 0.5, 0.5, 0.5]);
    let t = Trainer::new(TrainConfig { gamma: 0.5, ..Default::default() }, &m).unwrap();
    assert_eq!(t.gamma_at(1), 0.5);

    // A first epoch under zero penalty matches an unpenalized run exactly.
    let train = clusters(64, 8, 4, 0.8, 5);
    let test = clusters(32, 8, 4, 0.8, 6);
    let run = |gamma, gamma_warmup| {
        let mut m = model(flat(Link::Direct, PowerMode::SoftPenalty, vec![16], vec![]), channel(10.0), 8, 4, 9);
        let cfg = TrainConfig { epochs: 1, batch_size: 16, gamma, gamma_warmup, ..Default::default() };
        fit(&mut m, &train, &test, &cfg).unwrap();
        params_of(&m)
    };
    assert_eq!(run(0.3, 3), run(0.0, 0));
    assert_ne!(run(0.3, 0), run(0.0, 0));
}

#[test]
fn larger_gamma_never_raises_transmit_power() {
    let train = clusters(300, 8, 4, 0.8, 22);
    let test = clusters(100, 8, 4, 0.8, 23);
    let gammas = [1e-3, 1e-2, 1e-1];
    let mut powers = Vec::new();
    for &gamma in &gammas {
        let mut total = 0.0;
        for seed in 0..3 {
            let mut m = model(flat(Link::Direct, PowerMode::SoftPenalty, vec![16], vec![16]), channel(10.0), 8, 4, 30 + seed);
            let cfg = TrainConfig { epochs: 10, batch_size: 32, gamma, seed, ..Default::default() };
            let (metrics, _) = fit(&mut m, &train, &test, &cfg).unwrap();
            total += metrics.last().unwrap().tx_power / 3.0;
        }
        powers.push(total);
    }
    assert!(powers.windows(2).all(|w| w[1] <= w[0]), "{powers:?}");
}

#[test]
fn high_snr_pretraining_does_not_hurt() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist5k");
    let (train, test) = load_mnist_dir(dir).unwrap();
    let train = train.take(2000);
    let k = 5;
    let (mut staged, mut direct) = (0.0, 0.0);
    for seed in 0..3 {
        let fresh = || {
            let ch = ChannelConfig { snr_db: 5.0, seed, ..ChannelConfig::default() };
            let stack = SimSpec { rows: 8, cols: 8, ..SimSpec::default() }.build([0.0; 3], [0.0, 0.0, 1.0]).unwrap();
            let cfg = MinnConfig { link: Link::Sim, ..MinnConfig::default() };
            MinnModel::new(cfg, ch, Some(stack), &[1, 28, 28], 10, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        let base = TrainConfig { static_fading: true, seed, ..Default::default() };
        let schedule = vec![Stage { snr_db: 30.0, epochs: k }, Stage { snr_db: 5.0, epochs: k }];
        let cfg = TrainConfig { snr_schedule: schedule, ..base.clone() };
        staged += fit(&mut fresh(), &train, &test, &cfg).unwrap().0.last().unwrap().accuracy / 3.0;
        let cfg = TrainConfig { epochs: 2 * k, ..base };
        direct += fit(&mut fresh(), &train, &test, &cfg).unwrap().0.last().unwrap().accuracy / 3.0;
    }
    assert!(staged >= direct, "staged {staged} direct {direct}");
}
