//! Analytic gradients against central finite differences and closed forms.

use dismi_core::estimators::EstimatorKind;
use dismi_core::nn::{cross_entropy, AdamW, OptimConfig};
use dismi_core::train::composite_loss;
use dismi_core::{Head, MlpNet, ModelBundle, NetConfig, RatioCritic, Rng, SyntheticTask, TrainingConfig};
use ndarray::{Array1, Array2};
use rand::Rng as _;

const H: f64 = 1e-5;

fn uniform(n: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0))
}

fn close(analytic: f64, numeric: f64, rel: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + 1e-9
}

/// Central differences of `f` over every parameter of `net`.
fn numeric_param_grad(net: &mut MlpNet, f: &dyn Fn(&MlpNet) -> f64) -> Vec<f64> {
    let base = net.flat_params();
    let mut out = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] = base[k] + H;
        net.set_flat_params(&p).unwrap();
        let up = f(net);
        p[k] = base[k] - H;
        net.set_flat_params(&p).unwrap();
        let down = f(net);
        out.push((up - down) / (2.0 * H));
    }
    net.set_flat_params(&base).unwrap();
    out
}

#[test]
fn every_layer_count_and_head_matches_finite_differences() {
    let mut rng = Rng::new(42);
    for layers in 1..=3 {
        for head in [Head::Logits, Head::Sigmoid, Head::Softmax] {
            let mut dims = vec![4];
            dims.extend_from_slice(&[7, 6][..layers - 1]);
            dims.push(3);
            let mut net = MlpNet::new(&dims, head, 0.0, &mut rng).unwrap();
            let x = uniform(5, 4, &mut rng);
            let w = uniform(5, net.output_dim(), &mut rng);
            // scalar loss: sum of w * output
            let loss = |n: &MlpNet| (&n.predict(x.view()).unwrap() * &w).sum();

            net.zero_grad();
            let trace = net.forward(x.view(), false, &mut rng).unwrap();
            let dx = net.backward(&trace, w.view()).unwrap();
            let analytic = net.flat_grads();
            let numeric = numeric_param_grad(&mut net, &loss);
            for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
                assert!(close(*a, *n, 1e-4), "layers={layers} head={head:?} param {k}: {a} vs {n}");
            }

            for i in 0..x.nrows() {
                for j in 0..x.ncols() {
                    let mut xp = x.clone();
                    xp[[i, j]] += H;
                    let mut xm = x.clone();
                    xm[[i, j]] -= H;
                    let f = |xx: &Array2<f64>| (&net.predict(xx.view()).unwrap() * &w).sum();
                    let n = (f(&xp) - f(&xm)) / (2.0 * H);
                    assert!(close(dx[[i, j]], n, 1e-4), "input grad ({i},{j}): {} vs {n}", dx[[i, j]]);
                }
            }
        }
    }
}

#[test]
fn cross_entropy_gradient_through_three_layers() {
    let mut rng = Rng::new(3);
    let mut net = MlpNet::new(&[5, 8, 8, 4], Head::Logits, 0.0, &mut rng).unwrap();
    let x = uniform(7, 5, &mut rng);
    let labels: Vec<usize> = (0..7).map(|i| i % 4).collect();
    let loss = |n: &MlpNet| cross_entropy(n.predict(x.view()).unwrap().view(), &labels).unwrap().0;
    net.zero_grad();
    let trace = net.forward(x.view(), false, &mut rng).unwrap();
    let (_, g) = cross_entropy(trace.output().view(), &labels).unwrap();
    net.backward(&trace, g.view()).unwrap();
    let analytic = net.flat_grads();
    let numeric = numeric_param_grad(&mut net, &loss);
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(close(*a, *n, 1e-4), "{a} vs {n}");
    }
}

#[test]
fn constant_loss_has_zero_gradient() {
    let mut rng = Rng::new(8);
    let mut net = MlpNet::new(&[3, 4, 2], Head::Softmax, 0.0, &mut rng).unwrap();
    let x = uniform(4, 3, &mut rng);
    net.zero_grad();
    let trace = net.forward(x.view(), false, &mut rng).unwrap();
    let dx = net.backward(&trace, Array2::zeros((4, 2)).view()).unwrap();
    assert!(net.flat_grads().iter().all(|&g| g == 0.0));
    assert!(dx.iter().all(|&g| g == 0.0));
}

#[test]
fn linear_least_squares_matches_normal_equation_gradient() {
    let mut rng = Rng::new(5);
    let (n, d) = (20, 4);
    let mut net = MlpNet::new(&[d, 1], Head::Logits, 0.0, &mut rng).unwrap();
    let x = uniform(n, d, &mut rng);
    let t = uniform(n, 1, &mut rng);
    // L = (1/2n) |X w + b - t|^2
    net.zero_grad();
    let trace = net.forward(x.view(), false, &mut rng).unwrap();
    let residual = (trace.output() - &t) / n as f64;
    net.backward(&trace, residual.view()).unwrap();

    let w = net.layers()[0].weight.column(0).to_owned();
    let b = net.layers()[0].bias[0];
    let xtx = x.t().dot(&x);
    let xtt = x.t().dot(&t.column(0));
    let ones = Array1::<f64>::ones(n);
    let xt1 = x.t().dot(&ones);
    let grad_w = (xtx.dot(&w) + &xt1 * b - &xtt) / n as f64;
    let grad_b = (xt1.dot(&w) + n as f64 * b - t.sum()) / n as f64;

    let g = &net.grads()[0];
    for k in 0..d {
        assert!((g.weight[[k, 0]] - grad_w[k]).abs() < 1e-8);
    }
    assert!((g.bias[0] - grad_b).abs() < 1e-8);
}

/// -log softmax evaluated with a max shift and compensated summation.
fn reference_nll(row: &[f64], label: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for &v in row {
        let y = (v - m).exp() - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    m + sum.ln() - row[label]
}

#[test]
fn cross_entropy_matches_reference_evaluation() {
    let mut rng = Rng::new(17);
    for k in [2, 3, 5, 8] {
        let logits = Array2::from_shape_simple_fn((30, k), || rng.gen_range(-20.0..20.0));
        let labels: Vec<usize> = (0..30).map(|_| rng.gen_range(0..k)).collect();
        let (loss, _) = cross_entropy(logits.view(), &labels).unwrap();
        let reference: f64 = logits
            .outer_iter()
            .zip(&labels)
            .map(|(r, &y)| reference_nll(r.as_slice().unwrap(), y))
            .sum::<f64>()
            / 30.0;
        assert!((loss - reference).abs() < 1e-10, "k={k}: {loss} vs {reference}");
    }
}

fn small_bundle(kind: EstimatorKind, lambda: f64, n_attr: usize, seed: u64) -> (ModelBundle, TrainingConfig) {
    let net = NetConfig {
        hidden: 6,
        layers: 2,
        dropout: 0.0,
    };
    let config = TrainingConfig {
        lambda,
        estimator: kind,
        latent_dim: 3,
        encoder: net.clone(),
        heads: net.clone(),
        seed,
        ..TrainingConfig::default()
    };
    let root = Rng::new(seed);
    let mut bundle = ModelBundle::new(16, n_attr, &config, &root).unwrap();
    // a randomly initialized critic stands in for a trained one
    let critic_net = net.build(3 + n_attr, 1, Head::Logits, &mut root.fork(99)).unwrap();
    bundle.critic = RatioCritic::from_net(critic_net, 3, n_attr).unwrap();
    (bundle, config)
}

#[test]
fn composite_loss_encoder_gradient_matches_finite_differences() {
    let kinds = [
        EstimatorKind::Kl,
        EstimatorKind::Renyi { alpha: 1.5 },
        EstimatorKind::Renyi { alpha: 1.8 },
        EstimatorKind::VClubS,
        EstimatorKind::AdvCe,
    ];
    for (i, kind) in kinds.into_iter().enumerate() {
        for n_attr in [2, 3] {
            let seed = 100 + i as u64;
            let (mut bundle, config) = small_bundle(kind, 0.7, n_attr, seed);
            let task = SyntheticTask {
                n_attr_classes: n_attr,
                ..SyntheticTask::default()
            };
            let data = task.generate(24, &mut Rng::new(seed)).unwrap();
            let eval = |b: &mut ModelBundle| {
                composite_loss(b, data.x.view(), &data.attrs, &data.targets, &config, &mut Rng::new(7))
                    .unwrap()
                    .total
            };
            bundle.encoder.zero_grad();
            let before = (bundle.classifier.checksum(), bundle.critic.net().checksum(), bundle.decoder.checksum());
            eval(&mut bundle);
            let analytic = bundle.encoder.flat_grads();
            assert!(analytic.iter().any(|g| *g != 0.0));
            let after = (bundle.classifier.checksum(), bundle.critic.net().checksum(), bundle.decoder.checksum());
            assert_eq!(before, after, "auxiliary parameters changed");

            let base = bundle.encoder.flat_params();
            for k in 0..base.len() {
                let mut p = base.clone();
                p[k] = base[k] + H;
                bundle.encoder.set_flat_params(&p).unwrap();
                let up = eval(&mut bundle);
                p[k] = base[k] - H;
                bundle.encoder.set_flat_params(&p).unwrap();
                let down = eval(&mut bundle);
                let numeric = (up - down) / (2.0 * H);
                assert!(
                    close(analytic[k], numeric, 1e-3),
                    "{kind} |Y|={n_attr} param {k}: {} vs {numeric}",
                    analytic[k]
                );
            }
        }
    }
}

#[test]
fn adversarial_penalty_pushes_toward_higher_adversary_loss() {
    // with a frozen adversary, descending the composite loss raises its CE
    // without bound: the penalty keeps decreasing
    let (mut bundle, mut config) = small_bundle(EstimatorKind::AdvCe, 10.0, 3, 4);
    config.lr_encoder = 1e-2;
    let task = SyntheticTask {
        n_attr_classes: 3,
        ..SyntheticTask::default()
    };
    let data = task.generate(256, &mut Rng::new(4)).unwrap();
    let mut opt = AdamW::new(&bundle.encoder, OptimConfig::with_lr(1e-2));
    let mut penalties = Vec::new();
    for step in 0..600 {
        bundle.encoder.zero_grad();
        let loss = composite_loss(
            &mut bundle,
            data.x.view(),
            &data.attrs,
            &data.targets,
            &config,
            &mut Rng::new(step),
        )
        .unwrap();
        penalties.push(loss.penalty);
        opt.step(&mut bundle.encoder).unwrap();
    }
    let early = penalties[..50].iter().sum::<f64>() / 50.0;
    let late = penalties[550..].iter().sum::<f64>() / 50.0;
    assert!(late < early - 10.0, "penalty went from {early} to {late}");
    assert!(penalties[550..].windows(2).filter(|w| w[1] <= w[0]).count() > 40);
}
