use super::layers::*;
use super::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Norm-wise relative error between analytic and central-difference gradients
/// of `f` with respect to `x`.
fn check(x: &mut Vec<f64>, analytic: &[f64], f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + STEP;
        let up = f(x);
        x[i] = orig - STEP;
        let down = f(x);
        x[i] = orig;
        numeric[i] = (up - down) / (2.0 * STEP);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    // Exactly-zero gradients (e.g. a conv bias ahead of batch norm) leave only rounding noise.
    if scale < 1e-7 {
        diff
    } else {
        diff / scale
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv_gradients_both_routes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (trial, &(n, ci, co, k, t)) in [(2, 2, 3, 5, 17), (1, 1, 2, 3, 9), (3, 2, 2, 33, 40), (2, 3, 1, 35, 50)].iter().enumerate() {
        let mut conv = Conv1d::zeros(ci, co, k);
        conv.weight = randn(conv.weight.len(), &mut rng);
        conv.bias = randn(co, &mut rng);
        let mut x = randn(n * ci * t, &mut rng);
        let r = randn(n * co * t, &mut rng);
        let xt = Tensor3::from_vec(n, ci, t, x.clone());
        let (g, dx) = conv.backward(&xt, &Tensor3::from_vec(n, co, t, r.clone()), true);
        let dx = dx.unwrap();
        let mut w = conv.weight.clone();
        let err_w = check(&mut w, &g.weight, &mut |w| {
            let c = Conv1d { weight: w.to_vec(), ..conv.clone() };
            dot(&c.forward(&xt).data, &r)
        });
        let err_x = check(&mut x, &dx.data, &mut |xv| dot(&conv.forward(&Tensor3::from_vec(n, ci, t, xv.to_vec())).data, &r));
        let mut b = conv.bias.clone();
        let err_b = check(&mut b, &g.bias, &mut |b| {
            let c = Conv1d { bias: b.to_vec(), ..conv.clone() };
            dot(&c.forward(&xt).data, &r)
        });
        assert!(err_w.max(err_x).max(err_b) <= TOL, "trial {trial}: {err_w} {err_x} {err_b}");
    }
}

#[test]
fn fft_route_matches_direct() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut conv = Conv1d::zeros(3, 4, 41);
    conv.weight = randn(conv.weight.len(), &mut rng);
    conv.bias = randn(4, &mut rng);
    let x = Tensor3::from_vec(5, 3, 120, randn(5 * 3 * 120, &mut rng));
    let a = conv.forward_direct(&x);
    let b = conv.forward_fft(&x);
    let max = a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert!(max < 1e-9, "{max}");
    let d = Tensor3::from_vec(5, 4, 120, randn(5 * 4 * 120, &mut rng));
    let (gd, xd) = conv.backward_direct(&x, &d, true);
    let (gf, xf) = conv.backward_fft(&x, &d, true);
    let close = |p: &[f64], q: &[f64]| p.iter().zip(q).all(|(u, v)| (u - v).abs() < 1e-8);
    assert!(close(&gd.weight, &gf.weight) && close(&gd.bias, &gf.bias));
    assert!(close(&xd.unwrap().data, &xf.unwrap().data));
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(n, c, t) in &[(2, 3, 7), (4, 1, 5), (1, 2, 9)] {
        let mut bn = BatchNorm::new(c);
        bn.gamma = randn(c, &mut rng);
        bn.beta = randn(c, &mut rng);
        let mut x: Vec<f64> = randn(n * c * t, &mut rng).iter().map(|v| 3.0 * v + 1.0).collect();
        let r = randn(n * c * t, &mut rng);
        let (_, cache) = bn.forward_train(&Tensor3::from_vec(n, c, t, x.clone()));
        let (dg, db, dx) = bn.backward(&cache, &Tensor3::from_vec(n, c, t, r.clone()));
        let err_x = check(&mut x, &dx.data, &mut |xv| dot(&bn.forward_train(&Tensor3::from_vec(n, c, t, xv.to_vec())).0.data, &r));
        let xt = Tensor3::from_vec(n, c, t, x.clone());
        let mut g = bn.gamma.clone();
        let err_g = check(&mut g, &dg, &mut |g| dot(&BatchNorm { gamma: g.to_vec(), ..bn.clone() }.forward_train(&xt).0.data, &r));
        let mut b = bn.beta.clone();
        let err_b = check(&mut b, &db, &mut |b| dot(&BatchNorm { beta: b.to_vec(), ..bn.clone() }.forward_train(&xt).0.data, &r));
        assert!(err_x.max(err_g).max(err_b) <= TOL, "{err_x} {err_g} {err_b}");
    }
}

#[test]
fn eval_norm_requires_running_stats() {
    let mut bn = BatchNorm::new(1);
    let x = Tensor3::from_vec(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]);
    assert!(bn.forward_eval(&x).is_none());
    let (_, cache) = bn.forward_train(&x);
    bn.update_running(&cache);
    assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
    assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    assert!(bn.forward_eval(&x).is_some());
}

#[test]
fn relu_and_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for &(n, c, t, w) in &[(2, 2, 12, 4), (1, 3, 10, 3), (3, 1, 8, 2)] {
        // keep samples away from the ReLU kink and from pooling ties
        let mut x: Vec<f64> = randn(n * c * t, &mut rng).iter().map(|v| v + 0.05 * v.signum()).collect();
        let pool = MaxPool { width: w };
        let f = |xv: &[f64]| {
            let mut a = Tensor3::from_vec(n, c, t, xv.to_vec());
            relu_in_place(&mut a);
            pool.forward(&a)
        };
        let (out, arg) = f(&x);
        let r = randn(out.data.len(), &mut rng);
        let mut act = Tensor3::from_vec(n, c, t, x.clone());
        relu_in_place(&mut act);
        let mut d = pool.backward(&arg, t, &Tensor3::from_vec(out.n, out.c, out.t, r.clone()));
        relu_backward(&act, &mut d);
        let err = check(&mut x, &d.data, &mut |xv| dot(&f(xv).0.data, &r));
        assert!(err <= TOL, "{err}");
    }
}

#[test]
fn relu_boundary_has_zero_gradient() {
    let out = Tensor3::from_vec(1, 1, 3, vec![0.0, 0.0, 2.0]);
    let mut d = Tensor3::from_vec(1, 1, 3, vec![1.0, 1.0, 1.0]);
    relu_backward(&out, &mut d);
    assert_eq!(d.data, vec![0.0, 0.0, 1.0]);
}

#[test]
fn lstm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(steps, input, hidden) in &[(4, 3, 2), (1, 2, 3), (6, 1, 1), (3, 5, 4)] {
        let mut l = Lstm::zeros(input, hidden);
        l.w_ih = randn(l.w_ih.len(), &mut rng).iter().map(|v| 0.5 * v).collect();
        l.w_hh = randn(l.w_hh.len(), &mut rng).iter().map(|v| 0.5 * v).collect();
        l.bias = randn(l.bias.len(), &mut rng);
        let mut x = randn(steps * input, &mut rng);
        let r = randn(steps * hidden, &mut rng);
        let (_, cache) = l.forward(&x, steps);
        let (g, dx) = l.backward(&x, &cache, &r);
        let err_x = check(&mut x, &dx, &mut |xv| dot(&l.forward(xv, steps).0, &r));
        let mut wi = l.w_ih.clone();
        let err_wi = check(&mut wi, &g.w_ih, &mut |w| dot(&Lstm { w_ih: w.to_vec(), ..l.clone() }.forward(&x, steps).0, &r));
        let mut wh = l.w_hh.clone();
        let err_wh = check(&mut wh, &g.w_hh, &mut |w| dot(&Lstm { w_hh: w.to_vec(), ..l.clone() }.forward(&x, steps).0, &r));
        let mut b = l.bias.clone();
        let err_b = check(&mut b, &g.bias, &mut |w| dot(&Lstm { bias: w.to_vec(), ..l.clone() }.forward(&x, steps).0, &r));
        assert!(err_x.max(err_wi).max(err_wh).max(err_b) <= TOL, "{err_x} {err_wi} {err_wh} {err_b}");
    }
}

#[test]
fn linear_and_softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, d) = (4, 3);
    let mut lin = Linear::zeros(d, NUM_STAGES);
    lin.weight = randn(lin.weight.len(), &mut rng);
    lin.bias = randn(NUM_STAGES, &mut rng);
    let labels = [0usize, 3, 4, 1];
    let mut h = randn(n * d, &mut rng);
    let f = |lin: &Linear, h: &[f64]| cross_entropy(&softmax_rows(&lin.forward(h), NUM_STAGES), NUM_STAGES, &labels);
    let p = softmax_rows(&lin.forward(&h), NUM_STAGES);
    let dz = softmax_cross_entropy_grad(&p, NUM_STAGES, &labels);
    let (dw, db, dh) = lin.backward(&h, &dz);
    let err_h = check(&mut h, &dh, &mut |hv| f(&lin, hv));
    let mut w = lin.weight.clone();
    let err_w = check(&mut w, &dw, &mut |w| f(&Linear { weight: w.to_vec(), ..lin.clone() }, &h));
    let mut b = lin.bias.clone();
    let err_b = check(&mut b, &db, &mut |b| f(&Linear { bias: b.to_vec(), ..lin.clone() }, &h));
    assert!(err_h.max(err_w).max(err_b) <= TOL, "{err_h} {err_w} {err_b}");

    let mut z = randn(n * NUM_STAGES, &mut rng);
    let dz = softmax_cross_entropy_grad(&softmax_rows(&z, NUM_STAGES), NUM_STAGES, &labels);
    let err_z = check(&mut z, &dz, &mut |zv| cross_entropy(&softmax_rows(zv, NUM_STAGES), NUM_STAGES, &labels));
    assert!(err_z <= TOL, "{err_z}");
}

#[test]
fn softmax_gradient_identity() {
    let p = vec![0.1, 0.2, 0.3, 0.25, 0.15, 0.2, 0.2, 0.2, 0.2, 0.2];
    let d = softmax_cross_entropy_grad(&p, 5, &[2, 0]);
    let expected = [0.05, 0.1, -0.35, 0.125, 0.075, -0.4, 0.1, 0.1, 0.1, 0.1];
    for (a, b) in d.iter().zip(expected) {
        assert_eq!(*a, b);
    }
}

fn tiny_config() -> EmbedderConfig {
    EmbedderConfig {
        conv_out_channels: vec![3, 2],
        conv_kernels: vec![5, 3],
        pool_widths: vec![2, 2],
        lstm_hidden: 3,
        max_sequence: 50,
        seed: 11,
        ..EmbedderConfig::new(2, 32)
    }
}

#[test]
fn whole_model_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = init_model(&tiny_config()).unwrap();
    let x = Tensor3::from_vec(3, 2, 32, randn(3 * 2 * 32, &mut rng));
    let labels = [StageLabel::N1, StageLabel::Rem, StageLabel::N1];
    let (_, grads, _) = model.loss_and_gradients(&x, &labels).unwrap();
    let names = model.param_names();
    for (p, name) in names.iter().enumerate() {
        let mut values = model.params()[p].clone();
        let err = check(&mut values, &grads[p], &mut |v| {
            let mut m = model.clone();
            *m.params_mut()[p] = v.to_vec();
            m.loss_and_gradients(&x, &labels).unwrap().0
        });
        assert!(err <= TOL, "{name}: {err}");
    }
}

#[test]
fn init_is_seeded() {
    let a = init_model(&tiny_config()).unwrap();
    let b = init_model(&tiny_config()).unwrap();
    assert_eq!(a, b);
    let c = init_model(&EmbedderConfig { seed: 12, ..tiny_config() }).unwrap();
    assert_ne!(a.convs[0].weight, c.convs[0].weight);
    let bound = 1.0 / ((2 * 5) as f64).sqrt();
    assert!(a.convs[0].weight.iter().all(|w| w.abs() <= bound));
    assert!(a.norms.iter().all(|n| n.gamma.iter().all(|&g| g == 1.0) && n.beta.iter().all(|&b| b == 0.0)));
}

#[test]
fn shape_arithmetic() {
    let cfg = EmbedderConfig { input_length: 100, ..EmbedderConfig::new(2, 100) };
    assert!(matches!(init_model(&cfg), Err(EmbedError::ShapeInfeasible(_))));
    let small = EmbedderConfig { conv_out_channels: vec![16, 8, 8], lstm_hidden: 16, ..EmbedderConfig::new(2, 3000) };
    let m = init_model(&small).unwrap();
    assert_eq!(m.embedding_dim(), 32);
    assert_eq!(small.layer_lengths().unwrap(), vec![750, 187, 46]);
    let full = EmbedderConfig::new(2, 6000);
    assert_eq!(full.layer_lengths().unwrap(), vec![1500, 375, 93]);
    assert_eq!(full.embedding_dim(), 512);
    assert_eq!(full.flatten_dim().unwrap(), 64 * 93);
}

#[test]
fn forward_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = init_model(&tiny_config()).unwrap();
    let x = Tensor3::from_vec(4, 2, 32, randn(4 * 64, &mut rng));
    let out = model.forward(&x).unwrap();
    assert_eq!(out.embeddings.dim(), (4, 6));
    for row in out.probabilities.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-9 && row.iter().all(|&p| p > 0.0));
    }
    let mut eval = model.clone();
    eval.training = false;
    assert_eq!(eval.forward(&x), Err(EmbedError::ModeError));

    let mut zero = model.clone();
    zero.head.weight.fill(0.0);
    zero.head.bias.fill(0.0);
    let out = zero.forward(&x).unwrap();
    assert!(out.logits.iter().all(|&z| z == 0.0));
    assert!(out.probabilities.iter().all(|&p| (p - 0.2).abs() < 1e-15));
}

#[test]
fn single_epoch_directions_share_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut model = init_model(&tiny_config()).unwrap();
    model.lstm_backward = model.lstm_forward.clone();
    let x = Tensor3::from_vec(1, 2, 32, randn(64, &mut rng));
    let out = model.forward(&x).unwrap();
    assert_eq!(out.embeddings.dim(), (1, 6));
    let row = out.embeddings.row(0);
    for j in 0..3 {
        assert_eq!(row[j], row[3 + j]);
    }
}

#[test]
fn loss_examples() {
    let one_hot = Array2::from_shape_vec((2, 5), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    assert_eq!(loss(&one_hot, &[StageLabel::Wake, StageLabel::N3]), 0.0);
    let uniform = Array2::from_elem((3, 5), 0.2);
    assert!((loss(&uniform, &[StageLabel::N1, StageLabel::Rem, StageLabel::N2]) - 5f64.ln()).abs() < 1e-12);
    assert!((loss(&one_hot, &[StageLabel::N1, StageLabel::N3]) - 0.5 * -(1e-12f64).ln()).abs() < 1e-9);
}

/// Two subjects whose stage sets the frequency of a noisy tone.
fn tone_epochs(per_subject: usize, seed: u64) -> EpochSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, l) = (2, 32);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut subjects = Vec::new();
    for s in 0..2 {
        for _ in 0..per_subject {
            let k = rng.gen_range(0..NUM_STAGES);
            for ch in 0..c {
                for t in 0..l {
                    let v = (2.0 * std::f64::consts::PI * (k + 1) as f64 * t as f64 / l as f64 + ch as f64).sin()
                        + 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                    data.push(v as f32);
                }
            }
            labels.push(StageLabel::from_index(k).unwrap());
            subjects.push(format!("subject-{s:03}"));
        }
    }
    EpochSet::from_parts(data, labels, vec!["a".into(), "b".into()], 32.0, 1.0, subjects).unwrap()
}

#[test]
fn training_descends_and_is_deterministic() {
    let epochs = tone_epochs(100, 10);
    let cfg = EmbedderConfig { learning_rate: 1e-2, train_epochs: 8, ..tiny_config() };
    let model = init_model(&cfg).unwrap();
    let (trained, trace) = train(model.clone(), &epochs).unwrap();
    assert_eq!(trace.losses.len(), 8 * 4);
    let first: f64 = trace.losses[..4].iter().sum();
    let last: f64 = trace.losses[trace.losses.len() - 4..].iter().sum();
    assert!(last < first, "{first} -> {last}");
    assert!(!trained.training);
    let (again, trace2) = train(model, &epochs).unwrap();
    assert_eq!(trace, trace2);
    assert_eq!(trained, again);
    assert!(trace.to_csv().starts_with("step,loss\n0,"));
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let epochs = tone_epochs(30, 11);
    let cfg = EmbedderConfig { learning_rate: 0.0, train_epochs: 2, ..tiny_config() };
    let model = init_model(&cfg).unwrap();
    let (trained, _) = train(model.clone(), &epochs).unwrap();
    for (a, b) in model.params().iter().zip(trained.params()) {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn extraction_is_aligned_and_pure() {
    let epochs = tone_epochs(20, 12);
    let cfg = EmbedderConfig { train_epochs: 1, ..tiny_config() };
    let (model, _) = train(init_model(&cfg).unwrap(), &epochs).unwrap();
    let first = epochs.slice(0..20);
    let copy = EpochSet::from_parts(
        first.data().to_vec(),
        first.labels().to_vec(),
        first.channel_labels().to_vec(),
        first.rate(),
        first.epoch_seconds(),
        vec!["copy".into(); 20],
    )
    .unwrap();
    let twice = EpochSet::concat(&[&first, &copy]).unwrap();
    let emb = extract_embeddings(&model, &twice).unwrap();
    assert_eq!(emb.values.dim(), (40, 6));
    for i in 0..20 {
        assert_eq!(emb.values.row(i), emb.values.row(20 + i));
    }
    assert_eq!(extract_embeddings(&model, &twice).unwrap(), emb);
    let wrong = EmbedderModel { config: EmbedderConfig { input_length: 64, ..model.config.clone() }, ..model.clone() };
    assert!(matches!(extract_embeddings(&wrong, &twice), Err(EmbedError::ShapeMismatch(_))));
}
