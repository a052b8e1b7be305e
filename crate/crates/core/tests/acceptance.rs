//! Acceptance suite. Each test prints one `acceptance criterion N (...): PASS`
//! or `FAIL` line; run with `--nocapture` to see them on success.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use wafer_ssl::classifier::{
    evaluate, train_supervised, Classifier, FusionPoint, NetworkConfig, TrainConfig,
};
use wafer_ssl::data::{
    balance, class_histogram, generate, generate_batch, split, WaferMap, NUM_CLASSES,
};
use wafer_ssl::graph::{Graph, Var};
use wafer_ssl::metrics::report_from_labels;
use wafer_ssl::semisup::{
    build_student_set, fine_tune, score_unlabeled, select_topk, train_student, PseudoLabel,
};
use wafer_ssl::vae::{pretrain_vae, VaeConfig, VaeModel, VaeTrainConfig};
use wafer_ssl::{Result, Tensor};

fn report(n: usize, name: &str, ok: bool) {
    println!("acceptance criterion {n} ({name}): {}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance criterion {n} ({name}) failed");
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    tensor(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

// ── criterion 1: gradient integrity ──────────────────────────────────

/// Central-difference check of `build`'s gradients with respect to every
/// input tensor. Non-scalar outputs are reduced with a fixed random weighting
/// so that every output element contributes.
fn check_grads<F>(inputs: &[Tensor], build: F, rng: &mut ChaCha8Rng, label: &str)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Discover the output shape, then fix reduction weights.
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let weights = random_tensor(rng, &out_shape, -1.0, 1.0);
    let eval = |ts: &[Tensor], trainable: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.leaf(t.clone()) })
            .collect();
        let out = build(&mut g, &vars).unwrap();
        let loss = if g.value(out).is_scalar() {
            out
        } else {
            let w = g.leaf(weights.clone());
            let prod = g.mul(out, w).unwrap();
            g.sum_all(prod).unwrap()
        };
        if trainable {
            g.backward(loss).unwrap();
        }
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_default())
            .collect();
        (g.value(loss).item(), grads)
    };
    let (_, analytic) = eval(inputs, true);
    let h = 1e-5;
    for (ti, t) in inputs.iter().enumerate() {
        for ci in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ci] += h;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ci] -= h;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            let a = analytic[ti][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                rel < 1e-4,
                "{label}: input {ti} component {ci}: analytic {a} vs numeric {numeric} (rel {rel})"
            );
        }
    }
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let instances = 20;
    for i in 0..instances {
        let r = &mut rng;
        let a = random_tensor(r, &[2, 3], -2.0, 2.0);
        let b = random_tensor(r, &[2, 3], -2.0, 2.0);
        check_grads(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]), r, "add");
        check_grads(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]), r, "sub");
        check_grads(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]), r, "mul");
        check_grads(&[a.clone()], |g, v| g.scale(v[0], 1.7), r, "scale");
        check_grads(&[a.clone()], |g, v| g.exp(v[0]), r, "exp");
        check_grads(&[a.clone()], |g, v| g.sigmoid(v[0]), r, "sigmoid");
        check_grads(&[a.clone()], |g, v| g.reshape(v[0], vec![3, 2]), r, "reshape");
        check_grads(&[a.clone()], |g, v| g.sum_all(v[0]), r, "sum_all");
        check_grads(&[a.clone()], |g, v| g.softmax(v[0]), r, "softmax");
        // Keep relu inputs away from the kink.
        let shifted = tensor(
            &[2, 3],
            a.data().iter().map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v }).collect(),
        );
        check_grads(&[shifted], |g, v| g.relu(v[0]), r, "relu");
        let c = random_tensor(r, &[2, 2], -2.0, 2.0);
        check_grads(&[a.clone(), c], |g, v| g.concat(&[v[0], v[1]], 1), r, "concat");

        let x = random_tensor(r, &[2, 4], -1.0, 1.0);
        let w = random_tensor(r, &[4, 3], -1.0, 1.0);
        let bias = random_tensor(r, &[3], -1.0, 1.0);
        check_grads(&[x, w, bias], |g, v| g.linear(v[0], v[1], v[2]), r, "linear");

        let img = random_tensor(r, &[2, 2, 5, 5], -1.0, 1.0);
        let k1 = random_tensor(r, &[3, 2, 3, 3], -1.0, 1.0);
        check_grads(&[img.clone(), k1], |g, v| g.conv2d(v[0], v[1], 1, 1), r, "conv s1");
        let k2 = random_tensor(r, &[2, 2, 3, 3], -1.0, 1.0);
        check_grads(&[img.clone(), k2], |g, v| g.conv2d(v[0], v[1], 2, 1), r, "conv s2");

        let fm = random_tensor(r, &[2, 3, 4, 4], -1.0, 1.0);
        let cb = random_tensor(r, &[3], -1.0, 1.0);
        check_grads(&[fm.clone(), cb], |g, v| g.channel_bias(v[0], v[1]), r, "channel_bias");
        let scb = random_tensor(r, &[2, 3], -1.0, 1.0);
        check_grads(
            &[fm.clone(), scb],
            |g, v| g.sample_channel_bias(v[0], v[1]),
            r,
            "sample_channel_bias",
        );
        check_grads(&[fm.clone()], |g, v| g.max_pool2d(v[0], 2, 2), r, "max_pool2d");
        check_grads(&[fm.clone()], |g, v| g.mean_pool_global(v[0]), r, "mean_pool_global");
        let small = random_tensor(r, &[1, 2, 3, 3], -1.0, 1.0);
        check_grads(&[small], |g, v| g.upsample2x(v[0]), r, "upsample2x");
        check_grads(&[img], |g, v| g.crop_center(v[0], 3, 3), r, "crop_center");

        let logits = random_tensor(r, &[4, 5], -2.0, 2.0);
        let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
        check_grads(
            &[logits],
            |g, v| g.cross_entropy(v[0], &labels),
            r,
            "cross_entropy",
        );
        let sp = random_tensor(r, &[2, 3, 3, 3], -2.0, 2.0);
        let sp_labels: Vec<usize> = (0..2 * 9).map(|_| r.gen_range(0..3)).collect();
        check_grads(
            &[sp],
            |g, v| g.cross_entropy_spatial(v[0], &sp_labels),
            r,
            "cross_entropy_spatial",
        );

        let mean = random_tensor(r, &[2, 3], -1.0, 1.0);
        let logvar = random_tensor(r, &[2, 3], -1.0, 1.0);
        let eps: Vec<f64> = (0..6).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        check_grads(
            &[mean.clone(), logvar.clone()],
            |g, v| g.reparameterize(v[0], v[1], &eps),
            r,
            "reparameterize",
        );
        check_grads(
            &[mean, logvar],
            |g, v| g.kl_unit_gaussian(v[0], v[1]),
            r,
            "kl_unit_gaussian",
        );

        // Full tiny VAE.
        let vae_cfg = VaeConfig { input_size: 9, latent_dim: 3, channels: [2, 3, 4] };
        let mut vae = VaeModel::new(vae_cfg, 1000 + i).unwrap();
        for (_, t) in vae.params_mut().iter_mut() {
            for v in t.data_mut() {
                *v += r.gen_range(-0.05..0.05);
            }
        }
        let vae = vae;
        let x = random_onehot(r, 2, 9);
        let eps: Vec<f64> = (0..2 * 3).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        check_model_grads(
            vae.params().iter().map(|(_, t)| t.clone()).collect(),
            |params| {
                let mut m = vae.clone();
                for (slot, t) in m.params_mut().iter_mut().zip(params) {
                    slot.1 = t.clone();
                }
                m.loss_and_grads(&x, &eps, 1.0).unwrap()
            },
            r,
            "vae",
        );

        // Full tiny classifier with fusion.
        let net = NetworkConfig {
            input_size: 9,
            stem_channels: 2,
            stem_pool: false,
            block_counts: [1, 1, 1, 1],
            stage_channels: [2, 4, 4, 4],
            fusion_point: FusionPoint::AfterStage2,
            num_classes: 3,
            latent_dim: 3,
        };
        let mut clf = Classifier::new(net, 2000 + i).unwrap();
        // Zero-initialized biases put ReLU preactivations exactly on the
        // kink, where finite differences are meaningless; jitter away.
        for (_, t) in clf.params_mut().iter_mut() {
            for v in t.data_mut() {
                *v += r.gen_range(-0.05..0.05);
            }
        }
        let clf = clf;
        let maps: Vec<WaferMap> = (0..2).map(|j| random_map(r, 9, j % 3)).collect();
        let latents: Vec<Vec<f64>> =
            (0..2).map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        check_model_grads(
            clf.params().iter().map(|(_, t)| t.clone()).collect(),
            |params| {
                let mut m = clf.clone();
                for (slot, t) in m.params_mut().iter_mut().zip(params) {
                    slot.1 = t.clone();
                }
                m.loss_and_grads(&maps, Some(&latents)).unwrap()
            },
            r,
            "classifier",
        );
    }
    let ok = start.elapsed().as_secs_f64() < 120.0;
    report(1, "gradient integrity", ok);
}

/// One-hot [N, 3, s, s] batch with a random channel set per cell.
fn random_onehot(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Tensor {
    let cells = s * s;
    let mut data = vec![0.0; n * 3 * cells];
    for img in 0..n {
        for cell in 0..cells {
            let ch = rng.gen_range(0..3usize);
            data[img * 3 * cells + ch * cells + cell] = 1.0;
        }
    }
    tensor(&[n, 3, s, s], data)
}

fn random_map(rng: &mut ChaCha8Rng, s: usize, label: usize) -> WaferMap {
    WaferMap {
        id: format!("t{label}"),
        height: s,
        width: s,
        grid: (0..s * s).map(|_| rng.gen_range(0..3u8)).collect(),
        label: Some(label),
    }
}

/// Finite-difference check for a whole model exposed as
/// `loss(params) -> (loss, grads)`. A handful of components per tensor is
/// probed to keep the suite fast.
fn check_model_grads<F>(params: Vec<Tensor>, f: F, rng: &mut ChaCha8Rng, label: &str)
where
    F: Fn(&[Tensor]) -> (f64, Vec<Vec<f64>>),
{
    let (_, analytic) = f(&params);
    let h = 1e-5;
    for (ti, t) in params.iter().enumerate() {
        let picks = 3.min(t.numel());
        for _ in 0..picks {
            let ci = rng.gen_range(0..t.numel());
            let mut plus = params.clone();
            plus[ti].data_mut()[ci] += h;
            let mut minus = params.clone();
            minus[ti].data_mut()[ci] -= h;
            let numeric = (f(&plus).0 - f(&minus).0) / (2.0 * h);
            let a = analytic[ti][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                rel < 1e-4,
                "{label}: tensor {ti} component {ci}: analytic {a} vs numeric {numeric} (rel {rel})"
            );
        }
    }
}

// ── criterion 2: oracle equivalence ──────────────────────────────────

fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, hin, win) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let hout = (hin + 2 * pad - kh) / stride + 1;
    let wout = (win + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * hout * wout];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..hout {
                for ox in 0..wout {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy >= 0 && ix >= 0 && (iy as usize) < hin && (ix as usize) < win
                                {
                                    let xi = ((b * cin + ci) * hin + iy as usize) * win
                                        + ix as usize;
                                    let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                    acc += x.data()[xi] * k.data()[ki];
                                }
                            }
                        }
                    }
                    out[((b * cout + co) * hout + oy) * wout + ox] = acc;
                }
            }
        }
    }
    tensor(&[n, cout, hout, wout], out)
}

#[test]
fn criterion_2_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // conv2d vs naive loops.
    for (stride, pad, hin) in [(1, 1, 6), (2, 1, 5), (1, 0, 5), (2, 1, 6)] {
        for _ in 0..5 {
            let x = random_tensor(&mut rng, &[2, 3, hin, hin], -1.0, 1.0);
            let kdim = if stride == 2 && hin % 2 == 0 { 4 } else { 3 };
            let k = random_tensor(&mut rng, &[4, 3, kdim, kdim], -1.0, 1.0);
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let kv = g.leaf(k.clone());
            let out = g.conv2d(xv, kv, stride, pad).unwrap();
            let oracle = naive_conv(&x, &k, stride, pad);
            assert_eq!(g.shape(out), oracle.shape());
            for (a, b) in g.value(out).data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12, "conv mismatch: {a} vs {b}");
            }
        }
    }

    // max pool vs naive loops.
    for _ in 0..10 {
        let x = random_tensor(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let out = g.max_pool2d(xv, 2, 2).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((b * 3 + c) * 6 + oy * 2 + dy) * 6 + ox * 2 + dx;
                                best = best.max(x.data()[i]);
                            }
                        }
                        let got = g.value(out).data()[((b * 3 + c) * 3 + oy) * 3 + ox];
                        assert!((got - best).abs() < 1e-12);
                    }
                }
            }
        }
        let pooled = g.mean_pool_global(xv).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let mean = x.data()[(b * 3 + c) * 36..(b * 3 + c + 1) * 36]
                    .iter()
                    .sum::<f64>()
                    / 36.0;
                assert!((g.value(pooled).data()[b * 3 + c] - mean).abs() < 1e-12);
            }
        }
    }

    // select_topk vs an independent filter-sort-truncate oracle.
    for round in 0..20 {
        let n = rng.gen_range(1..200);
        let pseudo: Vec<PseudoLabel> = (0..n)
            .map(|i| PseudoLabel {
                example_id: format!("e{:03}", i),
                predicted_class: rng.gen_range(0..NUM_CLASSES),
                // Coarse grid so ties actually occur.
                confidence: (rng.gen_range(0..20) as f64) / 20.0,
            })
            .collect();
        let k = rng.gen_range(1..8);
        let threshold = rng.gen_range(0.2..0.95);
        let got = select_topk(&pseudo, k, threshold);
        let mut expected = Vec::new();
        for class in 0..NUM_CLASSES {
            let mut candidates: Vec<&PseudoLabel> = pseudo
                .iter()
                .filter(|p| p.predicted_class == class && p.confidence >= threshold)
                .collect();
            candidates.sort_by(|a, b| {
                b.confidence
                    .partial_cmp(&a.confidence)
                    .unwrap()
                    .then(a.example_id.cmp(&b.example_id))
            });
            candidates.truncate(k);
            expected.extend(candidates.into_iter().cloned());
        }
        assert_eq!(got, expected, "select_topk mismatch in round {round}");
    }

    // metrics vs recount; confusion vs tally.
    for _ in 0..20 {
        let n = rng.gen_range(10..300);
        let k = NUM_CLASSES;
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let rep = report_from_labels(&truth, &pred, k).unwrap();
        let mut tally = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(&pred) {
            tally[t][p] += 1;
        }
        assert_eq!(rep.confusion, tally);
        let mut macro_p = 0.0;
        let mut macro_r = 0.0;
        let mut macro_f = 0.0;
        let mut included = 0usize;
        for c in 0..k {
            let tp = truth
                .iter()
                .zip(&pred)
                .filter(|&(&t, &p)| t == c && p == c)
                .count() as f64;
            let fp = truth.iter().zip(&pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
            let fname = truth.iter().zip(&pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
            let prec = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
            let rec = if tp + fname == 0.0 { 0.0 } else { tp / (tp + fname) };
            let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
            assert!((rep.per_class[c].precision - prec).abs() < 1e-12);
            assert!((rep.per_class[c].recall - rec).abs() < 1e-12);
            assert!((rep.per_class[c].f1 - f1).abs() < 1e-12);
            if tp + fname > 0.0 {
                macro_p += prec;
                macro_r += rec;
                macro_f += f1;
                included += 1;
            }
        }
        assert!((rep.macro_precision - macro_p / included as f64).abs() < 1e-12);
        assert!((rep.macro_recall - macro_r / included as f64).abs() < 1e-12);
        assert!((rep.macro_f1 - macro_f / included as f64).abs() < 1e-12);
        let acc = truth.iter().zip(&pred).filter(|&(&t, &p)| t == p).count() as f64 / n as f64;
        assert!((rep.accuracy - acc).abs() < 1e-12);
    }

    report(2, "oracle equivalence", true);
}

// ── criterion 3: VAE analytics ───────────────────────────────────────

fn kl_quadrature(m: f64, l: f64) -> f64 {
    // KL(N(m, e^l) || N(0, 1)) by Simpson's rule over a wide bracket.
    let sigma = (l / 2.0).exp();
    let lo = m - 12.0 * sigma.max(1.0);
    let hi = m + 12.0 * sigma.max(1.0);
    let steps = 40_000usize; // even
    let hstep = (hi - lo) / steps as f64;
    let q_ln = |x: f64| {
        let ln_q = -((x - m) * (x - m)) / (2.0 * sigma * sigma)
            - sigma.ln()
            - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let ln_p = -x * x / 2.0 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        ln_q.exp() * (ln_q - ln_p)
    };
    let mut acc = q_ln(lo) + q_ln(hi);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * q_ln(lo + i as f64 * hstep);
    }
    acc * hstep / 3.0
}

#[test]
fn criterion_3_vae_analytics() {
    let start = Instant::now();
    // Closed form vs quadrature.
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..10 {
        let m: f64 = rng.gen_range(-2.0..2.0);
        let l: f64 = rng.gen_range(-1.5..1.5);
        let closed = 0.5 * (m * m + l.exp() - 1.0 - l);
        let quad = kl_quadrature(m, l);
        assert!((closed - quad).abs() < 1e-6, "KL {closed} vs quadrature {quad}");
        let mut g = Graph::new();
        let mv = g.leaf(tensor(&[1, 1], vec![m]));
        let lv = g.leaf(tensor(&[1, 1], vec![l]));
        let kl = g.kl_unit_gaussian(mv, lv).unwrap();
        assert!((g.value(kl).item() - closed).abs() < 1e-12);
    }
    assert_eq!(kl_quadrature(0.0, 0.0).abs() < 1e-6, true);
    {
        let mut g = Graph::new();
        let mv = g.leaf(tensor(&[1, 2], vec![0.0, 0.0]));
        let lv = g.leaf(tensor(&[1, 2], vec![0.0, 0.0]));
        let kl = g.kl_unit_gaussian(mv, lv).unwrap();
        assert_eq!(g.value(kl).item(), 0.0);
    }

    // Monte-Carlo variance of the reparameterized sample.
    let draws = 10_000;
    let mean = 2.0;
    let logvar = 4.0f64.ln();
    let samples: Vec<f64> = (0..draws)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            wafer_ssl::vae::reparameterize(&[mean], &[logvar], &[e]).unwrap()[0]
        })
        .collect();
    let m_hat = samples.iter().sum::<f64>() / draws as f64;
    let var_hat =
        samples.iter().map(|s| (s - m_hat) * (s - m_hat)).sum::<f64>() / draws as f64;
    assert!(
        (3.6..=4.4).contains(&var_hat),
        "Monte-Carlo variance {var_hat} outside ±10% of 4"
    );

    // Pretraining on 500 synthetic maps.
    let mut counts = [500 / NUM_CLASSES + 1; NUM_CLASSES];
    counts[NUM_CLASSES - 1] = 500 - (500 / NUM_CLASSES + 1) * (NUM_CLASSES - 1);
    let maps = generate_batch(&counts, 27, 0.03, 77).unwrap();
    let images: Vec<Tensor> = maps.iter().map(|m| m.to_tensor()).collect();
    let cfg = VaeConfig::default();
    let train = VaeTrainConfig { epochs: 30, seed: 5, ..VaeTrainConfig::default() };
    let (vae, history) = pretrain_vae(&images, &cfg, &train).unwrap();
    assert!(
        history.loss[0] > *history.loss.last().unwrap(),
        "ELBO did not decrease: {} -> {}",
        history.loss[0],
        history.loss.last().unwrap()
    );

    // Per-die reconstruction argmax accuracy.
    let mut correct = 0usize;
    let mut total = 0usize;
    for map in &maps {
        let z = vae.extract_latent(&map.to_tensor()).unwrap();
        let logits = vae.decode(&z).unwrap();
        let cells = 27 * 27;
        for cell in 0..cells {
            let pred = (0..3)
                .max_by(|&a, &b| {
                    logits.data()[a * cells + cell]
                        .partial_cmp(&logits.data()[b * cells + cell])
                        .unwrap()
                })
                .unwrap();
            if pred == map.grid[cell] as usize {
                correct += 1;
            }
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    let elapsed = start.elapsed().as_secs_f64();
    assert!(acc >= 0.90, "reconstruction accuracy {acc} below 0.90");
    report(3, "VAE analytics", elapsed < 300.0);
}

// ── criterion 4: fusion no-op exactness ──────────────────────────────

#[test]
fn criterion_4_fusion_noop_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let maps: Vec<WaferMap> =
        (0..100).map(|i| generate(i % NUM_CLASSES, 27, 0.05, 40_000 + i as u64).unwrap()).collect();
    let baseline = Classifier::new(NetworkConfig::default(), 99).unwrap();
    for point in [
        FusionPoint::AfterStage1,
        FusionPoint::AfterStage2,
        FusionPoint::AfterStage3,
        FusionPoint::AfterStage4,
    ] {
        let fused_cfg = NetworkConfig { fusion_point: point, ..NetworkConfig::default() };
        let fused = Classifier::new(fused_cfg, 99).unwrap();
        for map in &maps {
            let x = map.to_tensor();
            let latent: Vec<f64> = (0..16).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let base_logits = baseline.forward(&x, None).unwrap();
            let fused_logits = fused.forward(&x, Some(&[latent])).unwrap();
            let identical = base_logits
                .data()
                .iter()
                .zip(fused_logits.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !identical {
                report(4, "fusion no-op exactness", false);
            }
        }
    }
    report(4, "fusion no-op exactness", true);
}

// ── criteria 5 & 6: shared desk-scale benchmark ──────────────────────

struct SeedOutcome {
    teacher_accuracy: f64,
    fused_student_accuracy: f64,
    fused_student_macro_f1: f64,
    baseline_student_macro_f1: f64,
    pseudo_label_accuracy: f64,
}

struct Benchmark {
    seeds: Vec<SeedOutcome>,
    elapsed_secs: f64,
}

static BENCH: OnceLock<Benchmark> = OnceLock::new();

fn benchmark() -> &'static Benchmark {
    BENCH.get_or_init(|| {
        let start = Instant::now();
        let maps = generate_batch(&[700; NUM_CLASSES], 27, 0.05, 123).unwrap();
        let fractions = (900.0 / 6300.0, 4500.0 / 6300.0, 900.0 / 6300.0);
        let mut seeds = Vec::new();
        for seed in [11u64, 22, 33] {
            eprintln!("benchmark: seed {seed}");
            let mut data = split(&maps, fractions, seed).unwrap();
            data.labeled = balance(&data.labeled, 100, seed).unwrap();
            assert_eq!(data.labeled.len(), 900);
            assert_eq!(data.unlabeled.len(), 4500);
            assert_eq!(data.test.len(), 900);

            // VAE pretraining on the labeled maps plus part of the pool.
            let images: Vec<Tensor> = data
                .labeled
                .iter()
                .map(|m| m.to_tensor())
                .chain(data.unlabeled.iter().take(1800).map(|u| u.map.to_tensor()))
                .collect();
            let (vae, _) = pretrain_vae(
                &images,
                &VaeConfig::default(),
                &VaeTrainConfig { epochs: 3, seed, ..VaeTrainConfig::default() },
            )
            .unwrap();

            // Teacher, shared by both student variants.
            let train = TrainConfig { epochs: 10, seed, ..TrainConfig::default() };
            let mut teacher = Classifier::new(NetworkConfig::default(), seed).unwrap();
            train_supervised(&mut teacher, None, &data.labeled, &train).unwrap();
            let teacher_metrics = evaluate(&teacher, None, &data.test).unwrap();

            let scored = score_unlabeled(&teacher, None, &data.unlabeled).unwrap();
            let selected = select_topk(&scored, 50, 0.9);
            let by_id: std::collections::BTreeMap<&str, &wafer_ssl::data::UnlabeledExample> =
                data.unlabeled.iter().map(|u| (u.map.id.as_str(), u)).collect();
            let pl_correct = selected
                .iter()
                .filter(|p| {
                    by_id[p.example_id.as_str()].true_label_for_evaluation()
                        == Some(p.predicted_class)
                })
                .count();
            let pseudo_label_accuracy = pl_correct as f64 / selected.len() as f64;
            let student_set =
                build_student_set(&data.labeled, &selected, &data.unlabeled).unwrap();

            let run_student = |fusion: FusionPoint| {
                let cfg = NetworkConfig { fusion_point: fusion, ..NetworkConfig::default() };
                let vae_opt = if fusion == FusionPoint::None { None } else { Some(&vae) };
                let (mut student, _) =
                    train_student(&cfg, vae_opt, &student_set, &train).unwrap();
                fine_tune(&mut student, vae_opt, &data.labeled, 2, &train).unwrap();
                evaluate(&student, vae_opt, &data.test).unwrap()
            };
            let fused = run_student(FusionPoint::AfterStage2);
            let baseline = run_student(FusionPoint::None);
            eprintln!(
                "benchmark: seed {seed} — teacher acc {:.4}, fused F1 {:.4}, baseline F1 {:.4}, pseudo-label acc {:.4}",
                teacher_metrics.accuracy,
                fused.macro_f1,
                baseline.macro_f1,
                pseudo_label_accuracy
            );
            seeds.push(SeedOutcome {
                teacher_accuracy: teacher_metrics.accuracy,
                fused_student_accuracy: fused.accuracy,
                fused_student_macro_f1: fused.macro_f1,
                baseline_student_macro_f1: baseline.macro_f1,
                pseudo_label_accuracy,
            });
        }
        Benchmark { seeds, elapsed_secs: start.elapsed().as_secs_f64() }
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_5_directional_fusion_benefit() {
    let bench = benchmark();
    let fused_f1 = mean(bench.seeds.iter().map(|s| s.fused_student_macro_f1));
    let baseline_f1 = mean(bench.seeds.iter().map(|s| s.baseline_student_macro_f1));
    let student_acc = mean(bench.seeds.iter().map(|s| s.fused_student_accuracy));
    let teacher_acc = mean(bench.seeds.iter().map(|s| s.teacher_accuracy));
    let ok = fused_f1 >= baseline_f1 - 0.005
        && student_acc >= teacher_acc - 0.01
        && bench.elapsed_secs < 1800.0;
    println!(
        "criterion 5 detail: fused F1 {fused_f1:.4}, baseline F1 {baseline_f1:.4}, \
         student acc {student_acc:.4}, teacher acc {teacher_acc:.4}, {:.0}s",
        bench.elapsed_secs
    );
    report(5, "directional fusion benefit", ok);
}

#[test]
fn criterion_6_confidence_filter() {
    let bench = benchmark();
    let wins = bench
        .seeds
        .iter()
        .filter(|s| s.pseudo_label_accuracy >= s.teacher_accuracy)
        .count();
    println!("criterion 6 detail: pseudo-label accuracy beats teacher on {wins}/3 seeds");
    report(6, "confidence filter quality", wins >= 2);
}

// ── criterion 7: imbalance handling ──────────────────────────────────

#[test]
fn criterion_7_imbalance_handling() {
    // Paper-shaped skew: 85% defect-free, 0.3% Donut, 0.1% Near-full.
    let counts: [usize; NUM_CLASSES] = [244, 30, 244, 243, 243, 243, 243, 10, 8500];
    assert_eq!(counts.iter().sum::<usize>(), 10_000);
    let raw = generate_batch(&counts, 27, 0.05, 321).unwrap();
    let test = generate_batch(&[90; NUM_CLASSES], 27, 0.05, 654).unwrap();

    let mut majority = 0usize;
    for seed in [1u64, 2, 3] {
        let balanced = balance(&raw, 200, seed).unwrap();
        let hist = class_histogram(&balanced);
        assert!(
            (0..NUM_CLASSES).all(|c| hist.get(&c) == Some(&200)),
            "balanced histogram not uniform: {hist:?}"
        );

        let mut bal_teacher = Classifier::new(NetworkConfig::default(), seed).unwrap();
        train_supervised(
            &mut bal_teacher,
            None,
            &balanced,
            &TrainConfig { epochs: 6, seed, ..TrainConfig::default() },
        )
        .unwrap();
        let bal_metrics = evaluate(&bal_teacher, None, &test).unwrap();

        let mut raw_teacher = Classifier::new(NetworkConfig::default(), seed).unwrap();
        train_supervised(
            &mut raw_teacher,
            None,
            &raw,
            &TrainConfig { epochs: 2, seed, ..TrainConfig::default() },
        )
        .unwrap();
        let raw_metrics = evaluate(&raw_teacher, None, &test).unwrap();

        eprintln!(
            "imbalance: seed {seed} — balanced macro-recall {:.4}, raw macro-recall {:.4}",
            bal_metrics.macro_recall, raw_metrics.macro_recall
        );
        if bal_metrics.macro_recall > raw_metrics.macro_recall {
            majority += 1;
        }
    }
    report(7, "imbalance handling", majority >= 2);
}
