use super::*;
use crate::gradcheck::relative_error;
use crate::net::{ParamId, ParamRole};
use crate::volume::LabelMask;
use rand::Rng;

fn ball(meta: &GridMeta, c: [f64; 3], r: f64) -> LabelMask {
    LabelMask::from_predicate(*meta, |p| {
        (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2) <= r * r
    })
}

fn image(meta: &GridMeta, c: [f64; 3], r: f64, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(*meta, |p| {
        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
        1.0 / (1.0 + (d - r).exp()) + 0.05 * rng.gen_range(-1.0..1.0)
    })
}

/// Entry `i` has `counts[i]` label pairs; moving balls are shifted by one
/// voxel against the fixed ones.
fn corpus(n: usize, counts: &[usize]) -> TrainingCorpus {
    let meta = GridMeta::cube(n);
    let h = n as f64 / 2.0;
    let entries = counts
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let cf = [h, h, h];
            let cm = [h + 1.0 + i as f64 * 0.5, h, h - 0.5];
            let labels = (0..m)
                .map(|j| {
                    let off = [j as f64 - 1.0, 1.0 - j as f64, 0.0];
                    let sub = |c: [f64; 3]| [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
                    LabelPair {
                        moving: ball(&meta, sub(cm), 2.0 + j as f64 * 0.5),
                        fixed: ball(&meta, sub(cf), 2.0 + j as f64 * 0.5),
                    }
                })
                .collect();
            CorpusEntry {
                case_id: i,
                moving: image(&meta, cm, h / 2.0, 2 * i as u64),
                fixed: image(&meta, cf, h / 2.0, 2 * i as u64 + 1),
                labels,
            }
        })
        .collect();
    TrainingCorpus::new(entries).unwrap()
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        n0: 2,
        ..NetworkConfig::desk()
    }
}

fn randomize_heads<T: Real>(net: &mut RegNet<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.store_mut().iter_mut() {
        if matches!(p.role, ParamRole::HeadWeight | ParamRole::HeadBias) {
            p.value.iter_mut().for_each(|v| *v = T::lit(rng.gen_range(-scale..scale)));
        }
    }
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        learning_rate: 1e-3,
        iterations: 3,
        seed: 7,
        deterministic: true,
        ..TrainConfig::default()
    }
}

use crate::real::Real;

#[test]
fn defaults_follow_the_baseline() {
    let c = TrainConfig::default();
    assert_eq!((c.batch_size, c.learning_rate, c.alpha), (4, 1e-5, 0.5));
    assert_eq!(c.similarity, SimilarityKind::MultiscaleDice);
    assert_eq!(c.regularizer, RegularizerKind::Bending);
    assert!((c.effective_learning_rate(HeadKind::Affine) - 1e-6).abs() < 1e-20);
    assert_eq!(c.effective_learning_rate(HeadKind::Ddf), 1e-5);
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), c);
    assert_eq!(serde_json::from_str::<TrainConfig>("{}").unwrap(), c);
}

#[test]
fn trace_csv_has_header_and_rows() {
    let rows = [
        TraceRow { iteration: 0, similarity: 0.5, regularizer: 0.25, total: -0.375 },
        TraceRow { iteration: 1, similarity: 0.75, regularizer: 0.0, total: -0.75 },
    ];
    let s = trace_csv(&rows);
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines, ["iteration,similarity,regularizer,total", "0,0.5,0.25,-0.375", "1,0.75,0,-0.75"]);
}

#[test]
fn same_seed_gives_identical_parameters() {
    let c = corpus(16, &[1, 2]);
    let run = || {
        let mut t = Trainer::new(RegNet::new(tiny_net(), 3).unwrap(), quick_cfg(), &c).unwrap();
        t.run_until(3, None).unwrap();
        (t.trace().to_vec(), t.into_net().into_store())
    };
    let (ta, a) = run();
    let (tb, b) = run();
    assert_eq!(ta, tb);
    for (p, q) in a.iter().zip(b.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
        assert_eq!(p.m, q.m);
    }
    // Something was learned.
    let fresh = RegNet::new(tiny_net(), 3).unwrap().into_store();
    assert!(a.iter().zip(fresh.iter()).any(|(p, q)| p.value != q.value));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let c = corpus(16, &[2, 1]);
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(RegNet::new(tiny_net(), 4).unwrap(), quick_cfg(), &c).unwrap();
    full.run_until(3, None).unwrap();

    let mut first = Trainer::new(RegNet::new(tiny_net(), 4).unwrap(), quick_cfg(), &c).unwrap();
    first.run_until(2, None).unwrap();
    let ck = dir.path().join("mid");
    first.save(&ck).unwrap();
    let mut resumed = Trainer::resume(&ck, &c).unwrap();
    assert_eq!(resumed.iteration(), 2);
    resumed.run_until(3, None).unwrap();
    for (p, q) in full.net().store().iter().zip(resumed.net().store().iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    assert_eq!(full.trace()[2], resumed.trace()[0]);
}

#[test]
fn run_writes_checkpoints_and_trace() {
    let c = corpus(16, &[1]);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        iterations: 4,
        ..quick_cfg()
    };
    let out = train(&c, &tiny_net(), &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.trace.len(), 4);
    for name in ["checkpoint_000002.json", "checkpoint_000004.raw", "final.json", "loss.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let (m, _) = load_checkpoint(dir.path().join("final")).unwrap();
    assert_eq!(m.iteration, 4);
    assert_eq!(m.train_cases, vec![0]);
}

#[test]
fn non_finite_parameters_abort_as_divergence() {
    let c = corpus(16, &[1]);
    let mut net = RegNet::new(tiny_net(), 0).unwrap();
    let id = net.store().find("head0.bias").unwrap();
    net.store_mut().get_mut(id).value[0] = f32::NAN;
    let before = net.store().get(id).value.clone();
    let mut t = Trainer::new(net, quick_cfg(), &c).unwrap();
    let err = t.step();
    assert!(matches!(err, Err(Error::Diverged { iteration: 0, .. })), "{err:?}");
    assert_eq!(t.iteration(), 0);
    assert!(t.trace().is_empty());
    let after = &t.net().store().get(id).value;
    assert!(after[0].is_nan() && after[1..] == before[1..]);
}

#[test]
fn single_pair_estimator_is_exact_every_draw() {
    let c = corpus(16, &[1]).cast::<f64>();
    let mut net = RegNet::new(tiny_net(), 1).unwrap().cast::<f64>();
    randomize_heads(&mut net, 2, 0.05);
    let r = unbiasedness_check(&net, &c, &MultiscaleConfig::default(), &LossSettings::default(), 3, 50, 0).unwrap();
    assert_eq!(r.components_tested, 0);
    assert_eq!(r.degenerate_mismatches, 0);
    assert!(r.weight_error == 0.0 && r.enumeration_error < 1e-12);
    for (m, e) in r.monte_carlo_mean.iter().zip(&r.exact) {
        assert!((m - e).abs() <= 1e-12 * e.abs().max(1e-30));
    }
}

#[test]
fn enumeration_recovers_two_stage_weights() {
    // Synthetic slot gradients make the check independent of the network.
    let counts = [1, 3];
    let grads: Vec<(Slot, Vec<f64>)> = slot_distribution(&counts)
        .into_iter()
        .enumerate()
        .map(|(i, (s, _))| (s, vec![i as f64, (i * i) as f64 - 1.5, 10f64.powi(i as i32)]))
        .collect();
    for k in 1..=4 {
        let (mean, marginal) = enumerate_expected_gradient(&counts, &grads, k);
        let want = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        for ((_, p), w) in marginal.iter().zip(want) {
            assert!((p - w).abs() < 1e-12);
        }
        let exact: Vec<f64> = (0..3).map(|c| (0..4).map(|i| want[i] * grads[i].1[c]).sum()).collect();
        for (a, b) in mean.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-10, "k={k}: {a} vs {b}");
        }
    }
}

#[test]
fn loss_gradient_end_to_end_matches_finite_differences() {
    let c = corpus(16, &[1, 2]).cast::<f64>();
    let meta = *c.meta();
    let mut net = RegNet::new(tiny_net(), 21).unwrap().cast::<f64>();
    randomize_heads(&mut net, 22, 0.05);
    let filters = MultiscaleConfig::default().filters::<f64>(&meta).unwrap();
    let settings = LossSettings::default();
    let slots = [(0usize, 0usize), (1, 1)];
    let pairs: Vec<(&Volume<f64>, &Volume<f64>)> =
        slots.iter().map(|&(e, _)| (&c.entries()[e].moving, &c.entries()[e].fixed)).collect();
    let input = pack_pairs(&pairs).unwrap();
    let loss = |net: &RegNet<f64>| -> (f64, Vec<Vec<f64>>, crate::net::ForwardCache<f64>) {
        let out = net.forward(&input, &meta, BnMode::Batch).unwrap();
        let mut total = 0.0;
        let mut d = Vec::new();
        for (ddf, &(e, l)) in out.ddfs.iter().zip(&slots) {
            let lp = &c.entries()[e].labels[l];
            let s = slot_loss(
                ddf,
                LabelInput::Raw(lp.moving.data()),
                LabelInput::Raw(lp.fixed.data()),
                &filters,
                &settings,
            )
            .unwrap();
            total += s.total / 2.0;
            d.push(s.d_ddf.iter().map(|g| g / 2.0).collect());
        }
        (total, d, out.cache)
    };
    let (_, d, cache) = loss(&net);
    let grads = net.backward(&cache, &d);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let trainable: Vec<usize> = (0..net.store().len()).filter(|&i| net.store().get(ParamId(i)).trainable()).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let h = 1e-7;
    for _ in 0..20 {
        let i = trainable[rng.gen_range(0..trainable.len())];
        let j = rng.gen_range(0..net.store().get(ParamId(i)).len());
        let orig = net.store().get(ParamId(i)).value[j];
        net.store_mut().get_mut(ParamId(i)).value[j] = orig + h;
        let lp = loss(&net).0;
        net.store_mut().get_mut(ParamId(i)).value[j] = orig - h;
        let lm = loss(&net).0;
        net.store_mut().get_mut(ParamId(i)).value[j] = orig;
        analytic.push(grads.0[i].get(j).copied().unwrap_or(0.0));
        numeric.push((lp - lm) / (2.0 * h));
    }
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-3, "relative error {err}\n{analytic:?}\n{numeric:?}");
}
