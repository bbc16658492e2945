use groupmamba::data::{synthesize, LabeledImage, Normalization, SyntheticSpec};
use groupmamba::model::{GroupMambaModel, ModelConfig};
use groupmamba::numerics::{grad_check, GradCheckOptions, Graph, ParamStore, Rng, Tensor};
use groupmamba::training::{
    argmax_rows, cross_entropy, distilled_loss, distilled_loss_node, evaluate, map_ordered, train, train_teacher,
    AdamW, AdamWConfig, Classifier, CosineSchedule, DistillLossInput, TeacherConfig, TeacherLogits, TrainConfig,
};
use groupmamba::Error;
use proptest::prelude::*;

fn t2(rows: usize, k: usize, v: &[f64]) -> Tensor<f64> {
    Tensor::new(&[rows, k], v.to_vec()).unwrap()
}

fn random_logits(seed: u64, rows: usize, k: usize, spread: f64) -> Tensor<f64> {
    let mut r = Rng::new(seed);
    Tensor::from_fn(&[rows, k], |_| r.normal() * spread)
}

/// log Σ exp, shifted by the max, in plain f64.
fn ref_ce(row: &[f64], y: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - row[y]
}

#[test]
fn uniform_logits_give_ln_k() {
    for k in [2, 10, 1000] {
        let z = Tensor::<f64>::full(&[3, k], 0.7);
        let l = cross_entropy(&z, &[0, k - 1, k / 2], 0.0).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-12, "{k}: {l}");
    }
}

#[test]
fn confident_logits_keep_precision() {
    let l = cross_entropy(&t2(1, 2, &[10.0, -10.0]), &[0], 0.0).unwrap();
    let want = (-20f64).exp().ln_1p();
    assert!(((l - want) / want).abs() < 1e-9, "{l} vs {want}");
    assert!((l - 2.06e-9).abs() < 1e-11);
}

#[test]
fn smoothing_decomposes() {
    let z = random_logits(1, 5, 7, 2.0);
    let y = [0, 3, 6, 2, 2];
    let s = 0.1;
    let got = cross_entropy(&z, &y, s).unwrap();
    let want: f64 = (0..5)
        .map(|i| {
            let row = &z.data()[i * 7..(i + 1) * 7];
            (1.0 - s) * ref_ce(row, y[i]) + s * (0..7).map(|j| ref_ce(row, j)).sum::<f64>() / 7.0
        })
        .sum::<f64>()
        / 5.0;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn out_of_range_label_is_an_error() {
    assert!(cross_entropy(&t2(1, 2, &[0.0, 0.0]), &[2], 0.0).is_err());
    assert!(cross_entropy(&t2(1, 2, &[0.0, 0.0]), &[0, 1], 0.0).is_err());
}

#[test]
fn argmax_ties_go_low() {
    let z = t2(3, 3, &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0, -1.0, -1.0, -1.0]);
    assert_eq!(argmax_rows(&z).unwrap(), vec![0, 1, 0]);
}

#[test]
fn distill_worked_example() {
    let zs = t2(1, 2, &[1.0, 0.0]);
    let zt = t2(1, 2, &[0.0, 2.0]);
    let l = distilled_loss(&DistillLossInput {
        student_logits: &zs,
        teacher_logits: &zt,
        labels: &[0],
        alpha: 0.5,
    })
    .unwrap();
    let want = 0.5 * (-1f64).exp().ln_1p() + 0.5 * 1f64.exp().ln_1p();
    assert!((l - want).abs() < 1e-12, "{l} vs {want}");
    assert!((l - 0.81326).abs() < 1e-5);
}

#[test]
fn distill_endpoints() {
    let zs = random_logits(2, 6, 5, 1.5);
    let zt = random_logits(3, 6, 5, 1.5);
    let y = [1, 4, 0, 0, 2, 3];
    let at = |alpha, zt: &Tensor<f64>| {
        distilled_loss(&DistillLossInput {
            student_logits: &zs,
            teacher_logits: zt,
            labels: &y,
            alpha,
        })
        .unwrap()
    };
    assert_eq!(at(1.0, &zt), cross_entropy(&zs, &y, 0.0).unwrap());
    // teacher agrees with the labels
    let agree = Tensor::from_fn(&[6, 5], |i| if i % 5 == y[i / 5] { 3.0 } else { 0.0 });
    assert_eq!(at(0.0, &agree), at(1.0, &agree));
    assert!(distilled_loss(&DistillLossInput {
        student_logits: &zs,
        teacher_logits: &zt,
        labels: &y,
        alpha: 1.5,
    })
    .is_err());
    let narrow = random_logits(3, 6, 4, 1.0);
    assert!(matches!(
        distilled_loss(&DistillLossInput {
            student_logits: &zs,
            teacher_logits: &narrow,
            labels: &y,
            alpha: 0.5,
        }),
        Err(Error::Shape(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distill_is_linear_in_alpha(seed in 0u64..1000, rows in 1usize..6, k in 2usize..8) {
        let zs = random_logits(seed, rows, k, 3.0);
        let zt = random_logits(seed + 1, rows, k, 3.0);
        let y: Vec<usize> = (0..rows).map(|i| (i * 7 + seed as usize) % k).collect();
        let l = |alpha| distilled_loss(&DistillLossInput {
            student_logits: &zs,
            teacher_logits: &zt,
            labels: &y,
            alpha,
        }).unwrap();
        let (l0, l1) = (l(0.0), l(1.0));
        for a in [0.0, 0.25, 0.5, 0.75, 1.0] {
            prop_assert!((l(a) - (a * l1 + (1.0 - a) * l0)).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_shape(peak in 1e-5f64..1.0, warm in 0usize..20, extra in 1usize..200) {
        let s = CosineSchedule { peak, min: 0.01 * peak, warmup_steps: warm, total_steps: warm + extra };
        for t in 0..warm {
            prop_assert!(s.lr(t) <= s.lr(t + 1) + 1e-15);
        }
        for t in warm..warm + extra {
            prop_assert!(s.lr(t + 1) <= s.lr(t) + 1e-15);
            prop_assert!(s.lr(t) >= s.min - 1e-15 && s.lr(t) <= peak + 1e-15);
        }
        prop_assert!((s.lr(warm) - peak).abs() < 1e-12 * peak.max(1.0));
        prop_assert!((s.lr(warm + extra) - s.min).abs() < 1e-12);
    }

    #[test]
    fn ordered_map_matches_sequential(n in 0usize..40, threads in 1usize..6) {
        let par = map_ordered(n, threads, |i| i * i + 1);
        let seq: Vec<usize> = (0..n).map(|i| i * i + 1).collect();
        prop_assert_eq!(par, seq);
    }
}

#[test]
fn distill_gradient_matches_differences() {
    let zt = random_logits(11, 4, 6, 2.0);
    let teacher = argmax_rows(&zt).unwrap();
    let y = [5, 0, 2, 2];
    for smoothing in [0.0, 0.1] {
        let r = grad_check(
            |g, v| distilled_loss_node(g, v[0], &y, Some(&teacher), 0.3, smoothing, 4),
            &[random_logits(10, 4, 6, 2.0)],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passes(1e-6), "{:?}", r.worst());
    }

    // teacher logits are a leaf of the graph but only their argmax is used
    let mut g = Graph::new();
    let s = g.leaf(random_logits(10, 4, 6, 2.0));
    let t = g.leaf(zt.clone());
    let labels = argmax_rows(g.value(t)).unwrap();
    let l = distilled_loss_node(&mut g, s, &y, Some(&labels), 0.5, 0.0, 4).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(t).data().iter().all(|&v| v == 0.0));
    assert!(grads.get(s).data().iter().any(|&v| v != 0.0));
}

fn scalar_store(p: f64, decay: bool) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("p", Tensor::scalar(p), decay);
    s
}

#[test]
fn adamw_scalar_hand_steps() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        clip_norm: None,
        ..AdamWConfig::default()
    };
    let mut store = scalar_store(1.0, true);
    let mut opt = AdamW::new(&store, cfg.clone());
    let lr = 0.1;

    // first step: m̂ = g, v̂ = g², update = lr · g / (|g| + eps)
    let g1 = 0.3;
    opt.update(&mut store, &[Some(Tensor::scalar(g1))], lr).unwrap();
    let p1 = 1.0 - lr * g1 / (g1.abs() + cfg.eps);
    assert!((store.entries()[0].value.data()[0] - p1).abs() < 1e-15);
    assert!((p1 - (1.0 - lr)).abs() < 1e-6);

    let g2 = -2.0;
    opt.update(&mut store, &[Some(Tensor::scalar(g2))], lr).unwrap();
    let m = 0.9 * (0.1 * g1) + 0.1 * g2;
    let v = 0.999 * (0.001 * g1 * g1) + 0.001 * g2 * g2;
    let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
    let p2 = p1 - lr * mh / (vh.sqrt() + cfg.eps);
    assert!((store.entries()[0].value.data()[0] - p2).abs() < 1e-14);
    assert_eq!(opt.step, 2);
}

#[test]
fn adamw_decay_is_decoupled_and_flagged() {
    let cfg = AdamWConfig {
        weight_decay: 0.5,
        clip_norm: None,
        ..AdamWConfig::default()
    };
    let mut store = ParamStore::new();
    store.add("w", Tensor::<f64>::scalar(2.0), true);
    store.add("b", Tensor::scalar(2.0), false);
    let mut opt = AdamW::new(&store, cfg);
    opt.update(&mut store, &[None, None], 0.1).unwrap();
    assert!((store.entries()[0].value.data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    assert_eq!(store.entries()[1].value.data()[0], 2.0);
}

#[test]
fn adamw_clips_global_norm() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        clip_norm: Some(1.0),
        ..AdamWConfig::default()
    };
    let mut store = ParamStore::new();
    store.add("a", Tensor::<f64>::scalar(0.0), false);
    store.add("b", Tensor::scalar(0.0), false);
    let mut opt = AdamW::new(&store, cfg);
    let stats = opt
        .update(&mut store, &[Some(Tensor::scalar(3.0)), Some(Tensor::scalar(4.0))], 1.0)
        .unwrap();
    assert_eq!(stats.grad_norm, 5.0);
    assert!(stats.clipped);
    assert!((opt.m[0].data()[0] - 0.1 * 0.6).abs() < 1e-15);
    assert!((opt.m[1].data()[0] - 0.1 * 0.8).abs() < 1e-15);
    assert!(opt.update(&mut store, &[None], 1.0).is_err());
}

fn synthetic(n: usize, seed: u64) -> Vec<LabeledImage> {
    synthesize(&SyntheticSpec {
        seed,
        n,
        classes: 10,
        size: 32,
    })
    .unwrap()
}

fn micro() -> GroupMambaModel<f32> {
    GroupMambaModel::build(&ModelConfig::micro(), &Rng::new(0)).unwrap()
}

fn short_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn bits(store: &ParamStore<f32>) -> Vec<u32> {
    store.entries().iter().flat_map(|e| e.value.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn zero_lr_leaves_parameters_unchanged() {
    let data = synthetic(16, 1);
    let mut m = micro();
    let before = bits(&m.store);
    let cfg = TrainConfig { lr: 0.0, ..short_cfg() };
    let rep = train(&mut m, &data, None, None, &Normalization::IDENTITY, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(rep.steps, 1);
    assert_eq!(bits(&m.store), before);
}

#[test]
fn alpha_one_matches_plain_cross_entropy_bitwise() {
    let data = synthetic(32, 2);
    let cfg = TrainConfig { alpha: 1.0, epochs: 2, ..short_cfg() };
    let teacher = TeacherLogits::from_tensor(&random_logits(5, 32, 10, 1.0)).unwrap();
    let mut a = micro();
    let mut b = micro();
    let norm = Normalization::IDENTITY;
    let ra = train(&mut a, &data, None, Some(&teacher), &norm, &cfg, |_, _| Ok(())).unwrap();
    let rb = train(&mut b, &data, None, None, &norm, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(bits(&a.store), bits(&b.store));

    let cfg = TrainConfig { alpha: 0.5, ..cfg };
    let mut c = micro();
    let rc = train(&mut c, &data, None, Some(&teacher), &norm, &cfg, |_, _| Ok(())).unwrap();
    assert_ne!(rc.epochs[0].train_loss_mean, rb.epochs[0].train_loss_mean);
}

#[test]
fn thread_count_does_not_change_results() {
    let data = synthetic(24, 4);
    let run = |threads| {
        let mut m = micro();
        let cfg = TrainConfig { threads, ..short_cfg() };
        let r = train(&mut m, &data, Some(&data[..8]), None, &Normalization::IDENTITY, &cfg, |_, _| Ok(())).unwrap();
        (r, bits(&m.store))
    };
    let (r1, p1) = run(1);
    let (r2, p2) = run(2);
    assert_eq!(r1, r2);
    assert_eq!(p1, p2);
    assert_eq!(run(1).1, p1);
}

#[test]
fn non_finite_loss_reports_divergence() {
    let mut data = synthetic(8, 5);
    data[3].pixels[0] = f32::NAN;
    let mut m = micro();
    let err = train(&mut m, &data, None, None, &Normalization::IDENTITY, &short_cfg(), |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 0, step: 0, .. }), "{err}");
}

#[test]
fn bad_inputs_are_rejected() {
    let mut m = micro();
    let norm = Normalization::IDENTITY;
    assert!(train(&mut m, &[], None, None, &norm, &short_cfg(), |_, _| Ok(())).is_err());
    let data = synthetic(8, 6);
    let wrong = TeacherLogits::from_tensor(&random_logits(1, 7, 10, 1.0)).unwrap();
    assert!(train(&mut m, &data, None, Some(&wrong), &norm, &short_cfg(), |_, _| Ok(())).is_err());
    let cfg = TrainConfig { label_smoothing: 1.0, ..short_cfg() };
    assert!(train(&mut m, &data, None, None, &norm, &cfg, |_, _| Ok(())).is_err());
}

#[test]
fn micro_overfits_64_samples() {
    let data = synthetic(64, 7);
    let norm = Normalization::fit(&data);
    let mut m = micro();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 32,
        lr: 2e-3,
        flip: false,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut seen = 0;
    let rep = train(&mut m, &data, None, None, &norm, &cfg, |r, _| {
        assert_eq!(r.epoch, seen);
        seen += 1;
        Ok(())
    })
    .unwrap();
    let acc = evaluate(&m, &data, &norm, 64, 1).unwrap();
    let first = rep.epochs[0].train_loss_mean;
    let last = rep.epochs.last().unwrap().train_loss_mean;
    assert!(acc > 0.9, "train accuracy {acc}, loss {first} -> {last}");
    assert!(last < first);
}

#[test]
fn teacher_learns_and_cache_round_trips() {
    let all = synthetic(240, 8);
    let (tr, ev) = groupmamba::data::split_shuffle(&all, 0.75, 0).unwrap();
    let norm = Normalization::fit(&tr);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 32,
        lr: 3e-3,
        seed: 2,
        ..TrainConfig::default()
    };
    let t = train_teacher::<f32, _>(&TeacherConfig::default(), &tr, Some(&ev), &norm, &cfg, |_, _| Ok(())).unwrap();
    let acc = evaluate(&t.net, &ev, &norm, 64, 1).unwrap();
    assert!(acc > 0.1, "teacher held-out accuracy {acc}");
    assert_eq!(t.cache.len(), tr.len());
    assert_eq!(t.net.num_classes(), 10);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.gmtl");
    t.cache.save(&path).unwrap();
    let back = TeacherLogits::load(&path).unwrap();
    let a: Vec<u32> = t.cache.logits().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u32> = back.logits().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);

    let recomputed: Vec<usize> = (0..back.len())
        .map(|i| {
            let row = back.row(i);
            (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    assert_eq!(back.argmax(), recomputed);
}

#[test]
fn teacher_cache_rejects_malformed_bytes() {
    let cache = TeacherLogits::new(3, vec![0.5; 6]).unwrap();
    let bytes = cache.to_bytes();
    assert_eq!(&bytes[..4], b"GMTL");
    assert_eq!(bytes.len(), 4 + 16 + 24);
    assert_eq!(TeacherLogits::from_bytes(&bytes).unwrap(), cache);
    assert!(matches!(TeacherLogits::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(TeacherLogits::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    let mut trailing = bytes;
    trailing.push(0);
    assert!(TeacherLogits::from_bytes(&trailing).is_err());
    assert!(TeacherLogits::new(3, vec![0.0; 7]).is_err());
}
