mod common;

use common::random_tensor;
use groupmamba::model::{
    count_flops, count_params, read_checkpoint, save_checkpoint, load_checkpoint, write_checkpoint,
    GroupMambaModel, ModelConfig,
};
use groupmamba::layers::Cam;
use groupmamba::numerics::{Graph, Rng, Tensor};
use groupmamba::Error;

fn micro(seed: u64) -> GroupMambaModel<f32> {
    GroupMambaModel::build(&ModelConfig::micro(), &Rng::new(seed)).unwrap()
}

fn bits<T: groupmamba::Scalar>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.f64().to_bits()).collect()
}

#[test]
fn micro_forward_shape_and_purity() {
    let m = micro(1);
    let img = random_tensor(&mut Rng::new(2), &[1, 32, 32, 3], 1.0).cast::<f32>();
    let mut two = img.data().to_vec();
    two.extend_from_slice(img.data());
    let batch = Tensor::new(&[2, 32, 32, 3], two).unwrap();
    let logits = m.logits(&batch).unwrap();
    assert_eq!(logits.shape(), &[2, 10]);
    assert!(logits.is_finite());
    assert_eq!(logits.data()[..10], logits.data()[10..]);
}

#[test]
fn batch_permutation_permutes_logits() {
    let m = micro(3);
    let x = random_tensor(&mut Rng::new(4), &[3, 32, 32, 3], 1.0).cast::<f32>();
    let per = 32 * 32 * 3;
    let order = [2, 0, 1];
    let mut shuffled = Vec::new();
    for &i in &order {
        shuffled.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let a = m.logits(&x).unwrap();
    let b = m.logits(&Tensor::new(&[3, 32, 32, 3], shuffled).unwrap()).unwrap();
    for (row, &src) in order.iter().enumerate() {
        for k in 0..10 {
            assert_eq!(b.get(&[row, k]).to_bits(), a.get(&[src, k]).to_bits());
        }
    }
}

#[test]
fn same_seed_builds_identical_parameters() {
    let (a, b, c) = (micro(7), micro(7), micro(8));
    for ((ea, eb), ec) in a.store.entries().iter().zip(b.store.entries()).zip(c.store.entries()) {
        assert_eq!(ea.name, eb.name);
        assert_eq!(bits(&ea.value), bits(&eb.value));
        let _ = ec;
    }
    let differs = a
        .store
        .entries()
        .iter()
        .zip(c.store.entries())
        .any(|(x, y)| bits(&x.value) != bits(&y.value));
    assert!(differs);
}

#[test]
fn stage_resolutions_follow_the_hierarchy() {
    let m = micro(1);
    let mut g = Graph::inference();
    let x = g.constant(Tensor::<f32>::zeros(&[1, 64, 64, 3]));
    let tr = m.forward_traced(&mut g, x).unwrap();
    let shapes: Vec<_> = tr.stages.iter().map(|&s| g.shape(s).to_vec()).collect();
    assert_eq!(shapes, [[1, 16, 16, 16], [1, 8, 8, 32], [1, 4, 4, 64], [1, 2, 2, 128]]);
}

#[test]
fn tiny_widths_at_224() {
    let cfg = ModelConfig {
        stage_depths: vec![1, 1, 1, 1],
        num_classes: 10,
        ..ModelConfig::tiny()
    };
    let m = GroupMambaModel::<f32>::build(&cfg, &Rng::new(0)).unwrap();
    let mut g = Graph::inference();
    let x = g.constant(Tensor::<f32>::zeros(&[1, 224, 224, 3]));
    let tr = m.forward_traced(&mut g, x).unwrap();
    let shapes: Vec<_> = tr.stages.iter().map(|&s| g.shape(s).to_vec()).collect();
    assert_eq!(shapes, [[1, 56, 56, 96], [1, 28, 28, 192], [1, 14, 14, 368], [1, 7, 7, 760]]);
}

#[test]
fn bad_inputs_are_rejected() {
    let m = micro(1);
    assert!(matches!(m.logits(&Tensor::zeros(&[1, 48, 32, 3])), Err(Error::Shape(_))));
    assert!(matches!(m.logits(&Tensor::zeros(&[1, 32, 32, 4])), Err(Error::Shape(_))));
    let bad = ModelConfig {
        stage_dims: vec![16, 30, 64, 128],
        ..ModelConfig::micro()
    };
    assert!(matches!(GroupMambaModel::<f32>::build(&bad, &Rng::new(0)), Err(Error::Config(_))));
    assert!(ModelConfig::by_name("huge").is_err());
}

#[test]
fn closed_form_param_count_matches_buffers() {
    for name in ["micro", "tiny", "small", "base"] {
        let cfg = ModelConfig::by_name(name).unwrap();
        let m = GroupMambaModel::<f32>::build(&cfg, &Rng::new(0)).unwrap();
        let counted = count_params(&cfg).unwrap();
        assert_eq!(counted.total, m.num_params(), "{name}");
        assert_eq!(counted.stem, m.store.num_scalars_with_prefix("stem."));
        assert_eq!(counted.head, m.store.num_scalars_with_prefix("head."));
    }
}

#[test]
fn head_only_change_in_class_count() {
    for base in [ModelConfig::micro(), ModelConfig::tiny()] {
        let c4 = *base.stage_dims.last().unwrap();
        let at = |k| count_params(&ModelConfig { num_classes: k, ..base.clone() }).unwrap().total;
        assert_eq!(at(20) - at(10), c4 * 10 + 10);
    }
}

#[test]
fn analytic_macs_match_instrumented_forward() {
    let m = micro(1);
    for (b, side) in [(1, 32), (2, 32), (1, 64)] {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::<f32>::zeros(&[b, side, side, 3]));
        m.forward(&mut g, x).unwrap();
        let analytic = count_flops(&m.config, side, side).unwrap();
        assert_eq!(g.macs(), b as u64 * analytic.macs, "{b}×{side}²");
        assert_eq!(analytic.flops, 2 * analytic.macs);
    }
}

#[test]
fn macs_scale_with_token_count() {
    let cfg = ModelConfig::tiny();
    let (a, b) = (count_flops(&cfg, 224, 224).unwrap(), count_flops(&cfg, 448, 448).unwrap());
    assert_eq!(b.stem_macs, 4 * a.stem_macs);
    // every stage term is per token except the CAM bottleneck, which runs once per image
    for (i, (x, y)) in a.stage_macs.iter().zip(&b.stage_macs).enumerate() {
        let cam = cfg.stage_depths[i] as u64 * Cam::macs(cfg.stage_dims[i], cfg.layer.cam_reduction);
        assert_eq!(y - cam, 4 * (x - cam));
    }
    assert_eq!(a.head_macs, b.head_macs);
    assert!(count_flops(&cfg, 100, 100).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = micro(5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gmba");
    save_checkpoint(&m, &path).unwrap();
    let back: GroupMambaModel<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, m.config);
    for (a, b) in m.store.entries().iter().zip(back.store.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    assert_eq!(write_checkpoint(&back), std::fs::read(&path).unwrap());

    let m64 = GroupMambaModel::<f64>::build(&ModelConfig::micro(), &Rng::new(5)).unwrap();
    let bytes = write_checkpoint(&m64);
    let back64: GroupMambaModel<f64> = read_checkpoint(&bytes).unwrap();
    assert_eq!(write_checkpoint(&back64), bytes);
}

#[test]
fn malformed_checkpoints_name_the_offset() {
    let bytes = write_checkpoint(&micro(1));
    let err = |b: &[u8]| match read_checkpoint::<f32>(b) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected format error, got {:?}", other.map(|_| ())),
    };
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(err(&bad), 0);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(err(&bad), 4);
    assert!(err(&bytes[..bytes.len() - 3]) < bytes.len() as u64);
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(err(&long), bytes.len() as u64);
    assert!(matches!(read_checkpoint::<f64>(&bytes), Err(Error::Format { offset: 8, .. })));
}
