use maskpress_core::RetentionMask;
use maskpress_diffumask::toy::{toy_arch, toy_data};
use maskpress_diffumask::{checkpoint, train, Arch, MaskModel, Optimizer, StepMetrics, TrainConfig, TrainExample};

fn short_cfg() -> TrainConfig {
    TrainConfig { epochs: 1, warmup_steps: 5, seed: 3, ..Default::default() }
}

#[test]
fn one_epoch_is_one_step_per_pair() {
    let data = toy_data(6, 2, 1).unwrap();
    let model = MaskModel::new(toy_arch(), 0, 0.02).unwrap();
    let mut log = Vec::new();
    let out = train(model, &data.train, &data.heldout, &short_cfg(), Some(&mut log)).unwrap();
    assert_eq!(out.steps.len(), 6);
    assert_eq!(out.epochs.len(), 2);
    let lines: Vec<StepMetrics> =
        String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, out.steps);
    let first = String::from_utf8(serde_json::to_vec(&out.steps[0]).unwrap()).unwrap();
    assert!(first.starts_with("{\"step\":1,\"t\":"), "{first}");
    for s in &out.steps {
        assert!((0.0..=1.0).contains(&s.t));
        assert!(s.l_total.is_finite());
    }
}

#[test]
fn batches_divide_steps() {
    let data = toy_data(5, 1, 2).unwrap();
    let model = MaskModel::new(toy_arch(), 0, 0.02).unwrap();
    let cfg = TrainConfig { batch_size: 2, epochs: 2, ..short_cfg() };
    let out = train(model, &data.train, &[], &cfg, None).unwrap();
    assert_eq!(out.steps.len(), 6);
    assert!(out.epochs.iter().all(|e| e.heldout.is_none()));
}

#[test]
fn training_is_seed_deterministic_and_checkpoints_exactly() {
    let data = toy_data(4, 2, 3).unwrap();
    let run = |opt| {
        let model = MaskModel::new(toy_arch(), 9, 0.02).unwrap();
        let cfg = TrainConfig { epochs: 2, optimizer: opt, ..short_cfg() };
        train(model, &data.train, &data.heldout, &cfg, None).unwrap()
    };
    for opt in [Optimizer::default(), Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }] {
        let (a, b) = (run(opt), run(opt));
        assert_eq!(a.model, b.model);
        assert_eq!(a.steps, b.steps);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        checkpoint::save(&a.model, &p).unwrap();
        assert_eq!(checkpoint::load(&p).unwrap(), a.model);
        checkpoint::save(&b.model, &dir.path().join("n.ckpt")).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(dir.path().join("n.ckpt")).unwrap());
    }
}

#[test]
fn overlong_pairs_are_skipped() {
    let arch = Arch { max_seq_len: 6, ..Arch::tiny() };
    let model = MaskModel::new(arch, 0, 0.1).unwrap();
    let ex = |l: usize| TrainExample { x: vec![1; l], m: RetentionMask::new((0..l).map(|i| i % 2 == 0).collect()).unwrap() };
    let out = train(model, &[ex(4), ex(9), ex(6)], &[], &short_cfg(), None).unwrap();
    assert_eq!(out.skipped, 1);
    assert_eq!(out.steps.len(), 2);
}

#[test]
fn divergence_is_reported_with_last_good_model() {
    let arch = Arch::tiny();
    let model = MaskModel::new(arch, 0, 0.1).unwrap();
    let ex = TrainExample { x: vec![1, 2, 3], m: RetentionMask::new(vec![true, false, true]).unwrap() };
    let cfg = TrainConfig { lr: f64::MAX, warmup_steps: 0, ..short_cfg() };
    match train(model.clone(), &[ex.clone(), ex], &[], &cfg, None) {
        Err(maskpress_diffumask::Error::Diverged { last_good, .. }) => assert_eq!(*last_good, model),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn empty_or_invalid_training_is_rejected() {
    let model = MaskModel::new(Arch::tiny(), 0, 0.1).unwrap();
    assert!(train(model.clone(), &[], &[], &short_cfg(), None).is_err());
    let ex = TrainExample { x: vec![1], m: RetentionMask::ones(1) };
    assert!(train(model, &[ex], &[], &TrainConfig { alpha: 1.5, ..short_cfg() }, None).is_err());
}
