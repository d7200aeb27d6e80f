use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maskpress_diffumask::{compression_ratio, infer_mask, step_prune_set, Arch, InferenceConfig, MaskModel};

fn random_probs(rng: &mut ChaCha8Rng, l: usize, vocab: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(l * vocab);
    for _ in 0..l {
        let scale = rng.gen_range(0.1..25.0);
        let z: Vec<f64> = (0..vocab).map(|_| rng.gen::<f64>() * scale).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

fn subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|i| b.contains(i))
}

#[test]
fn single_step_monotone_in_k_and_tau() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (l, vocab, mask_id) = (40, 16, 15);
    let (mut grew_k, mut grew_tau) = (0, 0);
    for _ in 0..100 {
        let probs = random_probs(&mut rng, l, vocab);
        let visible: Vec<bool> = (0..l).map(|_| rng.gen_bool(0.8)).collect();
        for tau in [1e-4, 1e-3, 1e-2, 1e-1] {
            let k2 = step_prune_set(&probs, vocab, &visible, mask_id, 2, tau);
            let k4 = step_prune_set(&probs, vocab, &visible, mask_id, 4, tau);
            assert!(subset(&k2, &k4));
            grew_k += (k4.len() > k2.len()) as usize;
        }
        for k in [1, 2, 3, 4] {
            let hi = step_prune_set(&probs, vocab, &visible, mask_id, k, 1e-2);
            let lo = step_prune_set(&probs, vocab, &visible, mask_id, k, 1e-4);
            assert!(subset(&hi, &lo));
            grew_tau += (lo.len() > hi.len()) as usize;
        }
    }
    assert!(grew_k > 0 && grew_tau > 0);
}

fn model() -> MaskModel {
    let arch = Arch { max_seq_len: 64, ..Arch::tiny() };
    let mut m = MaskModel::new(arch, 4, 0.4).unwrap();
    let hb = m.segment("head.b").unwrap().offset;
    m.params_mut()[hb + arch.mask_id as usize] = 1.0;
    m
}

fn tokens(seed: u64, l: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..l).map(|_| rng.gen_range(0..11)).collect()
}

#[test]
fn tau_above_one_prunes_nothing() {
    let m = model();
    for seed in 0..20 {
        let x = tokens(seed, 5 + seed as usize);
        let cfg = InferenceConfig { tau: 1.0 + 1e-9, top_k: 12, ..Default::default() };
        let inf = infer_mask(&m, &x, &cfg).unwrap();
        assert_eq!(inf.compression_ratio(), 0.0);
        assert_eq!(inf.trace.len(), 1);
    }
}

#[test]
fn inference_prunes_deterministically_and_keeps_one() {
    let m = model();
    let x = tokens(1, 30);
    let cfg = InferenceConfig { top_k: 12, tau: 0.0, ..Default::default() };
    let a = infer_mask(&m, &x, &cfg).unwrap();
    let b = infer_mask(&m, &x, &cfg).unwrap();
    assert_eq!(a, b);
    // Everything qualifies, so only the spared token survives.
    assert_eq!(a.mask.retained_count(), 1);
    assert!(compression_ratio(&a.mask) > 0.9);
}

#[test]
fn per_step_cap_limits_each_step() {
    let m = model();
    let x = tokens(2, 30);
    let cfg = InferenceConfig { top_k: 12, tau: 0.0, per_step_cap: Some(3), steps: 4, ..Default::default() };
    let inf = infer_mask(&m, &x, &cfg).unwrap();
    assert_eq!(inf.trace.len(), 4);
    for st in &inf.trace {
        assert_eq!(st.pruned.len(), 3);
    }
    assert_eq!(inf.mask.retained_count(), 30 - 12);
}

#[test]
fn forced_steps_run_to_the_end() {
    let m = model();
    let x = tokens(3, 10);
    let cfg = InferenceConfig { tau: 2.0, steps: 5, force_all_steps: true, ..Default::default() };
    assert_eq!(infer_mask(&m, &x, &cfg).unwrap().trace.len(), 5);
}

#[test]
fn overlong_prompt_is_rejected() {
    let m = model();
    assert!(infer_mask(&m, &tokens(0, 65), &InferenceConfig::default()).is_err());
}
