use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use maskpress_core::RetentionMask;
use maskpress_diffumask::reveal;

#[test]
fn reveal_rate_matches_t() {
    let m = RetentionMask::new((0..150).map(|i| i % 3 == 0).collect()).unwrap();
    let zeros = 100.0;
    for t in [0.1, 0.3, 0.5, 0.9] {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut revealed = 0usize;
        for _ in 0..draws {
            let m_t = reveal(&m, t, &mut rng).unwrap();
            assert!(m.bits().iter().zip(m_t.bits()).all(|(&a, &b)| !a || b));
            revealed += m_t.retained_count() - 50;
        }
        let n = zeros * draws as f64;
        let freq = revealed as f64 / n;
        let sigma = (t * (1.0 - t) / n).sqrt();
        assert!((freq - t).abs() <= 3.0 * sigma, "t={t}: {freq}");
    }
}
