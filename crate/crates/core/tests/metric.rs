use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidseg_core::eval::jf_metric;
use vidseg_core::Mask;

mod common;
use common::{brute_force_jf as brute_force, random_mask};

#[test]
fn matches_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let (p, g) = (random_mask(&mut rng), random_mask(&mut rng));
        let tol = [0.008, 0.05, 0.1][rng.random_range(0..3)];
        let s = jf_metric(std::slice::from_ref(&p), std::slice::from_ref(&g), tol).unwrap();
        let (j, f) = brute_force(&p, &g, tol);
        assert_eq!(s.j, j);
        assert_eq!(s.f, f);
        assert_eq!(s.jf, (j + f) / 2.0);
    }
}

#[test]
fn half_overlap() {
    let gt = Mask::from_fn(16, 16, |x, y| (4..8).contains(&x) && (4..8).contains(&y));
    let pred = Mask::from_fn(16, 16, |x, y| (4..6).contains(&x) && (4..8).contains(&y));
    let s = jf_metric(std::slice::from_ref(&pred), std::slice::from_ref(&gt), 0.008).unwrap();
    assert_eq!(s.j, 0.5);
    assert_eq!(s.f, brute_force(&pred, &gt, 0.008).1);
}

#[test]
fn identical_masks_score_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let m = random_mask(&mut rng);
        let s = jf_metric(&[m.clone(), m.clone()], &[m.clone(), m], 0.008).unwrap();
        assert_eq!((s.j, s.f, s.jf), (1.0, 1.0, 1.0));
    }
}
