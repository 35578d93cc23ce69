use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vidseg_core::clicks::{
    components, distance_transform, robot_corrective_click, sample_corrective_click, sample_initial_prompt, ClickSource, PromptProbs,
};
use vidseg_core::{Mask, Prompt};

fn mask_strategy() -> impl Strategy<Value = Mask> {
    prop_oneof![
        prop::collection::vec(any::<bool>(), 144).prop_map(|bits| Mask::from_bits(12, 12, bits).unwrap()),
        (0usize..12, 0usize..12, 1usize..12, 1usize..12)
            .prop_map(|(x, y, w, h)| Mask::from_fn(12, 12, |px, py| (x..x + w).contains(&px) && (y..y + h).contains(&py))),
        Just(Mask::new(12, 12)),
    ]
}

/// Squared distance from each pixel to the nearest pixel outside the mask
/// (the frame border counts as outside), by exhaustive search.
fn brute_edt(m: &Mask) -> Vec<f64> {
    let (h, w) = m.dims();
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !m.get(x as usize, y as usize) {
                continue;
            }
            let mut best = i64::MAX;
            for by in -1..=h as i64 {
                for bx in -1..=w as i64 {
                    let outside = bx < 0 || by < 0 || bx >= w as i64 || by >= h as i64 || !m.get(bx as usize, by as usize);
                    if outside {
                        best = best.min((bx - x).pow(2) + (by - y).pow(2));
                    }
                }
            }
            out[y as usize * w + x as usize] = best as f64;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn robot_click_lands_in_the_largest_error_region(pred in mask_strategy(), gt in mask_strategy()) {
        let error = pred.xor(&gt);
        match robot_corrective_click(&pred, &gt) {
            None => prop_assert!(gt.is_blank() && error.is_blank()),
            Some(Prompt::Click { x, y, positive }) => {
                if error.is_blank() {
                    prop_assert!(gt.get(x, y) && positive);
                } else {
                    prop_assert!(error.get(x, y));
                    prop_assert_eq!(positive, gt.get(x, y));
                    let largest = components(&error).iter().map(|c| c.len()).max().unwrap();
                    let own = components(&error).into_iter().find(|c| c.contains(&(x, y))).unwrap();
                    prop_assert_eq!(own.len(), largest);
                }
            }
            Some(other) => prop_assert!(false, "unexpected prompt {:?}", other),
        }
    }

    #[test]
    fn sampled_prompts_respect_their_source(pred in mask_strategy(), gt in mask_strategy(), seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = PromptProbs::default();
        match sample_initial_prompt(&gt, &probs, &mut rng) {
            None => prop_assert!(gt.is_blank()),
            Some(Prompt::Click { x, y, positive }) => prop_assert!(positive && gt.get(x, y)),
            Some(Prompt::Box(b)) => prop_assert_eq!(Some(b), gt.bbox()),
            Some(Prompt::Mask { mask }) => prop_assert_eq!(mask, gt.clone()),
        }
        if let Some(c) = sample_corrective_click(&pred, &gt, &probs, &mut rng, false) {
            let Prompt::Click { x, y, positive } = c.prompt else { panic!("corrective prompts are clicks") };
            match c.source {
                ClickSource::ErrorRegion => prop_assert!(pred.xor(&gt).get(x, y) && positive == gt.get(x, y)),
                ClickSource::GroundTruth => prop_assert!(positive && gt.get(x, y)),
            }
        } else {
            prop_assert!(gt.is_blank() && pred.xor(&gt).is_blank());
        }
    }

    #[test]
    fn distance_transform_matches_exhaustive_search(m in mask_strategy()) {
        prop_assert_eq!(distance_transform(&m), brute_edt(&m));
    }
}
