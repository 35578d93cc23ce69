use proptest::prelude::*;
use vidseg_core::eval::stubs::{EmptySegmenter, PerfectSegmenter, ScriptedSegmenter};
use vidseg_core::eval::{jf_metric, run_offline, run_online, run_semivos, ClipOutcome, ClipReport, EvalConfig, SemivosPrompt};
use vidseg_core::{BoxXyxy, Mask, Prompt};

fn square(x0: usize, y0: usize, side: usize) -> Mask {
    Mask::from_fn(16, 16, |x, y| (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y))
}

fn moving_gt(n: usize) -> Vec<Mask> {
    (0..n).map(|t| square(2 + t, 3, 6)).collect()
}

fn scored(outcome: ClipOutcome) -> ClipReport {
    match outcome {
        ClipOutcome::Scored(r) => r,
        ClipOutcome::Skipped { reason, .. } => panic!("unexpectedly skipped: {reason}"),
    }
}

fn cfg(n_click: usize, n_frame: usize, n_pass: usize) -> EvalConfig {
    EvalConfig {
        n_click,
        n_frame,
        n_pass,
        ..Default::default()
    }
}

#[test]
fn perfect_stub_never_pauses() {
    let gt = moving_gt(6);
    let r = scored(run_online(&mut PerfectSegmenter { gt: gt.clone() }, &gt, &cfg(3, 3, 3), "c", 0).unwrap());
    assert_eq!(r.pauses, 0);
    assert_eq!(r.jf, 1.0);
    let r = scored(run_offline(&mut PerfectSegmenter { gt: gt.clone() }, &gt, &cfg(3, 3, 3), "c", 0).unwrap());
    assert_eq!(r.pass_jf, vec![1.0; 3]);
}

#[test]
fn empty_stub_exhausts_the_pause_budget() {
    let gt = moving_gt(8);
    for n_frame in 0..5 {
        let mut seg = EmptySegmenter { height: 16, width: 16 };
        let r = scored(run_online(&mut seg, &gt, &cfg(2, n_frame, 1), "c", 0).unwrap());
        assert_eq!(r.pauses, n_frame);
        assert_eq!(r.jf, 0.0);
    }
}

/// 4 frames, one click per interaction, one pause allowed. Unprompted
/// predictions: frame 1 correct, frames 2 and 3 shifted. The protocol must
/// pause on frame 2 only, after which the stub returns the ground truth.
#[test]
fn online_hand_trace() {
    let gt = moving_gt(4);
    let shifted: Vec<Mask> = (0..4).map(|t| square(6 + t, 7, 6)).collect();
    let unprompted = vec![shifted[0].clone(), gt[1].clone(), shifted[2].clone(), shifted[3].clone()];
    let mut seg = ScriptedSegmenter::new(gt.clone(), unprompted);
    let r = scored(run_online(&mut seg, &gt, &cfg(1, 1, 1), "c", 0).unwrap());
    assert_eq!(seg.calls, vec![(0, 1), (1, 0), (2, 0), (2, 1), (3, 0)]);
    assert_eq!(r.pauses, 1);
    assert_eq!(r.interactions.iter().map(|i| i.frame).collect::<Vec<_>>(), vec![0, 2]);
    let expected = jf_metric(&[gt[0].clone(), gt[1].clone(), gt[2].clone(), shifted[3].clone()], &gt, 0.008).unwrap();
    assert_eq!(r.jf, expected.jf);
    // 2x2 overlap of two 6x6 squares.
    assert!((r.frames[3].j - 4.0 / 68.0).abs() < 1e-12);
}

/// Offline: unprompted IoUs 4/68 (frame 1), 0 (frame 2), 3/69 (frame 3).
/// Passes click frame 2 first, then frame 3, then frame 1.
#[test]
fn offline_hand_trace() {
    let gt = moving_gt(4);
    let unprompted = vec![Mask::new(16, 16), square(7, 7, 6), square(10, 10, 3), square(8, 8, 6)];
    let ious: Vec<f64> = (0..4).map(|t| unprompted[t].iou(&gt[t])).collect();
    assert_eq!(ious[1], 4.0 / 68.0);
    assert_eq!(ious[2], 0.0);
    assert_eq!(ious[3], 3.0 / 69.0);
    let mut seg = ScriptedSegmenter::new(gt.clone(), unprompted);
    let r = scored(run_offline(&mut seg, &gt, &cfg(1, 0, 4), "c", 0).unwrap());
    assert_eq!(r.interactions.iter().map(|i| (i.pass, i.frame)).collect::<Vec<_>>(), vec![(1, 0), (2, 2), (3, 3), (4, 1)]);
    assert!(r.pass_jf.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*r.pass_jf.last().unwrap(), 1.0);
    assert_eq!(seg.resets, 4);
}

#[test]
fn single_pass_offline_equals_online_without_pauses() {
    let gt = moving_gt(5);
    let unprompted: Vec<Mask> = (0..5).map(|t| square(4 + t, 5, 5)).collect();
    let mut a = ScriptedSegmenter::new(gt.clone(), unprompted.clone());
    let mut b = ScriptedSegmenter::new(gt.clone(), unprompted);
    let on = scored(run_online(&mut a, &gt, &cfg(3, 0, 1), "c", 0).unwrap());
    let off = scored(run_offline(&mut b, &gt, &cfg(3, 0, 1), "c", 0).unwrap());
    assert_eq!((on.j, on.f, on.jf), (off.j, off.f, off.jf));
    assert_eq!(on.frames, off.frames);
    assert_eq!(a.calls, b.calls);
}

#[test]
fn semivos_prompts_and_scoring() {
    let gt = moving_gt(4);
    let r = scored(run_semivos(&mut PerfectSegmenter { gt: gt.clone() }, &gt, SemivosPrompt::GtMask, &EvalConfig::default(), "c", 0).unwrap());
    assert_eq!(r.jf, 1.0);
    assert_eq!(r.scored_frames, vec![1, 2, 3]);

    let disk = Mask::from_fn(16, 16, |x, y| (x as i64 - 7).pow(2) + (y as i64 - 8).pow(2) <= 9);
    let gt = vec![disk.clone(); 3];
    let r = scored(run_semivos(&mut PerfectSegmenter { gt: gt.clone() }, &gt, SemivosPrompt::Box, &EvalConfig::default(), "c", 0).unwrap());
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..16 {
        for x in 0..16 {
            if disk.get(x, y) {
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
            }
        }
    }
    assert_eq!(r.interactions[0].prompts, vec![Prompt::Box(BoxXyxy { x0, y0, x1, y1 })]);
    assert_eq!(r.scored_frames, vec![0, 1, 2]);

    let r = scored(run_semivos(&mut PerfectSegmenter { gt: gt.clone() }, &gt, SemivosPrompt::ThreeClick, &EvalConfig::default(), "c", 0).unwrap());
    assert_eq!(r.clicks, 3);

    let empty = vec![Mask::new(16, 16); 3];
    let out = run_semivos(&mut PerfectSegmenter { gt: empty.clone() }, &empty, SemivosPrompt::Box, &EvalConfig::default(), "c", 0).unwrap();
    assert!(matches!(out, ClipOutcome::Skipped { .. }));
}

#[test]
fn invalid_config_is_rejected() {
    let gt = moving_gt(2);
    assert!(run_online(&mut PerfectSegmenter { gt: gt.clone() }, &gt, &cfg(0, 1, 1), "c", 0).is_err());
}

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (0usize..12, 0usize..12, 1usize..6).prop_map(|(x, y, s)| square(x, y, s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pauses_respect_budget_and_threshold(
        unprompted in prop::collection::vec(mask_strategy(), 6),
        n_frame in 0usize..4,
        n_click in 1usize..4,
    ) {
        let gt = moving_gt(6);
        let mut seg = ScriptedSegmenter::new(gt.clone(), unprompted);
        let r = scored(run_online(&mut seg, &gt, &cfg(n_click, n_frame, 1), "c", 0).unwrap());
        prop_assert!(r.pauses <= n_frame);
        for i in r.interactions.iter().filter(|i| i.frame > 0) {
            prop_assert!(i.iou_before < 0.75);
        }
        prop_assert!((0.0..=1.0).contains(&r.jf));
        prop_assert_eq!(r.jf, (r.j + r.f) / 2.0);
    }

    #[test]
    fn offline_passes_never_get_worse_under_oracle_refinement(
        unprompted in prop::collection::vec(mask_strategy(), 5),
        n_pass in 1usize..5,
    ) {
        let gt = moving_gt(5);
        let mut seg = ScriptedSegmenter::new(gt.clone(), unprompted);
        let r = scored(run_offline(&mut seg, &gt, &cfg(1, 0, n_pass), "c", 0).unwrap());
        prop_assert_eq!(r.pass_jf.len(), n_pass);
        prop_assert!(r.pass_jf.windows(2).all(|w| w[1] >= w[0]));
    }
}
