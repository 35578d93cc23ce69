//! Prompt sampling for training and the deterministic robot user used by
//! evaluation.

use rand::Rng;

use crate::{Mask, Prompt};

/// Squared Euclidean distance from every pixel to the nearest pixel outside
/// `region`; pixels beyond the frame border count as outside. Zero for
/// pixels not in the region.
pub fn distance_transform(region: &Mask) -> Vec<f64> {
    let (h, w) = region.dims();
    let (ph, pw) = (h + 2, w + 2);
    let inf = 1e20;
    let mut grid = vec![0.0; ph * pw];
    for y in 0..h {
        for x in 0..w {
            if region.get(x, y) {
                grid[(y + 1) * pw + x + 1] = inf;
            }
        }
    }
    let mut col = vec![0.0; ph];
    for x in 0..pw {
        for y in 0..ph {
            col[y] = grid[y * pw + x];
        }
        let d = edt_1d(&col);
        for y in 0..ph {
            grid[y * pw + x] = d[y];
        }
    }
    for y in 0..ph {
        let d = edt_1d(&grid[y * pw..(y + 1) * pw]);
        grid[y * pw..(y + 1) * pw].copy_from_slice(&d);
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = grid[(y + 1) * pw + x + 1];
        }
    }
    out
}

/// Lower envelope of parabolas (Felzenszwalb and Huttenlocher).
fn edt_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut k = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *out = diff * diff + f[p];
    }
    d
}

/// 4-connected components, each listed in row-major order; components are
/// ordered by their first pixel in row-major order.
pub fn components(region: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = region.dims();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if !region.get(x0, y0) || seen[y0 * w + x0] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(x0, y0)];
            seen[y0 * w + x0] = true;
            while let Some((x, y)) = stack.pop() {
                comp.push((x, y));
                let mut visit = |nx: usize, ny: usize| {
                    if region.get(nx, ny) && !seen[ny * w + nx] {
                        seen[ny * w + nx] = true;
                        stack.push((nx, ny));
                    }
                };
                if x > 0 {
                    visit(x - 1, y);
                }
                if x + 1 < w {
                    visit(x + 1, y);
                }
                if y > 0 {
                    visit(x, y - 1);
                }
                if y + 1 < h {
                    visit(x, y + 1);
                }
            }
            comp.sort_by_key(|&(x, y)| (y, x));
            out.push(comp);
        }
    }
    out
}

/// Pixel of `region` farthest from its boundary, first in row-major order
/// on ties. `None` for an empty region.
pub fn interior_point(region: &Mask) -> Option<(usize, usize)> {
    let dt = distance_transform(region);
    let w = region.width();
    let mut best: Option<(usize, f64)> = None;
    for (i, &d) in dt.iter().enumerate() {
        if region.bits()[i] && best.is_none_or(|(_, bd)| d > bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| (i % w, i / w))
}

/// Robot user's first click: the interior-most object pixel.
pub fn initial_click(gt: &Mask) -> Option<Prompt> {
    interior_point(gt).map(|(x, y)| Prompt::positive(x, y))
}

/// Robot user's correction: interior-most pixel of the largest connected
/// error region, positive on a missed pixel and negative on a spurious
/// one. With no error it clicks the object positively; with neither error
/// nor object it returns `None`.
pub fn robot_corrective_click(pred: &Mask, gt: &Mask) -> Option<Prompt> {
    let error = pred.xor(gt);
    if error.is_blank() {
        return initial_click(gt);
    }
    let comps = components(&error);
    let mut largest = &comps[0];
    for c in &comps[1..] {
        if c.len() > largest.len() {
            largest = c;
        }
    }
    let (h, w) = error.dims();
    let mut region = Mask::new(h, w);
    for &(x, y) in largest {
        region.set(x, y, true);
    }
    let (x, y) = interior_point(&region)?;
    Some(Prompt::Click { x, y, positive: gt.get(x, y) })
}

fn uniform_pixel(region: &Mask, rng: &mut impl Rng) -> Option<(usize, usize)> {
    let n = region.count();
    if n == 0 {
        return None;
    }
    let k = rng.random_range(0..n);
    let i = region.bits().iter().enumerate().filter(|(_, &b)| b).nth(k)?.0;
    Some((i % region.width(), i / region.width()))
}

/// Where a training correction was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClickSource {
    ErrorRegion,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorrectiveClick {
    pub prompt: Prompt,
    pub source: ClickSource,
}

/// Probabilities used by the training prompt samplers.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptProbs {
    /// Mask, click, box.
    pub initial: [f64; 3],
    /// Error region, ground truth.
    pub corrective: [f64; 2],
}

impl Default for PromptProbs {
    fn default() -> Self {
        Self {
            initial: [0.5, 0.25, 0.25],
            corrective: [0.9, 0.1],
        }
    }
}

/// First-frame training prompt: the mask itself, a uniform positive click
/// or the tight box. `None` when the object is absent.
pub fn sample_initial_prompt(gt: &Mask, probs: &PromptProbs, rng: &mut impl Rng) -> Option<Prompt> {
    let bbox = gt.bbox()?;
    let u: f64 = rng.random();
    if u < probs.initial[0] {
        Some(Prompt::Mask { mask: gt.clone() })
    } else if u < probs.initial[0] + probs.initial[1] {
        uniform_pixel(gt, rng).map(|(x, y)| Prompt::positive(x, y))
    } else {
        Some(Prompt::Box(bbox))
    }
}

/// Training correction. The deterministic variant defers to the robot
/// user; the stochastic one draws uniformly from the error region or, with
/// the ground-truth probability, from the object.
pub fn sample_corrective_click(
    pred: &Mask,
    gt: &Mask,
    probs: &PromptProbs,
    rng: &mut impl Rng,
    deterministic: bool,
) -> Option<CorrectiveClick> {
    if deterministic {
        return robot_corrective_click(pred, gt).map(|prompt| CorrectiveClick {
            prompt,
            source: if pred.xor(gt).is_blank() { ClickSource::GroundTruth } else { ClickSource::ErrorRegion },
        });
    }
    let error = pred.xor(gt);
    let from_error = rng.random::<f64>() < probs.corrective[0];
    let gt_click = |rng: &mut _| {
        uniform_pixel(gt, rng).map(|(x, y)| CorrectiveClick {
            prompt: Prompt::positive(x, y),
            source: ClickSource::GroundTruth,
        })
    };
    if error.is_blank() || (!from_error && !gt.is_blank()) {
        return gt_click(rng);
    }
    uniform_pixel(&error, rng).map(|(x, y)| CorrectiveClick {
        prompt: Prompt::Click { x, y, positive: gt.get(x, y) },
        source: ClickSource::ErrorRegion,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::BoxXyxy;

    /// Brute force: squared distance to the nearest pixel outside the region,
    /// including the ring of pixels just beyond the border.
    fn brute_dt(region: &Mask) -> Vec<f64> {
        let (h, w) = region.dims();
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                if !region.get(x, y) {
                    continue;
                }
                let mut best = f64::INFINITY;
                for by in -1..=h as i64 {
                    for bx in -1..=w as i64 {
                        let inside = bx >= 0 && by >= 0 && bx < w as i64 && by < h as i64;
                        if inside && region.get(bx as usize, by as usize) {
                            continue;
                        }
                        let d = ((bx - x as i64).pow(2) + (by - y as i64).pow(2)) as f64;
                        best = best.min(d);
                    }
                }
                out[y * w + x] = best;
            }
        }
        out
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
            let m = Mask::from_fn(h, w, |_, _| rng.random_bool(0.7));
            assert_eq!(distance_transform(&m), brute_dt(&m));
        }
    }

    #[test]
    fn missing_left_half_click() {
        let gt = Mask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (2..6).contains(&y));
        let pred = Mask::from_fn(8, 8, |x, y| (4..6).contains(&x) && (2..6).contains(&y));
        let missing = gt.minus(&pred);
        let dt = brute_dt(&missing);
        let best = dt.iter().cloned().fold(0.0, f64::max);
        let first = dt.iter().position(|&d| d == best).unwrap();
        let click = robot_corrective_click(&pred, &gt).unwrap();
        assert_eq!(click, Prompt::positive(first % 8, first / 8));
    }

    #[test]
    fn extra_blob_gives_negative_click_inside() {
        let gt = Mask::from_fn(10, 10, |x, y| x < 3 && y < 3);
        let blob = Mask::from_fn(10, 10, |x, y| (6..9).contains(&x) && (6..9).contains(&y));
        match robot_corrective_click(&gt.or(&blob), &gt).unwrap() {
            Prompt::Click { x, y, positive } => {
                assert!(!positive);
                assert!(blob.get(x, y));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn perfect_prediction_falls_back_to_object_click() {
        let gt = Mask::from_fn(6, 6, |x, y| x > 1 && y > 1);
        match robot_corrective_click(&gt, &gt).unwrap() {
            Prompt::Click { x, y, positive } => assert!(positive && gt.get(x, y)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(robot_corrective_click(&Mask::new(4, 4), &Mask::new(4, 4)).is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = sample_corrective_click(&gt, &gt, &PromptProbs::default(), &mut rng, false).unwrap();
        assert_eq!(c.source, ClickSource::GroundTruth);
    }

    #[test]
    fn box_branch_is_tight() {
        let gt = Mask::from_fn(10, 10, |x, y| (2..=4).contains(&x) && (5..=7).contains(&y));
        let probs = PromptProbs {
            initial: [0.0, 0.0, 1.0],
            ..Default::default()
        };
        let p = sample_initial_prompt(&gt, &probs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p, Prompt::Box(BoxXyxy { x0: 2, y0: 5, x1: 4, y1: 7 }));
        assert!(sample_initial_prompt(&Mask::new(3, 3), &probs, &mut ChaCha8Rng::seed_from_u64(0)).is_none());
    }

    #[test]
    fn components_are_four_connected() {
        let m = Mask::from_fn(3, 3, |x, y| (x + y) % 2 == 0);
        assert_eq!(components(&m).len(), 5);
        assert_eq!(components(&Mask::full(3, 3)).len(), 1);
    }
}
