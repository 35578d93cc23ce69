use serde::{Deserialize, Serialize};

use crate::{Error, Mask, Result};

/// Region similarity (Jaccard) and boundary accuracy of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JfScore {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    pub frames: Vec<FrameScore>,
}

/// Boundary matching radius for a frame: `tolerance` times the diagonal,
/// rounded up, at least one pixel.
pub fn boundary_radius(h: usize, w: usize, tolerance: f64) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    ((tolerance * diag).ceil() as usize).max(1)
}

/// Foreground pixels with a background 4-neighbour or on the frame edge.
pub fn boundary(mask: &Mask) -> Mask {
    let (h, w) = mask.dims();
    Mask::from_fn(h, w, |x, y| {
        mask.get(x, y)
            && (x == 0 || y == 0 || x + 1 == w || y + 1 == h || !mask.get(x - 1, y) || !mask.get(x + 1, y) || !mask.get(x, y - 1) || !mask.get(x, y + 1))
    })
}

/// Number of set pixels of `a` that have a set pixel of `b` within
/// Euclidean distance `r`.
fn matched(a: &Mask, b: &Mask, r: usize) -> usize {
    let (h, w) = a.dims();
    let r2 = (r * r) as i64;
    let ri = r as i64;
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if !a.get(x, y) {
                continue;
            }
            let hit = (-ri..=ri).any(|dy| {
                (-ri..=ri).any(|dx| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    dx * dx + dy * dy <= r2 && nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && b.get(nx as usize, ny as usize)
                })
            });
            n += usize::from(hit);
        }
    }
    n
}

/// Boundary F-measure of one frame.
pub fn boundary_f(pred: &Mask, gt: &Mask, tolerance: f64) -> f64 {
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (np, ng) = (bp.count(), bg.count());
    match (np, ng) {
        (0, 0) => return 1.0,
        (0, _) | (_, 0) => return 0.0,
        _ => {}
    }
    let r = boundary_radius(pred.height(), pred.width(), tolerance);
    let precision = matched(&bp, &bg, r) as f64 / np as f64;
    let recall = matched(&bg, &bp, r) as f64 / ng as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean J, mean F and their average over a masklet.
pub fn jf_metric(pred: &[Mask], gt: &[Mask], tolerance: f64) -> Result<JfScore> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Validation(format!("masklets have {} and {} frames", pred.len(), gt.len())));
    }
    let mut frames = Vec::with_capacity(pred.len());
    for (t, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.dims() != g.dims() {
            return Err(Error::Validation(format!("frame {t}: prediction is {:?} but ground truth is {:?}", p.dims(), g.dims())));
        }
        frames.push(FrameScore {
            j: p.iou(g),
            f: boundary_f(p, g, tolerance),
        });
    }
    let n = frames.len() as f64;
    let j = frames.iter().map(|s| s.j).sum::<f64>() / n;
    let f = frames.iter().map(|s| s.f).sum::<f64>() / n;
    Ok(JfScore {
        j,
        f,
        jf: (j + f) / 2.0,
        frames,
    })
}
