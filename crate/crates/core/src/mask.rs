use serde::{Deserialize, Serialize};
use vidseg_autograd::Array;

use crate::{Error, Result};

/// Binary `h x w` mask in row-major order. Coordinates are `(x, y)` with `x`
/// the column.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

/// Inclusive pixel box `(x0, y0, x1, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![true; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Shape(format!(
                "mask of {h}x{w} needs {} pixels, got {}",
                h * w,
                bits.len()
            )));
        }
        Ok(Self { h, w, bits })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                bits.push(f(x, y));
            }
        }
        Self { h, w, bits }
    }

    /// Mask from a real-valued `[h, w]` tensor, set where `value > threshold`.
    pub fn from_array(a: &Array, threshold: f64) -> Result<Self> {
        if a.ndim() != 2 {
            return Err(Error::Shape(format!("mask tensor must be [h, w], got {:?}", a.shape())));
        }
        Ok(Self {
            h: a.dim(0),
            w: a.dim(1),
            bits: a.data().iter().map(|&v| v > threshold).collect(),
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// True when no pixel is set.
    pub fn is_blank(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_same(&self, other: &Mask) {
        assert_eq!(self.dims(), other.dims(), "mask size mismatch");
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.check_same(other);
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_count(&self, other: &Mask) -> usize {
        self.check_same(other);
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count()
    }

    /// Intersection over union; two blank masks score 1.
    pub fn iou(&self, other: &Mask) -> f64 {
        let u = self.union_count(other);
        if u == 0 {
            1.0
        } else {
            self.intersection_count(other) as f64 / u as f64
        }
    }

    fn zip_with(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        self.check_same(other);
        Mask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn xor(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a != b)
    }

    /// `self AND NOT other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        self.zip_with(other, |a, b| a && !b)
    }

    /// Tight inclusive bounding box, `None` when blank.
    pub fn bbox(&self) -> Option<BoxXyxy> {
        let mut b: Option<BoxXyxy> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(x, y) {
                    b = Some(match b {
                        None => BoxXyxy { x0: x, y0: y, x1: x, y1: y },
                        Some(b) => BoxXyxy {
                            x0: b.x0.min(x),
                            y0: b.y0.min(y),
                            x1: b.x1.max(x),
                            y1: b.y1.max(y),
                        },
                    });
                }
            }
        }
        b
    }

    /// Fraction of set pixels in each cell of an `out_h x out_w` grid. The
    /// mask extent must be a multiple of the grid.
    pub fn area_pool(&self, out_h: usize, out_w: usize) -> Result<Vec<f64>> {
        if out_h == 0 || out_w == 0 || !self.h.is_multiple_of(out_h) || !self.w.is_multiple_of(out_w) {
            return Err(Error::Shape(format!(
                "cannot area-pool a {}x{} mask to {out_h}x{out_w}",
                self.h, self.w
            )));
        }
        let (fy, fx) = (self.h / out_h, self.w / out_w);
        let mut out = vec![0.0; out_h * out_w];
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(x, y) {
                    out[(y / fy) * out_w + x / fx] += 1.0;
                }
            }
        }
        let area = (fy * fx) as f64;
        out.iter_mut().for_each(|v| *v /= area);
        Ok(out)
    }

    /// `[h, w]` tensor of zeros and ones.
    pub fn to_array(&self) -> Array {
        Array::from_vec(
            &[self.h, self.w],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.h * self.w <= 256 {
            writeln!(f, "Mask {}x{}:", self.h, self.w)?;
            for y in 0..self.h {
                let row: String = (0..self.w).map(|x| if self.get(x, y) { '#' } else { '.' }).collect();
                writeln!(f, "  {row}")?;
            }
            Ok(())
        } else {
            write!(f, "Mask {}x{} ({} set)", self.h, self.w, self.count())
        }
    }
}
