//! Uncompressed run-length wire format for binary masks.
//!
//! Pixels are flattened row-major; `counts` alternates run lengths of zeros
//! and ones and always starts with a (possibly empty) run of zeros.

use serde::{Deserialize, Serialize};

use crate::{Error, Mask, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub h: usize,
    pub w: usize,
    pub counts: Vec<u64>,
}

pub fn encode(mask: &Mask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for &b in mask.bits() {
        if b != current {
            counts.push(run);
            run = 0;
            current = b;
        }
        run += 1;
    }
    counts.push(run);
    Rle {
        h: mask.height(),
        w: mask.width(),
        counts,
    }
}

pub fn decode(rle: &Rle) -> Result<Mask> {
    let total: u64 = rle.counts.iter().sum();
    let expected = (rle.h * rle.w) as u64;
    if total != expected {
        return Err(Error::Validation(format!(
            "run lengths sum to {total}, expected {expected} for {}x{}",
            rle.h, rle.w
        )));
    }
    let mut bits = Vec::with_capacity(rle.h * rle.w);
    for (i, &c) in rle.counts.iter().enumerate() {
        bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    Mask::from_bits(rle.h, rle.w, bits)
}
