use serde::{Deserialize, Serialize};

use crate::{BoxXyxy, Error, Mask, Result};

/// A user (or simulated user) prompt on one frame.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prompt {
    Click { x: usize, y: usize, positive: bool },
    Box(BoxXyxy),
    Mask { mask: Mask },
}

impl Prompt {
    pub fn positive(x: usize, y: usize) -> Self {
        Prompt::Click { x, y, positive: true }
    }

    pub fn negative(x: usize, y: usize) -> Self {
        Prompt::Click { x, y, positive: false }
    }

    /// Checks the prompt against an `h x w` frame; errors name the field.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        let out = |field: &str, v: usize, limit: usize| {
            Err(Error::Validation(format!("{field}={v} is outside the frame (must be < {limit})")))
        };
        match self {
            Prompt::Click { x, y, .. } => {
                if *x >= w {
                    return out("x", *x, w);
                }
                if *y >= h {
                    return out("y", *y, h);
                }
            }
            Prompt::Box(b) => {
                for (f, v, l) in [("x0", b.x0, w), ("x1", b.x1, w), ("y0", b.y0, h), ("y1", b.y1, h)] {
                    if v >= l {
                        return out(f, v, l);
                    }
                }
                if b.x0 > b.x1 {
                    return Err(Error::Validation(format!("x0={} exceeds x1={}", b.x0, b.x1)));
                }
                if b.y0 > b.y1 {
                    return Err(Error::Validation(format!("y0={} exceeds y1={}", b.y0, b.y1)));
                }
            }
            Prompt::Mask { mask } => {
                if mask.dims() != (h, w) {
                    return Err(Error::Validation(format!(
                        "mask is {}x{} but the frame is {h}x{w}",
                        mask.height(),
                        mask.width()
                    )));
                }
            }
        }
        Ok(())
    }
}
