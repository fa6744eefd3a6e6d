use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Class identifier of a single pixel.
pub type ClassId = u8;

/// An `h x w` grid of class identifiers, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<ClassId>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<ClassId>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::InvalidShape {
                op: "label map",
                detail: format!("{height}x{width} map with {} labels", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: ClassId) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[ClassId] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [ClassId] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> ClassId {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: ClassId) {
        self.data[y * self.width + x] = class;
    }

    pub fn count(&self, class: ClassId) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }

    /// Per-pixel argmax over the class axis of a `n x c x h x w` logits
    /// tensor, one map per image. Ties resolve to the lowest class id.
    pub fn argmax_batch<T: Real>(logits: &Tensor<T>) -> Result<Vec<LabelMap>> {
        let [n, c, h, w] = match *logits.shape() {
            [n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(Error::InvalidShape {
                    op: "argmax",
                    detail: format!("expected NCHW logits, got {:?}", logits.shape()),
                })
            }
        };
        if c > ClassId::MAX as usize + 1 {
            return Err(Error::config(format!("{c} classes exceed the label id range")));
        }
        let m = h * w;
        let data = logits.data();
        Ok((0..n)
            .map(|i| {
                let base = i * c * m;
                let labels = (0..m)
                    .map(|k| {
                        let mut best = 0;
                        for j in 1..c {
                            if data[base + j * m + k] > data[base + best * m + k] {
                                best = j;
                            }
                        }
                        best as ClassId
                    })
                    .collect();
                LabelMap {
                    height: h,
                    width: w,
                    data: labels,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_picks_lowest_on_ties() {
        // 1 image, 3 classes, 2 pixels.
        let logits = Tensor::<f32>::from_f32(&[1, 3, 1, 2], &[1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        let maps = LabelMap::argmax_batch(&logits).unwrap();
        assert_eq!(maps[0].data(), &[0, 1]);
    }

    #[test]
    fn size_is_checked() {
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
    }
}
