use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::scenes::pnm::encode_ppm;
use crate::tensor::Tensor;

/// One RGB colour per class id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Palette(pub Vec<[u8; 3]>);

impl Default for Palette {
    /// Colours for the eight scene classes.
    fn default() -> Self {
        Palette(vec![
            [128, 64, 128],
            [244, 35, 232],
            [70, 70, 70],
            [70, 130, 180],
            [0, 0, 142],
            [220, 20, 60],
            [255, 0, 0],
            [0, 0, 0],
        ])
    }
}

impl Palette {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// P6 bytes with one pixel per label.
pub fn render_labelmap(labels: &LabelMap, palette: &Palette) -> Result<Vec<u8>> {
    let mut rgb = Vec::with_capacity(labels.len() * 3);
    for (pixel, &l) in labels.data().iter().enumerate() {
        let col = palette.0.get(l as usize).ok_or(Error::LabelOutOfRange {
            pixel,
            label: l as u32,
            num_classes: palette.len(),
        })?;
        rgb.extend_from_slice(col);
    }
    Ok(encode_ppm(labels.width(), labels.height(), &rgb))
}

fn chw_to_ppm(t: &Tensor, f: impl Fn(f32) -> f32) -> Result<Vec<u8>> {
    let [c, h, w] = match *t.shape() {
        [c, h, w] => [c, h, w],
        [1, c, h, w] => [c, h, w],
        _ => {
            return Err(Error::InvalidShape {
                op: "image render",
                detail: format!("expected 3 x h x w, got {:?}", t.shape()),
            })
        }
    };
    if c != 3 {
        return Err(Error::InvalidShape {
            op: "image render",
            detail: format!("expected 3 channels, got {c}"),
        });
    }
    let d = t.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            rgb.push(f(d[ch * h * w + p]).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(encode_ppm(w, h, &rgb))
}

/// A `3 x h x w` image in `[0, 255]` as P6 bytes.
pub fn image_to_ppm(image: &Tensor) -> Result<Vec<u8>> {
    chw_to_ppm(image, |v| v)
}

/// A perturbation shown around mid-gray, magnified by `scale`.
pub fn perturbation_to_ppm(p: &Tensor, scale: f32) -> Result<Vec<u8>> {
    chw_to_ppm(p, |v| 127.5 + v * scale)
}
