//! Procedural street scenes with exact per-pixel labels.
//!
//! A scene is composed back to front: sky, a row of building blocks, a
//! sidewalk strip, the road, void poles, cars on the road, then people and
//! riders. Three styles change palette, object sizes, and layout
//! proportions so models trained on one style transfer imperfectly to the
//! others.
//!
//! Every sample is a pure function of `(config, index)`: its random stream
//! is seeded from the config seed mixed with the index.

mod dataset;
pub mod pnm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{ClassId, LabelMap};
use crate::tensor::Tensor;
use crate::util::derive_seed;

pub use dataset::{generate_dataset, load_sample, Dataset, DatasetManifest, ManifestSample, SampleSet, Split, MANIFEST_FILE, MANIFEST_VERSION};

pub const ROAD: ClassId = 0;
pub const SIDEWALK: ClassId = 1;
pub const BUILDING: ClassId = 2;
pub const SKY: ClassId = 3;
pub const CAR: ClassId = 4;
pub const PERSON: ClassId = 5;
pub const RIDER: ClassId = 6;
pub const VOID: ClassId = 7;

pub const CLASS_NAMES: [&str; 8] = ["road", "sidewalk", "building", "sky", "car", "person", "rider", "void"];

/// Number of classes the generator draws.
pub const SCENE_CLASSES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Style {
    A,
    B,
    C,
}

impl Style {
    pub const ALL: [Style; 3] = [Style::A, Style::B, Style::C];

    pub fn name(self) -> &'static str {
        match self {
            Style::A => "A",
            Style::B => "B",
            Style::C => "C",
        }
    }
}

/// Inclusive `[min, max]` count range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: u32,
    pub max: u32,
}

impl CountRange {
    pub const fn new(min: u32, max: u32) -> Self {
        Self { min, max }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> u32 {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneCounts {
    pub cars: CountRange,
    pub people: CountRange,
    pub poles: CountRange,
}

impl Default for SceneCounts {
    fn default() -> Self {
        Self {
            cars: CountRange::new(0, 3),
            people: CountRange::new(1, 4),
            poles: CountRange::new(0, 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub style: Style,
    #[serde(default)]
    pub counts: SceneCounts,
    /// Standard deviation of per-pixel Gaussian noise; also the amplitude of
    /// the deterministic class textures.
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_classes: SCENE_CLASSES,
            style: Style::A,
            counts: SceneCounts::default(),
            noise_sigma: 4.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn with_style(mut self, style: Style) -> Self {
        self.style = style;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 || self.width % 8 != 0 || self.height % 8 != 0 {
            return Err(Error::config(format!(
                "scene size must be at least 16 and divisible by 8, got {}x{}",
                self.width, self.height
            )));
        }
        if self.num_classes < SCENE_CLASSES || self.num_classes > 256 {
            return Err(Error::config(format!(
                "scenes draw {SCENE_CLASSES} classes; num_classes must be in {SCENE_CLASSES}..=256, got {}",
                self.num_classes
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be a non-negative number"));
        }
        let c = &self.counts;
        for (name, r) in [("cars", c.cars), ("people", c.people), ("poles", c.poles)] {
            if r.min > r.max {
                return Err(Error::config(format!("{name} count range is empty")));
            }
        }
        Ok(())
    }
}

struct StyleParams {
    palette: [[f32; 3]; SCENE_CLASSES],
    /// Texture spatial frequencies (cycles per pixel) per class, (x, y).
    texture: [(f32, f32); SCENE_CLASSES],
    sidewalk_top: (f32, f32),
    sidewalk_height: (f32, f32),
    building_top: (f32, f32),
    building_width: (f32, f32),
    car_width: (f32, f32),
    car_height: (f32, f32),
    person_height: (f32, f32),
    rider_share: f32,
    crossing_share: f32,
}

fn style_params(style: Style) -> StyleParams {
    // Fractions are of image height (vertical) or width (horizontal).
    match style {
        Style::A => StyleParams {
            palette: [
                [92.0, 90.0, 96.0],
                [164.0, 152.0, 140.0],
                [150.0, 108.0, 86.0],
                [118.0, 170.0, 228.0],
                [40.0, 62.0, 150.0],
                [106.0, 82.0, 106.0],
                [104.0, 100.0, 82.0],
                [30.0, 32.0, 30.0],
            ],
            texture: [(0.0, 0.12), (0.25, 0.0), (0.18, 0.18), (0.0, 0.03), (0.2, 0.0), (0.0, 0.3), (0.3, 0.0), (0.0, 0.0)],
            sidewalk_top: (0.52, 0.60),
            sidewalk_height: (0.10, 0.14),
            building_top: (0.08, 0.30),
            building_width: (0.14, 0.30),
            car_width: (0.16, 0.26),
            car_height: (0.08, 0.12),
            person_height: (0.17, 0.25),
            rider_share: 0.3,
            crossing_share: 0.3,
        },
        Style::B => StyleParams {
            palette: [
                [44.0, 42.0, 58.0],
                [84.0, 78.0, 96.0],
                [72.0, 58.0, 96.0],
                [18.0, 24.0, 62.0],
                [128.0, 124.0, 30.0],
                [58.0, 34.0, 70.0],
                [56.0, 54.0, 46.0],
                [8.0, 8.0, 10.0],
            ],
            texture: [(0.12, 0.0), (0.0, 0.25), (0.3, 0.1), (0.05, 0.0), (0.0, 0.2), (0.25, 0.0), (0.0, 0.25), (0.0, 0.0)],
            sidewalk_top: (0.46, 0.54),
            sidewalk_height: (0.12, 0.18),
            building_top: (0.05, 0.22),
            building_width: (0.10, 0.22),
            car_width: (0.14, 0.22),
            car_height: (0.07, 0.10),
            person_height: (0.20, 0.28),
            rider_share: 0.4,
            crossing_share: 0.25,
        },
        Style::C => StyleParams {
            palette: [
                [150.0, 140.0, 118.0],
                [192.0, 182.0, 160.0],
                [172.0, 150.0, 128.0],
                [212.0, 212.0, 200.0],
                [112.0, 80.0, 70.0],
                [136.0, 150.0, 106.0],
                [162.0, 128.0, 130.0],
                [92.0, 92.0, 90.0],
            ],
            texture: [(0.06, 0.06), (0.15, 0.15), (0.0, 0.22), (0.0, 0.0), (0.12, 0.12), (0.2, 0.2), (0.22, 0.1), (0.0, 0.0)],
            sidewalk_top: (0.58, 0.66),
            sidewalk_height: (0.07, 0.10),
            building_top: (0.15, 0.38),
            building_width: (0.20, 0.40),
            car_width: (0.22, 0.32),
            car_height: (0.10, 0.14),
            person_height: (0.15, 0.21),
            rider_share: 0.2,
            crossing_share: 0.35,
        },
    }
}

fn frac(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32), scale: usize) -> usize {
    (rng.random_range(lo..=hi) * scale as f32).round() as usize
}

fn fill_rect(labels: &mut LabelMap, x0: isize, y0: isize, x1: isize, y1: isize, class: ClassId) {
    let (w, h) = (labels.width() as isize, labels.height() as isize);
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            labels.set(y as usize, x as usize, class);
        }
    }
}

fn fill_disk(labels: &mut LabelMap, cx: f32, cy: f32, r: f32, class: ClassId) {
    let (w, h) = (labels.width() as isize, labels.height() as isize);
    let (y0, y1) = ((cy - r).floor() as isize, (cy + r).ceil() as isize);
    let (x0, x1) = ((cx - r).floor() as isize, (cx + r).ceil() as isize);
    for y in y0.max(0)..=y1.min(h - 1) {
        for x in x0.max(0)..=x1.min(w - 1) {
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                labels.set(y as usize, x as usize, class);
            }
        }
    }
}

/// Draws one upright person silhouette (head disk over a body rectangle)
/// with feet on row `feet`. Riders get a wider base for the bike.
pub(crate) fn draw_figure(labels: &mut LabelMap, cx: isize, feet: isize, height: usize, class: ClassId) {
    let body_w = ((height as f32 * 0.3).round() as isize).max(2);
    let head_r = (body_w as f32 * 0.6).max(1.2);
    let top = feet - height as isize;
    let head_cy = top as f32 + head_r;
    fill_rect(
        labels,
        cx - body_w / 2,
        (head_cy + head_r * 0.6) as isize,
        cx - body_w / 2 + body_w,
        feet,
        class,
    );
    fill_disk(labels, cx as f32 + if body_w % 2 == 0 { 0.0 } else { 0.5 }, head_cy, head_r, class);
    if class == RIDER {
        let bike_h = (height as isize / 4).max(2);
        fill_rect(labels, cx - body_w - 1, feet - bike_h, cx + body_w + 1, feet, class);
    }
}

/// Renders the label layout for one scene.
fn layout(cfg: &SceneConfig, sp: &StyleParams, rng: &mut ChaCha8Rng) -> LabelMap {
    let (w, h) = (cfg.width, cfg.height);
    let mut labels = LabelMap::filled(h, w, SKY);

    let sw_top = frac(rng, sp.sidewalk_top, h);
    let road_top = (sw_top + frac(rng, sp.sidewalk_height, h).max(2)).min(h - 4);

    // Buildings tile the horizontal extent above the sidewalk.
    let mut x = 0usize;
    while x < w {
        let bw = frac(rng, sp.building_width, w).max(3);
        let top = frac(rng, sp.building_top, h).min(sw_top.saturating_sub(4));
        if rng.random_bool(0.85) {
            fill_rect(&mut labels, x as isize, top as isize, (x + bw) as isize, sw_top as isize, BUILDING);
        }
        x += bw;
    }
    fill_rect(&mut labels, 0, sw_top as isize, w as isize, road_top as isize, SIDEWALK);
    fill_rect(&mut labels, 0, road_top as isize, w as isize, h as isize, ROAD);

    for _ in 0..cfg.counts.poles.sample(rng) {
        let px = rng.random_range(0..w) as isize;
        let pw: isize = rng.random_range(1..=2i64) as isize;
        let top = sw_top as isize - rng.random_range((h / 6) as i64..=(h / 3) as i64) as isize;
        fill_rect(&mut labels, px, top, px + pw, road_top as isize, VOID);
    }

    for _ in 0..cfg.counts.cars.sample(rng) {
        let cw = frac(rng, sp.car_width, w).max(4) as isize;
        let ch = frac(rng, sp.car_height, h).max(3) as isize;
        let cx = rng.random_range(-(cw as i64 / 3)..(w as i64 - cw as i64 / 2)) as isize;
        let bottom = rng.random_range((road_top as i64 + ch as i64).min(h as i64)..=h as i64) as isize;
        fill_rect(&mut labels, cx, bottom - ch, cx + cw, bottom, CAR);
    }

    let mut figures: Vec<(isize, isize, usize, ClassId)> = (0..cfg.counts.people.sample(rng))
        .map(|_| {
            let class = if rng.random_bool(sp.rider_share as f64) { RIDER } else { PERSON };
            let height = frac(rng, sp.person_height, h).max(6);
            // riders ride on the road; some pedestrians cross it
            let on_road = class == RIDER || rng.random_bool(sp.crossing_share as f64);
            let feet = if on_road {
                rng.random_range((road_top + 2).min(h - 1)..h) as isize
            } else {
                rng.random_range(sw_top + 1..=(road_top + 2).min(h - 1)) as isize
            };
            let cx = rng.random_range(2..w - 2) as isize;
            (cx, feet, height, class)
        })
        .collect();
    // Nearer figures (lower feet) are drawn last.
    figures.sort_by_key(|f| f.1);
    for (cx, feet, height, class) in figures {
        draw_figure(&mut labels, cx, feet, height, class);
    }
    labels
}

/// Renders one sample: a `3 x h x w` image with integer pixel values in
/// `[0, 255]` and its exact label map.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<(Tensor, LabelMap)> {
    cfg.validate()?;
    let sp = style_params(cfg.style);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index));
    let labels = layout(cfg, &sp, &mut rng);

    let (w, h) = (cfg.width, cfg.height);
    let sigma = cfg.noise_sigma;
    let phase: [f32; SCENE_CLASSES] = std::array::from_fn(|_| rng.random_range(0.0..std::f32::consts::TAU));
    let noise = Normal::new(0.0f32, sigma.max(f32::MIN_POSITIVE)).expect("finite sigma");
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let class = labels.get(y, x) as usize;
            let (fx, fy) = sp.texture[class];
            let tex = if sigma > 0.0 {
                sigma * (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) + phase[class]).sin()
            } else {
                0.0
            };
            for c in 0..3 {
                let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let v = (sp.palette[class][c] + tex + n).round().clamp(0.0, 255.0);
                data[(c * h + y) * w + x] = v;
            }
        }
    }
    Ok((Tensor::new(&[3, h, w], data)?, labels))
}

/// Base colour of `class` under `style`.
pub fn base_color(style: Style, class: ClassId) -> [f32; 3] {
    style_params(style).palette[class as usize]
}
