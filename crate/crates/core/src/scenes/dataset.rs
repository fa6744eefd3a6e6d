//! On-disk datasets: `images/NNNNNN.ppm`, `labels/NNNNNN.pgm`, and a
//! `manifest.json` with CRC-32 checksums of every file.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pnm::{self, encode_pgm, encode_ppm};
use super::{generate_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;
use crate::util::write_atomic;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub index: u64,
    pub image: String,
    pub label: String,
    pub crc32_image: u32,
    pub crc32_label: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub scene_config: SceneConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub samples: Vec<ManifestSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Images and labels held in memory, in index order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
}

impl SampleSet {
    /// Generates indices `range` directly, without touching disk.
    pub fn generate(cfg: &SceneConfig, range: std::ops::Range<u64>) -> Result<Self> {
        let pairs: Vec<(Tensor, LabelMap)> = range
            .into_par_iter()
            .map(|i| generate_scene(cfg, i))
            .collect::<Result<_>>()?;
        let (images, labels) = pairs.into_iter().unzip();
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.iter().map(LabelMap::len).sum()
    }
}

fn image_name(index: u64) -> String {
    format!("images/{index:06}.ppm")
}

fn label_name(index: u64) -> String {
    format!("labels/{index:06}.pgm")
}

pub(crate) fn image_to_rgb(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            rgb.push(d[c * h * w + p].round().clamp(0.0, 255.0) as u8);
        }
    }
    rgb
}

/// Writes `n_train + n_test` samples and the manifest (last).
pub fn generate_dataset(cfg: &SceneConfig, n_train: usize, n_test: usize, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    for sub in ["images", "labels"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let total = (n_train + n_test) as u64;
    let samples: Vec<ManifestSample> = (0..total)
        .into_par_iter()
        .map(|index| {
            let (image, labels) = generate_scene(cfg, index)?;
            let ppm = encode_ppm(cfg.width, cfg.height, &image_to_rgb(&image));
            let pgm = encode_pgm(cfg.width, cfg.height, labels.data());
            let (image, label) = (image_name(index), label_name(index));
            write_atomic(&out_dir.join(&image), &ppm)?;
            write_atomic(&out_dir.join(&label), &pgm)?;
            Ok(ManifestSample {
                index,
                image,
                label,
                crc32_image: crc32fast::hash(&ppm),
                crc32_label: crc32fast::hash(&pgm),
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        scene_config: cfg.clone(),
        n_train,
        n_test,
        samples,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    write_atomic(&path, &json)?;
    Ok(manifest)
}

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.clone(), source })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::config(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                manifest.version
            )));
        }
        manifest.scene_config.validate()?;
        if manifest.samples.len() != manifest.n_train + manifest.n_test
            || manifest.samples.iter().enumerate().any(|(i, s)| s.index != i as u64)
        {
            return Err(Error::config(format!(
                "{}: sample list does not match split sizes",
                path.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.scene_config.num_classes
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn split_range(&self, split: Split) -> std::ops::Range<u64> {
        let (tr, te) = (self.manifest.n_train as u64, self.manifest.n_test as u64);
        match split {
            Split::Train => 0..tr,
            Split::Test => tr..tr + te,
        }
    }

    fn read_checked(&self, name: &str, expected: u32) -> Result<(PathBuf, Vec<u8>)> {
        let path = self.root.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let found = crc32fast::hash(&bytes);
        if found != expected {
            return Err(Error::Checksum { path, expected, found });
        }
        Ok((path, bytes))
    }

    pub fn load_sample(&self, index: u64) -> Result<(Tensor, LabelMap)> {
        let s = self
            .manifest
            .samples
            .get(index as usize)
            .ok_or_else(|| Error::config(format!("sample index {index} out of range (dataset has {})", self.len())))?;
        let cfg = &self.manifest.scene_config;

        let (ipath, ibytes) = self.read_checked(&s.image, s.crc32_image)?;
        let img = pnm::decode(&ibytes, &ipath)?;
        if img.channels != 3 || img.width != cfg.width || img.height != cfg.height {
            return Err(Error::Image {
                path: ipath,
                detail: format!("expected {}x{} P6 image", cfg.width, cfg.height),
            });
        }
        let (lpath, lbytes) = self.read_checked(&s.label, s.crc32_label)?;
        let lab = pnm::decode(&lbytes, &lpath)?;
        if lab.channels != 1 || lab.width != cfg.width || lab.height != cfg.height {
            return Err(Error::Image {
                path: lpath,
                detail: format!("expected {}x{} P5 label map", cfg.width, cfg.height),
            });
        }
        if let Some((pixel, &label)) = lab
            .data
            .iter()
            .enumerate()
            .find(|(_, &v)| v as usize >= cfg.num_classes)
        {
            return Err(Error::LabelOutOfRange {
                pixel,
                label: label as u32,
                num_classes: cfg.num_classes,
            });
        }

        let (h, w) = (img.height, img.width);
        let mut data = vec![0.0f32; 3 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                data[c * h * w + p] = img.data[3 * p + c] as f32;
            }
        }
        Ok((Tensor::new(&[3, h, w], data)?, LabelMap::new(h, w, lab.data)?))
    }

    pub fn load_split(&self, split: Split) -> Result<SampleSet> {
        let pairs: Vec<(Tensor, LabelMap)> = self
            .split_range(split)
            .into_par_iter()
            .map(|i| self.load_sample(i))
            .collect::<Result<_>>()?;
        let (images, labels) = pairs.into_iter().unzip();
        Ok(SampleSet { images, labels })
    }
}

/// Opens the manifest in `dataset_dir` and loads one sample.
pub fn load_sample(dataset_dir: &Path, index: u64) -> Result<(Tensor, LabelMap)> {
    Dataset::open(dataset_dir)?.load_sample(index)
}
