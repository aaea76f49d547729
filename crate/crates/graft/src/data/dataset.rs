//! Dataset types and the on-disk directory format.
//!
//! Layout: `root/{train,query,gallery}/<modality>/<id>_<view>_<idx>.png`
//! with 16-bit grayscale or RGB PNGs, plus a `manifest.json` describing the
//! modalities and image dimensions. Pixels are stored on the u16 grid, so a
//! save/load round trip is lossless for quantized data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::image::ImageBuf;

pub const SPLIT_NAMES: [&str; 3] = ["train", "query", "gallery"];

/// Aligned images of one object instance across all modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub id: u64,
    pub view: u64,
    pub index: u64,
    /// One image per modality, all depicting the same instance.
    pub images: Vec<ImageBuf>,
}

impl MultimodalSample {
    pub fn key(&self) -> (u64, u64, u64) {
        (self.id, self.view, self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<MultimodalSample>,
    pub query: Vec<MultimodalSample>,
    pub gallery: Vec<MultimodalSample>,
    pub modality_names: Vec<String>,
}

impl DatasetSplit {
    /// Checks the structural invariants: aligned modality counts, pixel
    /// range, and overlapping query/gallery identities.
    pub fn validate(&self) -> Result<()> {
        let m = self.modality_names.len();
        for (name, samples) in [
            ("train", &self.train),
            ("query", &self.query),
            ("gallery", &self.gallery),
        ] {
            for s in samples {
                if s.images.len() != m {
                    return Err(Error::data(format!(
                        "{name} sample {:?}: {} modalities, expected {m}",
                        s.key(),
                        s.images.len()
                    )));
                }
                if s.images.iter().any(|img| !img.in_unit_range()) {
                    return Err(Error::data(format!(
                        "{name} sample {:?}: pixel outside [0, 1]",
                        s.key()
                    )));
                }
            }
        }
        let q: BTreeSet<u64> = self.query.iter().map(|s| s.id).collect();
        let g: BTreeSet<u64> = self.gallery.iter().map(|s| s.id).collect();
        if !q.is_empty() && q.intersection(&g).count() == 0 {
            return Err(Error::data("query and gallery identities do not overlap"));
        }
        Ok(())
    }

    /// Dense label mapping over every identity in the dataset, sorted by id.
    pub fn label_map(&self) -> BTreeMap<u64, usize> {
        let ids: BTreeSet<u64> = self
            .train
            .iter()
            .chain(&self.query)
            .chain(&self.gallery)
            .map(|s| s.id)
            .collect();
        ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
    }

    pub fn n_identities(&self) -> usize {
        self.label_map().len()
    }

    /// A copy restricted to a subset of the modalities (by index).
    pub fn select_modalities(&self, keep: &[usize]) -> Result<DatasetSplit> {
        let m = self.modality_names.len();
        if keep.is_empty() || keep.iter().any(|&i| i >= m) {
            return Err(Error::config(format!(
                "modality subset {keep:?} invalid for {m} modalities"
            )));
        }
        let restrict = |samples: &[MultimodalSample]| {
            samples
                .iter()
                .map(|s| MultimodalSample {
                    id: s.id,
                    view: s.view,
                    index: s.index,
                    images: keep.iter().map(|&i| s.images[i].clone()).collect(),
                })
                .collect()
        };
        Ok(DatasetSplit {
            train: restrict(&self.train),
            query: restrict(&self.query),
            gallery: restrict(&self.gallery),
            modality_names: keep.iter().map(|&i| self.modality_names[i].clone()).collect(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirManifest {
    pub modalities: Vec<String>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub counts: BTreeMap<String, usize>,
}

fn file_name(s: &MultimodalSample) -> String {
    format!("{:04}_{:02}_{:04}.png", s.id, s.view, s.index)
}

/// Writes the split as the directory layout above. Pixels are quantized to
/// the u16 grid by construction of the format.
pub fn save_directory(root: &Path, split: &DatasetSplit) -> Result<()> {
    split.validate()?;
    let first = split
        .train
        .first()
        .or(split.gallery.first())
        .ok_or_else(|| Error::data("cannot save an empty dataset"))?;
    let (c, h, w) = (
        first.images[0].channels,
        first.images[0].height,
        first.images[0].width,
    );
    if c != 1 && c != 3 {
        return Err(Error::data(format!(
            "directory format supports 1- or 3-channel images, got {c}"
        )));
    }
    let mut counts = BTreeMap::new();
    for (split_name, samples) in [
        ("train", &split.train),
        ("query", &split.query),
        ("gallery", &split.gallery),
    ] {
        counts.insert(split_name.to_string(), samples.len());
        for (m, modality) in split.modality_names.iter().enumerate() {
            let dir = root.join(split_name).join(modality);
            fs::create_dir_all(&dir)?;
            for s in samples {
                write_png(&dir.join(file_name(s)), &s.images[m])?;
            }
        }
    }
    let manifest = DirManifest {
        modalities: split.modality_names.clone(),
        channels: c,
        height: h,
        width: w,
        counts,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::data(format!("manifest encode: {e}")))?;
    fs::write(root.join("manifest.json"), text)?;
    Ok(())
}

fn write_png(path: &Path, img: &ImageBuf) -> Result<()> {
    let to_u16 = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    match img.channels {
        1 => {
            let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
                img.width as u32,
                img.height as u32,
            );
            for y in 0..img.height {
                for x in 0..img.width {
                    buf.put_pixel(x as u32, y as u32, image::Luma([to_u16(img.get(0, y, x))]));
                }
            }
            buf.save(path)
                .map_err(|e| Error::data(format!("write {}: {e}", path.display())))
        }
        3 => {
            let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(
                img.width as u32,
                img.height as u32,
            );
            for y in 0..img.height {
                for x in 0..img.width {
                    let px = image::Rgb([
                        to_u16(img.get(0, y, x)),
                        to_u16(img.get(1, y, x)),
                        to_u16(img.get(2, y, x)),
                    ]);
                    buf.put_pixel(x as u32, y as u32, px);
                }
            }
            buf.save(path)
                .map_err(|e| Error::data(format!("write {}: {e}", path.display())))
        }
        c => Err(Error::data(format!("unsupported channel count {c}"))),
    }
}

fn read_png(path: &Path, channels: usize) -> Result<ImageBuf> {
    let dynimg = image::open(path)
        .map_err(|e| Error::data(format!("read {}: {e}", path.display())))?;
    match channels {
        1 => {
            let gray = dynimg.to_luma16();
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let mut img = ImageBuf::zeros(1, h, w);
            for y in 0..h {
                for x in 0..w {
                    img.set(0, y, x, gray.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0);
                }
            }
            Ok(img)
        }
        3 => {
            let rgb = dynimg.to_rgb16();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let mut img = ImageBuf::zeros(3, h, w);
            for y in 0..h {
                for x in 0..w {
                    let px = rgb.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        img.set(c, y, x, px.0[c] as f64 / 65535.0);
                    }
                }
            }
            Ok(img)
        }
        c => Err(Error::data(format!("unsupported channel count {c}"))),
    }
}

fn parse_key(name: &str) -> Option<(u64, u64, u64)> {
    let stem = name.strip_suffix(".png")?;
    let mut parts = stem.split('_');
    let id = parts.next()?.parse().ok()?;
    let view = parts.next()?.parse().ok()?;
    let idx = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((id, view, idx))
}

/// Loads a dataset directory, requiring every modality present for every
/// `(id, view, idx)` tuple.
pub fn load_directory(root: &Path) -> Result<DatasetSplit> {
    let manifest_path = root.join("manifest.json");
    let manifest: DirManifest = {
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::data(format!("missing manifest {}: {e}", manifest_path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("manifest decode: {e}")))?
    };
    if manifest.modalities.is_empty() {
        return Err(Error::data("manifest lists no modalities"));
    }

    let mut splits: Vec<Vec<MultimodalSample>> = Vec::new();
    for split_name in SPLIT_NAMES {
        let split_dir = root.join(split_name);
        // Keys come from the first modality; all others must match.
        let first_dir = split_dir.join(&manifest.modalities[0]);
        let mut keys: Vec<(u64, u64, u64)> = Vec::new();
        if first_dir.is_dir() {
            for entry in fs::read_dir(&first_dir)? {
                let entry = entry?;
                let name = entry.file_name().to_string_lossy().into_owned();
                match parse_key(&name) {
                    Some(k) => keys.push(k),
                    None => {
                        return Err(Error::data(format!(
                            "{split_name}/{}: unparseable file name {name:?}",
                            manifest.modalities[0]
                        )))
                    }
                }
            }
        }
        keys.sort_unstable();
        if split_name == "gallery" && keys.is_empty() {
            return Err(Error::data("gallery empty"));
        }
        let mut samples = Vec::with_capacity(keys.len());
        for key in keys {
            let name = format!("{:04}_{:02}_{:04}.png", key.0, key.1, key.2);
            let mut images = Vec::with_capacity(manifest.modalities.len());
            for modality in &manifest.modalities {
                let path = split_dir.join(modality).join(&name);
                if !path.is_file() {
                    return Err(Error::data(format!(
                        "{split_name}: tuple {key:?} missing modality {modality:?}"
                    )));
                }
                let img = read_png(&path, manifest.channels)?;
                if img.height != manifest.height || img.width != manifest.width {
                    return Err(Error::data(format!(
                        "{split_name}: tuple {key:?} modality {modality:?} has size {}x{}, manifest says {}x{}",
                        img.height, img.width, manifest.height, manifest.width
                    )));
                }
                images.push(img);
            }
            samples.push(MultimodalSample {
                id: key.0,
                view: key.1,
                index: key.2,
                images,
            });
        }
        splits.push(samples);
    }
    let gallery = splits.pop().expect("three splits");
    let query = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    let split = DatasetSplit {
        train,
        query,
        gallery,
        modality_names: manifest.modalities,
    };
    split.validate()?;
    Ok(split)
}
