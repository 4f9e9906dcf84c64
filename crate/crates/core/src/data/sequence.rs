//! Image sequences, their on-disk layout and the dataset manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pnm::{read_pnm, write_ppm};
use crate::error::{Error, Result};
use crate::geometry::{Homography, Split};
use crate::tensor::Tensor;

pub const VIEWS: usize = 5;
pub const MANIFEST: &str = "manifest.json";

/// One applied step of the generation or modification pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modification {
    Synthetic {
        seed: u64,
    },
    Jitter {
        brightness: Vec<f64>,
        contrast: Vec<f64>,
    },
    Resize {
        a: [usize; 2],
        b: Vec<[usize; 2]>,
    },
    Rotate {
        angle_deg: f64,
        seed: u64,
        /// +1 counter-clockwise, −1 clockwise, per B image.
        signs: Vec<i8>,
    },
    CornerWarp {
        s: f64,
        seed: u64,
        /// Per B image, per corner (upper-left, upper-right, lower-right,
        /// lower-left), the offset as `[vertical, horizontal]`.
        offsets: Vec<[[f64; 2]; 4]>,
    },
}

#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub image_a: Tensor<f32>,
    pub images_b: Vec<Tensor<f32>>,
    /// Ground truth maps from A to each B, in pixel coordinates.
    pub homographies: Vec<Homography>,
    pub split: Split,
    pub provenance: Vec<Modification>,
}

pub fn image_hw(img: &Tensor<f32>) -> (usize, usize) {
    let s = img.shape();
    (s[s.len() - 2], s[s.len() - 1])
}

impl Sequence {
    pub fn validate(&self) -> Result<()> {
        if self.images_b.len() != VIEWS || self.homographies.len() != VIEWS {
            return Err(Error::Invalid(format!(
                "sequence {} has {} images and {} homographies, expected {VIEWS}",
                self.name,
                self.images_b.len(),
                self.homographies.len()
            )));
        }
        for img in std::iter::once(&self.image_a).chain(&self.images_b) {
            if img.ndim() != 3 || img.shape()[0] != 3 {
                return Err(Error::shape("sequence", format!("image {:?} is not [3, h, w]", img.shape())));
            }
        }
        Ok(())
    }

    pub fn hw_a(&self) -> (usize, usize) {
        image_hw(&self.image_a)
    }

    /// Writes `1.ppm … 6.ppm` and `H_1_2 … H_1_6` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_ppm(&dir.join("1.ppm"), &self.image_a)?;
        for (k, (img, h)) in self.images_b.iter().zip(&self.homographies).enumerate() {
            write_ppm(&dir.join(format!("{}.ppm", k + 2)), img)?;
            let path = dir.join(format!("H_1_{}", k + 2));
            std::fs::write(&path, format_homography(h)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

pub fn format_homography(h: &Homography) -> String {
    let v = h.to_row_major();
    v.chunks(3)
        .map(|r| format!("{} {} {}\n", r[0], r[1], r[2]))
        .collect()
}

pub fn read_homography(path: &Path) -> Result<Homography> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let malformed = |detail: String| Error::Malformed {
        what: "homography",
        path: path.to_path_buf(),
        detail,
    };
    let vals = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| malformed(format!("bad number {t:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let arr: [f64; 9] = vals
        .try_into()
        .map_err(|v: Vec<f64>| malformed(format!("expected 9 values, found {}", v.len())))?;
    Homography::from_row_major(arr)
}

fn find_image(dir: &Path, stem: usize) -> Result<PathBuf> {
    for ext in ["ppm", "pgm"] {
        let p = dir.join(format!("{stem}.{ext}"));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::MissingFile(dir.join(format!("{stem}.ppm"))))
}

fn split_from_name(name: &str) -> Split {
    if name.starts_with("i_") {
        Split::Illumination
    } else if name.starts_with("v_") {
        Split::Viewpoint
    } else {
        Split::Synthetic
    }
}

/// Loads an HPatches-style scene directory. The split follows the `i_`/`v_`
/// name prefix, defaulting to synthetic.
pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let image_a = read_pnm(&find_image(dir, 1)?)?;
    let mut images_b = Vec::with_capacity(VIEWS);
    let mut homographies = Vec::with_capacity(VIEWS);
    for k in 2..=VIEWS + 1 {
        images_b.push(read_pnm(&find_image(dir, k)?)?);
        homographies.push(read_homography(&dir.join(format!("H_1_{k}")))?);
    }
    let split = split_from_name(&name);
    Ok(Sequence {
        name,
        image_a,
        images_b,
        homographies,
        split,
        provenance: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub name: String,
    pub split: Split,
    pub seed: Option<u64>,
    /// Paths relative to the dataset root, A first.
    pub images: Vec<String>,
    pub homographies: Vec<[f64; 9]>,
    pub provenance: Vec<Modification>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Writes every sequence under `root/<name>/` plus the manifest.
pub fn save_dataset(root: &Path, name: &str, seed: u64, seqs: &[Sequence], scene_seeds: &[Option<u64>]) -> Result<DatasetManifest> {
    let (height, width) = seqs.first().map(Sequence::hw_a).unwrap_or((0, 0));
    let mut scenes = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        seq.validate()?;
        seq.save(&root.join(&seq.name))?;
        scenes.push(SceneEntry {
            name: seq.name.clone(),
            split: seq.split,
            seed: scene_seeds.get(i).copied().flatten(),
            images: (1..=VIEWS + 1).map(|k| format!("{}/{k}.ppm", seq.name)).collect(),
            homographies: seq.homographies.iter().map(Homography::to_row_major).collect(),
            provenance: seq.provenance.clone(),
        });
    }
    let manifest = DatasetManifest {
        name: name.to_string(),
        seed,
        height,
        width,
        scenes,
    };
    let path = root.join(MANIFEST);
    std::fs::write(&path, manifest.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
        _ => Error::io(&path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        what: "manifest",
        path,
        detail: e.to_string(),
    })
}

/// Loads a dataset through its manifest when present, otherwise every
/// scene directory in name order.
pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>> {
    if root.join(MANIFEST).exists() {
        let m = read_manifest(root)?;
        return m.scenes.iter().map(|e| load_entry(root, &m, e)).collect();
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Invalid(format!("no scenes under {}", root.display())));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

fn load_entry(root: &Path, m: &DatasetManifest, e: &SceneEntry) -> Result<Sequence> {
    let path = root.join(MANIFEST);
    let malformed = |detail: String| Error::Malformed {
        what: "manifest",
        path: path.clone(),
        detail,
    };
    if e.images.len() != VIEWS + 1 || e.homographies.len() != VIEWS {
        return Err(malformed(format!("scene {} needs 6 images and 5 homographies", e.name)));
    }
    let mut images = e
        .images
        .iter()
        .map(|p| read_pnm(&root.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let image_a = images.remove(0);
    if image_hw(&image_a) != (m.height, m.width) {
        return Err(malformed(format!(
            "scene {} image A is {:?}, manifest says {}×{}",
            e.name,
            image_hw(&image_a),
            m.height,
            m.width
        )));
    }
    let homographies = e
        .homographies
        .iter()
        .map(|v| Homography::from_row_major(*v))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence {
        name: e.name.clone(),
        image_a,
        images_b: images,
        homographies,
        split: e.split,
        provenance: e.provenance.clone(),
    })
}
