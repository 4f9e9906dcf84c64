//! Procedural scenes with random homography views, for desk-scale training
//! and testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::modify::{center_rotation, corner_warp, frame_corners};
use super::sequence::{image_hw, Modification, Sequence, VIEWS};
use crate::error::{Error, Result};
use crate::geometry::{dlt, Homography, Split};
use crate::image::{bilinear_warp, psnr};
use crate::tensor::Tensor;

/// Border excluded from photometric checks, in pixels.
const CHECK_MARGIN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub waves: usize,
    pub blobs: usize,
    /// Wavelength range of the sinusoids, in pixels.
    pub wavelength: [f64; 2],
    pub blob_sigma: [f64; 2],
    pub max_rotation_deg: f64,
    pub scale: [f64; 2],
    /// Fraction of the frame.
    pub max_translation: f64,
    /// Fraction of the frame.
    pub corner_jitter: f64,
    pub jitter: bool,
    pub brightness: f64,
    pub contrast: [f64; 2],
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            waves: 24,
            blobs: 12,
            wavelength: [8.0, 32.0],
            blob_sigma: [3.0, 10.0],
            max_rotation_deg: 15.0,
            scale: [0.9, 1.1],
            max_translation: 0.1,
            corner_jitter: 0.03,
            jitter: true,
            brightness: 0.1,
            contrast: [0.8, 1.2],
        }
    }
}

/// One step of the splitmix64 generator.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn scene_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ index as u64)
}

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

struct Blob {
    cx: f64,
    cy: f64,
    inv_two_var: f64,
    amp: f64,
}

/// Sum of sinusoids and Gaussian blobs, rescaled to `[0, 1]` over a region
/// twice the frame size and clamped beyond it.
pub struct Texture {
    waves: Vec<Wave>,
    blobs: Vec<Blob>,
    lo: f64,
    hi: f64,
    gains: [f64; 3],
}

impl Texture {
    pub fn random<R: Rng>(h: usize, w: usize, p: &SynthParams, rng: &mut R) -> Self {
        let tau = std::f64::consts::TAU;
        let waves = (0..p.waves)
            .map(|_| {
                let lambda = (rng.gen_range(p.wavelength[0].ln()..=p.wavelength[1].ln())).exp();
                let dir = rng.gen_range(0.0..tau);
                Wave {
                    kx: tau / lambda * dir.cos(),
                    ky: tau / lambda * dir.sin(),
                    phase: rng.gen_range(0.0..tau),
                    amp: rng.gen_range(0.5..=1.0),
                }
            })
            .collect();
        let (wf, hf) = (w as f64, h as f64);
        let blobs = (0..p.blobs)
            .map(|_| {
                let sigma = rng.gen_range(p.blob_sigma[0]..=p.blob_sigma[1]);
                Blob {
                    cx: rng.gen_range(-0.25 * wf..=1.25 * wf),
                    cy: rng.gen_range(-0.25 * hf..=1.25 * hf),
                    inv_two_var: 1.0 / (2.0 * sigma * sigma),
                    amp: rng.gen_range(-3.0..=3.0),
                }
            })
            .collect();
        let gains = [0, 1, 2].map(|_| rng.gen_range(0.6..=1.0));
        let mut t = Texture {
            waves,
            blobs,
            lo: 0.0,
            hi: 1.0,
            gains,
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let step = 1.0f64.max((w.max(h) as f64) / 128.0);
        let mut y = -0.5 * hf;
        while y <= 1.5 * hf {
            let mut x = -0.5 * wf;
            while x <= 1.5 * wf {
                let v = t.raw(x, y);
                lo = lo.min(v);
                hi = hi.max(v);
                x += step;
            }
            y += step;
        }
        t.lo = lo;
        t.hi = hi.max(lo + 1e-9);
        t
    }

    fn raw(&self, x: f64, y: f64) -> f64 {
        let mut v = 0.0;
        for wv in &self.waves {
            v += wv.amp * (wv.kx * x + wv.ky * y + wv.phase).sin();
        }
        for b in &self.blobs {
            let (dx, dy) = (x - b.cx, y - b.cy);
            v += b.amp * (-(dx * dx + dy * dy) * b.inv_two_var).exp();
        }
        v
    }

    /// Gray value at continuous position `(x, y)`.
    pub fn value(&self, x: f64, y: f64) -> f64 {
        ((self.raw(x, y) - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    /// `[3, h, w]` rendering of the texture seen through `to_texture`, which
    /// takes image pixel coordinates to texture coordinates.
    pub fn render(&self, h: usize, w: usize, to_texture: &Homography) -> Tensor<f32> {
        let mut out = vec![0f32; 3 * h * w];
        for r in 0..h {
            for c in 0..w {
                let v = to_texture
                    .apply(c as f64 + 0.5, r as f64 + 0.5)
                    .map_or(0.0, |(x, y)| self.value(x, y));
                for (ch, g) in self.gains.iter().enumerate() {
                    out[(ch * h + r) * w + c] = (g * v) as f32;
                }
            }
        }
        Tensor::new(&[3, h, w], out).expect("sized above")
    }
}

/// Random view homography: center rotation, scale and translation, then
/// independent corner perturbations.
pub fn random_view<R: Rng>(h: usize, w: usize, p: &SynthParams, rng: &mut R) -> Result<Homography> {
    let (wf, hf) = (w as f64, h as f64);
    let theta = rng.gen_range(-p.max_rotation_deg..=p.max_rotation_deg);
    let s = rng.gen_range(p.scale[0]..=p.scale[1]);
    let tx = rng.gen_range(-p.max_translation..=p.max_translation) * wf;
    let ty = rng.gen_range(-p.max_translation..=p.max_translation) * hf;
    let (cx, cy) = (wf / 2.0, hf / 2.0);
    let similarity = Homography::translation(tx, ty)
        .compose(&center_rotation(h, w, theta))
        .compose(&Homography::translation(cx, cy))
        .compose(&Homography::scaling(s, s)?)
        .compose(&Homography::translation(-cx, -cy));
    let src = frame_corners(h, w);
    let mut dst = src;
    for d in dst.iter_mut() {
        let (x, y) = similarity.apply(d[0], d[1]).expect("affine");
        *d = [
            x + rng.gen_range(-p.corner_jitter..=p.corner_jitter) * wf,
            y + rng.gen_range(-p.corner_jitter..=p.corner_jitter) * hf,
        ];
    }
    dlt(&src, &dst)
}

pub struct SynthScene {
    pub seed: u64,
    /// Views before photometric jitter.
    pub clean: Sequence,
    /// What gets written to disk; equal to `clean` when jitter is off.
    pub jittered: Sequence,
}

pub fn synth_sequence(name: &str, h: usize, w: usize, seed: u64, p: &SynthParams) -> Result<SynthScene> {
    if h == 0 || w == 0 || !h.is_multiple_of(8) || !w.is_multiple_of(8) {
        return Err(Error::Invalid(format!("scene size {h}×{w} must be a positive multiple of 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tex = Texture::random(h, w, p, &mut rng);
    let image_a = tex.render(h, w, &Homography::identity());
    let mut images_b = Vec::with_capacity(VIEWS);
    let mut homographies = Vec::with_capacity(VIEWS);
    for _ in 0..VIEWS {
        let hv = random_view(h, w, p, &mut rng)?;
        images_b.push(tex.render(h, w, &hv.inverse()));
        homographies.push(hv);
    }
    let (mut brightness, mut contrast) = (Vec::new(), Vec::new());
    for _ in 0..VIEWS {
        brightness.push(rng.gen_range(-p.brightness..=p.brightness));
        contrast.push(rng.gen_range(p.contrast[0]..=p.contrast[1]));
    }
    let clean = Sequence {
        name: name.to_string(),
        image_a,
        images_b,
        homographies,
        split: Split::Synthetic,
        provenance: vec![Modification::Synthetic { seed }],
    };
    let jittered = if p.jitter {
        let mut j = clean.clone();
        for (img, (&b, &c)) in j.images_b.iter_mut().zip(brightness.iter().zip(&contrast)) {
            *img = img.map(|v| ((v as f64 - 0.5) * c + 0.5 + b).clamp(0.0, 1.0) as f32);
        }
        j.provenance.push(Modification::Jitter { brightness, contrast });
        j
    } else {
        clean.clone()
    };
    Ok(SynthScene { seed, clean, jittered })
}

/// `n_scenes` scenes named `s000…`, generated in parallel with per-scene
/// seeds from [`scene_seed`].
pub fn synth_dataset(n_scenes: usize, h: usize, w: usize, seed: u64, p: &SynthParams) -> Result<Vec<SynthScene>> {
    (0..n_scenes)
        .into_par_iter()
        .map(|i| synth_sequence(&format!("s{i:03}"), h, w, scene_seed(seed, i), p))
        .collect()
}

/// Map from the generated view to the current B frame, rebuilt from the
/// rotation and corner-warp steps recorded after the last resize.
fn modification_map(seq: &Sequence, k: usize) -> Result<Homography> {
    let (h, w) = image_hw(&seq.images_b[k]);
    let mut m = Homography::identity();
    for step in &seq.provenance {
        match step {
            Modification::Rotate { angle_deg, signs, .. } => {
                m = center_rotation(h, w, signs[k] as f64 * angle_deg).compose(&m);
            }
            Modification::CornerWarp { offsets, .. } => {
                m = corner_warp(h, w, &offsets[k])?.compose(&m);
            }
            Modification::Resize { .. } => m = Homography::identity(),
            Modification::Synthetic { .. } | Modification::Jitter { .. } => {}
        }
    }
    Ok(m)
}

/// PSNR between A warped by the ground truth and view `k`, over the pixels
/// that both images cover away from their borders.
pub fn gt_psnr(seq: &Sequence, k: usize) -> Result<f64> {
    let (ha, wa) = seq.hw_a();
    let b = &seq.images_b[k];
    let (hb, wb) = image_hw(b);
    let h = &seq.homographies[k];
    let warped = bilinear_warp(&seq.image_a, &h.inverse(), hb, wb, 0.0)?;
    let to_a = h.inverse();
    let to_view = modification_map(seq, k)?.inverse();
    let inside = |map: &Homography, r: usize, c: usize, hh: usize, ww: usize| {
        map.apply(c as f64 + 0.5, r as f64 + 0.5).is_some_and(|(x, y)| {
            x >= CHECK_MARGIN && y >= CHECK_MARGIN && x <= ww as f64 - CHECK_MARGIN && y <= hh as f64 - CHECK_MARGIN
        })
    };
    psnr(&warped, b, |r, c| inside(&to_a, r, c, ha, wa) && inside(&to_view, r, c, hb, wb))
}
