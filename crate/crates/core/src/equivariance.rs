//! Layer- and backbone-level equivariance checks with pass/fail thresholds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::backbone::{Backbone, BackboneConfig, Variant};
use crate::error::Result;
use crate::group::{rotate_quarter, CyclicGroup, FieldType, GroupAction, RotationMode};
use crate::params::ParamStore;
use crate::steerable::{Ctx, EquivConv, InnerBatchNorm};
use crate::tensor::Tensor;

pub const EXACT_TOL: f64 = 1e-5;
pub const QUARTER_TOL: f64 = 1e-3;
pub const EIGHTH_TOL: f64 = 0.1;
/// Deviation above which a non-equivariant backbone counts as clearly broken.
pub const NEGATIVE_CONTROL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub deviation: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, deviation: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            deviation,
            threshold,
            pass: deviation.is_finite() && deviation <= threshold,
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<4} {:<36} deviation {:.3e}  threshold {:.0e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.deviation,
            self.threshold
        )
    }
}

fn forward(store: &ParamStore<f32>, training: bool, x: &Tensor<f32>, f: impl FnOnce(&mut Ctx<'_, f32>, crate::autodiff::Var) -> Result<crate::autodiff::Var>) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, training);
    let xv = ctx.tape.constant(x.clone());
    let y = f(&mut ctx, xv)?;
    Ok(ctx.tape.value(y).clone())
}

fn act_batch(act: &GroupAction, x: &Tensor<f32>, ft: &FieldType) -> Result<Tensor<f32>> {
    let parts = (0..x.shape()[0])
        .map(|b| act.act_on_field(&x.index0(b)?, ft))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&parts)
}

/// Relative L2 deviation over the central disc of radius `radius · size`,
/// or over everything but a `crop`-pixel border when `radius` is `None`.
fn rel_deviation(a: &Tensor<f32>, b: &Tensor<f32>, crop: usize, radius: Option<f64>) -> f64 {
    let s = a.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = a.len() / (h * w);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for p in 0..planes {
        for r in crop..h.saturating_sub(crop) {
            for c in crop..w.saturating_sub(crop) {
                if let Some(rad) = radius {
                    if ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt() > rad * h.min(w) as f64 {
                        continue;
                    }
                }
                let i = (p * h + r) * w + c;
                num += (a.data()[i] as f64 - b.data()[i] as f64).powi(2);
                den += (b.data()[i] as f64).powi(2);
            }
        }
    }
    (num / den.max(1e-30)).sqrt()
}

/// Gaussian-blurred white noise, `[1, c, s, s]`.
pub fn smooth_noise(c: usize, s: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let noise = Tensor::<f32>::randn(&[c, s, s], 1.0, rng);
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f32> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp() as f32).collect();
    let blur = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            let plane = &src[ch * s * s..(ch + 1) * s * s];
            for i in 0..s {
                for j in 0..s {
                    let mut acc = 0.0;
                    for (t, &wt) in taps.iter().enumerate() {
                        let d = t as isize - r;
                        let (ii, jj) = if horizontal { (i as isize, j as isize + d) } else { (i as isize + d, j as isize) };
                        let (ii, jj) = (ii.clamp(0, s as isize - 1) as usize, jj.clamp(0, s as isize - 1) as usize);
                        acc += wt * plane[ii * s + jj];
                    }
                    out[ch * s * s + i * s + j] = acc;
                }
            }
        }
        out
    };
    let once = blur(noise.data(), true);
    Tensor::new(&[1, c, s, s], blur(&once, false)).expect("shape")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layer {
    Lift,
    Group,
    Readout,
    BatchNorm,
}

impl Layer {
    const ALL: [Layer; 4] = [Layer::Lift, Layer::Group, Layer::Readout, Layer::BatchNorm];

    fn name(self) -> &'static str {
        match self {
            Layer::Lift => "lift_conv",
            Layer::Group => "group_conv",
            Layer::Readout => "readout",
            Layer::BatchNorm => "inner_batch_norm",
        }
    }
}

/// Builds a fresh layer and returns (input type, output type, layer output).
fn layer_io(layer: Layer, g: CyclicGroup, k: usize, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<(FieldType, FieldType, Box<dyn Fn(&ParamStore<f32>, &Tensor<f32>) -> Result<Tensor<f32>>>)> {
    let reg = FieldType::regular(g, 2)?;
    Ok(match layer {
        Layer::BatchNorm => {
            let bn = InnerBatchNorm::new(store, "bn", reg.clone());
            let run = move |s: &ParamStore<f32>, x: &Tensor<f32>| forward(s, true, x, |ctx, v| bn.forward(ctx, v));
            (reg.clone(), reg, Box::new(run))
        }
        _ => {
            let (tin, tout, k, readout) = match layer {
                Layer::Lift => (FieldType::trivial(g, 2)?, reg, k, false),
                Layer::Group => (reg.clone(), reg, k, false),
                _ => (reg, FieldType::trivial(g, 3)?, 1, true),
            };
            let conv = EquivConv::new(store, "conv", tin.clone(), tout.clone(), k, 1, readout, rng)?;
            let run = move |s: &ParamStore<f32>, x: &Tensor<f32>| forward(s, false, x, |ctx, v| conv.forward(ctx, v));
            (tin, tout, Box::new(run))
        }
    })
}

/// Max absolute deviation between act-then-layer and layer-then-act over
/// `trials` random layers, inputs and non-identity quarter turns of C4.
pub fn c4_layer_checks(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let g = CyclicGroup::new(4)?;
    let mut out = Vec::new();
    for (li, layer) in Layer::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(li as u64));
        let mut worst = 0.0f64;
        for t in 0..trials {
            let mut store = ParamStore::new();
            let (tin, tout, run) = layer_io(layer, g, 3, &mut store, &mut rng)?;
            let batch = if layer == Layer::BatchNorm { 2 } else { 1 };
            let x = Tensor::randn(&[batch, tin.channel_count(), 7, 7], 1.0, &mut rng);
            let act = GroupAction::new(g, 1 + t % 3, RotationMode::Exact)?;
            let y = run(&store, &x)?;
            let y_rot = run(&store, &act_batch(&act, &x, &tin)?)?;
            worst = worst.max(act_batch(&act, &y, &tout)?.max_abs_diff(&y_rot));
        }
        out.push(CheckResult::at_most(format!("C4 {} ({trials} trials)", layer.name()), worst, EXACT_TOL));
    }
    Ok(out)
}

/// C8 layers under 90° (exact resampling) and 45° (bilinear resampling on
/// smooth inputs, central disc). Deviations are relative.
pub fn c8_layer_checks(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let g = CyclicGroup::new(8)?;
    let mut out = Vec::new();
    for (li, layer) in [Layer::Lift, Layer::Group, Layer::Readout].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100 + li as u64));
        let (mut quarter, mut eighth) = (0.0f64, 0.0f64);
        for t in 0..trials {
            let mut store = ParamStore::new();
            let k = if t % 2 == 0 { 3 } else { 5 };
            let (tin, tout, run) = layer_io(layer, g, k, &mut store, &mut rng)?;
            let x = smooth_noise(tin.channel_count(), 41, 3.0, &mut rng);
            let y = run(&store, &x)?;
            let q = GroupAction::new(g, 2, RotationMode::Exact)?;
            let yq = run(&store, &act_batch(&q, &x, &tin)?)?;
            quarter = quarter.max(rel_deviation(&act_batch(&q, &y, &tout)?, &yq, 0, None));
            let e = GroupAction::new(g, 1, RotationMode::Bilinear)?;
            let ye = run(&store, &act_batch(&e, &x, &tin)?)?;
            eighth = eighth.max(rel_deviation(&act_batch(&e, &y, &tout)?, &ye, 0, Some(0.3)));
        }
        out.push(CheckResult::at_most(format!("C8 {} 90°", layer.name()), quarter, QUARTER_TOL));
        out.push(CheckResult::at_most(format!("C8 {} 45° smooth", layer.name()), eighth, EIGHTH_TOL));
    }
    Ok(out)
}

/// Interior relative deviation of coarse and fine features under a 90°
/// rotation of the input image, in eval mode.
pub fn backbone_invariance(backbone: &Backbone<f32>, store: &ParamStore<f32>, size: usize, seed: u64) -> Result<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = Tensor::<f32>::uniform(&[3, size, size], 0.0, 1.0, &mut rng);
    let f = backbone.extract(store, &img)?;
    let fr = backbone.extract(store, &rotate_quarter(&img, 1)?)?;
    Ok([
        rel_deviation(&fr.coarse, &rotate_quarter(&f.coarse, 1)?, 1, None),
        rel_deviation(&fr.fine, &rotate_quarter(&f.fine, 1)?, 1, None),
    ])
}

pub fn backbone_checks(backbone: &Backbone<f32>, store: &ParamStore<f32>, label: &str) -> Result<Vec<CheckResult>> {
    let [c, f] = backbone_invariance(backbone, store, 64, 7)?;
    Ok(vec![
        CheckResult::at_most(format!("{label} backbone coarse 90°"), c, QUARTER_TOL),
        CheckResult::at_most(format!("{label} backbone fine 90°"), f, QUARTER_TOL),
    ])
}

/// Fresh-init backbone with the given config, seeded.
pub fn fresh_backbone(cfg: &BackboneConfig, seed: u64) -> Result<(ParamStore<f32>, Backbone<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, cfg, &mut rng)?;
    Ok((store, bb))
}

/// The layer suite that applies to the variant's group, then the backbone
/// test. Plain backbones have no layer suite and are expected to fail the
/// backbone test.
pub fn run_suite(variant: Variant, backbone: &Backbone<f32>, store: &ParamStore<f32>, trials: usize) -> Result<Vec<CheckResult>> {
    let mut out = match variant.group().order() {
        4 => c4_layer_checks(trials, 0)?,
        8 => c8_layer_checks(trials.min(20), 0)?,
        _ => Vec::new(),
    };
    out.extend(backbone_checks(backbone, store, variant.as_str())?);
    Ok(out)
}
