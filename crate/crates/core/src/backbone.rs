//! Feature-pyramid backbone producing coarse (1/8) and fine (1/2)
//! invariant feature maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::group::{CyclicGroup, FieldType};
use crate::params::ParamStore;
use crate::steerable::{Ctx, EquivConv, InnerBatchNorm};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Plain,
    C4star,
    C4,
    C8star,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Plain, Variant::C4star, Variant::C4, Variant::C8star];

    pub fn group(self) -> CyclicGroup {
        let order = match self {
            Variant::Plain => 1,
            Variant::C4star | Variant::C4 => 4,
            Variant::C8star => 8,
        };
        CyclicGroup::new(order).expect("supported order")
    }

    /// Regular fields carrying a stage of `channels` plain channels.
    pub fn fields(self, channels: usize) -> Result<usize> {
        let per = match self {
            Variant::C4 => 2,
            other => other.group().order(),
        };
        if !channels.is_multiple_of(per) {
            return Err(Error::Invalid(format!(
                "{channels} channels not divisible by {per} for variant {}",
                self.as_str()
            )));
        }
        Ok(channels / per)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::C4star => "c4star",
            Variant::C4 => "c4",
            Variant::C8star => "c8star",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant {s:?} (plain, c4star, c4, c8star)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub base_width: usize,
    pub coarse_dim: usize,
    pub fine_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: Variant::C4star,
            base_width: 16,
            coarse_dim: 32,
            fine_dim: 16,
        }
    }
}

impl BackboneConfig {
    /// Plain channel widths at 1/2, 1/4 and 1/8 resolution.
    pub fn widths(&self) -> [usize; 3] {
        let b = self.base_width;
        [b, b * 3 / 2, b * 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || !self.base_width.is_multiple_of(2) {
            return Err(Error::Invalid(format!("base_width must be even and positive, got {}", self.base_width)));
        }
        if self.coarse_dim == 0 || self.fine_dim == 0 {
            return Err(Error::Invalid("output dims must be positive".into()));
        }
        for w in self.widths() {
            self.variant.fields(w)?;
        }
        Ok(())
    }

    /// Field types of the three stages.
    pub fn stage_types(&self) -> Result<[FieldType; 3]> {
        let g = self.variant.group();
        let [a, b, c] = self.widths();
        Ok([
            FieldType::regular(g, self.variant.fields(a)?)?,
            FieldType::regular(g, self.variant.fields(b)?)?,
            FieldType::regular(g, self.variant.fields(c)?)?,
        ])
    }
}

struct ResBlock<T: Scalar> {
    conv1: EquivConv<T>,
    bn1: InnerBatchNorm<T>,
    conv2: EquivConv<T>,
    bn2: InnerBatchNorm<T>,
    skip: Option<(EquivConv<T>, InnerBatchNorm<T>)>,
}

impl<T: Scalar> ResBlock<T> {
    fn new<R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        tin: &FieldType,
        tout: &FieldType,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = EquivConv::new(store, &format!("{name}.conv1"), tin.clone(), tout.clone(), 3, stride, false, rng)?;
        let bn1 = InnerBatchNorm::new(store, &format!("{name}.bn1"), tout.clone());
        let conv2 = EquivConv::new(store, &format!("{name}.conv2"), tout.clone(), tout.clone(), 3, 1, false, rng)?;
        let bn2 = InnerBatchNorm::new(store, &format!("{name}.bn2"), tout.clone());
        let skip = if stride != 1 || tin != tout {
            Some((
                EquivConv::new(store, &format!("{name}.skip"), tin.clone(), tout.clone(), 1, stride, false, rng)?,
                InnerBatchNorm::new(store, &format!("{name}.skip_bn"), tout.clone()),
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            skip,
        })
    }

    fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn1.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        let y = self.conv2.forward(ctx, y)?;
        let y = self.bn2.forward(ctx, y)?;
        let s = match &self.skip {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.tape.add(y, s)?;
        Ok(ctx.tape.relu(sum))
    }
}

/// One upsampling step: lateral 1×1 on the skip, add the upsampled coarser
/// map, then 3×3 → norm → ReLU → 3×3.
struct Merge<T: Scalar> {
    lateral: EquivConv<T>,
    conv1: EquivConv<T>,
    bn: InnerBatchNorm<T>,
    conv2: EquivConv<T>,
}

impl<T: Scalar> Merge<T> {
    fn new<R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        skip: &FieldType,
        carried: &FieldType,
        out: &FieldType,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            lateral: EquivConv::new(store, &format!("{name}.lateral"), skip.clone(), carried.clone(), 1, 1, false, rng)?,
            conv1: EquivConv::new(store, &format!("{name}.conv1"), carried.clone(), carried.clone(), 3, 1, false, rng)?,
            bn: InnerBatchNorm::new(store, &format!("{name}.bn"), carried.clone()),
            conv2: EquivConv::new(store, &format!("{name}.conv2"), carried.clone(), out.clone(), 3, 1, false, rng)?,
        })
    }

    fn forward(&self, ctx: &mut Ctx<'_, T>, skip: Var, coarser: Var) -> Result<Var> {
        let lat = self.lateral.forward(ctx, skip)?;
        let up = ctx.tape.upsample2(coarser)?;
        let y = ctx.tape.add(lat, up)?;
        let y = self.conv1.forward(ctx, y)?;
        let y = self.bn.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        self.conv2.forward(ctx, y)
    }
}

/// Coarse `[coarse_dim, h/8, w/8]` and fine `[fine_dim, h/2, w/2]` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair<T = f32> {
    pub coarse: Tensor<T>,
    pub fine: Tensor<T>,
}

pub struct Backbone<T: Scalar> {
    config: BackboneConfig,
    stem: EquivConv<T>,
    stem_bn: InnerBatchNorm<T>,
    blocks: [ResBlock<T>; 3],
    top: EquivConv<T>,
    merge2: Merge<T>,
    merge1: Merge<T>,
    coarse_out: EquivConv<T>,
    fine_out: EquivConv<T>,
}

pub const PARAM_PREFIX: &str = "backbone";

impl<T: Scalar> Backbone<T> {
    pub fn new<R: Rng>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let g = config.variant.group();
        let [t1, t2, t3] = config.stage_types()?;
        let p = |s: &str| format!("{PARAM_PREFIX}.{s}");
        let rgb = FieldType::trivial(g, 3)?;
        let stem = EquivConv::new(store, &p("stem"), rgb, t1.clone(), 3, 2, false, rng)?;
        let stem_bn = InnerBatchNorm::new(store, &p("stem_bn"), t1.clone());
        let blocks = [
            ResBlock::new(store, &p("layer1"), &t1, &t1, 1, rng)?,
            ResBlock::new(store, &p("layer2"), &t1, &t2, 2, rng)?,
            ResBlock::new(store, &p("layer3"), &t2, &t3, 2, rng)?,
        ];
        let top = EquivConv::new(store, &p("layer3_out"), t3.clone(), t3.clone(), 1, 1, false, rng)?;
        let merge2 = Merge::new(store, &p("merge2"), &t2, &t3, &t2, rng)?;
        let merge1 = Merge::new(store, &p("merge1"), &t1, &t2, &t1, rng)?;
        let coarse_out = EquivConv::new(
            store,
            &p("coarse_readout"),
            t3,
            FieldType::trivial(g, config.coarse_dim)?,
            1,
            1,
            true,
            rng,
        )?;
        let fine_out = EquivConv::new(
            store,
            &p("fine_readout"),
            t1,
            FieldType::trivial(g, config.fine_dim)?,
            1,
            1,
            true,
            rng,
        )?;
        Ok(Self {
            config: config.clone(),
            stem,
            stem_bn,
            blocks,
            top,
            merge2,
            merge1,
            coarse_out,
            fine_out,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Channel counts of the intermediate feature maps at 1/2, 1/4, 1/8.
    pub fn stage_channels(&self) -> [usize; 3] {
        [
            self.stem.out_type().channel_count(),
            self.blocks[1].conv1.out_type().channel_count(),
            self.blocks[2].conv1.out_type().channel_count(),
        ]
    }

    /// Learnable scalars owned by the backbone.
    pub fn param_count(store: &ParamStore<T>) -> usize {
        store
            .trainable_ids()
            .filter(|&id| store.name(id).starts_with(PARAM_PREFIX))
            .map(|id| store.get(id).len())
            .sum()
    }

    /// `images` is `[b, 3, h, w]` with `h` and `w` divisible by 8. Returns
    /// the coarse and fine variables.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<(Var, Var)> {
        let s = ctx.tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("backbone", format!("expected [b, 3, h, w], got {s:?}")));
        }
        if !s[2].is_multiple_of(8) || !s[3].is_multiple_of(8) || s[2] == 0 || s[3] == 0 {
            return Err(Error::Invalid(format!(
                "image size {}×{} must be a positive multiple of 8 in both dimensions",
                s[3], s[2]
            )));
        }
        let x = self.stem.forward(ctx, images)?;
        let x = self.stem_bn.forward(ctx, x)?;
        let x = ctx.tape.relu(x);
        let x1 = self.blocks[0].forward(ctx, x)?;
        let x2 = self.blocks[1].forward(ctx, x1)?;
        let x3 = self.blocks[2].forward(ctx, x2)?;
        let x3_out = self.top.forward(ctx, x3)?;
        let x2_out = self.merge2.forward(ctx, x2, x3_out)?;
        let x1_out = self.merge1.forward(ctx, x1, x2_out)?;
        let coarse = self.coarse_out.forward(ctx, x3_out)?;
        let fine = self.fine_out.forward(ctx, x1_out)?;
        Ok((coarse, fine))
    }

    /// Eval-mode features of one `[3, h, w]` image.
    pub fn extract(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<FeaturePair<T>> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::shape("extract", format!("expected [3, h, w], got {s:?}")));
        }
        let batch = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, false);
        let x = ctx.tape.constant(batch);
        let (c, f) = self.forward(&mut ctx, x)?;
        let coarse = ctx.tape.value(c).index0(0)?;
        let fine = ctx.tape.value(f).index0(0)?;
        Ok(FeaturePair { coarse, fine })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::rotate_quarter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(variant: Variant, base: usize) -> (ParamStore<f32>, Backbone<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            variant,
            base_width: base,
            coarse_dim: 8,
            fine_dim: 4,
        };
        let bb = Backbone::new(&mut store, &cfg, &mut rng).unwrap();
        (store, bb)
    }

    #[test]
    fn shapes_at_64() {
        for v in Variant::ALL {
            let (store, bb) = build(v, 16);
            let img = Tensor::from_fn(&[3, 64, 64], |i| ((i * 7919) % 255) as f32 / 255.0);
            let f = bb.extract(&store, &img).unwrap();
            assert_eq!(f.coarse.shape(), &[8, 8, 8], "{v}");
            assert_eq!(f.fine.shape(), &[4, 32, 32], "{v}");
        }
    }

    #[test]
    fn sizes_must_divide_by_eight() {
        let (store, bb) = build(Variant::Plain, 8);
        let err = bb.extract(&store, &Tensor::zeros(&[3, 60, 64])).unwrap_err();
        assert!(err.to_string().contains("multiple of 8"));
    }

    #[test]
    fn plain_parameter_hand_count() {
        // base 8: widths 8, 12, 16; coarse 8, fine 4
        let (store, _) = build(Variant::Plain, 8);
        let conv = |i: usize, o: usize, k: usize| i * o * k * k;
        let bn = |c: usize| 2 * c;
        let stem = conv(3, 8, 3) + bn(8);
        let l1 = conv(8, 8, 3) + bn(8) + conv(8, 8, 3) + bn(8);
        let l2 = conv(8, 12, 3) + bn(12) + conv(12, 12, 3) + bn(12) + conv(8, 12, 1) + bn(12);
        let l3 = conv(12, 16, 3) + bn(16) + conv(16, 16, 3) + bn(16) + conv(12, 16, 1) + bn(16);
        let top = conv(16, 16, 1);
        let m2 = conv(12, 16, 1) + conv(16, 16, 3) + bn(16) + conv(16, 12, 3);
        let m1 = conv(8, 12, 1) + conv(12, 12, 3) + bn(12) + conv(12, 8, 3);
        let heads = conv(16, 8, 1) + 8 + conv(8, 4, 1) + 4;
        let total = stem + l1 + l2 + l3 + top + m2 + m1 + heads;
        assert_eq!(Backbone::param_count(&store), total);
    }

    #[test]
    fn variant_widths() {
        let (sp, plain) = build(Variant::Plain, 16);
        let (ss, star) = build(Variant::C4star, 16);
        let (_, c4) = build(Variant::C4, 16);
        assert_eq!(plain.stage_channels(), star.stage_channels());
        for (a, b) in c4.stage_channels().iter().zip(star.stage_channels()) {
            assert_eq!(*a, 2 * b);
        }
        let ratio = Backbone::param_count(&sp) as f64 / Backbone::param_count(&ss) as f64;
        assert!(ratio >= 3.6, "{ratio}");
    }

    fn rel_interior(a: &Tensor<f32>, b: &Tensor<f32>, crop: usize) -> f64 {
        let s = a.shape();
        let (h, w) = (s[1], s[2]);
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for c in 0..s[0] {
            for r in crop..h - crop {
                for col in crop..w - crop {
                    let i = (c * h + r) * w + col;
                    num += (a.data()[i] as f64 - b.data()[i] as f64).powi(2);
                    den += (b.data()[i] as f64).powi(2);
                }
            }
        }
        (num / den.max(1e-30)).sqrt()
    }

    fn textured(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::<f32>::uniform(&[3, h, w], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn c4star_features_rotate_with_the_image() {
        let (store, bb) = build(Variant::C4star, 8);
        let img = textured(32, 32, 3);
        let f = bb.extract(&store, &img).unwrap();
        let fr = bb.extract(&store, &rotate_quarter(&img, 1).unwrap()).unwrap();
        let dc = rel_interior(&fr.coarse, &rotate_quarter(&f.coarse, 1).unwrap(), 1);
        let df = rel_interior(&fr.fine, &rotate_quarter(&f.fine, 1).unwrap(), 1);
        assert!(dc <= 1e-3 && df <= 1e-3, "{dc} {df}");
    }

    #[test]
    fn plain_features_do_not() {
        let (store, bb) = build(Variant::Plain, 8);
        let img = textured(32, 32, 3);
        let f = bb.extract(&store, &img).unwrap();
        let fr = bb.extract(&store, &rotate_quarter(&img, 1).unwrap()).unwrap();
        let dc = rel_interior(&fr.coarse, &rotate_quarter(&f.coarse, 1).unwrap(), 1);
        assert!(dc > 0.05, "{dc}");
    }
}
