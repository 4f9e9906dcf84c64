//! Backbone and matcher sharing one parameter store, with checkpoint I/O
//! and the training loss.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, FeaturePair};
use crate::data::CellTarget;
use crate::error::{Error, Result};
use crate::matcher::{dual_softmax, window_in_bounds, MatchOutput, Matcher, MatcherConfig, WindowRequest, FINE_STRIDE};
use crate::params::ParamStore;
use crate::steerable::Ctx;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub matcher: MatcherConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.matcher.validate()?;
        if self.matcher.d_model != self.backbone.coarse_dim {
            return Err(Error::Invalid(format!(
                "matcher.d_model ({}) must equal backbone.coarse_dim ({})",
                self.matcher.d_model, self.backbone.coarse_dim
            )));
        }
        if !self.backbone.fine_dim.is_multiple_of(self.matcher.heads) {
            return Err(Error::Invalid(format!(
                "backbone.fine_dim ({}) must be divisible by matcher.heads ({})",
                self.backbone.fine_dim, self.matcher.heads
            )));
        }
        Ok(())
    }
}

/// Description stored inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub step: usize,
    pub val_auc10: Option<f64>,
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    pub backbone: Backbone<f32>,
    pub matcher: Matcher<f32>,
}

/// One training pair: images `[3, h, w]` and per-A-cell targets.
pub struct PairSample<'a, T = f32> {
    pub image_a: &'a Tensor<T>,
    pub image_b: &'a Tensor<T>,
    pub targets: &'a [Option<CellTarget>],
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub coarse: f64,
    pub fine: f64,
    pub assigned: usize,
    pub fine_matches: usize,
}

/// Freshly initialized backbone and matcher at any precision.
pub fn build_parts<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(ParamStore<T>, Backbone<T>, Matcher<T>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, &config.backbone, &mut rng)?;
    let matcher = Matcher::new(&mut store, &config.matcher, config.backbone.fine_dim, &mut rng)?;
    Ok((store, backbone, matcher))
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let (store, backbone, matcher) = build_parts(config, seed)?;
        Ok(Self {
            config: config.clone(),
            store,
            backbone,
            matcher,
        })
    }

    pub fn save(&self, path: &Path, step: usize, val_auc10: Option<f64>) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            step,
            val_auc10,
        };
        self.store.save(path, &serde_json::to_value(meta)?)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (store, meta) = ParamStore::<f32>::load(path)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut model = Self::new(&meta.config, 0)?;
        model.store.assign_from(&store)?;
        Ok((model, meta))
    }

    pub fn extract(&self, image: &Tensor<f32>) -> Result<FeaturePair<f32>> {
        self.backbone.extract(&self.store, image)
    }

    pub fn match_features(&self, fa: &FeaturePair<f32>, fb: &FeaturePair<f32>) -> Result<MatchOutput> {
        self.matcher.match_features(&self.store, fa, fb)
    }

    pub fn match_images(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<MatchOutput> {
        self.match_features(&self.extract(a)?, &self.extract(b)?)
    }

    pub fn loss(&self, ctx: &mut Ctx<'_, f32>, batch: &[PairSample<'_>], lambda: f64) -> Result<Option<(Var, LossParts)>> {
        batch_loss(ctx, &self.backbone, &self.matcher, batch, lambda)
    }

    /// Loss and gradients of one batch in training mode; running statistics
    /// are not committed.
    pub fn loss_and_grads(
        &self,
        batch: &[PairSample<'_>],
        lambda: f64,
    ) -> Result<Option<(LossParts, crate::autodiff::GradientReport<f32>, Vec<(crate::params::ParamId, Tensor<f32>)>)>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, true);
        let Some((loss, parts)) = self.loss(&mut ctx, batch, lambda)? else {
            return Ok(None);
        };
        let updates = std::mem::take(&mut ctx.updates);
        drop(ctx);
        tape.backward(loss)?;
        Ok(Some((parts, tape.gradients(&self.store), updates)))
    }
}

/// Coarse negative log-likelihood of the assigned cells under the dual
/// softmax, plus `lambda` times the mean squared offset error (in fine
/// steps) on cells whose coarse argmax hits the target. Returns `None`
/// when no cell of the batch is assigned.
pub fn batch_loss<T: Scalar>(
ctx: &mut Ctx<'_, T>,
backbone: &Backbone<T>,
matcher: &Matcher<T>,
batch: &[PairSample<'_, T>],
lambda: f64,
) -> Result<Option<(Var, LossParts)>> {
    let n = batch.len();
    if n == 0 {
        return Ok(None);
    }
    let mut images: Vec<Tensor<T>> = batch.iter().map(|p| p.image_a.clone()).collect();
    images.extend(batch.iter().map(|p| p.image_b.clone()));
    let x = ctx.tape.constant(Tensor::stack(&images)?);
    let (coarse, fine) = backbone.forward(ctx, x)?;
    let cs = ctx.tape.shape(coarse).to_vec();
    let grid = (cs[2], cs[3]);
    let l = grid.0 * grid.1;
    let fs = ctx.tape.shape(fine).to_vec();
    let fine_hw = (fs[2], fs[3]);

    let mut rows = Vec::new();
    for (b, p) in batch.iter().enumerate() {
        if p.targets.len() != l {
            return Err(Error::shape("loss", format!("{} targets for {l} coarse cells", p.targets.len())));
        }
        for (i, t) in p.targets.iter().enumerate() {
            if let Some(t) = t {
                rows.push((b, i, *t));
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }

    let ca = ctx.tape.slice(coarse, 0, 0, n)?;
    let cb = ctx.tape.slice(coarse, 0, n, 2 * n)?;
    let (ta, tb) = matcher.transform_coarse(ctx, ca, cb)?;
    let s = matcher.similarity(ctx, ta, tb)?;
    let log_rows = ctx.tape.log_softmax_rows(s)?;
    let st = ctx.tape.permute(s, &[0, 2, 1])?;
    let log_cols = ctx.tape.log_softmax_rows(st)?;
    let row_idx: Arc<[usize]> = rows.iter().map(|&(b, i, t)| (b * l + i) * l + t.idx_b).collect();
    let col_idx: Arc<[usize]> = rows.iter().map(|&(b, i, t)| (b * l + t.idx_b) * l + i).collect();
    let m = rows.len();
    let lr = ctx.tape.gather(log_rows, row_idx, &[m])?;
    let lc = ctx.tape.gather(log_cols, col_idx, &[m])?;
    let ll = ctx.tape.add(lr, lc)?;
    let ll = ctx.tape.mean(ll);
    let coarse_loss = ctx.tape.scale(ll, T::of(-1.0));
    let mut parts = LossParts {
        coarse: ctx.tape.value(coarse_loss).item()?.f64(),
        assigned: m,
        ..Default::default()
    };
    let mut total = coarse_loss;

    if lambda != 0.0 {
        let svals = ctx.tape.value(s).clone();
        let mut requests = Vec::new();
        let mut targets = Vec::new();
        for b in 0..n {
            let p = dual_softmax(&svals.index0(b)?)?;
            for &(rb, i, t) in rows.iter().filter(|r| r.0 == b) {
                let row = &p.data()[i * l..(i + 1) * l];
                let pred = argmax(row);
                let fits = window_in_bounds(i, grid, fine_hw, matcher.config().fine_window)
                    && window_in_bounds(t.idx_b, grid, fine_hw, matcher.config().fine_window);
                if pred == t.idx_b && fits {
                    requests.push(WindowRequest {
                        batch: rb,
                        idx_a: i,
                        idx_b: t.idx_b,
                    });
                    let step = FINE_STRIDE as f64;
                    targets.extend([T::of(t.offset[0] / step), T::of(t.offset[1] / step)]);
                }
            }
        }
        if !requests.is_empty() {
            let fa = ctx.tape.slice(fine, 0, 0, n)?;
            let fb = ctx.tape.slice(fine, 0, n, 2 * n)?;
            let pred = matcher.fine_offsets(ctx, fa, fb, grid, &requests)?;
            let target = ctx.tape.constant(Tensor::new(&[requests.len(), 2], targets)?);
            let d = ctx.tape.sub(pred, target)?;
            let sq = ctx.tape.mul(d, d)?;
            let se = ctx.tape.sum(sq);
            let fine_loss = ctx.tape.scale(se, T::of(1.0 / requests.len() as f64));
            parts.fine = ctx.tape.value(fine_loss).item()?.f64();
            parts.fine_matches = requests.len();
            let weighted = ctx.tape.scale(fine_loss, T::of(lambda));
            total = ctx.tape.add(total, weighted)?;
        }
    }
    parts.total = ctx.tape.value(total).item()?.f64();
    Ok(Some((total, parts)))
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model").field("config", &self.config).finish_non_exhaustive()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (k, x);
        }
    }
    best.0
}
