//! Adam, the training configuration and the training loop with
//! validation-driven checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::GradientReport;
use crate::data::{gt_targets, load_dataset, synth_dataset, CellTarget, Sequence, SynthParams};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalOptions};
use crate::matcher::COARSE_STRIDE;
use crate::model::{LossParts, Model, ModelConfig, PairSample};
use crate::params::{ParamId, ParamStore};
use crate::steerable::commit_updates;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// The learning rate is scaled by `batch_size / base_batch`.
    pub base_batch: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_batch: 2,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    t: i32,
    m: Vec<Option<Tensor<f32>>>,
    v: Vec<Option<Tensor<f32>>>,
}

impl Adam {
    pub fn new(cfg: &AdamConfig, batch_size: usize) -> Self {
        Self {
            cfg: cfg.clone(),
            lr: cfg.lr * batch_size as f64 / cfg.base_batch.max(1) as f64,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &GradientReport<f32>) {
        self.t += 1;
        let n = store.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let g = grads.get(id);
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(id);
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g as f64;
                let mm = b1 * *m as f64 + (1.0 - b1) * g;
                let vv = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mm as f32;
                *v = vv as f32;
                let update = self.lr * (mm / c1) / ((vv / c2).sqrt() + self.cfg.eps);
                *p = (*p as f64 - update) as f32;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory for training; synthetic scenes are generated in
    /// memory when absent.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub size: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub synth: SynthParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            val_dir: None,
            train_scenes: 8,
            val_scenes: 4,
            size: 64,
            train_seed: 1,
            val_seed: 2,
            synth: SynthParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub data: DataConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub val_interval: usize,
    /// Weight of the fine term.
    pub lambda_fine: f64,
    pub keep_checkpoints: usize,
    /// Stop after this many validations without improvement; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            data: DataConfig::default(),
            batch_size: 2,
            steps: 2000,
            val_interval: 200,
            lambda_fine: 1.0,
            keep_checkpoints: 5,
            patience: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Invalid("steps must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Invalid(format!("lr must be positive, got {}", self.optimizer.lr)));
        }
        if self.batch_size == 0 || self.val_interval == 0 {
            return Err(Error::Invalid("batch_size and val_interval must be positive".into()));
        }
        self.model.validate()
    }
}

/// A training pair with precomputed targets.
pub struct TrainPair {
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    pub targets: Vec<Option<CellTarget>>,
}

pub fn pairs_from(seqs: &[Sequence]) -> Result<Vec<TrainPair>> {
    let mut out = Vec::new();
    for s in seqs {
        for (b, h) in s.images_b.iter().zip(&s.homographies) {
            let a_hw = s.hw_a();
            let b_hw = crate::data::image_hw(b);
            out.push(TrainPair {
                image_a: s.image_a.clone(),
                image_b: b.clone(),
                targets: gt_targets(h, a_hw, b_hw, COARSE_STRIDE)?,
            });
        }
    }
    Ok(out)
}

fn load_or_generate(dir: &Option<PathBuf>, scenes: usize, seed: u64, d: &DataConfig) -> Result<Vec<Sequence>> {
    match dir {
        Some(p) => load_dataset(p),
        None => Ok(synth_dataset(scenes, d.size, d.size, seed, &d.synth)?
            .into_iter()
            .map(|s| s.jittered)
            .collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub coarse: f64,
    pub fine: f64,
    pub fine_matches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeptCheckpoint {
    pub step: usize,
    pub val_auc10: f64,
    pub path: PathBuf,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
    pub skipped: usize,
    pub validations: Vec<(usize, f64)>,
    /// Best first.
    pub kept: Vec<KeptCheckpoint>,
}

/// Mean coarse loss over the first and the last `window` logged steps.
pub fn smoothed_coarse(log: &[StepRecord], window: usize) -> Option<(f64, f64)> {
    if log.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.coarse).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..window]), mean(&log[log.len() - window..])))
}

/// Trains from `cfg`. With `out` set, writes `train_log.csv`,
/// `val_log.csv`, the retained checkpoints and `checkpoints.json` there.
pub fn train(cfg: &TrainConfig, out: Option<&Path>, mut progress: impl FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d = &cfg.data;
    let train_seqs = load_or_generate(&d.train_dir, d.train_scenes, d.train_seed, d)?;
    let val_seqs = load_or_generate(&d.val_dir, d.val_scenes, d.val_seed, d)?;
    let pairs = pairs_from(&train_seqs)?;
    if pairs.is_empty() {
        return Err(Error::Invalid("training set has no pairs".into()));
    }
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    let mut adam = Adam::new(&cfg.optimizer, cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();

    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.csv");
            let mut f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            writeln!(f, "step,total,coarse,fine,fine_matches").map_err(|e| Error::io(&p, e))?;
            Some((p, f))
        }
        None => None,
    };

    let mut log = Vec::with_capacity(cfg.steps);
    let mut skipped = 0;
    let mut validations = Vec::new();
    let mut kept: Vec<KeptCheckpoint> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for step in 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<PairSample<'_>> = idx
            .iter()
            .map(|&i| PairSample {
                image_a: &pairs[i].image_a,
                image_b: &pairs[i].image_b,
                targets: &pairs[i].targets,
            })
            .collect();
        match model.loss_and_grads(&batch, cfg.lambda_fine)? {
            None => skipped += 1,
            Some((parts, grads, updates)) => {
                check_finite(step, &parts)?;
                adam.step(&mut model.store, &grads);
                commit_updates(&mut model.store, updates);
                let rec = StepRecord {
                    step,
                    total: parts.total,
                    coarse: parts.coarse,
                    fine: parts.fine,
                    fine_matches: parts.fine_matches,
                };
                if let Some((p, f)) = log_file.as_mut() {
                    writeln!(f, "{},{:.6},{:.6},{:.6},{}", rec.step, rec.total, rec.coarse, rec.fine, rec.fine_matches)
                        .map_err(|e| Error::io(p.as_path(), e))?;
                }
                log.push(rec);
            }
        }
        if step % cfg.val_interval == 0 || step == cfg.steps {
            let report = evaluate_model(&model, &val_seqs, &EvalOptions::default())?;
            let auc10 = report.overall().auc[2];
            validations.push((step, auc10));
            progress(&format!(
                "step {step}: loss {:.4} (coarse {:.4}, fine {:.4}), val AUC@10 {auc10:.2}",
                log.last().map_or(f64::NAN, |r| r.total),
                log.last().map_or(f64::NAN, |r| r.coarse),
                log.last().map_or(f64::NAN, |r| r.fine),
            ));
            if auc10 > best {
                best = auc10;
                stale = 0;
            } else {
                stale += 1;
            }
            if let Some(dir) = out {
                retain_checkpoint(&model, dir, step, auc10, cfg.keep_checkpoints, &mut kept)?;
            }
            if cfg.patience > 0 && stale >= cfg.patience {
                progress(&format!("early stop at step {step}"));
                break;
            }
        }
    }
    if let Some(dir) = out {
        let p = dir.join("val_log.csv");
        let body: String = std::iter::once("step,auc10\n".to_string())
            .chain(validations.iter().map(|(s, a)| format!("{s},{a:.4}\n")))
            .collect();
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("checkpoints.json");
        std::fs::write(&p, serde_json::to_string_pretty(&kept)? + "\n").map_err(|e| Error::io(&p, e))?;
        model.save(&dir.join("last.ckpt"), log.last().map_or(0, |r| r.step), validations.last().map(|v| v.1))?;
    }
    Ok(TrainOutcome {
        model,
        log,
        skipped,
        validations,
        kept,
    })
}

fn check_finite(step: usize, p: &LossParts) -> Result<()> {
    if p.total.is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite(format!(
        "loss diverged at step {step} (coarse {}, fine {}, {} assigned cells)",
        p.coarse, p.fine, p.assigned
    )))
}

/// Saves the model if it ranks among the best `keep` validations so far
/// and deletes whatever falls out. Ties favor the earlier step.
fn retain_checkpoint(model: &Model, dir: &Path, step: usize, auc10: f64, keep: usize, kept: &mut Vec<KeptCheckpoint>) -> Result<()> {
    if keep == 0 {
        return Ok(());
    }
    let qualifies = kept.len() < keep || kept.last().is_some_and(|w| auc10 > w.val_auc10);
    if !qualifies {
        return Ok(());
    }
    let path = dir.join(format!("step{step:06}.ckpt"));
    model.save(&path, step, Some(auc10))?;
    kept.push(KeptCheckpoint {
        step,
        val_auc10: auc10,
        path,
    });
    kept.sort_by(|a, b| b.val_auc10.total_cmp(&a.val_auc10).then(a.step.cmp(&b.step)));
    while kept.len() > keep {
        let gone = kept.pop().expect("non-empty");
        std::fs::remove_file(&gone.path).map_err(|e| Error::io(&gone.path, e))?;
    }
    Ok(())
}
