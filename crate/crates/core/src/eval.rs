//! Benchmark evaluation: match every pair, fit a homography and score it.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rayon::prelude::*;

use crate::backbone::FeaturePair;
use crate::data::{image_hw, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{corner_error, mma, ransac_homography, MetricsReport, PairMetrics, Point, RansacParams, THRESHOLDS};
use crate::matcher::{top_matches, FineMatch};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub ransac: RansacParams,
    pub max_matches: usize,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ransac: RansacParams::default(),
            max_matches: 1000,
            threads: 0,
        }
    }
}

/// Scores one pair given its matches. Estimation failures give an infinite
/// corner error; they are never fatal.
pub fn score_pair(seq: &Sequence, k: usize, matches: &[FineMatch], opts: &EvalOptions) -> PairMetrics {
    let gt = &seq.homographies[k];
    let (h, w) = seq.hw_a();
    let pairs: Vec<(Point, Point)> = matches.iter().map(|m| (m.point_a, m.point_b)).collect();
    let (src, dst): (Vec<Point>, Vec<Point>) = pairs.iter().copied().unzip();
    let est = ransac_homography(&src, &dst, &opts.ransac).ok().flatten();
    let err = corner_error(gt, est.as_ref().map(|r| &r.homography), w as f64, h as f64);
    let fractions = mma(&pairs, gt, &THRESHOLDS);
    PairMetrics {
        scene: seq.name.clone(),
        index: k + 2,
        split: seq.split,
        corner_error: err,
        mma: [fractions[0], fractions[1], fractions[2]],
        n_matches: pairs.len(),
        failed: est.is_none(),
    }
}

fn run_pool<R: Send>(threads: usize, job: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// Evaluates every (sequence, view) pair with `matcher(sequence index,
/// view index)`, in parallel. The report is sorted by pair id, so it does
/// not depend on scheduling.
pub fn evaluate_with<F>(seqs: &[Sequence], opts: &EvalOptions, matcher: F) -> Result<MetricsReport>
where
    F: Fn(usize, usize) -> Result<Vec<FineMatch>> + Sync,
{
    let jobs: Vec<(usize, usize)> = seqs
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.images_b.len()).map(move |k| (s, k)))
        .collect();
    let pairs = run_pool(opts.threads, || {
        jobs.par_iter()
            .map(|&(s, k)| {
                let matches = matcher(s, k)?;
                let top = top_matches(&matches, opts.max_matches);
                Ok(score_pair(&seqs[s], k, &top, opts))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(MetricsReport::new(pairs))
}

/// Full pipeline with a trained model. Features of image A are extracted
/// once per sequence.
pub fn evaluate_model(model: &Model, seqs: &[Sequence], opts: &EvalOptions) -> Result<MetricsReport> {
    let features_a: Vec<FeaturePair<f32>> = run_pool(opts.threads, || {
        seqs.par_iter().map(|s| model.extract(&s.image_a)).collect::<Result<Vec<_>>>()
    })??;
    evaluate_with(seqs, opts, |s, k| {
        let fb = model.extract(&seqs[s].images_b[k])?;
        Ok(model.match_features(&features_a[s], &fb)?.fine)
    })
}

/// Ground-truth correspondences on a regular grid of A, kept where they
/// land inside B. A perfect matcher for sanity checks.
pub fn oracle_matches(seq: &Sequence, k: usize, step: usize) -> Vec<FineMatch> {
    let (ha, wa) = seq.hw_a();
    let (hb, wb) = image_hw(&seq.images_b[k]);
    let h = &seq.homographies[k];
    let mut out = Vec::new();
    for r in (step / 2..ha).step_by(step.max(1)) {
        for c in (step / 2..wa).step_by(step.max(1)) {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            if let Some((xb, yb)) = h.apply(x, y) {
                if xb >= 0.0 && yb >= 0.0 && xb < wb as f64 && yb < hb as f64 {
                    out.push(FineMatch {
                        point_a: [x, y],
                        point_b: [xb, yb],
                        confidence: 1.0,
                    });
                }
            }
        }
    }
    out
}

/// Hex SHA-256 of `bytes`, used to fingerprint configurations in run records.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRun {
    pub checkpoint: String,
    pub dataset: String,
    pub modification: String,
    pub report: MetricsReport,
    pub wall_clock_s: f64,
    pub config_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_rotated, synth_dataset, SynthParams};
    use crate::geometry::Split;

    fn seqs() -> Vec<Sequence> {
        synth_dataset(2, 48, 48, 4, &SynthParams::default())
            .unwrap()
            .into_iter()
            .map(|s| s.clean)
            .collect()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let seqs = seqs();
        let report = evaluate_with(&seqs, &EvalOptions::default(), |s, k| Ok(oracle_matches(&seqs[s], k, 6))).unwrap();
        let all = report.overall();
        assert!((all.auc[0] - 100.0).abs() < 1e-9, "{}", all.auc[0]);
        assert_eq!(all.mma[0], 100.0);
        assert_eq!(all.failures, 0);
        assert_eq!(all.pairs, 10);
    }

    #[test]
    fn no_matches_is_a_scored_failure() {
        let seqs = seqs();
        let report = evaluate_with(&seqs, &EvalOptions::default(), |_, _| Ok(Vec::new())).unwrap();
        let all = report.overall();
        assert_eq!(all.failures, 10);
        assert_eq!(all.auc, [0.0; 3]);
        assert_eq!(all.mma, [0.0; 3]);
    }

    #[test]
    fn thread_count_does_not_change_the_report() {
        let seqs: Vec<Sequence> = seqs().iter().map(|s| make_rotated(s, 45.0, 1).unwrap()).collect();
        let noisy = |s: usize, k: usize| {
            let mut m = oracle_matches(&seqs[s], k, 5);
            for (i, x) in m.iter_mut().enumerate() {
                x.point_b[0] += ((i * 7919) % 13) as f64 - 6.0;
                x.confidence = ((i * 31) % 17) as f64;
            }
            Ok(m)
        };
        let one = evaluate_with(&seqs, &EvalOptions { threads: 1, ..Default::default() }, noisy).unwrap();
        let four = evaluate_with(&seqs, &EvalOptions { threads: 4, ..Default::default() }, noisy).unwrap();
        assert_eq!(one.csv_rows("d", "v"), four.csv_rows("d", "v"));
        assert!(one.pairs.iter().all(|p| p.split == Split::Synthetic));
    }

    #[test]
    fn config_hash_reference() {
        assert_eq!(config_hash(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
