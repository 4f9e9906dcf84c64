use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Homography, Point};

/// Pixel thresholds for both AUC and MMA.
pub const THRESHOLDS: [f64; 3] = [3.0, 5.0, 10.0];

/// Mean distance between the image corners `(0,0), (w,0), (0,h), (w,h)`
/// under the two maps. A missing estimate, or a corner sent to infinity,
/// gives `+inf`.
pub fn corner_error(gt: &Homography, est: Option<&Homography>, w: f64, h: f64) -> f64 {
    let Some(est) = est else {
        return f64::INFINITY;
    };
    let mut total = 0.0;
    for (x, y) in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
        match (gt.apply(x, y), est.apply(x, y)) {
            (Some(a), Some(b)) => total += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt(),
            _ => return f64::INFINITY,
        }
    }
    let e = total / 4.0;
    if e.is_finite() {
        e
    } else {
        f64::INFINITY
    }
}

/// Fraction of matches whose reprojection error under `gt` is within each
/// threshold. An empty match set scores 0.
pub fn mma(matches: &[(Point, Point)], gt: &Homography, thresholds: &[f64]) -> Vec<f64> {
    if matches.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    let errors: Vec<f64> = matches
        .iter()
        .map(|(a, b)| match gt.apply(a[0], a[1]) {
            Some((x, y)) => ((x - b[0]).powi(2) + (y - b[1]).powi(2)).sqrt(),
            None => f64::INFINITY,
        })
        .collect();
    thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / errors.len() as f64)
        .collect()
}

/// Area under the accuracy curve up to `t`, in percent.
pub fn auc(errors: &[f64], t: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .map(|&e| (t - e).max(0.0) / (t * n) * 100.0)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Illumination,
    Viewpoint,
    Synthetic,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Illumination => "illumination",
            Split::Viewpoint => "viewpoint",
            Split::Synthetic => "synthetic",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "illumination" | "i" => Ok(Split::Illumination),
            "viewpoint" | "v" => Ok(Split::Viewpoint),
            "synthetic" => Ok(Split::Synthetic),
            other => Err(crate::Error::Invalid(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub scene: String,
    pub index: usize,
    pub split: Split,
    pub corner_error: f64,
    /// Fractions at [`THRESHOLDS`].
    pub mma: [f64; 3],
    pub n_matches: usize,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auc: [f64; 3],
    /// Percent at [`THRESHOLDS`].
    pub mma: [f64; 3],
    pub pairs: usize,
    pub failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
}

impl MetricsReport {
    pub fn new(mut pairs: Vec<PairMetrics>) -> Self {
        pairs.sort_by(|a, b| (&a.scene, a.index).cmp(&(&b.scene, b.index)));
        Self { pairs }
    }

    fn aggregate_of<'a>(pairs: impl Iterator<Item = &'a PairMetrics>) -> Aggregate {
        let pairs: Vec<&PairMetrics> = pairs.collect();
        let errors: Vec<f64> = pairs.iter().map(|p| p.corner_error).collect();
        let n = pairs.len().max(1) as f64;
        let mut mma = [0.0; 3];
        for (k, m) in mma.iter_mut().enumerate() {
            *m = pairs.iter().map(|p| p.mma[k]).sum::<f64>() / n * 100.0;
        }
        Aggregate {
            auc: THRESHOLDS.map(|t| auc(&errors, t)),
            mma,
            pairs: pairs.len(),
            failures: pairs.iter().filter(|p| p.failed).count(),
        }
    }

    /// `"all"` followed by every split tag present, in a fixed order.
    pub fn aggregates(&self) -> Vec<(String, Aggregate)> {
        let mut out = vec![("all".to_string(), Self::aggregate_of(self.pairs.iter()))];
        let mut tags: Vec<Split> = self.pairs.iter().map(|p| p.split).collect();
        tags.sort();
        tags.dedup();
        for tag in tags {
            out.push((
                tag.as_str().to_string(),
                Self::aggregate_of(self.pairs.iter().filter(|p| p.split == tag)),
            ));
        }
        out
    }

    pub fn overall(&self) -> Aggregate {
        Self::aggregate_of(self.pairs.iter())
    }

    pub fn csv_rows(&self, dataset: &str, variant: &str) -> Vec<CsvRow> {
        let mut rows = Vec::new();
        for (split, agg) in self.aggregates() {
            for (metric, values) in [("auc", agg.auc), ("mma", agg.mma)] {
                for (k, &t) in THRESHOLDS.iter().enumerate() {
                    rows.push(CsvRow {
                        dataset: dataset.to_string(),
                        variant: variant.to_string(),
                        split: split.clone(),
                        metric: metric.to_string(),
                        threshold: t,
                        value: values[k],
                    });
                }
            }
            rows.push(CsvRow {
                dataset: dataset.to_string(),
                variant: variant.to_string(),
                split: split.clone(),
                metric: "failures".to_string(),
                threshold: 0.0,
                value: agg.failures as f64,
            });
        }
        rows
    }
}

/// One line of the evaluation CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub dataset: String,
    pub variant: String,
    pub split: String,
    pub metric: String,
    pub threshold: f64,
    pub value: f64,
}

pub const CSV_HEADER: &str = "dataset,variant,split,metric,threshold,value";

impl CsvRow {
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4}",
            self.dataset, self.variant, self.split, self.metric, self.threshold, self.value
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        Some(Self {
            dataset: f[0].to_string(),
            variant: f[1].to_string(),
            split: f[2].to_string(),
            metric: f[3].to_string(),
            threshold: f[4].parse().ok()?,
            value: f[5].parse().ok()?,
        })
    }
}

pub fn write_csv(rows: &[CsvRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

/// Aligned table: one row per (dataset, variant), columns grouped by split
/// with @3/@5/@10 under each, one block per metric.
pub fn format_table(rows: &[CsvRow]) -> String {
    let mut splits: Vec<String> = Vec::new();
    for want in ["all", "illumination", "viewpoint", "synthetic"] {
        if rows.iter().any(|r| r.split == want) {
            splits.push(want.to_string());
        }
    }
    let mut keyed: BTreeMap<(String, String, String, String, u64), f64> = BTreeMap::new();
    let mut models: Vec<(String, String)> = Vec::new();
    for r in rows {
        let m = (r.dataset.clone(), r.variant.clone());
        if !models.contains(&m) {
            models.push(m);
        }
        keyed.insert(
            (r.dataset.clone(), r.variant.clone(), r.split.clone(), r.metric.clone(), r.threshold.to_bits()),
            r.value,
        );
    }
    let label_w = models
        .iter()
        .map(|(d, v)| d.len() + v.len() + 3)
        .max()
        .unwrap_or(0)
        .max(14);
    let mut out = String::new();
    for metric in ["auc", "mma"] {
        let _ = write!(out, "{:<label_w$}", metric.to_uppercase());
        for s in &splits {
            let _ = write!(out, " | {:^20}", s);
        }
        out.push('\n');
        let _ = write!(out, "{:<label_w$}", "");
        for _ in &splits {
            let _ = write!(out, " | {:>6}{:>7}{:>7}", "@3", "@5", "@10");
        }
        out.push('\n');
        for (d, v) in &models {
            let _ = write!(out, "{:<label_w$}", format!("{d} / {v}"));
            for s in &splits {
                out.push_str(" | ");
                for (k, t) in THRESHOLDS.iter().enumerate() {
                    let width = if k == 0 { 6 } else { 7 };
                    match keyed.get(&(d.clone(), v.clone(), s.clone(), metric.to_string(), t.to_bits())) {
                        Some(val) => {
                            let _ = write!(out, "{:>width$.1}", val);
                        }
                        None => {
                            let _ = write!(out, "{:>width$}", "-");
                        }
                    }
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
