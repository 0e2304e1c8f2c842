//! Segmentation and detection metrics, and the timing harness.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::anomaly::{DetectConfig, Detector};
use crate::data::Image;
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};

/// `2|P∩G| / (|P| + |G|)`; 1 when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("dice of {} vs {} elements", pred.len(), gt.len())));
    }
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let total = pred.iter().filter(|&&p| p).count() + gt.iter().filter(|&&g| g).count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Pooled pixel scores and ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelEval {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl PixelEval {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Metric("scores must be finite".into()));
        }
        let pos = labels.iter().filter(|&&l| l).count();
        if pos == 0 || pos == labels.len() {
            return Err(Error::Metric("need both positive and negative labels".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn from_f32(scores: &[f32], labels: &[bool]) -> Result<Self> {
        Self::new(scores.iter().map(|&s| s as f64).collect(), labels.to_vec())
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Score/label pairs sorted by descending score.
    fn sorted_desc(&self) -> Vec<(f64, bool)> {
        let mut v: Vec<(f64, bool)> = self.scores.iter().copied().zip(self.labels.iter().copied()).collect();
        v.sort_by(|a, b| b.0.total_cmp(&a.0));
        v
    }
}

/// Best Dice over global thresholds `score ≥ τ`, returning `(dice, τ)`.
///
/// `Some(n)` sweeps `n` evenly spaced thresholds from the minimum to the
/// maximum score; `None` tries every distinct score.
pub fn best_dice(eval: &PixelEval, n_thresholds: Option<usize>) -> Result<(f64, f64)> {
    let sorted = eval.sorted_desc();
    let g = eval.positives() as f64;
    // cum[k] = positives among the k highest scores
    let mut cum = Vec::with_capacity(sorted.len() + 1);
    cum.push(0usize);
    for (_, l) in &sorted {
        cum.push(cum.last().unwrap() + *l as usize);
    }
    let count_at_least = |tau: f64| sorted.partition_point(|(s, _)| *s >= tau);
    let score = |tau: f64| {
        let k = count_at_least(tau);
        2.0 * cum[k] as f64 / (k as f64 + g)
    };
    let candidates: Vec<f64> = match n_thresholds {
        Some(n) => {
            if n < 2 {
                return Err(Error::Parameter("threshold sweep needs at least two points".into()));
            }
            let (lo, hi) = (sorted.last().unwrap().0, sorted[0].0);
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        }
        None => {
            let mut d: Vec<f64> = sorted.iter().map(|p| p.0).collect();
            d.dedup();
            d
        }
    };
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for tau in candidates {
        let d = score(tau);
        if d > best.0 {
            best = (d, tau);
        }
    }
    Ok(best)
}

/// Average precision: `Σ (R_k − R_{k−1}) · P_k` over distinct thresholds.
pub fn auprc(eval: &PixelEval) -> f64 {
    let sorted = eval.sorted_desc();
    let g = eval.positives() as f64;
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / g;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Area under the ROC curve via the Mann–Whitney statistic with average ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let eval = PixelEval::new(scores.to_vec(), labels.to_vec())?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let n_pos = eval.positives() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    Ok((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub dataset: String,
    pub dice_best: f64,
    pub auprc: f64,
    pub auroc: Option<f64>,
    pub threshold: f64,
    pub wall_time_s: f64,
}

pub const CSV_HEADER: &str = "method,dataset,dice_best,auprc,auroc,threshold,wall_time_s";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{:.6e},{:.3}",
            self.method,
            self.dataset,
            self.dice_best,
            self.auprc,
            self.auroc.map(|a| format!("{a:.6}")).unwrap_or_default(),
            self.threshold,
            self.wall_time_s
        )
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Wall-clock measurement of one detection configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub method: String,
    pub downsample: usize,
    pub n_images: usize,
    pub total_s: f64,
    pub per_stage_s: BTreeMap<String, f64>,
    /// True when the images did not fit one batch and were split.
    pub micro_batched: bool,
}

/// Times `config` over `images` after a one-image warm-up pass.
pub fn bench<M: NoisePredictor>(
    detector: &Detector<'_, M>,
    images: &[Image],
    config: &DetectConfig,
) -> Result<BenchResult> {
    if images.is_empty() {
        return Err(Error::Parameter("benchmark needs at least one image".into()));
    }
    detector.detect(&images[..1], config)?;
    let start = Instant::now();
    let det = detector.detect(images, config)?;
    let total_s = start.elapsed().as_secs_f64();
    Ok(BenchResult {
        method: config.variant.tag().to_string(),
        downsample: detector.vqvae.config().downsample,
        n_images: images.len(),
        total_s,
        per_stage_s: det.stage_seconds,
        micro_batched: det.batches > 1,
    })
}
