use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cfar::{cacfar, CfarConfig, Detection};
use crate::rd_signal::RdMap;
use crate::{Error, Result};

/// Precision, recall and F1 of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Score {
    /// Precision is 1 without detections, recall is 1 without ground truth,
    /// and F1 is 0 when both precision and recall are 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }
}

/// Harmonic mean `2pr / (p + r)`, 0 when `p + r = 0`.
pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Chebyshev distance with Doppler wrap-around over `cols` bins.
fn distance(a: (usize, usize), b: (usize, usize), cols: usize) -> usize {
    let dr = a.0.abs_diff(b.0);
    let dd = a.1.abs_diff(b.1);
    dr.max(dd.min(cols - dd))
}

/// One-to-one matching of detections to ground-truth peaks within Chebyshev
/// distance `tol`. Pairs are first taken greedily by increasing distance and
/// then improved by augmenting paths, so the number of matches is maximal.
/// Returns `(detection, peak)` index pairs.
pub fn match_peaks(
    detections: &[(usize, usize)],
    gt: &[(usize, usize)],
    tol: usize,
    cols: usize,
) -> Vec<(usize, usize)> {
    let adj: Vec<Vec<usize>> = detections
        .iter()
        .map(|&d| {
            let mut v: Vec<usize> = (0..gt.len()).filter(|&g| distance(d, gt[g], cols) <= tol).collect();
            v.sort_by_key(|&g| (distance(d, gt[g], cols), g));
            v
        })
        .collect();
    let mut gt_owner: Vec<Option<usize>> = vec![None; gt.len()];
    let mut det_match: Vec<Option<usize>> = vec![None; detections.len()];
    let mut pairs: Vec<(usize, usize, usize)> = adj
        .iter()
        .enumerate()
        .flat_map(|(d, gs)| gs.iter().map(move |&g| (d, g)))
        .map(|(d, g)| (distance(detections[d], gt[g], cols), d, g))
        .collect();
    pairs.sort();
    for (_, d, g) in pairs {
        if det_match[d].is_none() && gt_owner[g].is_none() {
            det_match[d] = Some(g);
            gt_owner[g] = Some(d);
        }
    }
    fn augment(
        d: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        gt_owner: &mut [Option<usize>],
        det_match: &mut [Option<usize>],
    ) -> bool {
        for &g in &adj[d] {
            if seen[g] {
                continue;
            }
            seen[g] = true;
            let free = match gt_owner[g] {
                None => true,
                Some(other) => augment(other, adj, seen, gt_owner, det_match),
            };
            if free {
                gt_owner[g] = Some(d);
                det_match[d] = Some(g);
                return true;
            }
        }
        false
    }
    for d in 0..detections.len() {
        if det_match[d].is_none() {
            let mut seen = vec![false; gt.len()];
            augment(d, &adj, &mut seen, &mut gt_owner, &mut det_match);
        }
    }
    det_match
        .iter()
        .enumerate()
        .filter_map(|(d, g)| g.map(|g| (d, g)))
        .collect()
}

/// Scores detections against ground truth on a map with `cols` Doppler bins.
pub fn match_and_score(detections: &[Detection], gt: &[(usize, usize)], tol: usize, cols: usize) -> Score {
    let dets: Vec<(usize, usize)> = detections.iter().map(|d| (d.range, d.doppler)).collect();
    let tp = match_peaks(&dets, gt, tol, cols).len();
    Score::from_counts(tp, dets.len() - tp, gt.len() - tp)
}

/// Per-sample scores of one model (or baseline) on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub scores: Vec<Score>,
    pub mean_f1: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
}

impl F1Report {
    pub fn from_scores(scores: Vec<Score>) -> Self {
        let n = scores.len().max(1) as f64;
        let mean = |f: fn(&Score) -> f64| scores.iter().map(f).sum::<f64>() / n;
        Self {
            mean_f1: mean(|s| s.f1),
            mean_precision: mean(|s| s.precision),
            mean_recall: mean(|s| s.recall),
            scores,
        }
    }

    /// Per-sample rows plus a sorted F1 column and its empirical CDF.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut sorted: Vec<f64> = self.scores.iter().map(|s| s.f1).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut out = String::from("sample_id,precision,recall,f1,f1_sorted,cdf\n");
        for (i, s) in self.scores.iter().enumerate() {
            out.push_str(&format!(
                "{i},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                s.precision,
                s.recall,
                s.f1,
                sorted[i],
                (i + 1) as f64 / n as f64
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Mean and sample standard deviation of per-seed mean F1 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
}

impl SeedSummary {
    pub fn new(per_seed: &[f64]) -> Self {
        let n = per_seed.len();
        let mean = per_seed.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { seeds: n, mean, std }
    }
}

/// Detects on each map and scores it against the matching peak list.
pub fn evaluate_maps(
    maps: &[RdMap],
    gt: &[&[(usize, usize)]],
    cfar: &CfarConfig,
    tol: usize,
) -> Result<F1Report> {
    if maps.len() != gt.len() {
        return Err(Error::Shape(format!("{} maps but {} peak lists", maps.len(), gt.len())));
    }
    let scores = maps
        .iter()
        .zip(gt)
        .map(|(m, g)| Ok(match_and_score(&cacfar(m, cfar)?, g, tol, m.0.cols())))
        .collect::<Result<Vec<_>>>()?;
    Ok(F1Report::from_scores(scores))
}
