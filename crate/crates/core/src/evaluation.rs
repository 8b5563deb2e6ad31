//! Classification metric suite and CAM overlay export.

use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::data_model::NodulePatch;
use crate::{Error, Result};

/// Confusion counts at the decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// The full metric report of one evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    /// Precision of the benign class: tn / (tn + fn).
    pub precision_b: f64,
    pub accuracy: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub f1: f64,
    pub threshold: f64,
    pub n: usize,
    pub confusion: Confusion,
    /// Metrics whose denominator was zero (reported as 0, flagged here).
    pub degenerate: Vec<String>,
}

/// Threshold rule: a sample is called malignant iff prob >= threshold.
pub fn compute_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricReport> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "probs/labels must be equal-length and non-empty ({} vs {})",
            probs.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|l| *l > 1) {
        return Err(Error::InvalidArgument("labels must be 0/1".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (p, l) in probs.iter().zip(labels) {
        let pred = *p >= threshold;
        match (pred, *l) {
            (true, 1) => tp += 1,
            (true, 0) => fp += 1,
            (false, 0) => tn += 1,
            (false, 1) => fn_ += 1,
            _ => unreachable!(),
        }
    }
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: usize, den: usize| -> f64 {
        if den == 0 {
            degenerate.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let sensitivity = ratio("sensitivity", tp, tp + fn_);
    let specificity = ratio("specificity", tn, tn + fp);
    let precision = ratio("precision", tp, tp + fp);
    let precision_b = ratio("precision_b", tn, tn + fn_);
    let n = probs.len();
    let accuracy = (tp + tn) as f64 / n as f64;
    let f1 = if precision + sensitivity == 0.0 {
        degenerate.push("f1".to_string());
        0.0
    } else {
        2.0 * precision * sensitivity / (precision + sensitivity)
    };
    let auc = auc_rank(probs, labels);
    Ok(MetricReport {
        sensitivity,
        specificity,
        precision,
        precision_b,
        accuracy,
        auc,
        f1,
        threshold,
        n,
        confusion: Confusion { tp, fp, tn, fn_ },
        degenerate,
    })
}

/// AUC via the rank statistic (Mann-Whitney with midranks for ties).
/// Equals P(score_pos > score_neg) + 0.5 P(tie). None for single-class input.
pub fn auc_rank(probs: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|l| **l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && probs[idx[j + 1]] == probs[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            if labels[idx[k]] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Mean and population standard deviation across folds, per metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub folds: usize,
    pub mean: MetricMeans,
    /// Population standard deviation (divides by the fold count).
    pub std_population: MetricMeans,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricMeans {
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub precision_b: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub f1: f64,
}

pub fn aggregate(reports: &[MetricReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no fold reports".into()));
    }
    let grab = |f: &dyn Fn(&MetricReport) -> f64| -> (f64, f64) {
        let vals: Vec<f64> = reports.iter().map(f).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        (mean, var.sqrt())
    };
    let fields: [(&str, Box<dyn Fn(&MetricReport) -> f64>); 7] = [
        ("sensitivity", Box::new(|r: &MetricReport| r.sensitivity)),
        ("specificity", Box::new(|r: &MetricReport| r.specificity)),
        ("precision", Box::new(|r: &MetricReport| r.precision)),
        ("precision_b", Box::new(|r: &MetricReport| r.precision_b)),
        ("accuracy", Box::new(|r: &MetricReport| r.accuracy)),
        ("auc", Box::new(|r: &MetricReport| r.auc.unwrap_or(0.0))),
        ("f1", Box::new(|r: &MetricReport| r.f1)),
    ];
    let mut mean = MetricMeans::default();
    let mut std = MetricMeans::default();
    for (name, f) in &fields {
        let (m, s) = grab(f);
        let (mm, ss): (&mut f64, &mut f64) = match *name {
            "sensitivity" => (&mut mean.sensitivity, &mut std.sensitivity),
            "specificity" => (&mut mean.specificity, &mut std.specificity),
            "precision" => (&mut mean.precision, &mut std.precision),
            "precision_b" => (&mut mean.precision_b, &mut std.precision_b),
            "accuracy" => (&mut mean.accuracy, &mut std.accuracy),
            "auc" => (&mut mean.auc, &mut std.auc),
            _ => (&mut mean.f1, &mut std.f1),
        };
        *mm = m;
        *ss = s;
    }
    Ok(AggregateReport {
        folds: reports.len(),
        mean,
        std_population: std,
    })
}

// ---------------------------------------------------------------------------
// CAM overlays
// ---------------------------------------------------------------------------

/// Simple blue->cyan->yellow->red heat ramp.
fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = ((4.0 * v - 2.0).clamp(0.0, 1.0) + (4.0 * v - 3.5).clamp(0.0, 0.0)).clamp(0.0, 1.0);
    let g = if v < 0.5 {
        (4.0 * v - 0.5).clamp(0.0, 1.0)
    } else {
        (1.0 - (4.0 * (v - 0.75)).max(0.0)).clamp(0.0, 1.0)
    };
    let b = (1.0 - 4.0 * v).clamp(0.0, 1.0) + (4.0 * v - 3.0).clamp(0.0, 1.0) * 0.0;
    [r, g, b.clamp(0.0, 1.0)]
}

fn upsample_nearest_2d(src: &[Vec<f64>], factor: usize) -> Vec<Vec<f64>> {
    let h = src.len() * factor;
    let w = src[0].len() * factor;
    let mut out = vec![vec![0.0; w]; h];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = src[r / factor][c / factor];
        }
    }
    out
}

/// Export the central axial slice of the lung-window channel with a CAM heat
/// overlay and the 0.5-isocontour of the predicted segmentation. The file
/// name encodes the prediction and whether it was correct.
pub fn export_cam_overlay(
    patch: &NodulePatch,
    cam_c: &ArrayD<f64>,
    seg_prob: &ArrayD<f64>,
    prediction: u8,
    correct: bool,
    id: &str,
    out_dir: &Path,
) -> Result<std::path::PathBuf> {
    let side = patch.spatial_shape()[0];
    let fs = cam_c.shape()[0];
    if side % fs != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch side {side} not a multiple of CAM side {fs}"
        )));
    }
    let factor = side / fs;
    let z_patch = side / 2;
    let z_feat = fs / 2;

    // grayscale base
    let mut base = vec![vec![0.0f64; side]; side];
    for (y, row) in base.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            *v = f64::from(patch.data[[0, z_patch, y, x]]);
        }
    }
    // CAM + SEM slices upsampled to image resolution
    let mut cam = vec![vec![0.0f64; fs]; fs];
    let mut sem = vec![vec![0.0f64; fs]; fs];
    for y in 0..fs {
        for x in 0..fs {
            cam[y][x] = cam_c[[z_feat, y, x]];
            sem[y][x] = seg_prob[[z_feat, y, x]];
        }
    }
    let cam = upsample_nearest_2d(&cam, factor);
    let sem = upsample_nearest_2d(&sem, factor);

    let mut img = image::RgbImage::new(side as u32, side as u32);
    for y in 0..side {
        for x in 0..side {
            let g = base[y][x];
            let heat = heat_color(cam[y][x]);
            let alpha = 0.4 * cam[y][x];
            let mut px = [
                g * (1.0 - alpha) + heat[0] * alpha,
                g * (1.0 - alpha) + heat[1] * alpha,
                g * (1.0 - alpha) + heat[2] * alpha,
            ];
            // contour: foreground pixel with a background 4-neighbor
            let is_fg = sem[y][x] >= 0.5;
            if is_fg {
                let mut boundary = y == 0 || x == 0 || y == side - 1 || x == side - 1;
                if !boundary {
                    boundary = sem[y - 1][x] < 0.5
                        || sem[y + 1][x] < 0.5
                        || sem[y][x - 1] < 0.5
                        || sem[y][x + 1] < 0.5;
                }
                if boundary {
                    px = [1.0, 1.0, 0.0];
                }
            }
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (px[0] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (px[1] * 255.0).round().clamp(0.0, 255.0) as u8,
                    (px[2] * 255.0).round().clamp(0.0, 255.0) as u8,
                ]),
            );
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let name = format!(
        "{id}_pred-{}_{}.png",
        if prediction == 1 { "malignant" } else { "benign" },
        if correct { "correct" } else { "wrong" }
    );
    let path = out_dir.join(name);
    img.save(&path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from;
    use ndarray::{Array4, IxDyn};
    use rand::Rng;

    fn brute_force_auc(probs: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, (pi, li)) in probs.iter().zip(labels).enumerate() {
            for (pj, lj) in probs.iter().zip(labels).skip(i + 1) {
                let (pp, pn) = match (li, lj) {
                    (1, 0) => (pi, pj),
                    (0, 1) => (pj, pi),
                    _ => continue,
                };
                pairs += 1.0;
                if pp > pn {
                    wins += 1.0;
                } else if pp == pn {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn hand_case_four_samples() {
        let probs = [0.9, 0.8, 0.3, 0.1];
        let labels = [1, 0, 1, 0];
        let r = compute_metrics(&probs, &labels, 0.5).unwrap();
        assert_eq!(
            r.confusion,
            Confusion {
                tp: 1,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        assert_eq!(r.sensitivity, 0.5);
        assert_eq!(r.specificity, 0.5);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.precision, 0.5);
        assert_eq!(r.precision_b, 0.5);
        assert_eq!(r.auc, Some(0.75));
        assert!(r.degenerate.is_empty());
    }

    #[test]
    fn perfectly_separated_scores_hit_one_everywhere() {
        let probs = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        let r = compute_metrics(&probs, &labels, 0.5).unwrap();
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.sensitivity, 1.0);
        assert_eq!(r.specificity, 1.0);
    }

    #[test]
    fn ties_at_threshold_predict_malignant() {
        let probs = [0.5, 0.5, 0.5, 0.5];
        let labels = [1, 0, 1, 0];
        let r = compute_metrics(&probs, &labels, 0.5).unwrap();
        assert_eq!(r.specificity, 0.0);
        assert_eq!(r.sensitivity, 1.0);
        assert_eq!(r.confusion.tn + r.confusion.fn_, 0);
        assert!(r.degenerate.contains(&"precision_b".to_string()));
        assert_eq!(r.auc, Some(0.5)); // all tied
    }

    #[test]
    fn single_class_reports_absent_auc() {
        let probs = [0.9, 0.4];
        let labels = [1, 1];
        let r = compute_metrics(&probs, &labels, 0.5).unwrap();
        assert!(r.auc.is_none());
        assert_eq!(r.sensitivity, 0.5);
    }

    #[test]
    fn auc_matches_brute_force_on_random_instances() {
        let mut rng = rng_from(99);
        for trial in 0..100 {
            let n = rng.random_range(5..200);
            let mut probs = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            let mut has = [false, false];
            for _ in 0..n {
                // quantized probs produce plenty of ties
                let p = (rng.random_range(0.0..1.0f64) * 8.0).round() / 8.0;
                let l = rng.random_range(0..2u8);
                has[l as usize] = true;
                probs.push(p);
                labels.push(l);
            }
            if !(has[0] && has[1]) {
                continue;
            }
            let fast = auc_rank(&probs, &labels).unwrap();
            let brute = brute_force_auc(&probs, &labels);
            assert!(
                (fast - brute).abs() < 1e-12,
                "trial {trial}: {fast} vs {brute}"
            );
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = rng_from(100);
        let probs: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..60).map(|_| rng.random_range(0..2)).collect();
        let a = auc_rank(&probs, &labels).unwrap();
        let squashed: Vec<f64> = probs.iter().map(|p| 1.0 / (1.0 + (-5.0 * p).exp())).collect();
        let b = auc_rank(&squashed, &labels).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn aggregate_reports_population_std() {
        let mk = |acc: f64| MetricReport {
            sensitivity: acc,
            specificity: acc,
            precision: acc,
            precision_b: acc,
            accuracy: acc,
            auc: Some(acc),
            f1: acc,
            threshold: 0.5,
            n: 10,
            confusion: Confusion {
                tp: 0,
                fp: 0,
                tn: 0,
                fn_: 0,
            },
            degenerate: vec![],
        };
        let agg = aggregate(&[mk(0.6), mk(0.8)]).unwrap();
        assert!((agg.mean.accuracy - 0.7).abs() < 1e-12);
        // population std of {0.6, 0.8} is 0.1
        assert!((agg.std_population.accuracy - 0.1).abs() < 1e-12);
    }

    #[test]
    fn overlay_has_patch_dimensions_and_contour_rule() {
        let dir = tempfile::tempdir().unwrap();
        let side = 16usize;
        let fs = 4usize;
        let mut rng = rng_from(5);
        let patch = NodulePatch::new(
            Array4::from_shape_fn((2, side, side, side), |_| rng.random_range(0.0..1.0f32)),
            crate::data_model::Modality::Cube64,
            side,
            false,
        )
        .unwrap();
        let cam = ArrayD::from_elem(IxDyn(&[fs, fs, fs]), 0.0);
        // SEM below 0.5 everywhere -> no contour anywhere
        let sem_low = ArrayD::from_elem(IxDyn(&[fs, fs, fs]), 0.3);
        let p1 = export_cam_overlay(&patch, &cam, &sem_low, 1, true, "a", dir.path()).unwrap();
        let img = image::open(&p1).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (side as u32, side as u32));
        assert!(p1.to_string_lossy().contains("pred-malignant_correct"));
        let yellow = img
            .pixels()
            .filter(|p| p.0 == [255, 255, 0])
            .count();
        assert_eq!(yellow, 0);
        // cam == 0 overlay equals the plain grayscale slice
        for (y, x) in [(0u32, 0u32), (7, 9), (15, 15)] {
            let g = (f64::from(patch.data[[0, side / 2, y as usize, x as usize]]) * 255.0)
                .round() as u8;
            assert_eq!(img.get_pixel(x, y).0, [g, g, g]);
        }
        // a foreground island produces a contour
        let mut sem_hi = sem_low.clone();
        sem_hi[[fs / 2, 1, 1]] = 0.9;
        let p2 = export_cam_overlay(&patch, &cam, &sem_hi, 0, false, "b", dir.path()).unwrap();
        let img2 = image::open(&p2).unwrap().to_rgb8();
        let yellow2 = img2.pixels().filter(|p| p.0 == [255, 255, 0]).count();
        assert!(yellow2 > 0);
        assert!(p2.to_string_lossy().contains("pred-benign_wrong"));
    }
}
