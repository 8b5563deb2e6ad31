//! Unsure-cohort filtering: inter-rater disagreement gating by mean absolute
//! difference, score averaging, and 50%-consensus mask construction.

use ndarray::Array3;

use crate::{Error, Result};

/// Default disagreement gate: nodules whose score MAD exceeds this are dropped.
pub const DEFAULT_MAD_THRESHOLD: f64 = 0.6;

/// Scores and masks from one nodule's raters (at least 3 of each).
#[derive(Debug, Clone)]
pub struct RaterAnnotation {
    pub id: String,
    pub scores: Vec<u8>,
    pub masks: Vec<Array3<u8>>,
}

impl RaterAnnotation {
    pub fn new(id: impl Into<String>, scores: Vec<u8>, masks: Vec<Array3<u8>>) -> Result<Self> {
        if scores.len() < 3 || scores.len() != masks.len() {
            return Err(Error::InvalidArgument(format!(
                "need >= 3 raters with matching masks, got {} scores / {} masks",
                scores.len(),
                masks.len()
            )));
        }
        if scores.iter().any(|s| !(1..=5).contains(s)) {
            return Err(Error::InvalidArgument("scores must lie in 1..=5".into()));
        }
        Ok(RaterAnnotation {
            id: id.into(),
            scores,
            masks,
        })
    }
}

/// Mean absolute difference over all unordered score pairs (Gini-style).
pub fn mean_absolute_difference(scores: &[u8]) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument(
            "MAD needs at least 2 scores".into(),
        ));
    }
    let n = scores.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += (f64::from(scores[i]) - f64::from(scores[j])).abs();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(total / pairs)
}

/// A nodule that survived the disagreement gate, with its averaged score.
#[derive(Debug, Clone)]
pub struct FilteredAnnotation {
    pub annotation: RaterAnnotation,
    pub avg_score: f64,
}

/// Keep annotations with `MAD <= mad_threshold` and attach the average score.
/// The boundary is inclusive: only strictly larger disagreement is discarded.
pub fn filter_unsure(
    annotations: Vec<RaterAnnotation>,
    mad_threshold: f64,
) -> Result<Vec<FilteredAnnotation>> {
    let mut kept = Vec::new();
    for ann in annotations {
        let mad = mean_absolute_difference(&ann.scores)?;
        if mad <= mad_threshold {
            let avg = ann.scores.iter().map(|s| f64::from(*s)).sum::<f64>()
                / ann.scores.len() as f64;
            kept.push(FilteredAnnotation {
                annotation: ann,
                avg_score: avg,
            });
        }
    }
    Ok(kept)
}

/// Keep only nodules whose average texture score is exactly 5 (solid).
/// Entries without texture ratings pass through untouched.
pub fn texture_filter(
    annotations: Vec<RaterAnnotation>,
    textures: &[Option<Vec<u8>>],
) -> Vec<RaterAnnotation> {
    annotations
        .into_iter()
        .zip(textures)
        .filter(|(_, tex)| match tex {
            Some(t) if !t.is_empty() => {
                let avg = t.iter().map(|v| f64::from(*v)).sum::<f64>() / t.len() as f64;
                avg == 5.0
            }
            _ => true,
        })
        .map(|(a, _)| a)
        .collect()
}

/// 50%-consensus mask: a voxel is foreground iff two or more raters marked it.
pub fn consensus_mask(masks: &[Array3<u8>]) -> Result<Array3<u8>> {
    if masks.len() < 2 {
        return Err(Error::InvalidArgument(
            "consensus needs at least 2 masks".into(),
        ));
    }
    let shape = masks[0].raw_dim();
    for m in &masks[1..] {
        if m.raw_dim() != shape {
            return Err(Error::InvalidArgument(format!(
                "mask shape mismatch: {:?} vs {:?}",
                m.shape(),
                masks[0].shape()
            )));
        }
    }
    let mut counts = Array3::<u8>::zeros(shape);
    for m in masks {
        counts.zip_mut_with(m, |c, v| *c += *v);
    }
    Ok(counts.mapv(|c| u8::from(c >= 2)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(fg: &[[usize; 3]]) -> Array3<u8> {
        let mut m = Array3::<u8>::zeros((4, 4, 4));
        for p in fg {
            m[*p] = 1;
        }
        m
    }

    fn ann(scores: &[u8]) -> RaterAnnotation {
        let masks = vec![mask_from(&[[1, 1, 1]]); scores.len()];
        RaterAnnotation::new("n", scores.to_vec(), masks).unwrap()
    }

    #[test]
    fn mad_identical_and_single_pair() {
        assert_eq!(mean_absolute_difference(&[3, 3, 3, 3]).unwrap(), 0.0);
        assert_eq!(mean_absolute_difference(&[1, 5]).unwrap(), 4.0);
    }

    #[test]
    fn mad_matches_pairwise_enumeration() {
        // pairs of [2,3,3,4]: |2-3|,|2-3|,|2-4|,|3-3|,|3-4|,|3-4| -> 6/6
        assert!((mean_absolute_difference(&[2, 3, 3, 4]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mad_rejects_short_input() {
        assert!(mean_absolute_difference(&[3]).is_err());
    }

    #[test]
    fn filter_discards_above_threshold_and_keeps_boundary() {
        // MAD([3,3,4]) = 2/3 > 0.6 -> discarded
        // MAD([4,4,5,5]) = 4/6 > 0.6 -> discarded
        // MAD([3,3,3]) = 0 -> kept with avg 3.0
        let kept = filter_unsure(
            vec![ann(&[3, 3, 4]), ann(&[3, 3, 3]), ann(&[4, 4, 5, 5])],
            DEFAULT_MAD_THRESHOLD,
        )
        .unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].avg_score, 3.0);

        // exactly 0.6 stays: scores [3,3,3,3,4] -> pairs: 4 ones of 10 -> 0.4; craft 0.6:
        // [3,4] -> 1.0; [3,3,4,4]: (0+1+1+1+1+0)/6 = 0.666; [3,3,3,4,4]:
        // pairs=10, diffs: 3-3(x3)=0, 3-4(x6)=6, 4-4=0 -> 0.6 exactly.
        let kept = filter_unsure(vec![ann(&[3, 3, 3, 4, 4])], 0.6).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn filter_is_monotone_in_threshold() {
        let anns: Vec<_> = (0..20)
            .map(|i| {
                let s = [
                    1 + (i % 5) as u8,
                    1 + ((i * 3) % 5) as u8,
                    1 + ((i * 7) % 5) as u8,
                ];
                ann(&s)
            })
            .collect();
        let low: Vec<String> = filter_unsure(anns.clone(), 0.4)
            .unwrap()
            .into_iter()
            .map(|f| f.annotation.id)
            .collect();
        let high: Vec<String> = filter_unsure(anns, 1.2)
            .unwrap()
            .into_iter()
            .map(|f| f.annotation.id)
            .collect();
        assert!(low.len() <= high.len());
    }

    #[test]
    fn consensus_majority_rules() {
        let a = mask_from(&[[0, 0, 0], [1, 1, 1], [2, 2, 2]]);
        let b = mask_from(&[[1, 1, 1], [2, 2, 2]]);
        let c = mask_from(&[[2, 2, 2]]);
        let d = mask_from(&[[3, 3, 3]]);
        let cons = consensus_mask(&[a, b, c, d]).unwrap();
        assert_eq!(cons[[0, 0, 0]], 0); // 1 of 4
        assert_eq!(cons[[1, 1, 1]], 1); // 2 of 4
        assert_eq!(cons[[2, 2, 2]], 1); // 3 of 4
        assert_eq!(cons[[3, 3, 3]], 0); // 1 of 4

        // 2 of 3 raters
        let m = mask_from(&[[1, 2, 3]]);
        let cons = consensus_mask(&[m.clone(), m.clone(), mask_from(&[])]).unwrap();
        assert_eq!(cons[[1, 2, 3]], 1);

        // identical masks reproduce themselves
        let cons = consensus_mask(&[m.clone(), m.clone(), m.clone(), m.clone()]).unwrap();
        assert_eq!(cons, m);
    }

    #[test]
    fn consensus_rejects_shape_mismatch() {
        let a = Array3::<u8>::zeros((4, 4, 4));
        let b = Array3::<u8>::zeros((4, 4, 5));
        assert!(consensus_mask(&[a, b]).is_err());
    }

    #[test]
    fn texture_filter_keeps_solid_only_when_scored() {
        let anns = vec![ann(&[3, 3, 3]), ann(&[3, 3, 3]), ann(&[3, 3, 3])];
        let tex = vec![Some(vec![5, 5, 5]), Some(vec![5, 4, 5]), None];
        let kept = texture_filter(anns, &tex);
        assert_eq!(kept.len(), 2);
    }
}
