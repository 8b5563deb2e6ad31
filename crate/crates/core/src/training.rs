//! Paired-stream optimization: each iteration draws one sure and one unsure
//! sample, pushes both through the shared model, assembles the four-term
//! objective and takes one Adam step. Cross-validation folds are stratified
//! and fully determined by the seed.

use std::io::Write;

use ndarray::{Array3, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, NodeId, Scalar, Tensor};
use crate::data_model::{SureSample, UnsureSample};
use crate::losses::{
    ad_csl_graph, bce_graph, bce_loss, cam_graph, csl_graph, dice_graph, mse_graph,
    LossComponents, LossWeights,
};
use crate::network::{BackboneConfig, Model};
use crate::preprocess::augment;
use crate::util::{derive_seed, rng_from};
use crate::{Error, Result};

/// Everything a training run needs to be reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub val_fraction: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub side: usize,
    /// Network shape; its side must agree with `side`.
    pub backbone: BackboneConfig,
    /// Disable augmentation (useful for tiny determinism probes).
    #[serde(default)]
    pub no_augment: bool,
}

impl RunConfig {
    pub fn with_side(side: usize) -> Self {
        RunConfig {
            lr: 1e-3,
            max_epochs: 100,
            batch_size: 1,
            folds: 5,
            val_fraction: 0.2,
            weights: LossWeights::default(),
            seed: 0,
            side,
            backbone: BackboneConfig::with_side(side),
            no_augment: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(
                "the paired-stream loop is defined for batch_size 1".into(),
            ));
        }
        if self.backbone.side != self.side {
            return Err(Error::Config(format!(
                "backbone side {} != run side {}",
                self.backbone.side, self.side
            )));
        }
        self.weights.validate()?;
        self.backbone.validate()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::with_side(64)
    }
}

/// Index-based (train, val, test) split of the sure cohort.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold splits: disjoint test folds covering all samples, and a
/// per-fold stratified train/val split of the remainder.
pub fn make_folds(sure: &[SureSample], k: usize, val_fraction: f64, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 || sure.len() < k {
        return Err(Error::Stratification(format!(
            "need at least k={k} samples, got {}",
            sure.len()
        )));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, s) in sure.iter().enumerate() {
        by_class[s.label as usize].push(i);
    }
    let mut rng = rng_from(derive_seed(seed, "folds", 0));
    for c in &mut by_class {
        c.shuffle(&mut rng);
    }
    // deal each class round-robin over the k test folds
    let mut test_folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in &by_class {
        for (j, idx) in class.iter().enumerate() {
            test_folds[j % k].push(*idx);
        }
    }
    let mut splits = Vec::with_capacity(k);
    for (fi, test) in test_folds.iter().enumerate() {
        if test.is_empty() {
            return Err(Error::Stratification(format!("test fold {fi} is empty")));
        }
        for class in 0..2 {
            if !test.iter().any(|i| sure[*i].label as usize == class) {
                return Err(Error::Stratification(format!(
                    "class {class} absent from test fold {fi}"
                )));
            }
        }
        let mut rest_by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for class in 0..2 {
            for idx in &by_class[class] {
                if !test.contains(idx) {
                    rest_by_class[class].push(*idx);
                }
            }
        }
        let mut fold_rng = rng_from(derive_seed(seed, "fold-val", fi as u64));
        let mut train = Vec::new();
        let mut val = Vec::new();
        for class in &mut rest_by_class {
            class.shuffle(&mut fold_rng);
            let n_val = ((class.len() as f64 * val_fraction).round() as usize)
                .clamp(1, class.len().saturating_sub(1).max(1));
            val.extend_from_slice(&class[..n_val]);
            train.extend_from_slice(&class[n_val..]);
        }
        if train.is_empty() || val.is_empty() {
            return Err(Error::Stratification(format!(
                "fold {fi} leaves an empty train or val set"
            )));
        }
        for class in 0..2 {
            if !train.iter().any(|i| sure[*i].label as usize == class)
                || !val.iter().any(|i| sure[*i].label as usize == class)
            {
                return Err(Error::Stratification(format!(
                    "class {class} absent from train or val in fold {fi}"
                )));
            }
        }
        splits.push(FoldSplit {
            train,
            val,
            test: test.clone(),
        });
    }
    Ok(splits)
}

/// Zero-order (nearest) reduction of a ground-truth mask to the feature grid.
/// Output voxel `i` samples input voxel `f*i + f/2` with `f = in/out`.
pub fn downsample_mask(mask: &Array3<u8>, factor: usize) -> Array3<u8> {
    let s = mask.shape().to_vec();
    let out = [s[0] / factor, s[1] / factor, s[2] / factor];
    Array3::from_shape_fn((out[0], out[1], out[2]), |(z, y, x)| {
        mask[[
            (z * factor + factor / 2).min(s[0] - 1),
            (y * factor + factor / 2).min(s[1] - 1),
            (x * factor + factor / 2).min(s[2] - 1),
        ]]
    })
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub epoch: usize,
    pub iter: usize,
    pub components: LossComponents,
    pub total: f64,
    /// Present on the last row of each epoch.
    pub val_bce: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Optimizer settings echoed for reproducibility.
    pub header_note: String,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# {}", self.header_note)?;
        writeln!(w, "epoch,iter,l_cls,l_csl,l_seg,l_reg,total,val_bce")?;
        for r in &self.rows {
            let val = r.val_bce.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.epoch,
                r.iter,
                r.components.cls,
                r.components.csl,
                r.components.seg,
                r.components.reg,
                r.total,
                val
            )?;
        }
        Ok(())
    }
}

pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub best_val_bce: f64,
    pub best_epoch: usize,
    pub final_val_bce: f64,
    pub log: TrainLog,
}

/// Attach the four-term objective for one sure/unsure pair to the graph.
/// Terms with zero weight are skipped entirely (their value is logged as 0).
#[allow(clippy::too_many_arguments)]
pub fn pair_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    ids: &[NodeId],
    sure_patch: &crate::data_model::NodulePatch,
    sure_label: u8,
    unsure_patch: Option<&crate::data_model::NodulePatch>,
    unsure_mask_ds: Option<&Tensor<T>>,
    unsure_target: f64,
    w: &LossWeights,
) -> (NodeId, Vec<NodeId>) {
    // loss node + [cls, csl, seg, reg] component nodes (csl/seg/reg optional)
    let fp_s = model.forward(g, ids, sure_patch);
    let l_cls = bce_graph(g, fp_s.cls_prob, sure_label);
    let mut parts = vec![l_cls];
    let mut total = l_cls;

    if w.alpha > 0.0 {
        let cam = cam_graph(
            g,
            fp_s.features,
            fp_s.cnet_weights,
            fp_s.cls_prob,
            fp_s.seg_prob,
            w.threshold,
        );
        let base = csl_graph(g, cam.avg_ndl, cam.avg_bkg, w.margin, w.mode);
        let constraint = if w.adaptive {
            ad_csl_graph(g, fp_s.cls_prob, w.threshold, base)
        } else {
            base
        };
        parts.push(constraint);
        let scaled = g.affine(constraint, w.alpha, 0.0);
        total = g.add(total, scaled);
    }

    if (w.beta > 0.0 || w.gamma > 0.0) && unsure_patch.is_some() {
        let fp_u = model.forward(g, ids, unsure_patch.unwrap());
        if w.beta > 0.0 {
            let target = unsure_mask_ds.expect("downsampled mask required when beta > 0");
            let l_seg = dice_graph(g, fp_u.seg_prob, target, w.epsilon);
            parts.push(l_seg);
            let scaled = g.affine(l_seg, w.beta, 0.0);
            total = g.add(total, scaled);
        }
        if w.gamma > 0.0 {
            let l_reg = mse_graph(g, fp_u.reg_score, unsure_target);
            parts.push(l_reg);
            let scaled = g.affine(l_reg, w.gamma, 0.0);
            total = g.add(total, scaled);
        }
    }
    (total, parts)
}

fn mask_to_tensor<T: Scalar>(mask: &Array3<u8>) -> Tensor<T> {
    let data: Vec<T> = mask
        .as_standard_layout()
        .iter()
        .map(|v| T::from_f64(f64::from(*v)))
        .collect();
    Tensor::from_shape_vec(IxDyn(mask.shape()), data).unwrap()
}

/// Mean validation BCE of the classification head in eval mode.
pub fn validation_bce<T: Scalar>(model: &Model<T>, val: &[&SureSample]) -> f64 {
    let mut acc = 0.0;
    for s in val {
        let out = model.infer(&s.patch);
        acc += bce_loss(out.cls_prob, s.label);
    }
    acc / val.len() as f64
}

/// Train on one fold. Iterations per epoch equal the sure-train count; the
/// unsure stream is drawn uniformly with replacement. The returned model is
/// the checkpoint with the lowest validation BCE.
pub fn train_fold<T: Scalar>(
    train_sure: &[&SureSample],
    val_sure: &[&SureSample],
    train_unsure: &[&UnsureSample],
    config: &RunConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_sure.is_empty() || val_sure.is_empty() || train_unsure.is_empty() {
        return Err(Error::InvalidArgument(
            "train/val sure and train unsure streams must be non-empty".into(),
        ));
    }
    let w = config.weights;
    let mut model = Model::<T>::init(config.backbone.clone(), derive_seed(config.seed, "init", 0))?;
    let mut values = model.values();
    let mut adam = Adam::new(config.lr, &values);
    let mut order_rng = rng_from(derive_seed(config.seed, "order", 0));
    let mut unsure_rng = rng_from(derive_seed(config.seed, "unsure", 0));

    let factor = 4;
    let ds_masks: Vec<Array3<u8>> = train_unsure
        .iter()
        .map(|u| downsample_mask(&u.seg_mask, factor))
        .collect();

    let mut log = TrainLog {
        rows: Vec::new(),
        header_note: format!(
            "adam lr={} beta1=0.9 beta2=0.999 eps=1e-8 seed={} dtype={}",
            config.lr,
            config.seed,
            T::DTYPE
        ),
    };
    let mut best: Option<(f64, usize, Vec<Tensor<T>>)> = None;
    let mut final_val = f64::INFINITY;

    for epoch in 0..config.max_epochs {
        let mut idx: Vec<usize> = (0..train_sure.len()).collect();
        idx.shuffle(&mut order_rng);
        for (it, si) in idx.into_iter().enumerate() {
            let ui = unsure_rng.random_range(0..train_unsure.len());
            let sure = train_sure[si];
            let unsure = train_unsure[ui];

            let step_tag = (epoch * train_sure.len() + it) as u64;
            let (sure_patch, _) = if config.no_augment {
                (sure.patch.clone(), None)
            } else {
                augment(&sure.patch, None, derive_seed(config.seed, "aug-sure", step_tag))
            };
            let (unsure_patch, unsure_mask) = if config.no_augment {
                (unsure.patch.clone(), Some(ds_masks[ui].clone()))
            } else {
                let (p, m) = augment(
                    &unsure.patch,
                    Some(&unsure.seg_mask),
                    derive_seed(config.seed, "aug-unsure", step_tag),
                );
                (p, Some(downsample_mask(&m.expect("mask"), factor)))
            };
            let mask_t = unsure_mask.map(|m| mask_to_tensor::<T>(&m));

            let mut g = Graph::new();
            let ids = model.bind(&mut g);
            let (total, parts) = pair_loss_graph(
                &mut g,
                &model,
                &ids,
                &sure_patch,
                sure.label,
                Some(&unsure_patch),
                mask_t.as_ref(),
                unsure.normalized_score,
                &w,
            );
            let total_v = g.scalar_f64(total);
            if !total_v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    iter: it,
                    detail: format!(
                        "components: {:?}",
                        parts.iter().map(|p| g.scalar_f64(*p)).collect::<Vec<_>>()
                    ),
                });
            }
            let mut components = LossComponents {
                cls: g.scalar_f64(parts[0]),
                ..Default::default()
            };
            let mut pi = 1;
            if w.alpha > 0.0 {
                components.csl = g.scalar_f64(parts[pi]);
                pi += 1;
            }
            if w.beta > 0.0 {
                components.seg = g.scalar_f64(parts[pi]);
                pi += 1;
            }
            if w.gamma > 0.0 {
                components.reg = g.scalar_f64(parts[pi]);
            }

            let mut grads = g.backward(total);
            let grad_vec: Vec<Option<Tensor<T>>> = ids.iter().map(|id| grads.take(*id)).collect();
            adam.step(&mut values, &grad_vec);
            model.set_values(values.clone());

            log.rows.push(LogRow {
                epoch,
                iter: it,
                components,
                total: total_v,
                val_bce: None,
            });
        }
        let val = validation_bce(&model, val_sure);
        final_val = val;
        if let Some(row) = log.rows.last_mut() {
            row.val_bce = Some(val);
        }
        let better = match &best {
            Some((b, _, _)) => val < *b,
            None => true,
        };
        if better {
            best = Some((val, epoch, values.clone()));
        }
    }

    let (best_val_bce, best_epoch, best_values) = best.expect("at least one epoch");
    model.set_values(best_values);
    Ok(TrainOutcome {
        model,
        best_val_bce,
        best_epoch,
        final_val_bce: final_val,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, PhantomSpec};

    fn tiny_config(side: usize, seed: u64) -> RunConfig {
        RunConfig {
            max_epochs: 2,
            seed,
            backbone: BackboneConfig::scaled_down(side, 8),
            ..RunConfig::with_side(side)
        }
    }

    fn tiny_data(seed: u64) -> (Vec<SureSample>, Vec<UnsureSample>) {
        generate(&PhantomSpec {
            n_sure: 10,
            n_unsure: 8,
            side: 16,
            class_separation: 0.9,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn folds_partition_and_stratify() {
        let (sure, _) = generate(&PhantomSpec {
            n_sure: 30,
            n_unsure: 2,
            side: 16,
            class_separation: 0.5,
            seed: 4,
        })
        .unwrap();
        let folds = make_folds(&sure, 5, 0.2, 9).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = vec![false; sure.len()];
        for f in &folds {
            assert_eq!(f.test.len(), 6);
            for i in &f.test {
                assert!(!seen[*i], "test folds must be disjoint");
                seen[*i] = true;
            }
            // train/val/test partition the whole set per fold
            let mut all: Vec<usize> = f
                .train
                .iter()
                .chain(&f.val)
                .chain(&f.test)
                .copied()
                .collect();
            all.sort_unstable();
            all.dedup();
            assert_eq!(all.len(), sure.len());
            // both classes everywhere
            for part in [&f.train, &f.val, &f.test] {
                assert!(part.iter().any(|i| sure[*i].label == 0));
                assert!(part.iter().any(|i| sure[*i].label == 1));
            }
            // 80/20 split of the 24 remaining: 19/5 per the rounding rule
            assert_eq!(f.val.len() + f.train.len(), 24);
            assert!((f.val.len() as i64 - 5).abs() <= 1);
        }
        assert!(seen.iter().all(|s| *s));
        // determinism
        let again = make_folds(&sure, 5, 0.2, 9).unwrap();
        assert_eq!(folds, again);
    }

    #[test]
    fn folds_reject_single_class() {
        let (mut sure, _) = generate(&PhantomSpec {
            n_sure: 10,
            n_unsure: 2,
            side: 16,
            class_separation: 0.5,
            seed: 5,
        })
        .unwrap();
        for s in &mut sure {
            s.label = 1;
        }
        assert!(matches!(
            make_folds(&sure, 5, 0.2, 0),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn downsample_mask_is_grid_point_sampling() {
        let mask = Array3::from_shape_fn((16, 16, 16), |(z, y, x)| ((z + y + x) % 2) as u8);
        let out = downsample_mask(&mask, 4);
        assert_eq!(out.shape(), &[4, 4, 4]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(out[[z, y, x]], mask[[4 * z + 2, 4 * y + 2, 4 * x + 2]]);
                }
            }
        }
        // all-ones and empty masks map to themselves
        let ones = Array3::<u8>::ones((8, 8, 8));
        assert!(downsample_mask(&ones, 4).iter().all(|v| *v == 1));
        let zeros = Array3::<u8>::zeros((8, 8, 8));
        assert!(downsample_mask(&zeros, 4).iter().all(|v| *v == 0));
    }

    #[test]
    fn training_runs_and_selects_best_checkpoint() {
        let (sure, unsure) = tiny_data(21);
        let train: Vec<&SureSample> = sure[..6].iter().collect();
        let val: Vec<&SureSample> = sure[6..].iter().collect();
        let uns: Vec<&UnsureSample> = unsure.iter().collect();
        let cfg = tiny_config(16, 31);
        let out = train_fold::<f32>(&train, &val, &uns, &cfg).unwrap();
        assert_eq!(out.log.rows.len(), 2 * 6);
        assert!(out.best_val_bce <= out.final_val_bce + 1e-12);
        assert!(out.log.rows.iter().all(|r| r.total.is_finite()));
        // epoch-end rows carry the validation value
        assert!(out.log.rows[5].val_bce.is_some());
        assert!(out.log.rows[11].val_bce.is_some());
        assert!(out.log.rows[0].val_bce.is_none());
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let (sure, unsure) = tiny_data(22);
        let train: Vec<&SureSample> = sure[..6].iter().collect();
        let val: Vec<&SureSample> = sure[6..].iter().collect();
        let uns: Vec<&UnsureSample> = unsure.iter().collect();
        let cfg = tiny_config(16, 33);
        let a = train_fold::<f32>(&train, &val, &uns, &cfg).unwrap();
        let b = train_fold::<f32>(&train, &val, &uns, &cfg).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.log.write_csv(&mut buf_a).unwrap();
        b.log.write_csv(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b);
        for (x, y) in a.model.params.iter().zip(&b.model.params) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn zero_aux_weights_degenerate_to_sure_only_training() {
        let (sure, unsure) = tiny_data(23);
        let train: Vec<&SureSample> = sure[..6].iter().collect();
        let val: Vec<&SureSample> = sure[6..].iter().collect();
        let uns: Vec<&UnsureSample> = unsure.iter().collect();
        let mut cfg = tiny_config(16, 35);
        cfg.weights.alpha = 0.0;
        cfg.weights.beta = 0.0;
        cfg.weights.gamma = 0.0;
        let out = train_fold::<f32>(&train, &val, &uns, &cfg).unwrap();
        for r in &out.log.rows {
            assert_eq!(r.components.csl, 0.0);
            assert_eq!(r.components.seg, 0.0);
            assert_eq!(r.components.reg, 0.0);
            assert!((r.total - r.components.cls).abs() < 1e-12);
        }
    }
}
