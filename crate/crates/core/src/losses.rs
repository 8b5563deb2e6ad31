//! Loss terms and the online CAM machinery.
//!
//! Every loss exists in two forms that share their formulas: a plain f64
//! evaluator used for reporting and tests, and a graph builder used by the
//! training loop so gradients flow through every path, including the
//! classifier weights inside the CAM, the (P - threshold) scaling, the
//! min-max normalization and the SEM weighting.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Scalar, Tensor};
use crate::network::ModelOutputs;
use crate::{Error, Result};

/// Probability clamp for the cross-entropy terms.
pub const BCE_CLAMP: f64 = 1e-7;
/// Guard for the SEM-weighted mean denominators.
pub const AVG_GUARD: f64 = 1e-12;

/// Which side of the attention margin the constraint enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CslMode {
    /// Nodule attention must exceed background attention by the margin.
    #[serde(rename = "ndl_over_bkg")]
    NdlOverBkg,
    /// Inverted probe mode: background must exceed nodule attention.
    #[serde(rename = "bkg_over_ndl")]
    BkgOverNdl,
}

/// Weights and knobs of the total training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the attention-constraint term.
    pub alpha: f64,
    /// Weight of the segmentation term.
    pub beta: f64,
    /// Weight of the regression term.
    pub gamma: f64,
    /// Margin (delta or delta' depending on `mode`).
    pub margin: f64,
    /// Benign/malignant decision point, in (0, 1).
    pub threshold: f64,
    pub mode: CslMode,
    /// When true the constraint is scaled by 2|P - threshold|.
    pub adaptive: bool,
    /// Dice smooth factor.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            margin: 0.5,
            threshold: 0.5,
            mode: CslMode::NdlOverBkg,
            adaptive: true,
            epsilon: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("dice epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// The four components of the total objective on one sure/unsure pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    /// The (adaptive) attention-constraint value, before `alpha`.
    pub csl: f64,
    pub seg: f64,
    pub reg: f64,
}

// ---------------------------------------------------------------------------
// Plain evaluators
// ---------------------------------------------------------------------------

/// Dice coefficient loss: 1 - (2 sum(y g) + eps) / (sum y + sum g + eps).
pub fn dice_loss<T: Scalar>(y: &ArrayD<T>, gt: &ArrayD<T>, eps: f64) -> Result<f64> {
    if y.shape() != gt.shape() {
        return Err(Error::InvalidArgument(format!(
            "dice shape mismatch {:?} vs {:?}",
            y.shape(),
            gt.shape()
        )));
    }
    let mut inter = 0.0;
    let mut sy = 0.0;
    let mut sg = 0.0;
    for (a, b) in y.iter().zip(gt.iter()) {
        let (a, b) = (a.into_f64(), b.into_f64());
        inter += a * b;
        sy += a;
        sg += b;
    }
    Ok(1.0 - (2.0 * inter + eps) / (sy + sg + eps))
}

/// Squared error between the regression output and its normalized target.
pub fn mse_loss(y_r: f64, g_r: f64) -> f64 {
    (y_r - g_r) * (y_r - g_r)
}

/// Binary cross-entropy, returned as a positive quantity to minimize.
pub fn bce_loss(p: f64, label: u8) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Class activation map plus its class-adjusted, normalized form and the
/// SEM-weighted region averages.
#[derive(Debug, Clone)]
pub struct CamResult {
    /// sum_k omega_k f_k, unnormalized.
    pub raw_cam: ArrayD<f64>,
    /// (P - threshold) * raw_cam after min-max rescaling to [0, 1].
    pub cam_c: ArrayD<f64>,
    pub avg_ndl: f64,
    pub avg_bkg: f64,
    /// Predicted class: 1 iff P >= threshold.
    pub class: u8,
}

/// Build the CAM for one forward pass. A constant class-adjusted map (which
/// happens exactly at P == threshold or with dead features) normalizes to the
/// all-zero map.
pub fn compute_cam<T: Scalar>(outputs: &ModelOutputs<T>, threshold: f64) -> Result<CamResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0,1), got {threshold}"
        )));
    }
    let k = outputs.features.shape()[0];
    let spatial_shape: Vec<usize> = outputs.features.shape()[1..].to_vec();
    let spatial: usize = spatial_shape.iter().product();
    let fs = outputs.features.as_slice().expect("contiguous features");
    let mut raw = vec![0.0f64; spatial];
    for c in 0..k {
        let w = outputs.cnet_weights[c].into_f64();
        for (o, v) in raw.iter_mut().zip(&fs[c * spatial..(c + 1) * spatial]) {
            *o += w * v.into_f64();
        }
    }
    let scale = outputs.cls_prob - threshold;
    let scaled: Vec<f64> = raw.iter().map(|v| scale * v).collect();
    let lo = scaled.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cam_c: Vec<f64> = if hi == lo {
        vec![0.0; spatial]
    } else {
        scaled.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    let raw_cam = ArrayD::from_shape_vec(ndarray::IxDyn(&spatial_shape), raw).unwrap();
    let cam_c = ArrayD::from_shape_vec(ndarray::IxDyn(&spatial_shape), cam_c).unwrap();
    let sem = outputs.seg_prob.mapv(|v| v.into_f64());
    let (avg_ndl, avg_bkg) = avg_cam(&cam_c, &sem)?;
    Ok(CamResult {
        raw_cam,
        cam_c,
        avg_ndl,
        avg_bkg,
        class: u8::from(outputs.cls_prob >= threshold),
    })
}

/// Soft-weighted CAM averages over the predicted nodule and background
/// regions; SEM is used as continuous weights, never thresholded.
pub fn avg_cam(cam_c: &ArrayD<f64>, sem: &ArrayD<f64>) -> Result<(f64, f64)> {
    if cam_c.shape() != sem.shape() {
        return Err(Error::InvalidArgument(format!(
            "cam/sem shape mismatch {:?} vs {:?}",
            cam_c.shape(),
            sem.shape()
        )));
    }
    let mut num_ndl = 0.0;
    let mut den_ndl = 0.0;
    let mut num_bkg = 0.0;
    let mut den_bkg = 0.0;
    for (c, s) in cam_c.iter().zip(sem.iter()) {
        num_ndl += c * s;
        den_ndl += s;
        num_bkg += c * (1.0 - s);
        den_bkg += 1.0 - s;
    }
    Ok((
        num_ndl / (den_ndl + AVG_GUARD),
        num_bkg / (den_bkg + AVG_GUARD),
    ))
}

/// Hinge enforcing the attention margin in the selected mode.
pub fn csl(avg_ndl: f64, avg_bkg: f64, margin: f64, mode: CslMode) -> f64 {
    match mode {
        CslMode::NdlOverBkg => (avg_bkg - avg_ndl + margin).max(0.0),
        CslMode::BkgOverNdl => (avg_ndl - avg_bkg + margin).max(0.0),
    }
}

/// Confidence-scaled constraint: 2 |P - threshold| * csl.
pub fn ad_csl(p: f64, threshold: f64, csl_value: f64) -> f64 {
    2.0 * (p - threshold).abs() * csl_value
}

/// cls + alpha * csl_term + beta * seg + gamma * reg.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> f64 {
    components.cls
        + weights.alpha * components.csl
        + weights.beta * components.seg
        + weights.gamma * components.reg
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

pub fn bce_graph<T: Scalar>(g: &mut Graph<T>, p: NodeId, label: u8) -> NodeId {
    let pc = g.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP);
    if label == 1 {
        let lp = g.log(pc);
        g.affine(lp, -1.0, 0.0)
    } else {
        let q = g.affine(pc, -1.0, 1.0);
        let lq = g.log(q);
        g.affine(lq, -1.0, 0.0)
    }
}

pub fn mse_graph<T: Scalar>(g: &mut Graph<T>, y_r: NodeId, target: f64) -> NodeId {
    let d = g.affine(y_r, 1.0, -target);
    g.mul(d, d)
}

pub fn dice_graph<T: Scalar>(g: &mut Graph<T>, sem: NodeId, target: &Tensor<T>, eps: f64) -> NodeId {
    let t = g.constant(target.clone());
    let prod = g.mul(sem, t);
    let inter = g.sum(prod);
    let sy = g.sum(sem);
    let st = g.sum(t);
    let num = g.affine(inter, 2.0, eps);
    let den0 = g.add(sy, st);
    let den = g.affine(den0, 1.0, eps);
    let frac = g.div(num, den);
    g.affine(frac, -1.0, 1.0)
}

/// Graph handles of the CAM pipeline.
pub struct CamGraph {
    pub raw_cam: NodeId,
    pub cam_c: NodeId,
    pub avg_ndl: NodeId,
    pub avg_bkg: NodeId,
}

/// CAM -> class adjustment -> min-max -> SEM-weighted averages, all on the
/// tape so the constraint reshapes features, classifier weights and the
/// segmentation branch alike.
pub fn cam_graph<T: Scalar>(
    g: &mut Graph<T>,
    features: NodeId,
    cnet_weights: NodeId,
    cls_prob: NodeId,
    sem: NodeId,
    threshold: f64,
) -> CamGraph {
    let raw_cam = g.channel_weighted_sum(features, cnet_weights);
    let scale = g.affine(cls_prob, 1.0, -threshold);
    let scaled = g.scale_by(raw_cam, scale);
    let cam_c = g.min_max_norm(scaled);

    let prod_ndl = g.mul(cam_c, sem);
    let num_ndl = g.sum(prod_ndl);
    let den_ndl0 = g.sum(sem);
    let den_ndl = g.affine(den_ndl0, 1.0, AVG_GUARD);
    let avg_ndl = g.div(num_ndl, den_ndl);

    let sem_inv = g.affine(sem, -1.0, 1.0);
    let prod_bkg = g.mul(cam_c, sem_inv);
    let num_bkg = g.sum(prod_bkg);
    let den_bkg0 = g.sum(sem_inv);
    let den_bkg = g.affine(den_bkg0, 1.0, AVG_GUARD);
    let avg_bkg = g.div(num_bkg, den_bkg);

    CamGraph {
        raw_cam,
        cam_c,
        avg_ndl,
        avg_bkg,
    }
}

pub fn csl_graph<T: Scalar>(
    g: &mut Graph<T>,
    avg_ndl: NodeId,
    avg_bkg: NodeId,
    margin: f64,
    mode: CslMode,
) -> NodeId {
    let diff = match mode {
        CslMode::NdlOverBkg => g.sub(avg_bkg, avg_ndl),
        CslMode::BkgOverNdl => g.sub(avg_ndl, avg_bkg),
    };
    let shifted = g.affine(diff, 1.0, margin);
    g.relu(shifted)
}

pub fn ad_csl_graph<T: Scalar>(
    g: &mut Graph<T>,
    cls_prob: NodeId,
    threshold: f64,
    csl: NodeId,
) -> NodeId {
    let centered = g.affine(cls_prob, 1.0, -threshold);
    let dist = g.abs(centered);
    let scaled = g.affine(dist, 2.0, 0.0);
    g.mul(scaled, csl)
}
