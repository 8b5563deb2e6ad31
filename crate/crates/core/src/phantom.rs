//! Procedural phantom nodules with known masks, labels and scores.
//!
//! Each phantom is an ellipsoidal blob on a textured background with a few
//! distractor blobs. A latent severity in [0, 1] drives both the spiculation
//! of the boundary and the core intensity; the benign/malignant label and the
//! rater scores derive from the same latent, with the class-conditional
//! severity ranges overlapping by an amount controlled by `class_separation`.
//!
//! Two output modes share the renderer: direct 2-channel patches for
//! desk-scale training runs, and chest-like HU volumes (body, two air
//! cavities, per-rater scores and masks) that exercise the full
//! ingest/preprocess pipeline.

use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data_model::{
    write_manifest, write_mask, write_volume, DatasetManifest, ManifestEntry, Modality,
    NodulePatch, SureSample, UnsureSample, Volume,
};
use crate::preprocess::{window_normalize, LUNG_WINDOW, MEDIASTINAL_WINDOW};
use crate::util::{derive_seed, rng_from};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct PhantomSpec {
    pub n_sure: usize,
    pub n_unsure: usize,
    pub side: usize,
    /// 0 = class-conditional severity ranges fully overlap, 1 = disjoint.
    pub class_separation: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sure == 0 || self.n_unsure == 0 {
            return Err(Error::InvalidArgument("phantom counts must be > 0".into()));
        }
        if self.side < 16 {
            return Err(Error::InvalidArgument(format!(
                "phantom side must be >= 16, got {}",
                self.side
            )));
        }
        if !(0.0..=1.0).contains(&self.class_separation) {
            return Err(Error::InvalidArgument(
                "class_separation must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Generator-side ground truth, exposed for tests and analysis.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub id: String,
    pub label: u8,
    pub severity: f64,
    /// Nodule center in voxels of the patch grid.
    pub center: [f64; 3],
    /// Ellipsoid semi-axes in voxels.
    pub radii: [f64; 3],
    /// Exact voxelization of the generating ellipsoid.
    pub mask: Array3<u8>,
}

// Rendering constants (HU). The intensity gain across the severity range is
// deliberately small relative to the texture so that shape carries most of
// the class signal.
const BG_HU: f64 = -830.0;
const BG_TEXTURE: f64 = 65.0;
const NODULE_BASE_HU: f64 = -430.0;
const NODULE_GAIN_HU: f64 = 320.0;
const NODULE_TEXTURE: f64 = 35.0;
const INTENSITY_JITTER_HU: f64 = 45.0;
const EDGE_WIDTH: f64 = 0.08;
const SPIC_BASE: f64 = 0.04;
const SPIC_GAIN: f64 = 0.30;
const RATER_SCORE_NOISE: f64 = 0.3;

/// Class-conditional severity bounds: benign in [0, b_hi], malignant in
/// [m_lo, 1]. At separation 1 the ranges are disjoint with a margin; at 0
/// they coincide.
fn severity_bounds(sep: f64) -> (f64, f64) {
    let b_hi = 0.40 + 0.60 * (1.0 - sep);
    let m_lo = 0.60 - 0.60 * (1.0 - sep);
    (b_hi, m_lo)
}

fn draw_severity(rng: &mut impl Rng, label: u8, sep: f64) -> f64 {
    let (b_hi, m_lo) = severity_bounds(sep);
    if label == 1 {
        rng.random_range(m_lo..=1.0)
    } else {
        rng.random_range(0.0..=b_hi)
    }
}

/// Smoothed white noise with a given amplitude (std), zero mean.
fn smooth_noise(shape: [usize; 3], amplitude: f64, rng: &mut impl Rng) -> Array3<f64> {
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let mut field = Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| normal.sample(rng));
    // three box-blur passes per axis give a near-Gaussian correlation
    for _ in 0..2 {
        for axis in 0..3 {
            let mut out = field.clone();
            let n = field.shape()[axis];
            for (lane_in, mut lane_out) in field
                .lanes(Axis(axis))
                .into_iter()
                .zip(out.lanes_mut(Axis(axis)))
            {
                for i in 0..n {
                    let lo = i.saturating_sub(1);
                    let hi = (i + 1).min(n - 1);
                    let mut acc = 0.0;
                    for j in lo..=hi {
                        acc += lane_in[j];
                    }
                    lane_out[i] = acc / (hi - lo + 1) as f64;
                }
            }
            field = out;
        }
    }
    let mean = field.sum() / field.len() as f64;
    let var = field.mapv(|v| (v - mean) * (v - mean)).sum() / field.len() as f64;
    let scale = amplitude / var.sqrt().max(1e-9);
    field.mapv(|v| (v - mean) * scale)
}

struct NoduleShape {
    center: [f64; 3],
    radii: [f64; 3],
    severity: f64,
    spic_freq: [f64; 3],
    spic_phase: [f64; 3],
    intensity_offset: f64,
}

impl NoduleShape {
    /// Normalized ellipsoid coordinate of a voxel (1.0 = surface).
    fn rho(&self, z: f64, y: f64, x: f64) -> f64 {
        let dz = (z - self.center[0]) / self.radii[0];
        let dy = (y - self.center[1]) / self.radii[1];
        let dx = (x - self.center[2]) / self.radii[2];
        (dz * dz + dy * dy + dx * dx).sqrt()
    }

    /// Radial boundary perturbation for the direction of a voxel.
    fn spiculation(&self, z: f64, y: f64, x: f64) -> f64 {
        let dz = z - self.center[0];
        let dy = y - self.center[1];
        let dx = x - self.center[2];
        let r = (dz * dz + dy * dy + dx * dx).sqrt().max(1e-9);
        let theta = dy.atan2(dx);
        let phi = (dz / r).clamp(-1.0, 1.0).acos();
        let amp = SPIC_BASE + SPIC_GAIN * self.severity;
        amp * (0.6 * (self.spic_freq[0] * theta + self.spic_phase[0]).sin()
            * (self.spic_freq[1] * phi + self.spic_phase[1]).cos()
            + 0.4 * (self.spic_freq[2] * phi + self.spic_phase[2]).sin())
    }

    /// Soft interior indicator of the spiculated blob in [0, 1].
    fn alpha(&self, z: f64, y: f64, x: f64) -> f64 {
        let rho = self.rho(z, y, x);
        if rho > 2.0 {
            return 0.0;
        }
        let rho_adj = rho / (1.0 + self.spiculation(z, y, x));
        ((1.0 + EDGE_WIDTH - rho_adj) / (2.0 * EDGE_WIDTH)).clamp(0.0, 1.0)
    }

    fn core_hu(&self) -> f64 {
        NODULE_BASE_HU + NODULE_GAIN_HU * self.severity + self.intensity_offset
    }

    /// Exact voxelization of the unperturbed ellipsoid.
    fn mask(&self, shape: [usize; 3]) -> Array3<u8> {
        Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(z, y, x)| {
            u8::from(self.rho(z as f64, y as f64, x as f64) <= 1.0)
        })
    }
}

struct Distractor {
    center: [f64; 3],
    radius: f64,
    hu: f64,
}

fn sample_nodule(
    rng: &mut impl Rng,
    label: u8,
    sep: f64,
    side: f64,
    center: [f64; 3],
    jitter: f64,
    min_radius: f64,
) -> NoduleShape {
    let severity = draw_severity(rng, label, sep);
    let r_lo = (0.13 * side).max(min_radius);
    let r_hi = (0.20 * side).max(r_lo * 1.3);
    let radii = [
        rng.random_range(r_lo..r_hi),
        rng.random_range(r_lo..r_hi),
        rng.random_range(r_lo..r_hi),
    ];
    let center = [
        center[0] + rng.random_range(-jitter..=jitter),
        center[1] + rng.random_range(-jitter..=jitter),
        center[2] + rng.random_range(-jitter..=jitter),
    ];
    // the nuisance intensity offset shrinks as the classes separate, so
    // mean-core intensity becomes an exact oracle at separation 1
    let offset_max = INTENSITY_JITTER_HU * (1.0 - sep);
    let intensity_offset = if offset_max > 0.0 {
        rng.random_range(-offset_max..=offset_max)
    } else {
        0.0
    };
    NoduleShape {
        center,
        radii,
        severity,
        spic_freq: [
            rng.random_range(4.0..7.0),
            rng.random_range(4.0..7.0),
            rng.random_range(5.0..9.0),
        ],
        spic_phase: [
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
        ],
        intensity_offset,
    }
}

fn sample_distractors(rng: &mut impl Rng, side: f64, nodule: &NoduleShape) -> Vec<Distractor> {
    let count = rng.random_range(1..=3usize);
    let nodule_r = nodule.radii.iter().cloned().fold(0.0f64, f64::max);
    let mut out = Vec::new();
    for _ in 0..count {
        for _attempt in 0..20 {
            let radius = rng.random_range(0.05 * side..0.10 * side);
            let c = [
                rng.random_range(0.15 * side..0.85 * side),
                rng.random_range(0.15 * side..0.85 * side),
                rng.random_range(0.15 * side..0.85 * side),
            ];
            let d = ((c[0] - nodule.center[0]).powi(2)
                + (c[1] - nodule.center[1]).powi(2)
                + (c[2] - nodule.center[2]).powi(2))
            .sqrt();
            if d >= nodule_r + radius + 1.5 {
                out.push(Distractor {
                    center: c,
                    radius,
                    hu: rng.random_range(-470.0..-320.0),
                });
                break;
            }
        }
    }
    out
}

/// Render the HU field of one patch-sized phantom.
fn render_field(
    shape: [usize; 3],
    nodule: &NoduleShape,
    distractors: &[Distractor],
    rng: &mut impl Rng,
) -> Array3<f32> {
    let bg_tex = smooth_noise(shape, BG_TEXTURE, rng);
    let ndl_tex = smooth_noise(shape, NODULE_TEXTURE, rng);
    let core = nodule.core_hu();
    Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(z, y, x)| {
        let (zf, yf, xf) = (z as f64, y as f64, x as f64);
        let mut hu = BG_HU + bg_tex[[z, y, x]];
        for d in distractors {
            let dist = ((zf - d.center[0]).powi(2)
                + (yf - d.center[1]).powi(2)
                + (xf - d.center[2]).powi(2))
            .sqrt();
            let a = ((d.radius + 0.5 - dist) / 1.0).clamp(0.0, 1.0);
            hu = hu * (1.0 - a) + (d.hu + bg_tex[[z, y, x]] * 0.4) * a;
        }
        let a = nodule.alpha(zf, yf, xf);
        if a > 0.0 {
            hu = hu * (1.0 - a) + (core + ndl_tex[[z, y, x]]) * a;
        }
        hu as f32
    })
}

fn field_to_patch(field: &Array3<f32>, side: usize) -> NodulePatch {
    let lung = window_normalize(field, LUNG_WINDOW);
    let med = window_normalize(field, MEDIASTINAL_WINDOW);
    let dims = lung.dim();
    let mut data = Array4::<f32>::zeros((2, dims.0, dims.1, dims.2));
    data.index_axis_mut(Axis(0), 0).assign(&lung);
    data.index_axis_mut(Axis(0), 1).assign(&med);
    NodulePatch::new(data, Modality::Cube64, side, false).expect("phantom patch in range")
}

fn rater_score(rng: &mut impl Rng, severity: f64) -> f64 {
    let normal = Normal::new(0.0f64, RATER_SCORE_NOISE).unwrap();
    (1.0 + 4.0 * severity + normal.sample(rng)).round().clamp(1.0, 5.0)
}

fn render_sample(
    spec: &PhantomSpec,
    stream: &str,
    index: usize,
    label: u8,
) -> (Array3<f32>, NoduleShape, Array3<u8>) {
    let mut rng = rng_from(derive_seed(spec.seed, stream, index as u64));
    let side = spec.side as f64;
    let c = side / 2.0;
    let nodule = sample_nodule(
        &mut rng,
        label,
        spec.class_separation,
        side,
        [c, c, c],
        0.05 * side,
        0.0,
    );
    let distractors = sample_distractors(&mut rng, side, &nodule);
    let shape = [spec.side; 3];
    let field = render_field(shape, &nodule, &distractors, &mut rng);
    let mask = nodule.mask(shape);
    (field, nodule, mask)
}

/// Generate direct 2-channel patches; deterministic given the spec seed and
/// parallel-safe per index.
pub fn generate(spec: &PhantomSpec) -> Result<(Vec<SureSample>, Vec<UnsureSample>)> {
    let (s, u, _, _) = generate_with_truth(spec)?;
    Ok((s, u))
}

/// Like [`generate`], additionally returning the ground truth of both
/// streams (sure truths first, unsure truths second).
pub fn generate_with_truth(
    spec: &PhantomSpec,
) -> Result<(
    Vec<SureSample>,
    Vec<UnsureSample>,
    Vec<PhantomTruth>,
    Vec<PhantomTruth>,
)> {
    spec.validate()?;
    let mut sure = Vec::with_capacity(spec.n_sure);
    let mut sure_truth = Vec::with_capacity(spec.n_sure);
    for i in 0..spec.n_sure {
        let label = (i % 2) as u8;
        let (field, nodule, mask) = render_sample(spec, "sure", i, label);
        let id = format!("s900{i:04}");
        let patch = field_to_patch(&field, spec.side);
        sure.push(SureSample::new(&id, patch, label)?);
        sure_truth.push(PhantomTruth {
            id,
            label,
            severity: nodule.severity,
            center: nodule.center,
            radii: nodule.radii,
            mask,
        });
    }
    let mut unsure = Vec::with_capacity(spec.n_unsure);
    let mut unsure_truth = Vec::with_capacity(spec.n_unsure);
    for i in 0..spec.n_unsure {
        let label = (i % 2) as u8;
        let (field, nodule, mask) = render_sample(spec, "unsure", i, label);
        let mut rng = rng_from(derive_seed(spec.seed, "unsure-score", i as u64));
        let score = rater_score(&mut rng, nodule.severity);
        let id = format!("u900{i:04}");
        let patch = field_to_patch(&field, spec.side);
        unsure.push(UnsureSample::new(&id, patch, mask.clone(), score)?);
        unsure_truth.push(PhantomTruth {
            id,
            label,
            severity: nodule.severity,
            center: nodule.center,
            radii: nodule.radii,
            mask,
        });
    }
    Ok((sure, unsure, sure_truth, unsure_truth))
}

// ---------------------------------------------------------------------------
// Chest-volume mode
// ---------------------------------------------------------------------------

const BODY_HU: f64 = 25.0;
const AIR_HU: f64 = -1000.0;

/// Write a chest-phantom dataset (volumes, per-rater masks, manifest) under
/// `out_dir`. The nodule of entry `i` sits in cavity `i % 2`; a fraction of
/// nodules attach to the cavity wall.
pub fn generate_volume_dataset(spec: &PhantomSpec, spacing: f64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if spacing <= 0.0 {
        return Err(Error::InvalidArgument("spacing must be > 0".into()));
    }
    let vol_side = (spec.side * 5 / 2).max(48);
    std::fs::create_dir_all(out_dir.join("volumes")).map_err(|e| Error::io(out_dir, e))?;
    std::fs::create_dir_all(out_dir.join("masks")).map_err(|e| Error::io(out_dir, e))?;

    let total = spec.n_sure + spec.n_unsure;
    let mut entries = Vec::with_capacity(total);
    for i in 0..total {
        let is_sure = i < spec.n_sure;
        let kind_idx = if is_sure { i } else { i - spec.n_sure };
        let label = (kind_idx % 2) as u8;
        let stream = if is_sure { "vol-sure" } else { "vol-unsure" };
        let mut rng = rng_from(derive_seed(spec.seed, stream, kind_idx as u64));

        let d = vol_side as f64;
        let body_c = [d / 2.0; 3];
        let body_r = [0.44 * d, 0.44 * d, 0.46 * d];
        let cavity_cs = [
            [d / 2.0, d / 2.0, 0.30 * d],
            [d / 2.0, d / 2.0, 0.70 * d],
        ];
        let cavity_r = [0.26 * d, 0.26 * d, 0.155 * d];

        // nodule placement inside the chosen cavity
        let cav = cavity_cs[i % 2];
        let wall_attached = rng.random_range(0.0..1.0) < 0.2;
        let base_center = if wall_attached {
            // push toward the cavity wall along a random horizontal direction
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            [
                cav[0],
                cav[1] + ang.sin() * cavity_r[1] * 0.82,
                cav[2] + ang.cos() * cavity_r[2] * 0.82,
            ]
        } else {
            [
                cav[0] + rng.random_range(-0.25..0.25) * cavity_r[0],
                cav[1] + rng.random_range(-0.25..0.25) * cavity_r[1],
                cav[2] + rng.random_range(-0.25..0.25) * cavity_r[2],
            ]
        };
        // keep the declared diameter within the accepted [3, 30) mm range
        let min_radius_vox = 1.6 / spacing;
        let nodule = sample_nodule(
            &mut rng,
            label,
            spec.class_separation,
            spec.side as f64,
            base_center,
            0.02 * spec.side as f64,
            min_radius_vox,
        );

        let shape = [vol_side; 3];
        let body_tex = smooth_noise(shape, 18.0, &mut rng);
        let cav_tex = smooth_noise(shape, BG_TEXTURE, &mut rng);
        let ndl_tex = smooth_noise(shape, NODULE_TEXTURE, &mut rng);
        let core = nodule.core_hu();
        let inside = |c: &[f64; 3], r: &[f64; 3], z: f64, y: f64, x: f64| {
            let dz = (z - c[0]) / r[0];
            let dy = (y - c[1]) / r[1];
            let dx = (x - c[2]) / r[2];
            dz * dz + dy * dy + dx * dx <= 1.0
        };
        let voxels = Array3::from_shape_fn((vol_side, vol_side, vol_side), |(z, y, x)| {
            let (zf, yf, xf) = (z as f64, y as f64, x as f64);
            let mut hu = AIR_HU;
            if inside(&body_c, &body_r, zf, yf, xf) {
                hu = BODY_HU + body_tex[[z, y, x]];
                for cav_c in &cavity_cs {
                    if inside(cav_c, &cavity_r, zf, yf, xf) {
                        hu = BG_HU + cav_tex[[z, y, x]];
                    }
                }
                let a = nodule.alpha(zf, yf, xf);
                if a > 0.0 {
                    hu = hu * (1.0 - a) + (core + ndl_tex[[z, y, x]]) * a;
                }
            }
            hu as f32
        });
        let volume = Volume::new(voxels, [spacing; 3], [0.0; 3])?;
        let id = if is_sure {
            format!("s{kind_idx:04}")
        } else {
            format!("u{kind_idx:04}")
        };
        let vol_path = format!("volumes/{id}.bin");
        write_volume(&out_dir.join(&vol_path), &volume)?;

        let center_mm = [
            nodule.center[0] * spacing,
            nodule.center[1] * spacing,
            nodule.center[2] * spacing,
        ];
        let r_mean = (nodule.radii[0] + nodule.radii[1] + nodule.radii[2]) / 3.0;
        let diameter_mm = 2.0 * r_mean * spacing;

        let mut entry = ManifestEntry {
            id: id.clone(),
            kind: if is_sure { "sure" } else { "unsure" }.into(),
            volume_path: vol_path,
            nodule_center_mm: center_mm,
            nodule_diameter_mm: diameter_mm,
            label: is_sure.then_some(label),
            rater_scores: Vec::new(),
            rater_mask_paths: Vec::new(),
            texture_scores: None,
            split_tag: None,
            avg_score: None,
            consensus_mask_path: None,
        };
        if !is_sure {
            let true_mask = nodule.mask(shape);
            let mut scores = Vec::new();
            let mut paths = Vec::new();
            for r in 0..4 {
                scores.push(rater_score(&mut rng, nodule.severity) as u8);
                // raters outline slightly different extents
                let scale = rng.random_range(0.93..1.07);
                let jittered = NoduleShape {
                    center: nodule.center,
                    radii: [
                        nodule.radii[0] * scale,
                        nodule.radii[1] * scale,
                        nodule.radii[2] * scale,
                    ],
                    severity: nodule.severity,
                    spic_freq: nodule.spic_freq,
                    spic_phase: nodule.spic_phase,
                    intensity_offset: nodule.intensity_offset,
                };
                let m = if r == 0 { true_mask.clone() } else { jittered.mask(shape) };
                let path = format!("masks/{id}_r{r}.bin");
                write_mask(&out_dir.join(&path), &m)?;
                paths.push(path);
            }
            entry.rater_scores = scores;
            entry.rater_mask_paths = paths;
            entry.texture_scores = Some(vec![5, 5, 5, 5]);
        }
        entries.push(entry);
    }
    let manifest = DatasetManifest { entries };
    write_manifest(&out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}
