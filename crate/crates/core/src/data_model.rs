//! Core immutable value types shared by all modules, plus the on-disk dataset
//! formats: a JSON-lines manifest and raw little-endian `f32` arrays with JSON
//! sidecars.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Accepted nodule diameter range in mm (inclusive low, exclusive high).
pub const DIAMETER_RANGE_MM: (f64, f64) = (3.0, 30.0);

/// A 3D CT grid in Hounsfield units with physical spacing and origin (mm).
#[derive(Debug, Clone)]
pub struct Volume {
    pub voxels: Array3<f32>,
    /// mm per voxel along (z, y, x) of the array axes; all strictly positive.
    pub spacing: [f64; 3],
    /// mm position of the center of voxel (0, 0, 0).
    pub origin: [f64; 3],
}

impl Volume {
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "nonpositive spacing {spacing:?}"
            )));
        }
        if voxels.shape().iter().any(|&d| d < 8) {
            return Err(Error::InvalidArgument(format!(
                "volume shape {:?} has an axis below 8 voxels",
                voxels.shape()
            )));
        }
        Ok(Volume {
            voxels,
            spacing,
            origin,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    /// Convert a physical mm position to (fractional) voxel indices.
    pub fn mm_to_voxel(&self, mm: [f64; 3]) -> [f64; 3] {
        [
            (mm[0] - self.origin[0]) / self.spacing[0],
            (mm[1] - self.origin[1]) / self.spacing[1],
            (mm[2] - self.origin[2]) / self.spacing[2],
        ]
    }
}

/// The four patch extraction modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    /// Fixed `side`-voxel cube centered on the nodule.
    #[serde(rename = "cube64")]
    Cube64,
    /// Tight crop of the nodule extent only.
    #[serde(rename = "x")]
    X,
    /// Tight crop cubically resized up to `side`.
    #[serde(rename = "x-resize-64")]
    XResize64,
    /// Tight crop zero-padded symmetrically up to `side`.
    #[serde(rename = "x-padding-64")]
    XPadding64,
}

impl Modality {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cube64" | "64" => Ok(Modality::Cube64),
            "x" => Ok(Modality::X),
            "x-resize-64" | "x_resize_64" => Ok(Modality::XResize64),
            "x-padding-64" | "x_padding_64" => Ok(Modality::XPadding64),
            other => Err(Error::InvalidArgument(format!("unknown modality {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Cube64 => "cube64",
            Modality::X => "x",
            Modality::XResize64 => "x-resize-64",
            Modality::XPadding64 => "x-padding-64",
        }
    }
}

/// A 2-channel normalized nodule cube. Channel 0 is the lung window, channel 1
/// the mediastinal window; every value lies in [0, 1].
#[derive(Debug, Clone)]
pub struct NodulePatch {
    /// [channel = 2, D, H, W]
    pub data: Array4<f32>,
    pub modality: Modality,
    /// Nominal voxels per axis for the cubic modalities.
    pub side: usize,
    /// True when part of the crop fell outside the volume and was zero-padded.
    pub oob_padded: bool,
}

impl NodulePatch {
    pub fn new(
        data: Array4<f32>,
        modality: Modality,
        side: usize,
        oob_padded: bool,
    ) -> Result<Self> {
        let sh = data.shape().to_vec();
        if sh[0] != 2 {
            return Err(Error::InvalidArgument(format!(
                "patch must have 2 channels, got {}",
                sh[0]
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "patch values must lie in [0, 1]".into(),
            ));
        }
        if modality != Modality::X && (sh[1] != side || sh[2] != side || sh[3] != side) {
            return Err(Error::InvalidArgument(format!(
                "modality {} requires a {side}^3 cube, got {:?}",
                modality.as_str(),
                &sh[1..]
            )));
        }
        Ok(NodulePatch {
            data,
            modality,
            side,
            oob_padded,
        })
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }
}

/// Map a malignancy score in [1, 5] onto the regression target range [0, 1].
pub fn normalize_score(score: f64) -> f64 {
    (score - 1.0) / 4.0
}

/// A nodule with radiologist annotations but no pathological ground truth.
#[derive(Debug, Clone)]
pub struct UnsureSample {
    pub id: String,
    pub patch: NodulePatch,
    /// Binary mask, same spatial shape as the patch.
    pub seg_mask: Array3<u8>,
    /// Average malignancy score in [1, 5].
    pub malignancy_score: f64,
    /// `(malignancy_score - 1) / 4`, the regression target.
    pub normalized_score: f64,
}

impl UnsureSample {
    pub fn new(
        id: impl Into<String>,
        patch: NodulePatch,
        seg_mask: Array3<u8>,
        malignancy_score: f64,
    ) -> Result<Self> {
        if seg_mask.shape() != patch.spatial_shape() {
            return Err(Error::InvalidArgument(format!(
                "mask shape {:?} != patch spatial shape {:?}",
                seg_mask.shape(),
                patch.spatial_shape()
            )));
        }
        if seg_mask.iter().any(|v| *v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0/1".into()));
        }
        if !seg_mask.iter().any(|v| *v == 1) {
            return Err(Error::InvalidArgument(
                "mask must contain at least one foreground voxel".into(),
            ));
        }
        if !(1.0..=5.0).contains(&malignancy_score) {
            return Err(Error::InvalidArgument(format!(
                "malignancy score {malignancy_score} outside [1, 5]"
            )));
        }
        Ok(UnsureSample {
            id: id.into(),
            patch,
            seg_mask,
            malignancy_score,
            normalized_score: normalize_score(malignancy_score),
        })
    }
}

/// A nodule with a pathology-confirmed benign (0) / malignant (1) label.
#[derive(Debug, Clone)]
pub struct SureSample {
    pub nodule_id: String,
    pub patch: NodulePatch,
    pub label: u8,
}

impl SureSample {
    pub fn new(nodule_id: impl Into<String>, patch: NodulePatch, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(Error::InvalidArgument(format!(
                "label must be 0 or 1, got {label}"
            )));
        }
        Ok(SureSample {
            nodule_id: nodule_id.into(),
            patch,
            label,
        })
    }
}

/// One nodule entry of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// "sure" or "unsure".
    pub kind: String,
    pub volume_path: String,
    pub nodule_center_mm: [f64; 3],
    pub nodule_diameter_mm: f64,
    /// Benign/malignant label; present for sure entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    /// Per-rater malignancy scores (1..=5); present for raw unsure entries.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rater_scores: Vec<u8>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rater_mask_paths: Vec<String>,
    /// Per-rater texture scores, when the source archive provides them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture_scores: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_tag: Option<String>,
    /// Filled in by ingestion: average of the rater scores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_score: Option<f64>,
    /// Filled in by ingestion: path of the 50%-consensus mask.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consensus_mask_path: Option<String>,
}

impl ManifestEntry {
    pub fn is_sure(&self) -> bool {
        self.kind == "sure"
    }
}

/// The dataset manifest: one entry per nodule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

/// A manifest rule violation; empty output from [`validate_manifest`] means
/// the manifest is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub entry_id: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.entry_id, self.rule)
    }
}

/// Check every entry against the manifest invariants. Volume sidecars are
/// read from `base_dir` to validate spacing; voxel payloads are not loaded.
pub fn validate_manifest(manifest: &DatasetManifest, base_dir: &Path) -> Result<Vec<Violation>> {
    let mut violations = Vec::new();
    let mut push = |id: &str, rule: String| {
        violations.push(Violation {
            entry_id: id.to_string(),
            rule,
        })
    };
    for e in &manifest.entries {
        let (lo, hi) = DIAMETER_RANGE_MM;
        if !(e.nodule_diameter_mm >= lo && e.nodule_diameter_mm < hi) {
            push(&e.id, format!("diameter out of [3,30): {}", e.nodule_diameter_mm));
        }
        match e.kind.as_str() {
            "sure" => {
                match e.label {
                    Some(0) | Some(1) => {}
                    other => push(&e.id, format!("sure entry needs label 0/1, got {other:?}")),
                }
            }
            "unsure" => {
                let ingested = e.avg_score.is_some() && e.consensus_mask_path.is_some();
                if !ingested {
                    if e.rater_scores.len() < 3 {
                        push(
                            &e.id,
                            format!("unsure entry needs >= 3 rater scores, got {}", e.rater_scores.len()),
                        );
                    }
                    if e.rater_mask_paths.len() != e.rater_scores.len() {
                        push(
                            &e.id,
                            format!(
                                "rater mask count {} != score count {}",
                                e.rater_mask_paths.len(),
                                e.rater_scores.len()
                            ),
                        );
                    }
                }
                if e.rater_scores.iter().any(|s| !(1..=5).contains(s)) {
                    push(&e.id, "rater scores must lie in 1..=5".into());
                }
            }
            other => push(&e.id, format!("unknown kind {other:?}")),
        }
        // Spacing comes from the volume sidecar.
        let sidecar = base_dir.join(format!("{}.json", e.volume_path));
        match read_sidecar(&sidecar) {
            Ok(meta) => {
                if let Some(sp) = meta.spacing {
                    if sp.iter().any(|s| *s <= 0.0) {
                        push(&e.id, format!("nonpositive spacing {sp:?}"));
                    }
                } else {
                    push(&e.id, "volume sidecar lacks spacing".into());
                }
            }
            Err(err) => return Err(err),
        }
    }
    Ok(violations)
}

// ---------------------------------------------------------------------------
// On-disk formats
// ---------------------------------------------------------------------------

/// JSON sidecar written next to every `.bin` array payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub side: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oob_padded: Option<bool>,
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(BufWriter::new(f), sidecar)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Write a raw little-endian `f32` payload. `path` is the `.bin` file; the
/// sidecar lands at `<path>.json`.
fn write_f32_bin(path: &Path, data: &[f32]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_f32_bin(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} f32 values, file holds {} bytes",
            path.display(),
            expected_len,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn sidecar_path(bin: &Path) -> PathBuf {
    let mut os = bin.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

pub fn write_volume(bin_path: &Path, volume: &Volume) -> Result<()> {
    let data = volume
        .voxels
        .as_standard_layout()
        .as_slice()
        .expect("standard layout")
        .to_vec();
    write_f32_bin(bin_path, &data)?;
    write_sidecar(
        &sidecar_path(bin_path),
        &Sidecar {
            shape: volume.voxels.shape().to_vec(),
            dtype: "f32".into(),
            spacing: Some(volume.spacing),
            origin: Some(volume.origin),
            modality: None,
            side: None,
            oob_padded: None,
        },
    )
}

pub fn read_volume(bin_path: &Path) -> Result<Volume> {
    let meta = read_sidecar(&sidecar_path(bin_path))?;
    if meta.shape.len() != 3 {
        return Err(Error::Format(format!(
            "{}: volume sidecar must have a 3D shape",
            bin_path.display()
        )));
    }
    let n = meta.shape.iter().product();
    let data = read_f32_bin(bin_path, n)?;
    let arr = Array3::from_shape_vec((meta.shape[0], meta.shape[1], meta.shape[2]), data)
        .map_err(|e| Error::Format(e.to_string()))?;
    Volume::new(
        arr,
        meta.spacing
            .ok_or_else(|| Error::Format("volume sidecar lacks spacing".into()))?,
        meta.origin.unwrap_or([0.0; 3]),
    )
}

/// Masks use the same `f32` binary format with values restricted to {0, 1}.
pub fn write_mask(bin_path: &Path, mask: &Array3<u8>) -> Result<()> {
    let data: Vec<f32> = mask
        .as_standard_layout()
        .iter()
        .map(|v| f32::from(*v))
        .collect();
    write_f32_bin(bin_path, &data)?;
    write_sidecar(
        &sidecar_path(bin_path),
        &Sidecar {
            shape: mask.shape().to_vec(),
            dtype: "f32".into(),
            spacing: None,
            origin: None,
            modality: None,
            side: None,
            oob_padded: None,
        },
    )
}

pub fn read_mask(bin_path: &Path) -> Result<Array3<u8>> {
    let meta = read_sidecar(&sidecar_path(bin_path))?;
    let n = meta.shape.iter().product();
    let data = read_f32_bin(bin_path, n)?;
    let mut out = Vec::with_capacity(n);
    for v in data {
        if v == 0.0 {
            out.push(0u8);
        } else if v == 1.0 {
            out.push(1u8);
        } else {
            return Err(Error::Format(format!(
                "{}: mask value {v} not in {{0, 1}}",
                bin_path.display()
            )));
        }
    }
    Array3::from_shape_vec((meta.shape[0], meta.shape[1], meta.shape[2]), out)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_patch(bin_path: &Path, patch: &NodulePatch) -> Result<()> {
    let data = patch
        .data
        .as_standard_layout()
        .as_slice()
        .expect("standard layout")
        .to_vec();
    write_f32_bin(bin_path, &data)?;
    write_sidecar(
        &sidecar_path(bin_path),
        &Sidecar {
            shape: patch.data.shape().to_vec(),
            dtype: "f32".into(),
            spacing: None,
            origin: None,
            modality: Some(patch.modality),
            side: Some(patch.side),
            oob_padded: Some(patch.oob_padded),
        },
    )
}

pub fn read_patch(bin_path: &Path) -> Result<NodulePatch> {
    let meta = read_sidecar(&sidecar_path(bin_path))?;
    if meta.shape.len() != 4 {
        return Err(Error::Format(format!(
            "{}: patch sidecar must have a 4D shape",
            bin_path.display()
        )));
    }
    let n = meta.shape.iter().product();
    let data = read_f32_bin(bin_path, n)?;
    let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), data)
        .map_err(|e| Error::Format(e.to_string()))?
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| Error::Format(e.to_string()))?;
    NodulePatch::new(
        arr,
        meta.modality
            .ok_or_else(|| Error::Format("patch sidecar lacks modality".into()))?,
        meta.side
            .ok_or_else(|| Error::Format("patch sidecar lacks side".into()))?,
        meta.oob_padded.unwrap_or(false),
    )
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for entry in &manifest.entries {
        let line = serde_json::to_string(entry).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (ln, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{} line {}: {e}", path.display(), ln + 1))
        })?;
        entries.push(entry);
    }
    Ok(DatasetManifest { entries })
}
