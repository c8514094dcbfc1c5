//! Pose layout, the binary motion format, dataset manifests, feature
//! normalization and temporal downsampling.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rmd_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RMDF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Smallest standard deviation kept by [`compute_norm_stats`].
pub const STD_FLOOR: f64 = 1e-8;

/// Joint count of the pose skeleton; fixes the flattened dimension `4 + 12·J`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoseLayout {
    pub joints: usize,
}

impl PoseLayout {
    pub const fn new(joints: usize) -> Self {
        Self { joints }
    }

    pub const fn dim(&self) -> usize {
        4 + 12 * self.joints
    }

    /// Inverse of [`dim`](Self::dim), if `d` is a valid flattened size.
    pub fn from_dim(d: usize) -> Option<Self> {
        (d >= 4 && (d - 4).is_multiple_of(12)).then(|| Self::new((d - 4) / 12))
    }
}

/// One frame of the pose representation, unflattened.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseVector {
    /// Root angular velocity about the vertical axis.
    pub r_va: f64,
    pub r_vx: f64,
    pub r_vz: f64,
    /// Root height.
    pub r_h: f64,
    /// Local joint positions, `J×3`.
    pub j_p: Vec<[f64; 3]>,
    /// Local joint velocities, `J×3`.
    pub j_v: Vec<[f64; 3]>,
    /// Continuous 6-d local joint rotations, `J×6`.
    pub j_r: Vec<[f64; 6]>,
}

impl PoseVector {
    pub fn layout(&self) -> PoseLayout {
        PoseLayout::new(self.j_p.len())
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().dim());
        out.extend([self.r_va, self.r_vx, self.r_vz, self.r_h]);
        out.extend(self.j_p.iter().flatten());
        out.extend(self.j_v.iter().flatten());
        out.extend(self.j_r.iter().flatten());
        out
    }

    pub fn unflatten(v: &[f64], layout: PoseLayout) -> Result<Self> {
        if v.len() != layout.dim() {
            return Err(Error::Dimension(format!(
                "pose vector has {} values, layout with {} joints needs {}",
                v.len(),
                layout.joints,
                layout.dim()
            )));
        }
        let j = layout.joints;
        let (p, rest) = v[4..].split_at(3 * j);
        let (vel, rot) = rest.split_at(3 * j);
        Ok(Self {
            r_va: v[0],
            r_vx: v[1],
            r_vz: v[2],
            r_h: v[3],
            j_p: p.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            j_v: vel.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            j_r: rot
                .chunks_exact(6)
                .map(|c| [c[0], c[1], c[2], c[3], c[4], c[5]])
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub id: String,
    /// `F×D` pose matrix.
    pub frames: Tensor,
    pub fps: f64,
    pub captions: Vec<String>,
}

impl MotionSequence {
    pub fn new(id: impl Into<String>, frames: Tensor, fps: f64, captions: Vec<String>) -> Result<Self> {
        let id = id.into();
        if !frames.is_matrix() || frames.rows() == 0 {
            return Err(Error::Schema(format!(
                "sequence {id}: frames must be a non-empty F×D matrix, got {:?}",
                frames.shape()
            )));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Schema(format!("sequence {id}: fps must be positive, got {fps}")));
        }
        Ok(Self {
            id,
            frames,
            fps,
            captions,
        })
    }

    /// Frame count `l_i`.
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Identity statistics (zero mean, unit std).
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(path, &json)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = serde_json::from_slice(&bytes).map_err(|e| json_parse_error(path, &bytes, &e))?;
        if stats.mean.len() != stats.std.len() {
            return Err(Error::Schema(format!(
                "{}: mean has {} entries but std has {}",
                path.display(),
                stats.mean.len(),
                stats.std.len()
            )));
        }
        Ok(stats)
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(Error::Dimension(format!(
                "normalization stats have dimension {}, sequence has {d}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn normalize_frames(&self, frames: &Tensor) -> Result<Tensor> {
        self.check(frames.cols())?;
        let mut out = frames.clone();
        let d = self.dim();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % d]) / self.std[i % d];
        }
        Ok(out)
    }

    pub fn denormalize_frames(&self, frames: &Tensor) -> Result<Tensor> {
        self.check(frames.cols())?;
        let mut out = frames.clone();
        let d = self.dim();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % d] + self.mean[i % d];
        }
        Ok(out)
    }
}

/// Per-dimension mean and population standard deviation over every frame.
pub fn compute_norm_stats(train: &[MotionSequence]) -> Result<NormStats> {
    let total: usize = train.iter().map(MotionSequence::len).sum();
    if total == 0 {
        return Err(Error::Contract(
            "normalization statistics need at least one frame".into(),
        ));
    }
    let d = train[0].dim();
    if let Some(bad) = train.iter().find(|s| s.dim() != d) {
        return Err(Error::Schema(format!(
            "sequence {} has dimension {}, expected {d}",
            bad.id,
            bad.dim()
        )));
    }
    let n = total as f64;
    let mut mean = vec![0.0; d];
    for s in train {
        for row in s.frames.data().chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for s in train {
        for row in s.frames.data().chunks_exact(d) {
            for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Ok(NormStats { mean, std })
}

pub fn normalize(seq: &MotionSequence, stats: &NormStats) -> Result<MotionSequence> {
    Ok(MotionSequence {
        frames: stats.normalize_frames(&seq.frames)?,
        ..seq.clone()
    })
}

pub fn denormalize(seq: &MotionSequence, stats: &NormStats) -> Result<MotionSequence> {
    Ok(MotionSequence {
        frames: stats.denormalize_frames(&seq.frames)?,
        ..seq.clone()
    })
}

/// Keeps frames `0, stride, 2·stride, …`.
pub fn downsample(frames: &Tensor, stride: usize) -> Result<Tensor> {
    if stride < 1 {
        return Err(Error::Contract("downsample stride must be at least 1".into()));
    }
    if frames.rows() == 0 {
        return Err(Error::Contract("downsample needs at least one frame".into()));
    }
    let d = frames.cols();
    let data: Vec<f64> = (0..frames.rows())
        .step_by(stride)
        .flat_map(|i| frames.row(i).iter().copied())
        .collect();
    Ok(Tensor::matrix(data.len() / d.max(1), d, data)?)
}

// ---------------------------------------------------------------------------
// Binary motion files

pub fn encode_motion(frames: &Tensor) -> Vec<u8> {
    let (f, d) = (frames.rows(), frames.cols());
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f * d);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in frames.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_motion(bytes: &[u8], file: &Path) -> Result<Tensor> {
    let parse = |offset: usize, message: String| Error::Parse {
        file: file.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(parse(
            bytes.len(),
            format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(parse(0, "bad magic, expected \"RMDF\"".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(parse(4, format!("unsupported version {version}")));
    }
    let (f, d) = (word(8) as usize, word(12) as usize);
    if f == 0 {
        return Err(parse(8, "frame count must be at least 1".into()));
    }
    if d == 0 {
        return Err(parse(12, "pose dimension must be at least 1".into()));
    }
    let expected = f
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| parse(8, format!("{f}×{d} payload overflows")))?;
    if bytes.len() < expected {
        return Err(parse(
            bytes.len(),
            format!("truncated payload: {f}×{d} needs {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(parse(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut data = Vec::with_capacity(f * d);
    for (k, c) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(parse(HEADER_LEN + 4 * k, format!("non-finite value {v}")));
        }
        data.push(f64::from(v));
    }
    Ok(Tensor::matrix(f, d, data)?)
}

pub fn write_motion(path: &Path, frames: &Tensor) -> Result<()> {
    write_atomic(path, &encode_motion(frames))
}

pub fn read_motion(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_motion(&bytes, path)
}

// ---------------------------------------------------------------------------
// Manifests

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub motion_file: String,
    pub fps: f64,
    pub captions: Vec<String>,
}

/// Reads `manifest.json` and every motion file it references; the result is
/// sorted by id. When `layout` is given every sequence must match its
/// dimension, otherwise all sequences must merely agree with each other.
pub fn load_dataset(dir: &Path, layout: Option<PoseLayout>) -> Result<Vec<MotionSequence>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_slice(&bytes).map_err(|e| json_parse_error(&manifest_path, &bytes, &e))?;

    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(entries.len());
    let mut expected_dim = layout.map(|l| l.dim());
    for entry in entries {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Schema(format!("duplicate sequence id {}", entry.id)));
        }
        let path = dir.join(&entry.motion_file);
        if !path.is_file() {
            return Err(Error::MissingMotion { id: entry.id, path });
        }
        let frames = read_motion(&path)?;
        match expected_dim {
            Some(d) if d != frames.cols() => {
                return Err(Error::Schema(format!(
                    "sequence {} has pose dimension {}, expected {d}",
                    entry.id,
                    frames.cols()
                )))
            }
            None => expected_dim = Some(frames.cols()),
            _ => {}
        }
        out.push(MotionSequence::new(entry.id, frames, entry.fps, entry.captions)?);
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Writes one motion file per sequence plus the manifest.
pub fn write_dataset(dir: &Path, sequences: &[MotionSequence]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(sequences.len());
    for s in sequences {
        let motion_file = format!("{}.rmdf", s.id);
        write_motion(&dir.join(&motion_file), &s.frames)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            motion_file,
            fps: s.fps,
            captions: s.captions.clone(),
        });
    }
    let json = serde_json::to_vec_pretty(&entries).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

// ---------------------------------------------------------------------------

pub(crate) fn json_parse_error(path: &Path, bytes: &[u8], e: &serde_json::Error) -> Error {
    // serde_json reports 1-based line/column; convert to a byte offset.
    let mut offset = 0usize;
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == e.line() {
            offset += e.column().saturating_sub(1).min(line.len());
            break;
        }
        offset += line.len() + 1;
    }
    Error::Parse {
        file: path.to_path_buf(),
        offset: offset.min(bytes.len()) as u64,
        message: e.to_string(),
    }
}

/// Writes through a sibling temp file so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".partial");
        path.with_file_name(name)
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_dims() {
        assert_eq!(PoseLayout::new(22).dim(), 268);
        assert_eq!(PoseLayout::new(21).dim(), 256);
        assert_eq!(PoseLayout::from_dim(268), Some(PoseLayout::new(22)));
        assert_eq!(PoseLayout::from_dim(263), None);
    }

    #[test]
    fn pose_round_trip() {
        let layout = PoseLayout::new(3);
        let v: Vec<f64> = (0..layout.dim()).map(|i| i as f64 * 0.5 - 3.0).collect();
        let pose = PoseVector::unflatten(&v, layout).unwrap();
        assert_eq!(pose.j_r.len(), 3);
        assert_eq!(pose.j_p[1], [v[7], v[8], v[9]]);
        assert_eq!(pose.flatten(), v);
        assert!(PoseVector::unflatten(&v[1..], layout).is_err());
    }

    #[test]
    fn norm_stats_examples() {
        let s = |id: &str, rows: &[Vec<f64>]| {
            MotionSequence::new(id, Tensor::from_rows(rows).unwrap(), 20.0, vec![]).unwrap()
        };
        let st = compute_norm_stats(&[s("a", &[vec![0.0], vec![2.0]])]).unwrap();
        assert_eq!(st.mean, vec![1.0]);
        assert_eq!(st.std, vec![1.0]);

        let st = compute_norm_stats(&[s("c", &vec![vec![3.0, -1.0]; 4])]).unwrap();
        assert_eq!(st.mean, vec![3.0, -1.0]);
        assert_eq!(st.std, vec![STD_FLOOR; 2]);

        assert!(matches!(compute_norm_stats(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn normalize_mean_row_is_zero() {
        let stats = NormStats {
            mean: vec![1.0, 2.0],
            std: vec![0.5, 4.0],
        };
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(stats.normalize_frames(&x).unwrap().data(), &[0.0, 0.0]);
        let id = NormStats::identity(2);
        let y = Tensor::from_rows(&[vec![0.3, -7.0]]).unwrap();
        assert_eq!(id.normalize_frames(&y).unwrap(), y);
        let bad = Tensor::from_rows(&[vec![0.3]]).unwrap();
        assert!(matches!(stats.normalize_frames(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn downsample_examples() {
        let x = Tensor::matrix(16, 1, (0..16).map(f64::from).collect()).unwrap();
        assert_eq!(downsample(&x, 4).unwrap().data(), &[0.0, 4.0, 8.0, 12.0]);
        assert_eq!(downsample(&x, 1).unwrap(), x);
        let y = Tensor::matrix(3, 1, vec![5.0, 6.0, 7.0]).unwrap();
        assert_eq!(downsample(&y, 4).unwrap().data(), &[5.0]);
        assert!(downsample(&y, 0).is_err());
    }

    #[test]
    fn decode_reports_offsets() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode_motion(&x);
        let p = Path::new("m.rmdf");
        assert_eq!(decode_motion(&bytes, p).unwrap(), x);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_motion(&bad, p), Err(Error::Parse { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_motion(&bad, p), Err(Error::Parse { offset: 4, .. })));
        let short = &bytes[..bytes.len() - 2];
        assert!(matches!(
            decode_motion(short, p),
            Err(Error::Parse { offset, .. }) if offset == short.len() as u64
        ));
        let mut bad = bytes;
        bad[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_motion(&bad, p), Err(Error::Parse { offset: 16, .. })));
    }
}
