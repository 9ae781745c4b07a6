//! On-disk track bundle.
//!
//! A bundle is a directory holding:
//!
//! - `meta.json`: counts, scales and provenance
//! - `positions.f32`: little-endian `f32`, row-major `[N, T, 2]`
//! - `visibility.u8`: `[N, T]`, one byte per flag
//! - `features.f32` (optional): `[N, C]`
//! - `background.f32` / `background_vis.u8` (optional): `[B, T, 2]` / `[B, T]`

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracks::{TrackSet, DEFAULT_SCALE_O, DEFAULT_SCALE_V};

pub const META_FILE: &str = "meta.json";
pub const POSITIONS_FILE: &str = "positions.f32";
pub const VISIBILITY_FILE: &str = "visibility.u8";
pub const FEATURES_FILE: &str = "features.f32";
pub const BACKGROUND_FILE: &str = "background.f32";
pub const BACKGROUND_VIS_FILE: &str = "background_vis.u8";

/// Coordinate space of the stored positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Normalized,
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub n: usize,
    pub t: usize,
    pub t_cond: usize,
    pub fps: f64,
    pub n_valid: usize,
    pub scale_v: f64,
    pub scale_o: f64,
    pub space: Space,
    /// Channels in `features.f32`, zero when absent.
    #[serde(default)]
    pub feature_dim: usize,
    /// Number of background tracks, zero when absent.
    #[serde(default)]
    pub n_background: usize,
    /// First-frame animal box in pixels, for pixel-space bundles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Everything a bundle directory can hold.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub tracks: TrackSet,
    pub space: Space,
    pub scale_v: f64,
    pub scale_o: f64,
    pub features: Option<Array2<f64>>,
    pub background: Option<(Array3<f64>, Array2<bool>)>,
    pub bbox: Option<[f64; 4]>,
    pub provenance: serde_json::Value,
}

impl Bundle {
    pub fn new(tracks: TrackSet, space: Space) -> Self {
        Bundle {
            tracks,
            space,
            scale_v: DEFAULT_SCALE_V,
            scale_o: DEFAULT_SCALE_O,
            features: None,
            background: None,
            bbox: None,
            provenance: serde_json::Value::Null,
        }
    }

    pub fn meta(&self) -> BundleMeta {
        BundleMeta {
            n: self.tracks.n_tracks(),
            t: self.tracks.n_frames(),
            t_cond: self.tracks.t_cond,
            fps: self.tracks.fps,
            n_valid: self.tracks.n_valid,
            scale_v: self.scale_v,
            scale_o: self.scale_o,
            space: self.space,
            feature_dim: self.features.as_ref().map_or(0, |f| f.ncols()),
            n_background: self.background.as_ref().map_or(0, |b| b.0.shape()[0]),
            bbox: self.bbox,
            provenance: self.provenance.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = self.meta();
        if let Some(f) = &self.features {
            if f.nrows() != meta.n {
                return Err(Error::shape(format!("features have {} rows, expected {}", f.nrows(), meta.n)));
            }
        }
        let meta_path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
        write_f32(&dir.join(POSITIONS_FILE), self.tracks.positions.iter().copied())?;
        write_u8(&dir.join(VISIBILITY_FILE), self.tracks.visibility.iter().copied())?;
        if let Some(f) = &self.features {
            write_f32(&dir.join(FEATURES_FILE), f.iter().copied())?;
        }
        if let Some((pos, vis)) = &self.background {
            write_f32(&dir.join(BACKGROUND_FILE), pos.iter().copied())?;
            write_u8(&dir.join(BACKGROUND_VIS_FILE), vis.iter().copied())?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Bundle> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BundleMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let pos = read_f32(&dir.join(POSITIONS_FILE), meta.n * meta.t * 2)?;
        let vis = read_u8(&dir.join(VISIBILITY_FILE), meta.n * meta.t)?;
        let positions = Array3::from_shape_vec((meta.n, meta.t, 2), pos).expect("length checked");
        let visibility = Array2::from_shape_vec((meta.n, meta.t), vis).expect("length checked");
        let tracks = TrackSet::new(positions, visibility, meta.t_cond)
            .and_then(|t| t.with_n_valid(meta.n_valid))
            .map_err(|e| Error::format(dir, e.to_string()))?
            .with_fps(meta.fps);
        let features = if meta.feature_dim > 0 {
            let f = read_f32(&dir.join(FEATURES_FILE), meta.n * meta.feature_dim)?;
            Some(Array2::from_shape_vec((meta.n, meta.feature_dim), f).expect("length checked"))
        } else {
            None
        };
        let background = if meta.n_background > 0 {
            let b = meta.n_background;
            let p = read_f32(&dir.join(BACKGROUND_FILE), b * meta.t * 2)?;
            let v = read_u8(&dir.join(BACKGROUND_VIS_FILE), b * meta.t)?;
            Some((
                Array3::from_shape_vec((b, meta.t, 2), p).expect("length checked"),
                Array2::from_shape_vec((b, meta.t), v).expect("length checked"),
            ))
        } else {
            None
        };
        Ok(Bundle {
            tracks,
            space: meta.space,
            scale_v: meta.scale_v,
            scale_o: meta.scale_o,
            features,
            background,
            bbox: meta.bbox,
            provenance: meta.provenance,
        })
    }
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_u8(path: &Path, values: impl Iterator<Item = bool>) -> Result<()> {
    let bytes: Vec<u8> = values.map(u8::from).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn read_u8(path: &Path, expected: usize) -> Result<Vec<bool>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    bytes
        .into_iter()
        .map(|b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(path, format!("visibility byte {other} is not 0 or 1"))),
        })
        .collect()
}

/// Sorted list of bundle directories (those containing `meta.json`) below `root`,
/// looking one and two levels deep.
pub fn find_bundles(root: &Path, sub: Option<&str>) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let candidate = match sub {
            Some(s) => path.join(s),
            None => path,
        };
        if candidate.join(META_FILE).is_file() {
            out.push(candidate);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pos = Array3::from_shape_fn((3, 5, 2), |(i, k, c)| 0.1 * i as f64 + 0.01 * k as f64 + c as f64);
        let mut vis = Array2::from_elem((3, 5), true);
        vis[[1, 2]] = false;
        let tracks = TrackSet::new(pos, vis, 2).unwrap().with_n_valid(2).unwrap();
        let mut b = Bundle::new(tracks, Space::Normalized);
        b.features = Some(Array2::from_elem((3, 4), 0.5));
        b.background = Some((Array3::zeros((2, 5, 2)), Array2::from_elem((2, 5), true)));
        b.provenance = serde_json::json!({"source": "test"});
        b.write(dir.path()).unwrap();

        let bytes = fs::read(dir.path().join(POSITIONS_FILE)).unwrap();
        assert_eq!(bytes.len(), 3 * 5 * 2 * 4);
        // row-major [N, T, 2]: element (0, 0, 1) is the second float
        assert_eq!(f32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1.0);

        let back = Bundle::read(dir.path()).unwrap();
        assert_eq!(back.tracks.n_valid, 2);
        assert_eq!(back.tracks.visibility, b.tracks.visibility);
        for (a, e) in back.tracks.positions.iter().zip(b.tracks.positions.iter()) {
            assert_eq!(*a, *e as f32 as f64);
        }
        assert_eq!(back.features.unwrap().dim(), (3, 4));
        assert_eq!(back.background.unwrap().0.dim(), (2, 5, 2));
    }

    #[test]
    fn bad_visibility_byte_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let tracks = TrackSet::new(Array3::zeros((1, 3, 2)), Array2::from_elem((1, 3), true), 1).unwrap();
        Bundle::new(tracks, Space::Normalized).write(dir.path()).unwrap();
        fs::write(dir.path().join(VISIBILITY_FILE), [1u8, 2, 1]).unwrap();
        assert!(matches!(Bundle::read(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn unknown_meta_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let tracks = TrackSet::new(Array3::zeros((1, 3, 2)), Array2::from_elem((1, 3), true), 1).unwrap();
        Bundle::new(tracks, Space::Normalized).write(dir.path()).unwrap();
        let p = dir.path().join(META_FILE);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v["surprise"] = serde_json::json!(1);
        fs::write(&p, v.to_string()).unwrap();
        assert!(Bundle::read(dir.path()).is_err());
    }
}
