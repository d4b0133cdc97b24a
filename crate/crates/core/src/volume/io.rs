//! `<name>.json` header + `<name>.raw` little-endian f32 payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DisplacementField, GridMeta, LabelMask, Volume};
use crate::error::{Error, Result};

pub const DTYPE_F32LE: &str = "f32le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub channels: usize,
    pub dtype: String,
}

impl VolumeHeader {
    pub fn meta(&self) -> Result<GridMeta> {
        GridMeta::new(self.dims, self.spacing_mm)
    }
}

/// Any payload the format can carry; channel count picks the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    Scalar(Volume),
    Displacement(DisplacementField),
}

impl From<Volume> for AnyVolume {
    fn from(v: Volume) -> Self {
        AnyVolume::Scalar(v)
    }
}

impl From<LabelMask> for AnyVolume {
    fn from(l: LabelMask) -> Self {
        AnyVolume::Scalar(Volume::from_parts(*l.meta(), l.into_data()))
    }
}

impl From<DisplacementField> for AnyVolume {
    fn from(d: DisplacementField) -> Self {
        AnyVolume::Displacement(d)
    }
}

impl AnyVolume {
    pub fn meta(&self) -> &GridMeta {
        match self {
            AnyVolume::Scalar(v) => v.meta(),
            AnyVolume::Displacement(d) => d.meta(),
        }
    }

    pub fn into_scalar(self) -> Result<Volume> {
        match self {
            AnyVolume::Scalar(v) => Ok(v),
            AnyVolume::Displacement(_) => Err(Error::UnsupportedChannels(3)),
        }
    }

    pub fn into_label(self) -> Result<LabelMask> {
        let v = self.into_scalar()?;
        LabelMask::new(*v.meta(), v.into_data())
    }

    pub fn into_ddf(self) -> Result<DisplacementField> {
        match self {
            AnyVolume::Displacement(d) => Ok(d),
            AnyVolume::Scalar(_) => Err(Error::UnsupportedChannels(1)),
        }
    }
}

/// Strips a `.json` / `.raw` suffix so either file (or the bare stem) names the pair.
fn stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn header_path(path: impl AsRef<Path>) -> PathBuf {
    with_suffix(&stem(path.as_ref()), ".json")
}

pub fn payload_path(path: impl AsRef<Path>) -> PathBuf {
    with_suffix(&stem(path.as_ref()), ".raw")
}

pub fn write_volume(value: impl Into<AnyVolume>, path: impl AsRef<Path>) -> Result<()> {
    let value = value.into();
    let (meta, channels, data) = match &value {
        AnyVolume::Scalar(v) => (v.meta(), 1, v.data()),
        AnyVolume::Displacement(d) => (d.meta(), 3, d.data()),
    };
    let header = VolumeHeader {
        dims: meta.dims,
        spacing_mm: meta.spacing,
        channels,
        dtype: DTYPE_F32LE.to_string(),
    };
    let hp = header_path(path.as_ref());
    let pp = payload_path(path.as_ref());
    if let Some(dir) = hp.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(4 * data.len());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&hp, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::file(&hp, e))?;
    fs::write(&pp, bytes).map_err(|e| Error::file(&pp, e))?;
    Ok(())
}

pub fn read_header(path: impl AsRef<Path>) -> Result<VolumeHeader> {
    let hp = header_path(path);
    let text = fs::read(&hp).map_err(|e| Error::file(&hp, e))?;
    Ok(serde_json::from_slice(&text)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let header = read_header(path.as_ref())?;
    if header.dtype != DTYPE_F32LE {
        return Err(Error::UnknownDtype(header.dtype));
    }
    let meta = header.meta()?;
    if header.channels != 1 && header.channels != 3 {
        return Err(Error::UnsupportedChannels(header.channels));
    }
    let pp = payload_path(path.as_ref());
    let bytes = fs::read(&pp).map_err(|e| Error::file(&pp, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::SizeMismatch {
            expected: meta.len() * header.channels * 4,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(match header.channels {
        1 => AnyVolume::Scalar(Volume::new(meta, data)?),
        _ => AnyVolume::Displacement(DisplacementField::new(meta, data)?),
    })
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<Volume> {
    read_volume(path)?.into_scalar()
}

pub fn read_label(path: impl AsRef<Path>) -> Result<LabelMask> {
    read_volume(path)?.into_label()
}

pub fn read_ddf(path: impl AsRef<Path>) -> Result<DisplacementField> {
    read_volume(path)?.into_ddf()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta2() -> GridMeta {
        GridMeta::isotropic([2, 2, 2], 0.8).unwrap()
    }

    #[test]
    fn scalar_round_trip_is_bytewise() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(meta2(), (0..8).map(|i| i as f32 * 0.1 - 0.3).collect()).unwrap();
        let p = dir.path().join("v");
        write_volume(v.clone(), &p).unwrap();
        let raw1 = fs::read(payload_path(&p)).unwrap();
        let back = read_scalar(p.with_extension("json")).unwrap();
        assert_eq!(back, v);
        write_volume(back, dir.path().join("w")).unwrap();
        assert_eq!(raw1, fs::read(dir.path().join("w.raw")).unwrap());
    }

    #[test]
    fn size_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad");
        let header = VolumeHeader {
            dims: [2, 2, 2],
            spacing_mm: [0.8; 3],
            channels: 1,
            dtype: "f32le".into(),
        };
        fs::write(header_path(&p), serde_json::to_vec(&header).unwrap()).unwrap();
        fs::write(payload_path(&p), vec![0u8; 7 * 4]).unwrap();
        assert!(matches!(
            read_volume(&p),
            Err(Error::SizeMismatch { expected: 8, found: 7 })
        ));
    }

    #[test]
    fn three_channels_read_as_ddf() {
        let dir = tempfile::tempdir().unwrap();
        let d = DisplacementField::new(meta2(), (0..24).map(|i| i as f32).collect()).unwrap();
        let p = dir.path().join("ddf");
        write_volume(d.clone(), &p).unwrap();
        match read_volume(&p).unwrap() {
            AnyVolume::Displacement(back) => assert_eq!(back, d),
            other => panic!("expected displacement, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        let header = VolumeHeader {
            dims: [1, 1, 1],
            spacing_mm: [1.0; 3],
            channels: 1,
            dtype: "f64le".into(),
        };
        fs::write(header_path(&p), serde_json::to_vec(&header).unwrap()).unwrap();
        fs::write(payload_path(&p), vec![0u8; 8]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::UnknownDtype(_))));
    }

    #[test]
    fn label_payload_range_checked() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(meta2(), vec![0.0, 0.5, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let p = dir.path().join("l");
        write_volume(v, &p).unwrap();
        assert!(read_scalar(&p).is_ok());
        assert!(matches!(read_label(&p), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn nan_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n");
        let header = VolumeHeader {
            dims: [1, 1, 1],
            spacing_mm: [1.0; 3],
            channels: 1,
            dtype: "f32le".into(),
        };
        fs::write(header_path(&p), serde_json::to_vec(&header).unwrap()).unwrap();
        fs::write(payload_path(&p), f32::NAN.to_le_bytes()).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::NonFinite { .. })));
    }
}
