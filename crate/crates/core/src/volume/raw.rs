//! Raw payload + JSON sidecar format: `<name>.f32` holds float32
//! little-endian samples x-fastest, `<name>.json` holds
//! `{ "dims": [..], "spacing": [..], "origin": [..] }`.

use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use super::{Geometry, Volume3D, VolumeError};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
}

fn stem_paths(path: &Path) -> (PathBuf, PathBuf) {
    let name = path.to_string_lossy();
    let stem = name
        .strip_suffix(".json")
        .or_else(|| name.strip_suffix(".f32"))
        .unwrap_or(&name)
        .to_string();
    (PathBuf::from(format!("{stem}.f32")), PathBuf::from(format!("{stem}.json")))
}

/// Load from either member of the pair (or the shared stem).
pub fn load_raw(path: &Path) -> Result<Volume3D, VolumeError> {
    let (payload, sidecar) = stem_paths(path);
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| VolumeError::Io { path: p, source }
    };
    let meta_text = std::fs::read_to_string(&sidecar).map_err(io(&sidecar))?;
    let meta: Sidecar = serde_json::from_str(&meta_text)
        .map_err(|e| VolumeError::BadHeader { path: sidecar.clone(), reason: e.to_string() })?;
    let geom = Geometry::new(meta.dims, meta.spacing, meta.origin)?;
    let bytes = std::fs::read(&payload).map_err(io(&payload))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != geom.len() {
        return Err(VolumeError::DimensionMismatch { expected: geom.len(), got: bytes.len() / 4 });
    }
    let data = bytes.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect();
    Volume3D::new(geom, data)
}

/// Write `<stem>.f32` and `<stem>.json`.
pub fn save_raw(vol: &Volume3D, path: &Path) -> Result<(), VolumeError> {
    let (payload, sidecar) = stem_paths(path);
    let g = vol.geometry();
    let meta = Sidecar { dims: g.dims, spacing: g.spacing, origin: g.origin };
    let text = serde_json::to_string(&meta).expect("sidecar serialises");
    let mut bytes = vec![0u8; vol.data().len() * 4];
    for (chunk, &v) in bytes.chunks_exact_mut(4).zip(vol.data()) {
        LittleEndian::write_f32(chunk, v as f32);
    }
    std::fs::write(&sidecar, text).map_err(|source| VolumeError::Io { path: sidecar.clone(), source })?;
    std::fs::write(&payload, bytes).map_err(|source| VolumeError::Io { path: payload.clone(), source })?;
    Ok(())
}
