//! Field snapshots: raw little-endian float64 grid values, column-major
//! (horizontal index major, vertical index minor), one block per layer
//! (upper then lower), with a JSON sidecar describing the grid.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::fields::{Layer, SlabSpec, SurfaceField, SurfacePair, VolumeScalar, VolumeVector};
use crate::spectral::TorusSpec;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SnapshotMeta {
    pub field: String,
    pub time: f64,
    pub n1: usize,
    pub n2: usize,
    pub nz_plus: usize,
    pub nz_minus: usize,
    pub l1: f64,
    pub l2: f64,
    pub ell: f64,
    pub b: f64,
    pub layout: String,
    pub components: usize,
}

fn meta_for(name: &str, time: f64, torus: TorusSpec, slab: SlabSpec, comps: usize) -> SnapshotMeta {
    SnapshotMeta {
        field: name.to_string(),
        time,
        n1: torus.n1,
        n2: torus.n2,
        nz_plus: slab.nz_plus,
        nz_minus: slab.nz_minus,
        l1: torus.l1,
        l2: torus.l2,
        ell: slab.ell,
        b: slab.b,
        layout: "f64-le mode-major vertical-minor, layers plus then minus".to_string(),
        components: comps,
    }
}

fn push_layer(buf: &mut Vec<u8>, arr: &ndarray::Array3<f64>) {
    let (n1, n2, nz) = arr.dim();
    for i1 in 0..n1 {
        for i2 in 0..n2 {
            for k in 0..nz {
                buf.extend_from_slice(&arr[[i1, i2, k]].to_le_bytes());
            }
        }
    }
}

/// Write a scalar volume snapshot: `<base>.f64` plus `<base>.json`.
pub fn write_volume_scalar(base: &Path, f: &VolumeScalar, name: &str, time: f64) -> Result<()> {
    let mut buf = Vec::new();
    push_layer(&mut buf, &f.plus);
    push_layer(&mut buf, &f.minus);
    std::fs::write(base.with_extension("f64"), &buf)?;
    let meta = meta_for(name, time, f.torus, f.slab, 1);
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(base.with_extension("json"), json)?;
    Ok(())
}

/// Write a vector volume snapshot (components concatenated).
pub fn write_volume_vector(base: &Path, f: &VolumeVector, name: &str, time: f64) -> Result<()> {
    let mut buf = Vec::new();
    for c in &f.comps {
        push_layer(&mut buf, &c.plus);
        push_layer(&mut buf, &c.minus);
    }
    std::fs::write(base.with_extension("f64"), &buf)?;
    let meta = meta_for(name, time, f.torus(), f.slab(), 3);
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(base.with_extension("json"), json)?;
    Ok(())
}

/// Write a surface pair snapshot (grid values, plus then minus).
pub fn write_surface_pair(base: &Path, f: &SurfacePair, name: &str, time: f64) -> Result<()> {
    let mut buf = Vec::new();
    for vals in [f.plus.values(), f.minus.values()] {
        for v in vals.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(base.with_extension("f64"), &buf)?;
    let torus = f.plus.spec;
    let meta = SnapshotMeta {
        field: name.to_string(),
        time,
        n1: torus.n1,
        n2: torus.n2,
        nz_plus: 0,
        nz_minus: 0,
        l1: torus.l1,
        l2: torus.l2,
        ell: 0.0,
        b: 0.0,
        layout: "f64-le row-major surface grids, plus then minus".to_string(),
        components: 1,
    };
    std::fs::write(
        base.with_extension("json"),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    Ok(())
}

fn read_meta(base: &Path) -> Result<SnapshotMeta> {
    let mut text = String::new();
    std::fs::File::open(base.with_extension("json"))?.read_to_string(&mut text)?;
    serde_json::from_str(&text).map_err(|e| SimError::ValidationError {
        key: base.display().to_string(),
        msg: format!("bad snapshot sidecar: {e}"),
    })
}

fn read_f64s(base: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(base.with_extension("f64"))?;
    if bytes.len() != expected * 8 {
        return Err(SimError::ValidationError {
            key: base.display().to_string(),
            msg: format!("snapshot holds {} bytes, expected {}", bytes.len(), expected * 8),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Read a scalar volume snapshot written by `write_volume_scalar`.
pub fn read_volume_scalar(base: &Path, torus: TorusSpec, slab: SlabSpec) -> Result<VolumeScalar> {
    let meta = read_meta(base)?;
    if meta.n1 != torus.n1 || meta.n2 != torus.n2 || meta.nz_plus != slab.nz_plus {
        return Err(SimError::ValidationError {
            key: base.display().to_string(),
            msg: "snapshot grid does not match the configured grid".into(),
        });
    }
    let total = torus.n1 * torus.n2 * (slab.nz_plus + slab.nz_minus);
    let vals = read_f64s(base, total)?;
    let mut out = VolumeScalar::zeros(torus, slab);
    let mut it = vals.into_iter();
    for layer in [Layer::Plus, Layer::Minus] {
        let nz = slab.nz(layer);
        let arr = out.layer_mut(layer);
        for i1 in 0..torus.n1 {
            for i2 in 0..torus.n2 {
                for k in 0..nz {
                    arr[[i1, i2, k]] = it.next().unwrap();
                }
            }
        }
    }
    Ok(out)
}

/// Read a vector volume snapshot.
pub fn read_volume_vector(base: &Path, torus: TorusSpec, slab: SlabSpec) -> Result<VolumeVector> {
    let meta = read_meta(base)?;
    if meta.components != 3 {
        return Err(SimError::ValidationError {
            key: base.display().to_string(),
            msg: "expected a 3-component snapshot".into(),
        });
    }
    let per_comp = torus.n1 * torus.n2 * (slab.nz_plus + slab.nz_minus);
    let vals = read_f64s(base, 3 * per_comp)?;
    let mut out = VolumeVector::zeros(torus, slab);
    let mut it = vals.into_iter();
    for c in 0..3 {
        for layer in [Layer::Plus, Layer::Minus] {
            let nz = slab.nz(layer);
            let arr = out.comps[c].layer_mut(layer);
            for i1 in 0..torus.n1 {
                for i2 in 0..torus.n2 {
                    for k in 0..nz {
                        arr[[i1, i2, k]] = it.next().unwrap();
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Read a surface pair snapshot.
pub fn read_surface_pair(base: &Path, torus: TorusSpec) -> Result<SurfacePair> {
    let _ = read_meta(base)?;
    let vals = read_f64s(base, 2 * torus.n1 * torus.n2)?;
    let mut plus = ndarray::Array2::zeros((torus.n1, torus.n2));
    let mut minus = ndarray::Array2::zeros((torus.n1, torus.n2));
    let mut it = vals.into_iter();
    for v in plus.iter_mut() {
        *v = it.next().unwrap();
    }
    for v in minus.iter_mut() {
        *v = it.next().unwrap();
    }
    Ok(SurfacePair {
        plus: SurfaceField::from_values(torus, crate::fields::Side::Plus, &plus),
        minus: SurfaceField::from_values(torus, crate::fields::Side::Minus, &minus),
    })
}

/// Append one CSV line, creating the file with the header if absent.
pub fn append_csv_row(path: &Path, header: &str, row: &str) -> Result<()> {
    let exists = path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if !exists {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{row}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Side;

    #[test]
    fn volume_roundtrip() {
        let torus = TorusSpec::new(1.0, 2.0, 8, 4).unwrap();
        let slab = SlabSpec::new(1.0, 1.5, 7, 9).unwrap();
        let f = VolumeScalar::from_fn(torus, slab, |x, y, z| x + 2.0 * y - z * z);
        let dir = std::env::temp_dir().join("bilayer_snap_test");
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("field");
        write_volume_scalar(&base, &f, "q", 0.25).unwrap();
        let back = read_volume_scalar(&base, torus, slab).unwrap();
        assert!(f.sub(&back).max_abs() == 0.0);
        let meta = read_meta(&base).unwrap();
        assert_eq!(meta.field, "q");
        assert_eq!(meta.time, 0.25);
    }

    #[test]
    fn surface_roundtrip() {
        let torus = TorusSpec::new(1.0, 1.0, 8, 8).unwrap();
        let pair = SurfacePair {
            plus: SurfaceField::from_fn(torus, Side::Plus, |x, _| 0.1 * x.sin()),
            minus: SurfaceField::from_fn(torus, Side::Minus, |_, y| 0.2 * y.cos()),
        };
        let dir = std::env::temp_dir().join("bilayer_snap_test");
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("eta");
        write_surface_pair(&base, &pair, "eta", 1.0).unwrap();
        let back = read_surface_pair(&base, torus).unwrap();
        assert!(pair.sub(&back).plus.l2_sq().sqrt() < 1e-13);
        assert!(pair.sub(&back).minus.l2_sq().sqrt() < 1e-13);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let torus = TorusSpec::new(1.0, 2.0, 8, 4).unwrap();
        let slab = SlabSpec::new(1.0, 1.5, 7, 9).unwrap();
        let f = VolumeScalar::zeros(torus, slab);
        let dir = std::env::temp_dir().join("bilayer_snap_test");
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("mismatch");
        write_volume_scalar(&base, &f, "q", 0.0).unwrap();
        let other = TorusSpec::new(1.0, 2.0, 16, 4).unwrap();
        assert!(read_volume_scalar(&base, other, slab).is_err());
    }
}
