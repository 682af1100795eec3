//! `NPCD` point cloud files.
//!
//! Little-endian: magic `NPCD`, version `u32`, `M u32`, `D u32`, then `M x 3`
//! `f32` positions and `M x D` `f32` features.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::NeuralPointCloud;
use crate::binio::*;
use crate::diff::Mat;
use crate::error::{Error, Result};

pub const NPCD_MAGIC: &[u8; 4] = b"NPCD";
pub const NPCD_VERSION: u32 = 1;

pub fn write_npcd<W: Write>(w: &mut W, pc: &NeuralPointCloud) -> std::io::Result<()> {
    w.write_all(NPCD_MAGIC)?;
    write_u32(w, NPCD_VERSION)?;
    write_u32(w, pc.num_points() as u32)?;
    write_u32(w, pc.feature_dim() as u32)?;
    write_f32s(w, pc.positions().iter().copied())?;
    write_f32s(w, pc.features().iter().copied())
}

pub fn read_npcd<R: Read>(r: R) -> Result<NeuralPointCloud> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != NPCD_MAGIC {
        return Err(Error::Format("bad magic, not an NPCD point cloud".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != NPCD_VERSION {
        return Err(Error::Format(format!("unsupported NPCD version {version}")));
    }
    let m = read_u32(&mut r, "point count")? as usize;
    let d = read_u32(&mut r, "feature dimension")? as usize;
    if m == 0 || d == 0 {
        return Err(Error::Format(format!("empty point cloud (M={m}, D={d})")));
    }
    let np = checked_count(&[m, 3], "positions")?;
    let nf = checked_count(&[m, d], "features")?;
    let positions = read_f32s(&mut r, np, "positions")?;
    let features = read_f32s(&mut r, nf, "features")?;
    if !at_eof(&mut r)? {
        return Err(Error::Format("trailing bytes after features".into()));
    }
    NeuralPointCloud::new(
        Mat::from_shape_vec((m, 3), positions).expect("sized"),
        Mat::from_shape_vec((m, d), features).expect("sized"),
    )
    .map_err(|e| Error::Format(e.to_string()))
}

pub fn save(pc: &NeuralPointCloud, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_npcd(&mut w, pc).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<NeuralPointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_npcd(file)
}
