//! `NPCDPARM` parameter checkpoints.
//!
//! Layout (little-endian): magic `NPCDPARM`, version `u32`, flag byte
//! (1 = Adam moments present, followed by the optimizer step as `u64`), then
//! entries until end of file: name length `u32`, UTF-8 name, rank `u32`,
//! rank x `u32` extents, `f32` values, and when flagged the `m` and `v`
//! moments in the same layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{Param, ParamStore, Precision};
use super::tape::Mat;
use crate::binio::*;
use crate::error::{Error, Result};

pub const PARAM_MAGIC: &[u8; 8] = b"NPCDPARM";
pub const PARAM_VERSION: u32 = 1;

pub fn write_params<W: Write>(w: &mut W, store: &ParamStore, with_moments: bool) -> std::io::Result<()> {
    w.write_all(PARAM_MAGIC)?;
    write_u32(w, PARAM_VERSION)?;
    w.write_all(&[u8::from(with_moments)])?;
    if with_moments {
        write_u64(w, store.step)?;
    }
    for (name, p) in store.iter() {
        write_u32(w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(w, 2)?;
        write_u32(w, p.value.nrows() as u32)?;
        write_u32(w, p.value.ncols() as u32)?;
        write_f32s(w, p.value.iter().copied())?;
        if with_moments {
            write_f32s(w, p.m.iter().copied())?;
            write_f32s(w, p.v.iter().copied())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint. Rank-1 entries load as a single row.
pub fn read_params<R: Read>(r: R) -> Result<ParamStore> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != PARAM_MAGIC {
        return Err(Error::Format("bad magic, not a parameter checkpoint".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != PARAM_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let flag = read_u8(&mut r, "flag")?;
    if flag > 1 {
        return Err(Error::Format(format!("invalid moments flag {flag}")));
    }
    let with_moments = flag == 1;
    let mut store = ParamStore::new(Precision::F32);
    if with_moments {
        store.step = read_u64(&mut r, "optimizer step")?;
    }
    while !at_eof(&mut r)? {
        let name_len = read_u32(&mut r, "name length")? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("entry name length {name_len} too large")));
        }
        let mut name = vec![0u8; name_len];
        read_exact(&mut r, &mut name, "entry name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank == 0 || rank > 2 {
            return Err(Error::Format(format!("entry '{name}' has unsupported rank {rank}")));
        }
        let mut extents = Vec::with_capacity(rank);
        for _ in 0..rank {
            extents.push(read_u32(&mut r, "extent")? as usize);
        }
        let (rows, cols) = if rank == 1 { (1, extents[0]) } else { (extents[0], extents[1]) };
        let n = checked_count(&[rows, cols], &name)?;
        let read_mat = |r: &mut BufReader<R>, what: &str| -> Result<Mat> {
            let data = read_f32s(r, n, what)?;
            Ok(Mat::from_shape_vec((rows, cols), data).expect("count checked"))
        };
        let value = read_mat(&mut r, &name)?;
        let (m, v) = if with_moments {
            (read_mat(&mut r, &name)?, read_mat(&mut r, &name)?)
        } else {
            (Mat::zeros((rows, cols)), Mat::zeros((rows, cols)))
        };
        if value.iter().chain(m.iter()).chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("entry '{name}' contains non-finite values")));
        }
        store.insert_full(
            name,
            Param {
                grad: Mat::zeros((rows, cols)),
                value,
                m,
                v,
            },
        );
    }
    Ok(store)
}

pub fn save_params(path: &Path, store: &ParamStore, with_moments: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_params(&mut w, store, with_moments).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(file)
}
