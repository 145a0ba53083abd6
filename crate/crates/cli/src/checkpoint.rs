//! Checkpoint files.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "CPAD"
//! version      u8       currently 1
//! kind         u8       0 = lightweight groups only, 1 = full model
//! config_hash  u64      hash of the producing configuration
//! entry_count  u32
//! entries      repeated:
//!   name_len   u16      UTF-8 parameter name follows
//!   name       name_len bytes
//!   ndim       u8
//!   dims       u32 × ndim
//!   data       f32 × product(dims)
//! ```
//!
//! Entries are written in sorted name order, so equal archives produce
//! byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use camopad_core::archive::{ArchiveKind, ParamArchive};
use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

const MAGIC: [u8; 4] = *b"CPAD";
const VERSION: u8 = 1;

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported checkpoint version {found}")]
    BadVersion { path: PathBuf, found: u8 },
    #[error("{path}: unknown archive kind byte {found}")]
    BadKind { path: PathBuf, found: u8 },
    #[error("{path}: entry name is not valid UTF-8")]
    BadName { path: PathBuf },
    #[error("{path}: entry {name:?} has an implausible shape {dims:?}")]
    BadShape {
        path: PathBuf,
        name: String,
        dims: Vec<usize>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save(path: &Path, archive: &ParamArchive) -> Result<(), CheckpointError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let wr = |w: &mut BufWriter<File>, bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));

    wr(&mut w, &MAGIC)?;
    wr(&mut w, &[VERSION])?;
    let kind = match archive.kind {
        ArchiveKind::AdapterOnly => 0u8,
        ArchiveKind::Full => 1u8,
    };
    wr(&mut w, &[kind])?;
    wr(&mut w, &archive.config_hash.to_le_bytes())?;
    wr(&mut w, &(archive.entries.len() as u32).to_le_bytes())?;
    for (name, value) in &archive.entries {
        wr(&mut w, &(name.len() as u16).to_le_bytes())?;
        wr(&mut w, name.as_bytes())?;
        wr(&mut w, &[value.ndim() as u8])?;
        for &d in value.shape() {
            wr(&mut w, &(d as u32).to_le_bytes())?;
        }
        for &v in value.iter() {
            wr(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamArchive, CheckpointError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);

    fn read_exact_buf(
        r: &mut BufReader<File>,
        path: &Path,
        n: usize,
    ) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(io_err(path))?;
        Ok(buf)
    }
    fn read_u8(r: &mut BufReader<File>, path: &Path) -> Result<u8, CheckpointError> {
        Ok(read_exact_buf(r, path, 1)?[0])
    }
    fn read_u16(r: &mut BufReader<File>, path: &Path) -> Result<u16, CheckpointError> {
        let b = read_exact_buf(r, path, 2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn read_u32(r: &mut BufReader<File>, path: &Path) -> Result<u32, CheckpointError> {
        let b = read_exact_buf(r, path, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn read_u64(r: &mut BufReader<File>, path: &Path) -> Result<u64, CheckpointError> {
        let b = read_exact_buf(r, path, 8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    let magic = read_exact_buf(&mut r, path, 4)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = read_u8(&mut r, path)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let kind = match read_u8(&mut r, path)? {
        0 => ArchiveKind::AdapterOnly,
        1 => ArchiveKind::Full,
        found => {
            return Err(CheckpointError::BadKind {
                path: path.to_path_buf(),
                found,
            })
        }
    };
    let config_hash = read_u64(&mut r, path)?;
    let entry_count = read_u32(&mut r, path)?;

    let mut archive = ParamArchive {
        kind,
        config_hash,
        entries: Default::default(),
    };
    for _ in 0..entry_count {
        let name_len = read_u16(&mut r, path)? as usize;
        let name = String::from_utf8(read_exact_buf(&mut r, path, name_len)?)
            .map_err(|_| CheckpointError::BadName {
                path: path.to_path_buf(),
            })?;
        let ndim = read_u8(&mut r, path)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r, path)? as usize);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c <= (1 << 31))
            .ok_or_else(|| CheckpointError::BadShape {
                path: path.to_path_buf(),
                name: name.clone(),
                dims: dims.clone(),
            })?;
        let bytes = read_exact_buf(&mut r, path, count * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let array = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|_| {
            CheckpointError::BadShape {
                path: path.to_path_buf(),
                name: name.clone(),
                dims: dims.clone(),
            }
        })?;
        archive.entries.insert(name, array);
    }
    Ok(archive)
}
