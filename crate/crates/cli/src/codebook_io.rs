//! Codebook files: magic `VQCB`, version u32 = 1, patch_size u32, K u32,
//! then K * 3 * patch_size^2 little-endian f32 centroid values row-major.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use stepsr_core::codec::Codebook;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"VQCB";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CodebookIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad codebook magic {0:?}, expected \"VQCB\"")]
    BadMagic([u8; 4]),
    #[error("unsupported codebook version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated codebook file")]
    Truncated,
    #[error("invalid codebook: {0}")]
    Invalid(String),
}

fn io_err(path: &Path, source: io::Error) -> CodebookIoError {
    CodebookIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_codebook(path: &Path, cb: &Codebook) -> Result<(), CodebookIoError> {
    cb.validate()
        .map_err(|e| CodebookIoError::Invalid(e.to_string()))?;
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let run = |w: &mut BufWriter<File>| -> io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(cb.patch_size as u32).to_le_bytes())?;
        w.write_all(&(cb.k as u32).to_le_bytes())?;
        for &v in &cb.entries {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        w.get_ref().sync_all()
    };
    run(&mut w).map_err(|e| io_err(path, e))
}

pub fn load_codebook(path: &Path) -> Result<Codebook, CodebookIoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let read_exact = |r: &mut BufReader<File>, buf: &mut [u8]| match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(CodebookIoError::Truncated),
        Err(e) => Err(io_err(path, e)),
    };

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(CodebookIoError::BadMagic(magic));
    }
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(CodebookIoError::UnsupportedVersion(version));
    }
    read_exact(&mut r, &mut b4)?;
    let patch_size = u32::from_le_bytes(b4) as usize;
    read_exact(&mut r, &mut b4)?;
    let k = u32::from_le_bytes(b4) as usize;

    let dim = 3usize
        .checked_mul(patch_size.checked_mul(patch_size).unwrap_or(usize::MAX))
        .unwrap_or(usize::MAX);
    let numel = k
        .checked_mul(dim)
        .ok_or_else(|| CodebookIoError::Invalid("centroid count overflows".into()))?;
    let mut payload = vec![0u8; numel * 4];
    read_exact(&mut r, &mut payload)?;
    let entries = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    // The fit provenance is not part of the file format.
    let cb = Codebook {
        patch_size,
        k,
        entries,
        fit_seed: 0,
        objective_curve: Vec::new(),
    };
    cb.validate()
        .map_err(|e| CodebookIoError::Invalid(e.to_string()))?;
    Ok(cb)
}
