//! Binary checkpoint files.
//!
//! Layout: magic `VLCK`, version u32 = 1, array count u32, then per array a
//! u16 name length + UTF-8 name, a dtype code u8 (0 = f32), ndim u8, each
//! dim as u32, and the payload as little-endian f32 row-major. An optional
//! optimizer-state section with the identical array layout follows a marker
//! byte 0x4F.
//!
//! The first array is always `config`, five values describing the policy
//! architecture, so a checkpoint is self-describing and needs no companion
//! flags to load.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use stepsr_core::policy::{PolicyConfig, PolicyParams};
use stepsr_core::tensor::Tensor;
use stepsr_core::train::OptState;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"VLCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const OPT_MARKER: u8 = 0x4F;
const CONFIG_ARRAY: &str = "config";

#[derive(Debug, Error)]
pub enum CkptError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("bad checkpoint magic {0:?}, expected \"VLCK\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(String),
    #[error("unsupported dtype code {0} in array {1}")]
    BadDtype(u8, String),
    #[error("{0}")]
    Shape(String),
}

fn io_err(path: &Path, source: io::Error) -> CkptError {
    CkptError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_array(w: &mut impl Write, name: &str, t: &Tensor) -> io::Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[DTYPE_F32, t.shape.len() as u8])?;
    for &d in &t.shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_section(w: &mut impl Write, arrays: &[(String, Tensor)]) -> io::Result<()> {
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        write_array(w, name, t)?;
    }
    Ok(())
}

fn config_tensor(cfg: &PolicyConfig) -> Tensor {
    Tensor {
        shape: vec![5],
        data: vec![
            cfg.vocab_size as f32,
            cfg.d_model as f32,
            cfg.n_heads as f32,
            cfg.n_blocks as f32,
            cfg.max_len as f32,
        ],
    }
}

fn opt_arrays(cfg: &PolicyConfig, opt: &OptState) -> Vec<(String, Tensor)> {
    let names = PolicyParams::named_shapes(cfg);
    let mut out = vec![(
        "step".to_string(),
        Tensor {
            shape: vec![1],
            data: vec![opt.step as f32],
        },
    )];
    for (prefix, tensors) in [("m", &opt.m), ("v", &opt.v)] {
        for ((name, shape), data) in names.iter().zip(tensors.arrays()) {
            out.push((
                format!("{prefix}.{name}"),
                Tensor {
                    shape: shape.clone(),
                    data: data.clone(),
                },
            ));
        }
    }
    out
}

/// Writes the checkpoint and fsyncs before returning.
pub fn save_checkpoint(
    path: &Path,
    params: &PolicyParams,
    opt: Option<&OptState>,
) -> Result<(), CkptError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let run = |w: &mut BufWriter<File>| -> io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let mut arrays = vec![(CONFIG_ARRAY.to_string(), config_tensor(&params.cfg))];
        arrays.extend(params.named_tensors());
        write_section(w, &arrays)?;
        if let Some(opt) = opt {
            w.write_all(&[OPT_MARKER])?;
            write_section(w, &opt_arrays(&params.cfg, opt))?;
        }
        w.flush()?;
        w.get_ref().sync_all()
    };
    run(&mut w).map_err(|e| io_err(path, e))
}

fn read_exact_named(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), CkptError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            CkptError::Truncated(what.to_string())
        } else {
            CkptError::Io {
                path: String::new(),
                source: e,
            }
        }
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32, CkptError> {
    let mut b = [0u8; 4];
    read_exact_named(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_array(r: &mut impl Read) -> Result<(String, Tensor), CkptError> {
    let mut b2 = [0u8; 2];
    read_exact_named(r, &mut b2, "array header")?;
    let name_len = u16::from_le_bytes(b2) as usize;
    let mut name_buf = vec![0u8; name_len];
    read_exact_named(r, &mut name_buf, "array name")?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| CkptError::Shape("array name is not UTF-8".into()))?;
    let mut b2 = [0u8; 2];
    read_exact_named(r, &mut b2, &name)?;
    let (dtype, ndim) = (b2[0], b2[1] as usize);
    if dtype != DTYPE_F32 {
        return Err(CkptError::BadDtype(dtype, name));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r, &name)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    read_exact_named(r, &mut payload, &name)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((name, Tensor { shape, data }))
}

fn read_section(r: &mut impl Read) -> Result<Vec<(String, Tensor)>, CkptError> {
    let count = read_u32(r, "array count")? as usize;
    (0..count).map(|_| read_array(r)).collect()
}

fn config_from_tensor(t: &Tensor) -> Result<PolicyConfig, CkptError> {
    if t.data.len() != 5 {
        return Err(CkptError::Shape(format!(
            "config array holds {} values, expected 5",
            t.data.len()
        )));
    }
    Ok(PolicyConfig {
        vocab_size: t.data[0] as usize,
        d_model: t.data[1] as usize,
        n_heads: t.data[2] as usize,
        n_blocks: t.data[3] as usize,
        max_len: t.data[4] as usize,
    })
}

fn opt_from_arrays(
    cfg: &PolicyConfig,
    arrays: &[(String, Tensor)],
) -> Result<OptState, CkptError> {
    let names = PolicyParams::named_shapes(cfg);
    if arrays.len() != 1 + 2 * names.len() {
        return Err(CkptError::Shape(format!(
            "optimizer section holds {} arrays, expected {}",
            arrays.len(),
            1 + 2 * names.len()
        )));
    }
    if arrays[0].0 != "step" || arrays[0].1.data.len() != 1 {
        return Err(CkptError::Shape("optimizer section must start with step".into()));
    }
    let mut opt = OptState::new(cfg);
    opt.step = arrays[0].1.data[0] as u64;
    for (which, (moments, chunk)) in [
        (&mut opt.m, &arrays[1..1 + names.len()]),
        (&mut opt.v, &arrays[1 + names.len()..]),
    ]
    .into_iter()
    .enumerate()
    {
        let prefix = if which == 0 { "m" } else { "v" };
        let dsts = moments.arrays_mut();
        for (((name, shape), dst), (got, t)) in names.iter().zip(dsts).zip(chunk.iter()) {
            let want = format!("{prefix}.{name}");
            if got != &want || &t.shape != shape {
                return Err(CkptError::Shape(format!(
                    "optimizer array {got} {:?} does not match expected {want} {shape:?}",
                    t.shape
                )));
            }
            dst.copy_from_slice(&t.data);
        }
    }
    Ok(opt)
}

/// Reads a checkpoint back; the inverse of [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(PolicyParams, Option<OptState>), CkptError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_named(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CkptError::BadMagic(magic));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CkptError::UnsupportedVersion(version));
    }

    let arrays = read_section(&mut r)?;
    let Some((first_name, config)) = arrays.first() else {
        return Err(CkptError::Shape("checkpoint holds no arrays".into()));
    };
    if first_name != CONFIG_ARRAY {
        return Err(CkptError::Shape(format!(
            "first array is {first_name}, expected {CONFIG_ARRAY}"
        )));
    }
    let cfg = config_from_tensor(config)?;
    let params = PolicyParams::from_named_tensors(cfg, &arrays[1..])
        .map_err(|e| CkptError::Shape(e.to_string()))?;

    let mut marker = [0u8; 1];
    let opt = match r.read_exact(&mut marker) {
        Ok(()) if marker[0] == OPT_MARKER => {
            Some(opt_from_arrays(&params.cfg, &read_section(&mut r)?)?)
        }
        Ok(()) => {
            return Err(CkptError::Shape(format!(
                "unexpected trailing byte {:#04x}",
                marker[0]
            )))
        }
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => None,
        Err(e) => return Err(io_err(path, e)),
    };
    Ok((params, opt))
}
