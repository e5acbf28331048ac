//! The TCSF binary tensor container.
//!
//! Layout of a single tensor (all integers little-endian):
//!
//! | bytes | content                              |
//! |-------|--------------------------------------|
//! | 4     | magic `TCSF`                         |
//! | 4     | version, `u32` = 1                   |
//! | 1     | dtype, `u8`: 1 = f32, 2 = f64        |
//! | 1     | ndim, `u8`                           |
//! | 8·ndim| dims, `u64` each                     |
//! | ...   | row-major payload                    |
//!
//! A bundle is a sequence of named records, each a `u32` name length, the
//! UTF-8 name, and a complete tensor as above. Checkpoints and ground-truth
//! files are bundles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TCSF";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::format(format!("unknown dtype code {other}"))),
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &ArrayD<f64>, dtype: Dtype) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::arg("tensor has too many dimensions"));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype.code(), t.ndim() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    // iter() walks in logical (row-major) order regardless of memory layout
    match dtype {
        Dtype::F64 => {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for v in t.iter() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_exact_or_format<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("truncated file while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<ArrayD<f64>> {
    let mut head = [0u8; 10];
    read_exact_or_format(r, &mut head, "header")?;
    if &head[0..4] != MAGIC {
        return Err(Error::format("bad magic, not a TCSF file"));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!("unsupported TCSF version {version}")));
    }
    let dtype = Dtype::from_code(head[8])?;
    let ndim = head[9] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact_or_format(r, &mut b, "dims")?;
        let d = u64::from_le_bytes(b);
        dims.push(usize::try_from(d).map_err(|_| Error::format("dimension overflows usize"))?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("tensor size overflows usize"))?;
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut payload = vec![0u8; count * width];
    read_exact_or_format(r, &mut payload, "payload")?;
    let data: Vec<f64> = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::format(e.to_string()))
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Array2<f64>, dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, &m.clone().into_dyn(), dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let t = read_tensor(&mut r)?;
    if t.ndim() != 2 {
        return Err(Error::format(format!("expected a 2-D tensor, found {} dims", t.ndim())));
    }
    Ok(t.into_dimensionality().expect("checked ndim"))
}

/// Named tensors in file order.
pub type Bundle = Vec<(String, ArrayD<f64>)>;

pub fn save_bundle(path: impl AsRef<Path>, records: &[(String, ArrayD<f64>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (name, t) in records {
        let bytes = name.as_bytes();
        let len = u32::try_from(bytes.len()).map_err(|_| Error::arg("record name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        write_tensor(&mut w, t, Dtype::F64)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read(&mut len[..1])? {
            0 => break,
            _ => read_exact_or_format(&mut r, &mut len[1..], "record name length")?,
        }
        let len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        read_exact_or_format(&mut r, &mut name, "record name")?;
        let name = String::from_utf8(name).map_err(|_| Error::format("record name is not UTF-8"))?;
        let t = read_tensor(&mut r)?;
        out.push((name, t));
    }
    Ok(out)
}

/// Removes and returns the record called `name`.
pub fn take(bundle: &mut Bundle, name: &str) -> Result<ArrayD<f64>> {
    let idx = bundle
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::format(format!("missing record `{name}`")))?;
    Ok(bundle.remove(idx).1)
}

pub fn take_matrix(bundle: &mut Bundle, name: &str) -> Result<Array2<f64>> {
    take(bundle, name)?
        .into_dimensionality()
        .map_err(|_| Error::format(format!("record `{name}` is not 2-D")))
}
