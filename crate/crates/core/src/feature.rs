//! Feature vectors and their on-disk container.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic     4 bytes  "FVEC"
//! version   u32      1
//! id_len    u32
//! id        id_len bytes, UTF-8 extractor id
//! dim       u32
//! values    dim x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FVEC";
const VERSION: u32 = 1;

/// Feature produced by (or targeted at) one extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<S> {
    values: Vec<S>,
    extractor_id: String,
    norm: S,
}

impl<S: Scalar> FeatureVector<S> {
    pub fn new(values: Vec<S>, extractor_id: impl Into<String>) -> Self {
        let norm = values.iter().map(|&v| v * v).sum::<S>().sqrt();
        Self { values, extractor_id: extractor_id.into(), norm }
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Cached L2 norm.
    pub fn norm(&self) -> S {
        self.norm
    }

    pub fn to_tensor(&self) -> Tensor<S> {
        Tensor::new(&[1, self.values.len()], self.values.clone()).expect("length matches")
    }

    /// Same vector attributed to another extractor.
    pub fn relabel(&self, extractor_id: impl Into<String>) -> Self {
        Self { values: self.values.clone(), extractor_id: extractor_id.into(), norm: self.norm }
    }

    /// Errors unless both vectors come from the same extractor and have equal dimension.
    pub fn check_comparable(&self, other: &Self) -> Result<()> {
        if self.extractor_id != other.extractor_id {
            return Err(Error::ExtractorMismatch { left: self.extractor_id.clone(), right: other.extractor_id.clone() });
        }
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { left: self.dim(), right: other.dim() });
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let id = self.extractor_id.as_bytes();
        w.write_u32::<LittleEndian>(id.len() as u32)?;
        w.write_all(id)?;
        w.write_u32::<LittleEndian>(self.values.len() as u32)?;
        for v in &self.values {
            w.write_f64::<LittleEndian>(v.as_f64())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a feature vector file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported feature file version {version}")));
        }
        let id_len = r.read_u32::<LittleEndian>()? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| Error::Format("extractor id is not UTF-8".into()))?;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let values = (0..dim).map(|_| r.read_f64::<LittleEndian>().map(S::of)).collect::<std::io::Result<Vec<_>>>()?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self::new(values, id))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// CSV export: a header `name,extractor_id,dim,v0,v1,...` then one row per vector.
pub fn write_csv<S: Scalar>(rows: &[(String, FeatureVector<S>)], mut w: impl Write) -> Result<()> {
    let dim = rows.iter().map(|(_, f)| f.dim()).max().unwrap_or(0);
    write!(w, "name,extractor_id,dim")?;
    for i in 0..dim {
        write!(w, ",v{i}")?;
    }
    writeln!(w)?;
    for (name, f) in rows {
        write!(w, "{name},{},{}", f.extractor_id(), f.dim())?;
        for v in f.values() {
            write!(w, ",{}", v.as_f64())?;
        }
        writeln!(w)?;
    }
    Ok(())
}
