//! Self-describing binary container for fitted models.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header
//! (kind tag, free-form metadata, tensor names and shapes), then every
//! tensor's `f64` values little-endian in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FKPMODL1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            values,
        });
    }

    /// Stores a matrix row-major under `name`.
    pub fn push_matrix(&mut self, name: impl Into<String>, m: &DMatrix<f64>) {
        let values = m.transpose().as_slice().to_vec();
        self.push(name, vec![m.nrows(), m.ncols()], values);
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push(name, vec![v.len()], v.to_vec());
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let t = self.tensor(name)?;
        match t.shape[..] {
            [r, c] => Ok(DMatrix::from_row_slice(r, c, &t.values)),
            _ => Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, expected a matrix",
                t.shape
            ))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.tensor(name)?.values.clone()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let io = |e| Error::io("<model output>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for t in &self.tensors {
            let mut buf = Vec::with_capacity(t.values.len() * 8);
            for v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let io = |e| Error::io("<model input>", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(io)?;
            let values = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor {
                name: th.name,
                shape: th.shape,
                values,
            });
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| relabel(e, path))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|e| relabel(e, path))
    }
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = Container::new("test", serde_json::json!({"k": 3, "name": "x"}));
        c.push_matrix("w", &DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, -0.1]));
        c.push_vector("b", &[f64::MIN_POSITIVE, 7.5]);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Container::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.matrix("w").unwrap()[(1, 2)], -0.1);
        assert!(back.tensor("nope").is_err());
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(matches!(
            Container::read_from(&b"not a model file at all"[..]),
            Err(Error::Format(_))
        ));
    }
}
