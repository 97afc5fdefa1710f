//! Binary model files: `FMCK` magic, u32 version, u32 header length, a JSON
//! header, then for every listed tensor a u32 value count followed by that
//! many little-endian f32 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"FMCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    buffer: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A loaded model file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamStore,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    kind: &str,
    config: &serde_json::Value,
    params: &ParamStore,
) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut values: Vec<&Matrix> = Vec::new();
    for (buffer, map) in [(false, params.params()), (true, params.buffers())] {
        for (name, m) in map {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: [m.rows, m.cols],
                buffer,
            });
            values.push(m);
        }
    }
    let header = serde_json::to_vec(&Header {
        kind: kind.to_string(),
        config: config.clone(),
        tensors,
    })?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(header.len() as u32).to_le_bytes())?;
    write(&header)?;
    for m in values {
        write(&(m.data.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(m.data.len() * 4);
        for v in &m.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        write(&buf)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut read = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        Ok(buf)
    };
    let u32_at = |b: Vec<u8>| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    if read(4)? != MAGIC {
        return Err(Error::Shape(format!("{} is not a model file", path.display())));
    }
    let version = u32_at(read(4)?);
    if version != VERSION {
        return Err(Error::Shape(format!("unsupported model file version {version}")));
    }
    let header_len = u32_at(read(4)?) as usize;
    let header: Header = serde_json::from_slice(&read(header_len)?)?;
    let mut params = ParamStore::new();
    for t in header.tensors {
        let count = u32_at(read(4)?) as usize;
        if count != t.shape[0] * t.shape[1] {
            return Err(Error::Shape(format!(
                "tensor {} holds {count} values for shape {:?}",
                t.name, t.shape
            )));
        }
        let bytes = read(count * 4)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let m = Matrix::from_vec(t.shape[0], t.shape[1], data)?;
        if t.buffer {
            params.insert_buffer(t.name, m);
        } else {
            params.insert(t.name, m);
        }
    }
    Ok(Checkpoint {
        kind: header.kind,
        config: header.config,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_names_shapes_and_f32_values() {
        let mut store = ParamStore::new();
        store.insert("a.weight", Matrix::from_rows(&[vec![1.5, -2.25], vec![0.1, 3.0]]).unwrap());
        store.insert_buffer("a.running_mean", Matrix::row_vector(&[0.5, 0.25]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let cfg = serde_json::json!({"width": 2});
        save_checkpoint(&p, "test", &cfg, &store).unwrap();
        let ck = load_checkpoint(&p).unwrap();
        assert_eq!(ck.kind, "test");
        assert_eq!(ck.config, cfg);
        store.check_layout(&ck.params).unwrap();
        let w = ck.params.get("a.weight").unwrap();
        assert_eq!(w.data[2], 0.1f32 as f64);
        assert_eq!(ck.params.buffer("a.running_mean").unwrap().data, vec![0.5, 0.25]);
    }

    #[test]
    fn rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"hello world, not a model").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Shape(_))));
    }
}
