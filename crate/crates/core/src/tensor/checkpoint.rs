//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "FSAG" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 ndim | u32 dims[ndim] | f32 data[]
//! ```
//!
//! Adam moments are stored as ordinary tensors under `adam.m/<name>` and
//! `adam.v/<name>`, with the step counter as the one-element tensor
//! `adam.step`. They are only written once the optimizer has stepped.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Result, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"FSAG";
const VERSION: u32 = 1;
const STEP_NAME: &str = "adam.step";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

fn malformed(msg: impl Into<String>) -> TensorError {
    TensorError::MalformedCheckpoint(msg.into())
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

pub fn write_checkpoint(store: &ParamStore, w: &mut impl Write) -> Result<()> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for (name, p) in store.iter() {
        entries.push((
            name.to_string(),
            p.value().shape().to_vec(),
            p.value().data().to_vec(),
        ));
    }
    if store.step() > 0 {
        for (name, p) in store.iter() {
            let shape = p.value().shape().to_vec();
            entries.push((format!("{M_PREFIX}{name}"), shape.clone(), p.m.clone()));
            entries.push((format!("{V_PREFIX}{name}"), shape, p.v.clone()));
        }
        entries.push((STEP_NAME.to_string(), vec![1], vec![store.step() as f64]));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, shape, data) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| malformed("name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        let nd = u8::try_from(shape.len()).map_err(|_| malformed("too many dims"))?;
        w.write_all(&[nd])?;
        for d in &shape {
            let d = u32::try_from(*d).map_err(|_| malformed("dimension too large"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => malformed(format!("truncated while reading {what}")),
        _ => TensorError::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let count = read_u32(r, "tensor count")?;
    let mut store = ParamStore::new();
    let mut moments: Vec<(String, Vec<f64>, bool)> = Vec::new();
    let mut step = 0u64;
    for _ in 0..count {
        let mut lb = [0u8; 2];
        read_exact(r, &mut lb, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
        read_exact(r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| malformed("name is not UTF-8"))?;
        let mut nd = [0u8; 1];
        read_exact(r, &mut nd, "ndim")?;
        let mut shape = Vec::with_capacity(nd[0] as usize);
        for _ in 0..nd[0] {
            shape.push(read_u32(r, "dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(r, &mut raw, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if name == STEP_NAME {
            step = data.first().copied().unwrap_or(0.0) as u64;
        } else if let Some(p) = name.strip_prefix(M_PREFIX) {
            moments.push((p.to_string(), data, true));
        } else if let Some(p) = name.strip_prefix(V_PREFIX) {
            moments.push((p.to_string(), data, false));
        } else {
            store.insert(name, Tensor::new(shape, data)?)?;
        }
    }
    for (name, data, first) in moments {
        let p = store
            .get(&name)
            .map_err(|_| malformed(format!("moment for unknown tensor {name}")))?;
        let (mut m, mut v) = (p.m.clone(), p.v.clone());
        if data.len() != m.len() {
            return Err(malformed(format!("moment shape for {name}")));
        }
        if first {
            m = data;
        } else {
            v = data;
        }
        store.set_moments(&name, m, v)?;
    }
    store.set_step(step);
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(store: &ParamStore) -> ParamStore {
        let mut buf = Vec::new();
        write_checkpoint(store, &mut buf).unwrap();
        read_checkpoint(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn empty_store_roundtrips() {
        let s = ParamStore::new();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        assert_eq!(buf.len(), 12);
        assert_eq!(roundtrip(&s), s);
    }

    #[test]
    fn random_store_roundtrips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        s.init("unet.w", &[3, 3, 2, 4], Init::Normal(0.3), &mut rng)
            .unwrap();
        s.init("sem.b", &[5], Init::Normal(1.0), &mut rng).unwrap();
        s.insert("scalar", Tensor::scalar(1.25)).unwrap();
        let back = roundtrip(&s);
        assert_eq!(back, s);
        for (name, p) in s.iter() {
            let q = back.get(name).unwrap();
            for (a, b) in p.value().data().iter().zip(q.value().data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let mut s = ParamStore::new();
        s.insert("ab", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let mut want = Vec::new();
        want.extend_from_slice(b"FSAG");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn truncated_file_is_malformed() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[4, 4], 0.5)).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        for cut in [0, 3, 10, buf.len() - 1] {
            let err = read_checkpoint(&mut &buf[..cut]).unwrap_err();
            assert!(matches!(err, TensorError::MalformedCheckpoint(_)), "{cut}: {err}");
        }
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[2], 0.5)).unwrap();
        s.set_moments("w", vec![0.25, -0.5], vec![1e-3f32 as f64, 2e-3f32 as f64])
            .unwrap();
        s.set_step(17);
        assert_eq!(roundtrip(&s), s);
    }
}
