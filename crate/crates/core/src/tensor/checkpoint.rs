use std::io::{Read, Write};

use super::{ParamStore, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"INKL";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: usize = 1 << 16;
const MAX_RANK: usize = 8;
const MAX_META: usize = 1 << 24;

/// Writes `store` with a free-form metadata string (usually JSON describing
/// the architecture).
///
/// Layout, all integers little-endian: magic, version `u32`, metadata length
/// `u32` + bytes, entry count `u32`, then per entry: name length `u32` + UTF-8
/// bytes, trainable flag `u8`, rank `u32`, dims `u64` each, values `f64` each.
pub fn write_params<W: Write>(mut w: W, store: &ParamStore, meta: &str) -> Result<(), TensorError> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_len(&mut w, meta.len())?;
    w.write_all(meta.as_bytes())?;
    write_len(&mut w, store.len())?;
    for (_, p) in store.iter() {
        write_len(&mut w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&[p.trainable as u8])?;
        write_len(&mut w, p.value.rank())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 8);
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a store written by [`write_params`], returning it with its metadata.
pub fn read_params<R: Read>(mut r: R) -> Result<(ParamStore, String), TensorError> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let meta = read_string(&mut r, MAX_META)?;
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_string(&mut r, MAX_NAME)?;
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag)?;
        let rank = read_u32(&mut r)? as usize;
        if rank > MAX_RANK {
            return Err(TensorError::Checkpoint(format!(
                "rank {rank} too large for {name:?}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::Checkpoint(format!("shape overflow for {name:?}")))?;
        let mut bytes = Vec::new();
        (&mut r).take((n * 8) as u64).read_to_end(&mut bytes)?;
        if bytes.len() != n * 8 {
            return Err(TensorError::Checkpoint(format!(
                "truncated values for {name:?}"
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data)?;
        match flag[0] {
            1 => store.add(&name, t)?,
            0 => store.add_buffer(&name, t)?,
            f => return Err(TensorError::Checkpoint(format!("bad trainable flag {f}"))),
        };
    }
    Ok((store, meta))
}

fn write_len<W: Write>(w: &mut W, n: usize) -> Result<(), TensorError> {
    let n = u32::try_from(n).map_err(|_| TensorError::Checkpoint("length exceeds u32".into()))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), TensorError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Checkpoint("truncated file".into()),
        _ => TensorError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, limit: usize) -> Result<String, TensorError> {
    let n = read_u32(r)? as usize;
    if n > limit {
        return Err(TensorError::Checkpoint(format!(
            "string length {n} exceeds {limit}"
        )));
    }
    let mut b = vec![0u8; n];
    read_exact(r, &mut b)?;
    String::from_utf8(b).map_err(|_| TensorError::Checkpoint("name is not UTF-8".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ParamStore::new();
        s.add(
            "w",
            Tensor::matrix(2, 2, vec![0.1, -1e-300, f64::MIN_POSITIVE, 3.5]).unwrap(),
        )
        .unwrap();
        s.add_buffer("bn.mean", Tensor::vector(vec![1.0 / 3.0]))
            .unwrap();
        s.add("scalar", Tensor::scalar(2.0)).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &s, "{\"k\":1}").unwrap();
        let (back, meta) = read_params(buf.as_slice()).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(back.len(), 3);
        for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.value.shape(), b.value.shape());
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(matches!(
            read_params(&b"NOPE"[..]),
            Err(TensorError::Checkpoint(_))
        ));
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, &s, "").unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_params(buf.as_slice()),
            Err(TensorError::Checkpoint(_))
        ));
    }
}
