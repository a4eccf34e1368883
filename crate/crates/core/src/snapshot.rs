//! Binary parameter snapshots.
//!
//! Layout (little-endian): magic `LPST`, version `u32`, record count `u32`,
//! then per parameter: name length `u16`, UTF-8 name, rank `u8`, extents
//! `u32` each, and the values as `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"LPST";
pub const VERSION: u32 = 1;

pub fn to_bytes(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 4 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| {
            Error::invalid("snapshot", format!("parameter name too long: {}", p.name))
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        let shape = p.value.shape();
        out.push(
            u8::try_from(shape.len()).map_err(|_| Error::invalid("snapshot", "rank above 255"))?,
        );
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::invalid("snapshot", "extent above u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                what: "snapshot",
                offset: self.at,
            });
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

fn format_error(message: impl Into<String>) -> Error {
    Error::Format {
        what: "snapshot",
        message: message.into(),
    }
}

/// Decodes a snapshot into `(name, tensor)` records in file order.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(format_error("missing LPST magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_error(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format_error("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format_error("extent overflow"))?;
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| format_error("extent overflow"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(format_error(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    Ok(records)
}

/// Overwrites every parameter of `store` from a snapshot; names and shapes
/// must match exactly.
pub fn restore(store: &mut ParamStore<f32>, bytes: &[u8]) -> Result<()> {
    let records = from_bytes(bytes)?;
    if records.len() != store.len() {
        return Err(format_error(format!(
            "{} records for {} parameters",
            records.len(),
            store.len()
        )));
    }
    for (name, value) in records {
        let id = store
            .id_of(&name)
            .ok_or_else(|| format_error(format!("unknown parameter {name}")))?;
        let p = store.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::shape("snapshot", p.value.shape(), value.shape()));
        }
        p.value = value;
    }
    Ok(())
}

pub fn save(store: &ParamStore<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(store)?).map_err(|e| Error::io(path, e))
}

pub fn load_into(store: &mut ParamStore<f32>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    restore(store, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(
            "a.w",
            Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.5 - 3.0),
        );
        s.add("a.b", Tensor::from_vec(&[2], vec![1.5, -0.25]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let s = store();
        let bytes = to_bytes(&s).unwrap();
        let mut t = store();
        t.get_mut(t.id_of("a.b").unwrap()).value.fill(0.0);
        restore(&mut t, &bytes).unwrap();
        assert_eq!(to_bytes(&t).unwrap(), bytes);
    }

    #[test]
    fn truncation_and_bad_magic_are_reported() {
        let bytes = to_bytes(&store()).unwrap();
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let bytes = to_bytes(&store()).unwrap();
        let mut other = ParamStore::new();
        other.add("a.w", Tensor::<f32>::zeros(&[2, 1, 1, 1]));
        other.add("a.b", Tensor::<f32>::zeros(&[2]));
        assert!(restore(&mut other, &bytes).is_err());
    }
}
