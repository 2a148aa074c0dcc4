//! Named-tensor container file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VAT1"                       magic
//! u64                          entry count
//! per entry:
//!   u64 + bytes                name length and UTF-8 name
//!   u8                         dtype tag: 0 = f32, 1 = f64, 2 = u8
//!   u64                        rank
//!   u64 × rank                 dims
//!   raw element bytes          row-major, little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, VatError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VAT1";

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn bits_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U8(a), TensorData::U8(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let count: u128 = dims.iter().map(|&d| d as u128).product();
        if count != data.len() as u128 {
            return Err(VatError::Format(format!(
                "entry {name}: dims {dims:?} hold {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }
}

/// Ordered set of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorContainer {
    entries: Vec<Entry>,
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(VatError::Format(format!(
            "truncated container while reading {what}"
        )));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn read_u64(buf: &mut &[u8], what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(
        take(buf, 8, what)?.try_into().expect("8 bytes"),
    ))
}

fn to_usize(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| VatError::Format(format!("{what} {v} does not fit in memory")))
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn insert(&mut self, entry: Entry) -> Result<()> {
        if self.get(&entry.name).is_some() {
            return Err(VatError::Format(format!(
                "duplicate entry name {:?}",
                entry.name
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let dims = t.shape().iter().map(|&d| d as u64).collect();
        self.insert(Entry::new(name, dims, TensorData::F64(t.data().to_vec()))?)
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) -> Result<()> {
        self.insert(Entry::new(
            name,
            vec![bytes.len() as u64],
            TensorData::U8(bytes.to_vec()),
        )?)
    }

    /// Reads an entry as an f64 tensor; f32 values are widened.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self
            .get(name)
            .ok_or_else(|| VatError::Format(format!("missing entry {name:?}")))?;
        let dims = e
            .dims
            .iter()
            .map(|&d| to_usize(d, "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let data = match &e.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::U8(_) => {
                return Err(VatError::Format(format!(
                    "entry {name:?} holds bytes, not floats"
                )))
            }
        };
        Tensor::new(&dims, data)
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.get(name).map(|e| &e.data) {
            Some(TensorData::U8(v)) => Ok(v),
            Some(_) => Err(VatError::Format(format!(
                "entry {name:?} is not a byte array"
            ))),
            None => Err(VatError::Format(format!("missing entry {name:?}"))),
        }
    }

    /// Bitwise equality, distinguishing NaN payloads and signed zeros.
    pub fn bits_eq(&self, other: &TensorContainer) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.dims == b.dims && a.data.bits_eq(&b.data))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.tag());
            out.extend_from_slice(&(e.dims.len() as u64).to_le_bytes());
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v
                    .iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(mut buf: &[u8]) -> Result<Self> {
        let buf = &mut buf;
        if take(buf, 4, "magic")? != MAGIC {
            return Err(VatError::Format("bad magic, not a VAT1 container".into()));
        }
        let count = read_u64(buf, "entry count")?;
        let mut c = TensorContainer::new();
        for _ in 0..count {
            let name_len = to_usize(read_u64(buf, "name length")?, "name length")?;
            let name = std::str::from_utf8(take(buf, name_len, "name")?)
                .map_err(|_| VatError::Format("entry name is not UTF-8".into()))?
                .to_string();
            let tag = take(buf, 1, "dtype")?[0];
            let rank = to_usize(read_u64(buf, "rank")?, "rank")?;
            if rank > buf.len() / 8 {
                return Err(VatError::Format(format!(
                    "entry {name:?}: rank {rank} exceeds the file"
                )));
            }
            let dims = (0..rank)
                .map(|_| read_u64(buf, "dims"))
                .collect::<Result<Vec<_>>>()?;
            let count = dims
                .iter()
                .try_fold(1usize, |acc, &d| {
                    acc.checked_mul(to_usize(d, "dimension").ok()?)
                })
                .ok_or_else(|| {
                    VatError::Format(format!("entry {name:?}: dims {dims:?} overflow"))
                })?;
            let width = match tag {
                0 => 4,
                1 => 8,
                2 => 1,
                t => {
                    return Err(VatError::Format(format!(
                        "entry {name:?}: unknown dtype tag {t}"
                    )))
                }
            };
            let nbytes = count
                .checked_mul(width)
                .ok_or_else(|| VatError::Format(format!("entry {name:?} is too large")))?;
            let raw = take(buf, nbytes, "data")?;
            let data = match tag {
                0 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes(b.try_into().expect("4")))
                        .collect(),
                ),
                1 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8")))
                        .collect(),
                ),
                _ => TensorData::U8(raw.to_vec()),
            };
            c.insert(Entry { name, dims, data })?;
        }
        if !buf.is_empty() {
            return Err(VatError::Format(format!(
                "{} trailing bytes after the last entry",
                buf.len()
            )));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn data_strategy() -> impl Strategy<Value = (Vec<u64>, TensorData)> {
        proptest::collection::vec(0u64..4, 0..4).prop_flat_map(|dims| {
            let n: u64 = dims.iter().product();
            let n = n as usize;
            prop_oneof![
                proptest::collection::vec(any::<u32>(), n)
                    .prop_map(|v| TensorData::F32(v.into_iter().map(f32::from_bits).collect())),
                proptest::collection::vec(any::<u64>(), n)
                    .prop_map(|v| TensorData::F64(v.into_iter().map(f64::from_bits).collect())),
                proptest::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
            ]
            .prop_map(move |d| (dims.clone(), d))
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(entries in proptest::collection::vec(data_strategy(), 0..5)) {
            let mut c = TensorContainer::new();
            for (i, (dims, data)) in entries.into_iter().enumerate() {
                c.insert(Entry::new(format!("t{i}/é"), dims, data).unwrap()).unwrap();
            }
            let back = TensorContainer::from_bytes(&c.to_bytes()).unwrap();
            prop_assert!(back.bits_eq(&c));
        }
    }

    #[test]
    fn header_layout() {
        let mut c = TensorContainer::new();
        c.insert(Entry::new("ab", vec![], TensorData::F64(vec![1.5])).unwrap())
            .unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"VAT1");
        assert_eq!(u64::from_le_bytes(b[4..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(&b[20..22], b"ab");
        assert_eq!(b[22], 1);
        assert_eq!(u64::from_le_bytes(b[23..31].try_into().unwrap()), 0);
        assert_eq!(f64::from_le_bytes(b[31..39].try_into().unwrap()), 1.5);
        assert_eq!(b.len(), 39);
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = TensorContainer::new();
        c.insert_tensor("x", &Tensor::zeros(&[2, 0])).unwrap();
        assert!(c.insert_tensor("x", &Tensor::zeros(&[1])).is_err());
        let bytes = c.to_bytes();
        assert!(TensorContainer::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(TensorContainer::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(TensorContainer::from_bytes(&bad).is_err());
        assert!(Entry::new("y", vec![3], TensorData::U8(vec![1])).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.vat");
        let mut c = TensorContainer::new();
        c.insert_tensor(
            "w",
            &Tensor::from_fn(&[2, 3], |i| i[0] as f64 - i[1] as f64 * 0.1),
        )
        .unwrap();
        c.insert_bytes("meta", b"hello").unwrap();
        c.write(&path).unwrap();
        let back = TensorContainer::read(&path).unwrap();
        assert!(back.bits_eq(&c));
        assert_eq!(back.tensor("w").unwrap(), c.tensor("w").unwrap());
        assert_eq!(back.bytes("meta").unwrap(), b"hello");
    }
}
