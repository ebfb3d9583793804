//! Versioned binary container for datasets, partitions, encrypted datasets,
//! stochastic layers and model parameters.
//!
//! Layout: `b"FEDS"`, format version (`u16` LE), record tag (`u16` LE), then
//! the record payload. Counts and dimensions are `u32` LE, seeds `u64` LE,
//! real values `f64` LE, and class labels `u16` LE.

use std::fs;
use std::path::Path;

use crate::data::{Dataset, PartitionSpec};
use crate::encryption::EncryptedDataset;
use crate::error::{Error, Result};
use crate::nn::StochasticLayer;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FEDS";
pub const FORMAT_VERSION: u16 = 1;

pub const TAG_DATASET: u16 = 1;
pub const TAG_ENCRYPTED_DATASET: u16 = 2;
pub const TAG_PARTITION: u16 = 3;
pub const TAG_STOCHASTIC_LAYER: u16 = 4;
pub const TAG_PARAMS: u16 = 5;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn with_header(tag: u16) -> Self {
        let mut w = Writer::default();
        w.buf.extend_from_slice(MAGIC);
        w.u16(FORMAT_VERSION);
        w.u16(tag);
        w
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Config(format!("count {v} exceeds u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn shape(&mut self, shape: &[usize]) -> Result<()> {
        self.u32(shape.len())?;
        shape.iter().try_for_each(|&d| self.u32(d))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], name: &'a str, tag: u16) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            name,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(name, "missing FEDS magic"));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                name,
                format!("unsupported format version {version}"),
            ));
        }
        let found = r.u16()?;
        if found != tag {
            return Err(Error::format(
                name,
                format!("record tag {found}, expected {tag}"),
            ));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::format(self.name, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::format(self.name, "length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()?;
        if rank == 0 || rank > 8 {
            return Err(Error::format(
                self.name,
                format!("implausible tensor rank {rank}"),
            ));
        }
        (0..rank).map(|_| self.u32()).collect()
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let data = self.f64s(shape.iter().product())?;
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::format(self.name, e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.name,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// A value storable in a FEDS container.
pub trait Record: Sized {
    const TAG: u16;

    fn to_bytes(&self) -> Result<Vec<u8>>;

    /// `name` is used in error messages.
    fn from_bytes(bytes: &[u8], name: &str) -> Result<Self>;

    fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn sample_shape(inputs: &[Tensor]) -> Vec<usize> {
    inputs
        .first()
        .map_or_else(|| vec![1], |t| t.shape().to_vec())
}

impl Record for Dataset {
    const TAG: u16 = TAG_DATASET;

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(Self::TAG);
        w.u32(self.len())?;
        w.u32(self.num_classes)?;
        w.shape(&sample_shape(&self.inputs))?;
        for x in &self.inputs {
            w.f64s(x.data());
        }
        for &l in &self.labels {
            let l =
                u16::try_from(l).map_err(|_| Error::Config(format!("label {l} exceeds u16")))?;
            w.u16(l);
        }
        Ok(w.buf)
    }

    fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let mut r = Reader::open(bytes, name, Self::TAG)?;
        let n = r.u32()?;
        let num_classes = r.u32()?;
        let shape = r.shape()?;
        let inputs = (0..n)
            .map(|_| r.tensor(&shape))
            .collect::<Result<Vec<_>>>()?;
        let labels = (0..n)
            .map(|_| r.u16().map(usize::from))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Dataset::new(inputs, labels, num_classes).map_err(|e| Error::format(name, e.to_string()))
    }
}

impl Record for EncryptedDataset {
    const TAG: u16 = TAG_ENCRYPTED_DATASET;

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(Self::TAG);
        w.u32(self.origin_client)?;
        w.u64(self.stochastic_seed);
        w.u32(self.len())?;
        w.u32(self.soft_labels.first().map_or(0, Tensor::len))?;
        w.shape(&sample_shape(&self.inputs))?;
        for x in &self.inputs {
            w.f64s(x.data());
        }
        for p in &self.soft_labels {
            w.f64s(p.data());
        }
        Ok(w.buf)
    }

    fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let mut r = Reader::open(bytes, name, Self::TAG)?;
        let origin_client = r.u32()?;
        let stochastic_seed = r.u64()?;
        let n = r.u32()?;
        let classes = r.u32()?;
        let shape = r.shape()?;
        let inputs = (0..n)
            .map(|_| r.tensor(&shape))
            .collect::<Result<Vec<_>>>()?;
        let soft_labels = (0..n)
            .map(|_| r.tensor(&[classes.max(1)]))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(EncryptedDataset {
            origin_client,
            inputs,
            soft_labels,
            stochastic_seed,
        })
    }
}

impl Record for PartitionSpec {
    const TAG: u16 = TAG_PARTITION;

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(Self::TAG);
        w.u32(self.num_clients)?;
        w.u64(self.seed);
        w.f64s(&[self.alpha]);
        for a in &self.assignments {
            w.u32(a.len())?;
            a.iter().try_for_each(|&i| w.u32(i))?;
        }
        Ok(w.buf)
    }

    fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let mut r = Reader::open(bytes, name, Self::TAG)?;
        let num_clients = r.u32()?;
        let seed = r.u64()?;
        let alpha = r.f64s(1)?[0];
        let assignments = (0..num_clients)
            .map(|_| {
                let len = r.u32()?;
                (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(PartitionSpec {
            alpha,
            num_clients,
            assignments,
            seed,
        })
    }
}

impl Record for StochasticLayer {
    const TAG: u16 = TAG_STOCHASTIC_LAYER;

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(Self::TAG);
        w.u32(self.feature_dim())?;
        w.u64(self.seed());
        w.f64s(&[self.scale()]);
        w.f64s(self.weight().data());
        w.f64s(self.noise_offset().data());
        Ok(w.buf)
    }

    fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let mut r = Reader::open(bytes, name, Self::TAG)?;
        let d = r.u32()?;
        let seed = r.u64()?;
        let scale = r.f64s(1)?[0];
        let weight = r.tensor(&[d, d])?;
        let offset = r.tensor(&[d])?;
        r.finish()?;
        StochasticLayer::from_parts(weight, offset, seed, scale)
            .map_err(|e| Error::format(name, e.to_string()))
    }
}

/// Extractor and classifier tensors as exchanged with the server.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamsRecord(pub Vec<Tensor>);

impl Record for ParamsRecord {
    const TAG: u16 = TAG_PARAMS;

    fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::with_header(Self::TAG);
        w.u32(self.0.len())?;
        for t in &self.0 {
            w.shape(t.shape())?;
            w.f64s(t.data());
        }
        Ok(w.buf)
    }

    fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let mut r = Reader::open(bytes, name, Self::TAG)?;
        let n = r.u32()?;
        let tensors = (0..n)
            .map(|_| {
                let shape = r.shape()?;
                r.tensor(&shape)
            })
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(ParamsRecord(tensors))
    }
}

/// Byte length of a record's serialized form.
pub fn encoded_len<R: Record>(record: &R) -> Result<u64> {
    Ok(record.to_bytes()?.len() as u64)
}
