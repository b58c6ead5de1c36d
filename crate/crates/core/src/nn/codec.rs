//! Binary network snapshots.
//!
//! All integers and floats are little-endian. A network record is:
//!
//! ```text
//! magic     8 bytes  "EPGTNET\0"
//! version   u32      currently 1
//! layers    u32
//! per layer:
//!   in      u32
//!   out     u32
//!   act     u8       0 tanh, 1 relu, 2 sigmoid, 3 identity
//!   weights out*in f64, row-major
//!   bias    out f64
//! ```
//!
//! A bare matrix record (used for projection matrices) is `rows u32, cols u32`
//! followed by `rows*cols` f64 values, row-major. Floats are stored by bit
//! pattern so a round trip is exact.

use std::io::{Read, Write};

use super::{Activation, DenseNet, Layer, Matrix};
use crate::{Error, Result};

pub const NET_MAGIC: &[u8; 8] = b"EPGTNET\0";
pub const NET_VERSION: u32 = 1;

pub(crate) struct ByteWriter<W: Write> {
    inner: W,
}

impl<W: Write> ByteWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        for &v in vs {
            self.f64(v)?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub(crate) struct ByteReader<R: Read> {
    inner: R,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    pub fn exact<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Corrupt("truncated payload".into()),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.exact::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.exact()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.exact()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.exact()?))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    /// Errors unless the stream is exhausted.
    pub fn finish(mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Corrupt("trailing bytes after payload".into())),
        }
    }
}

/// Upper bound on element counts read from untrusted headers.
const MAX_ELEMENTS: u64 = 1 << 28;

fn checked_dims(rows: u32, cols: u32) -> Result<usize> {
    let n = rows as u64 * cols as u64;
    if rows == 0 || cols == 0 || n > MAX_ELEMENTS {
        return Err(Error::Corrupt(format!("implausible tensor shape {rows}x{cols}")));
    }
    Ok(n as usize)
}

pub(crate) fn write_matrix<W: Write>(w: &mut ByteWriter<W>, m: &Matrix) -> Result<()> {
    w.u32(m.rows() as u32)?;
    w.u32(m.cols() as u32)?;
    w.f64s(m.data())
}

pub(crate) fn read_matrix<R: Read>(r: &mut ByteReader<R>) -> Result<Matrix> {
    let rows = r.u32()?;
    let cols = r.u32()?;
    let n = checked_dims(rows, cols)?;
    Matrix::from_vec(rows as usize, cols as usize, r.f64s(n)?)
}

pub(crate) fn write_net_record<W: Write>(w: &mut ByteWriter<W>, net: &DenseNet) -> Result<()> {
    w.bytes(NET_MAGIC)?;
    w.u32(NET_VERSION)?;
    w.u32(net.layers().len() as u32)?;
    for layer in net.layers() {
        w.u32(layer.in_dim() as u32)?;
        w.u32(layer.out_dim() as u32)?;
        w.u8(layer.activation().code())?;
        w.f64s(layer.weights().data())?;
        w.f64s(layer.bias())?;
    }
    Ok(())
}

pub(crate) fn read_net_record<R: Read>(r: &mut ByteReader<R>) -> Result<DenseNet> {
    if &r.exact::<8>()? != NET_MAGIC {
        return Err(Error::Corrupt("not a network record".into()));
    }
    let version = r.u32()?;
    if version != NET_VERSION {
        return Err(Error::Version {
            expected: NET_VERSION,
            found: version,
        });
    }
    let count = r.u32()?;
    if count == 0 || count > 1024 {
        return Err(Error::Corrupt(format!("implausible layer count {count}")));
    }
    let mut layers = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let fan_in = r.u32()?;
        let fan_out = r.u32()?;
        let n = checked_dims(fan_out, fan_in)?;
        let act = Activation::from_code(r.u8()?).ok_or_else(|| Error::Corrupt("unknown activation".into()))?;
        let weights = Matrix::from_vec(fan_out as usize, fan_in as usize, r.f64s(n)?)?;
        let bias = r.f64s(fan_out as usize)?;
        layers.push(Layer::new(weights, bias, act)?);
    }
    DenseNet::from_layers(layers).map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn write_net<W: Write>(net: &DenseNet, out: W) -> Result<()> {
    write_net_record(&mut ByteWriter::new(out), net)
}

pub fn net_to_bytes(net: &DenseNet) -> Vec<u8> {
    let mut w = ByteWriter::new(Vec::new());
    write_net_record(&mut w, net).expect("writing to a Vec cannot fail");
    w.into_inner()
}

pub fn net_from_bytes(bytes: &[u8]) -> Result<DenseNet> {
    let mut r = ByteReader::new(bytes);
    let net = read_net_record(&mut r)?;
    r.finish()?;
    Ok(net)
}
