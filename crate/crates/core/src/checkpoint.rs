//! Binary checkpoint of a [`ModelBundle`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "THSG" u16 version u32 network_count
//! per network: u32 name_len, name bytes, u8 normalize, u32 layer_count
//! per layer:   u8 activation (0 identity, 1 relu), u32 rows, u32 cols,
//!              rows*cols f64 weights, cols f64 biases
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::networks::{Activation, Layer, Mlp, ModelBundle, NETWORK_NAMES};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"THSG";
pub const VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(bundle: &ModelBundle<f64>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, NETWORK_NAMES.len())?;
    for (name, net) in NETWORK_NAMES.iter().zip(bundle.networks()) {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        out.push(net.output_normalize() as u8);
        put_u32(&mut out, net.layers().len())?;
        for layer in net.layers() {
            out.push(match layer.activation {
                Activation::Identity => 0,
                Activation::Relu => 1,
            });
            put_u32(&mut out, layer.weight.rows())?;
            put_u32(&mut out, layer.weight.cols())?;
            for v in layer.weight.data().iter().chain(layer.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse { offset: self.pos as u64, message: message.into() }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated checkpoint, needed {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| self.err("tensor size overflows"))?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelBundle<f64>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse { offset: 0, message: "bad checkpoint magic".into() });
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Parse { offset: 4, message: format!("unsupported checkpoint version {version}") });
    }
    let count = r.u32()?;
    if count != NETWORK_NAMES.len() {
        return Err(r.err(format!("expected {} networks, found {count}", NETWORK_NAMES.len())));
    }
    let mut nets = Vec::with_capacity(count);
    for expected in NETWORK_NAMES {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.err("network name is not UTF-8"))?;
        if name != expected {
            return Err(r.err(format!("expected network {expected}, found {name}")));
        }
        let normalize = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(r.err(format!("bad normalize flag {b}"))),
        };
        let n_layers = r.u32()?;
        let mut layers = Vec::with_capacity(n_layers.min(64));
        for _ in 0..n_layers {
            let activation = match r.u8()? {
                0 => Activation::Identity,
                1 => Activation::Relu,
                b => return Err(r.err(format!("bad activation tag {b}"))),
            };
            let (rows, cols) = (r.u32()?, r.u32()?);
            let weight = Tensor::new(rows, cols, r.f64s(rows.saturating_mul(cols))?)?;
            let bias = Tensor::new(1, cols, r.f64s(cols)?)?;
            layers.push(Layer { weight, bias, activation });
        }
        nets.push(Mlp::from_layers(layers, normalize)?);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after checkpoint"));
    }
    let nets: [Mlp<f64>; 6] = nets.try_into().expect("six networks");
    ModelBundle::from_networks(nets)
}

pub fn save(bundle: &ModelBundle<f64>, path: &Path) -> Result<()> {
    fs::write(path, encode(bundle)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelBundle<f64>> {
    decode(&fs::read(path)?)
}
