//! Binary weight files.
//!
//! Layout, all little-endian:
//!   bytes 0..8   magic `ACTLMWT1`
//!   u32          format version (currently 1)
//!   u32          element width in bits (32 or 64)
//!   u32 × 6      embed_dim, vocab_size, n_layers, n_heads, max_context, p_bits
//!   then every parameter tensor's raw elements in `param_tensors` order.
//!
//! Loading into a narrower precision than the file rounds each element
//! to the nearest representable value (f64 → f32 `as` cast); loading
//! into a wider precision is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, Weights};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"ACTLMWT1";
const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::BadWeightFile(msg.into())
}

impl<T: Scalar> Model<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&T::BITS.to_le_bytes())?;
        let c = &self.config;
        for field in [
            c.embed_dim as u32,
            c.vocab_size as u32,
            c.n_layers as u32,
            c.n_heads as u32,
            c.max_context as u32,
            c.p_bits,
        ] {
            w.write_all(&field.to_le_bytes())?;
        }
        for tensor in self.weights.param_tensors() {
            for &x in tensor.data() {
                match T::BITS {
                    32 => w.write_all(&(x.to_f64() as f32).to_le_bytes())?,
                    _ => w.write_all(&x.to_f64().to_le_bytes())?,
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let elem_bits = read_u32(&mut r)?;
        if !matches!(elem_bits, 32 | 64) {
            return Err(bad(format!("unsupported element width {elem_bits}")));
        }
        let config = ModelConfig {
            embed_dim: read_u32(&mut r)? as usize,
            vocab_size: read_u32(&mut r)? as usize,
            n_layers: read_u32(&mut r)? as usize,
            n_heads: read_u32(&mut r)? as usize,
            max_context: read_u32(&mut r)? as usize,
            p_bits: read_u32(&mut r)?,
        };
        config.validate().map_err(|e| bad(format!("invalid stored config: {e}")))?;

        // a zero-seeded skeleton supplies the expected shapes
        let mut model = Model { weights: Weights::init(&config, 0), config };
        for tensor in model.weights.param_tensors_mut() {
            for slot in tensor.data_mut() {
                *slot = match elem_bits {
                    32 => {
                        let mut buf = [0u8; 4];
                        r.read_exact(&mut buf).map_err(|_| bad("truncated parameter block"))?;
                        T::from_f64(f32::from_le_bytes(buf) as f64)
                    }
                    _ => {
                        let mut buf = [0u8; 8];
                        r.read_exact(&mut buf).map_err(|_| bad("truncated parameter block"))?;
                        T::from_f64(f64::from_le_bytes(buf))
                    }
                };
            }
            tensor.ensure_finite("load_weights").map_err(|_| bad("non-finite parameter"))?;
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(bad("trailing data after parameter blocks"));
        }
        Ok(model)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| bad("truncated header"))?;
    Ok(u32::from_le_bytes(buf))
}
