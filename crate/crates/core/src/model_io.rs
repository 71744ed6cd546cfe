//! Versioned binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SPNNMDL\0"
//! version   u32
//! hdr_len   u32
//! header    hdr_len bytes of JSON (architecture, dtype, section flags)
//! params    per layer: weights then bias, each value re then im
//! shift     input phase shifts as f64, if the header lists one
//! adam      moments m then v in parameter order, if the header lists them
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::circuit::CircuitCalibration;
use crate::complex_core::{ComplexTensor, ComplexValue, Real};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::phasor_net::{Layer, LayerSpec, PhaseShift, PhasorNetwork};

pub const MAGIC: &[u8; 8] = b"SPNNMDL\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShiftHeader {
    seed: u64,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    layers: Vec<LayerSpec>,
    input_shift: Option<ShiftHeader>,
    circuit: Option<CircuitCalibration>,
    optimizer: Option<OptimizerHeader>,
}

/// A network plus the state needed to resume training or rerun the circuit.
#[derive(Debug, Clone)]
pub struct ModelFile<T: Real> {
    pub network: PhasorNetwork<T>,
    pub optimizer: Option<AdamState<T>>,
    pub circuit: Option<CircuitCalibration>,
}

fn put_complex<T: Real>(out: &mut Vec<u8>, values: &[ComplexValue<T>]) {
    for z in values {
        z.re.to_le_bytes_vec(out);
        z.im.to_le_bytes_vec(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::ModelFormat(format!(
                "truncated {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn complex<T: Real>(&mut self, n: usize, what: &str) -> Result<Vec<ComplexValue<T>>> {
        let w = std::mem::size_of::<T>();
        let raw = self.take(2 * n * w, what)?;
        Ok(raw
            .chunks_exact(2 * w)
            .map(|c| ComplexValue::new(T::from_le_slice(&c[..w]), T::from_le_slice(&c[w..])))
            .collect())
    }
}

impl<T: Real> ModelFile<T> {
    pub fn new(network: PhasorNetwork<T>) -> Self {
        ModelFile {
            network,
            optimizer: None,
            circuit: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let header = Header {
            dtype: T::DTYPE.to_string(),
            layers: net.specs(),
            input_shift: net.input_shift().map(|s| ShiftHeader {
                seed: s.seed,
                len: s.shifts.len(),
            }),
            circuit: self.circuit,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for layer in net.layers() {
            put_complex(&mut out, layer.weights.data());
            put_complex(&mut out, layer.bias.data());
        }
        if let Some(s) = net.input_shift() {
            for v in &s.shifts {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(o) = &self.optimizer {
            for block in o.first_moment.iter().chain(&o.second_moment) {
                put_complex(&mut out, block);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(Error::ModelFormat(format!("bad magic {magic:?}")));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| Error::ModelFormat(format!("header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(Error::ModelFormat(format!(
                "stored dtype {} but {} requested",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut layers = Vec::with_capacity(header.layers.len());
        for spec in &header.layers {
            spec.validate()?;
            let wshape = spec.weight_shape();
            let wlen = wshape.iter().product();
            let weights = ComplexTensor::from_vec(&wshape, r.complex(wlen, "weights")?)?;
            let bias = ComplexTensor::from_vec(&[spec.bias_len()], r.complex(spec.bias_len(), "bias")?)?;
            layers.push(Layer {
                spec: *spec,
                weights,
                bias,
            });
        }
        let mut network = PhasorNetwork::from_layers(layers)?;
        if let Some(s) = &header.input_shift {
            let raw = r.take(8 * s.len, "input shift")?;
            let shifts = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            network = network.with_input_shift(Some(PhaseShift { seed: s.seed, shifts }))?;
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let lens: Vec<usize> = network.layers().iter().flat_map(|l| [l.weights.len(), l.bias.len()]).collect();
                let mut state = AdamState::new(o.config, &lens);
                state.step = o.step;
                for (block, &n) in state.first_moment.iter_mut().zip(&lens) {
                    *block = r.complex(n, "first moment")?;
                }
                for (block, &n) in state.second_moment.iter_mut().zip(&lens) {
                    *block = r.complex(n, "second moment")?;
                }
                Some(state)
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::ModelFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ModelFile {
            network,
            optimizer,
            circuit: header.circuit,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelFile::from_bytes(&bytes)
    }
}
