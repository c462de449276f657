//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SPDR" | version u32 | tensor count u32
//! per tensor: name length u32 | UTF-8 name | rank u32 | extents u64×rank
//!             | dtype u8 (1 = f32, 2 = f64) | payload
//! metadata count u32 | per entry: key length u32 | key | value length u32 | value
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::concept::BiasMode;
use crate::error::{Error, Result};
use crate::networks::{ModelConfig, ModelParams, PromptEncoder};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SPDR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t.clone(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

/// Named tensors plus string metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, AnyTensor)>,
    pub metadata: BTreeMap<String, String>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    put_u32(out, t.shape().len() as u32);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&T::to_le_bytes_vec(t.data()));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            match t {
                AnyTensor::F32(t) => put_tensor(&mut out, t),
                AnyTensor::F64(t) => put_tensor(&mut out, t),
            }
        }
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Data(format!("tensor {name}: extents overflow")))?;
            let dtype = r.take(1)?[0];
            let t = if dtype == DType::F32 as u8 {
                let data = f32::from_le_bytes_slice(r.take(numel.saturating_mul(4))?);
                AnyTensor::F32(Tensor::new(shape, data).map_err(|e| Error::Data(format!("tensor {name}: {e}")))?)
            } else if dtype == DType::F64 as u8 {
                let data = f64::from_le_bytes_slice(r.take(numel.saturating_mul(8))?);
                AnyTensor::F64(Tensor::new(shape, data).map_err(|e| Error::Data(format!("tensor {name}: {e}")))?)
            } else {
                return Err(Error::Data(format!("tensor {name}: unknown dtype tag {dtype}")));
            };
            tensors.push((name, t));
        }
        let meta = r.u32()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..meta {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Every parameter and buffer of a model, with its architecture in the
    /// metadata.
    pub fn from_model(model: &ModelParams<f32>) -> Self {
        let tensors = model
            .store
            .entries()
            .iter()
            .map(|e| {
                let mut t = e.tensor.clone();
                t.set_requires_grad(false);
                (e.name.clone(), AnyTensor::F32(t))
            })
            .collect();
        let mut ckpt = Self {
            tensors,
            metadata: BTreeMap::new(),
        };
        write_model_config(&mut ckpt.metadata, &model.config);
        ckpt
    }

    /// Rebuilds the model stored by [`Checkpoint::from_model`].
    pub fn to_model(&self) -> Result<ModelParams<f32>> {
        let cfg = read_model_config(&self.metadata)?;
        let mut model = ModelParams::new(cfg, 0)?;
        let named: Vec<(String, Tensor<f32>)> = self.tensors.iter().map(|(n, t)| (n.clone(), t.to_f32())).collect();
        model.store.load_values(&named).map_err(|e| match e {
            Error::Dimension(m) => Error::Data(m),
            other => other,
        })?;
        Ok(model)
    }
}

fn write_model_config(meta: &mut BTreeMap<String, String>, c: &ModelConfig) {
    let widths: Vec<String> = c.encoder_widths.iter().map(|w| w.to_string()).collect();
    let entries = [
        ("model.in_channels", c.in_channels.to_string()),
        ("model.encoder_widths", widths.join(",")),
        ("model.context_width", c.context_width.to_string()),
        ("model.channels", c.channels.to_string()),
        ("model.blocks", c.blocks.to_string()),
        ("model.heads", c.heads.to_string()),
        ("model.ffn_mult", c.ffn_mult.to_string()),
        ("model.bias_mode", c.bias_mode.name().to_string()),
        (
            "model.prompt_encoder",
            match c.prompt_encoder {
                PromptEncoder::Shared => "shared",
                PromptEncoder::Independent => "independent",
            }
            .to_string(),
        ),
    ];
    for (k, v) in entries {
        meta.insert(k.to_string(), v);
    }
}

fn read_model_config(meta: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        meta.get(k)
            .ok_or_else(|| Error::Data(format!("checkpoint metadata lacks {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Data(format!("checkpoint metadata {k} is not a number")))
    };
    let widths = get("model.encoder_widths")?
        .split(',')
        .map(|w| w.parse().map_err(|_| Error::Data(format!("bad encoder width {w:?}"))))
        .collect::<Result<Vec<usize>>>()?;
    let prompt_encoder = match get("model.prompt_encoder")?.as_str() {
        "shared" => PromptEncoder::Shared,
        "independent" => PromptEncoder::Independent,
        other => return Err(Error::Data(format!("unknown prompt encoder {other:?}"))),
    };
    Ok(ModelConfig {
        in_channels: num("model.in_channels")?,
        encoder_widths: widths,
        context_width: num("model.context_width")?,
        channels: num("model.channels")?,
        blocks: num("model.blocks")?,
        heads: num("model.heads")?,
        ffn_mult: num("model.ffn_mult")?,
        bias_mode: BiasMode::parse(get("model.bias_mode")?).map_err(|e| Error::Data(e.to_string()))?,
        prompt_encoder,
    })
}
