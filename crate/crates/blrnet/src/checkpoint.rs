//! Binary checkpoint files for trainable models and deterministic nets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BLRN" | version u32 | kind u8 | mode u8 | batch_norm u8 | bias u8 | reestimated u8
//! input 3 x u32 | arch str | seed u64
//! metadata: count u32, then (key str, value str)
//! blocks:   count u32, then name str | dtype u8 | rank u32 | dims u64... | payload len u64 | payload
//! crc32 of everything before it, u32
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8. Payloads are raw
//! little-endian `f64` or `f32` values, or packed sign bits (`+1` = 1,
//! least significant bit first) in `u64` words.

use std::path::Path;

use blrnet_core::arch::{ModelSpec, NetMode};
use blrnet_core::bitpack;
use blrnet_core::export::{DetStage, DeterministicBinaryNet};
use blrnet_core::model::Model;
use blrnet_core::norm_pool::BnParams;
use blrnet_core::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BLRN";
pub const VERSION: u32 = 1;

const WHAT: &str = "checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// A trainable model (binary weight logits or real weights).
    Model,
    /// A deterministic `±1` network.
    Net,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
    Bits,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
            Dtype::Bits => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::F32),
            2 => Some(Dtype::Bits),
            _ => None,
        }
    }
}

/// A named tensor and its on-disk element type. Values are held as `f64`;
/// `F32` blocks round on write and `Bits` blocks must be `±1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub spec: ModelSpec,
    pub bn_reestimated: bool,
    pub seed: u64,
    pub metadata: Vec<(String, String)>,
    pub blocks: Vec<Block>,
}

fn f64_block(name: String, t: &Tensor) -> Block {
    Block {
        name,
        dtype: Dtype::F64,
        tensor: t.clone(),
    }
}

fn scalar_block(name: String, v: f64) -> Block {
    f64_block(name, &Tensor::from_vec(vec![v]))
}

fn push_bn(blocks: &mut Vec<Block>, i: usize, bn: &BnParams) {
    blocks.push(f64_block(format!("hidden.{i}.bn.gamma"), &bn.gamma));
    blocks.push(f64_block(format!("hidden.{i}.bn.beta"), &bn.beta));
    blocks.push(f64_block(format!("hidden.{i}.bn.running_mean"), &bn.running_mean));
    blocks.push(f64_block(format!("hidden.{i}.bn.running_var"), &bn.running_var));
    blocks.push(scalar_block(format!("hidden.{i}.bn.eps"), bn.eps));
    blocks.push(scalar_block(format!("hidden.{i}.bn.momentum"), bn.momentum));
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, metadata: Vec<(String, String)>) -> Self {
        let mut blocks = Vec::new();
        for (i, layer) in model.hidden.iter().enumerate() {
            blocks.push(f64_block(format!("hidden.{i}.weight"), &layer.weight));
            if let Some(b) = &layer.bias {
                blocks.push(f64_block(format!("hidden.{i}.bias"), b));
            }
            if let Some(bn) = &layer.bn {
                push_bn(&mut blocks, i, bn);
            }
        }
        blocks.push(f64_block("softmax.weight".into(), &model.softmax_weight));
        blocks.push(f64_block("softmax.bias".into(), &model.softmax_bias));
        Self {
            kind: Kind::Model,
            spec: model.spec().clone(),
            bn_reestimated: false,
            seed,
            metadata,
            blocks,
        }
    }

    /// Binary weights are stored packed, one bit per weight.
    pub fn from_net(net: &DeterministicBinaryNet, seed: u64, metadata: Vec<(String, String)>) -> Self {
        let mut blocks = Vec::new();
        for (i, st) in net.stages.iter().enumerate() {
            blocks.push(Block {
                name: format!("hidden.{i}.weight"),
                dtype: Dtype::Bits,
                tensor: st.weights.clone(),
            });
            if let Some(b) = &st.bias {
                blocks.push(f64_block(format!("hidden.{i}.bias"), b));
            }
            if let Some(bn) = &st.bn {
                push_bn(&mut blocks, i, bn);
            }
        }
        blocks.push(f64_block("softmax.weight".into(), &net.softmax_weight));
        blocks.push(f64_block("softmax.bias".into(), &net.softmax_bias));
        Self {
            kind: Kind::Net,
            spec: net.spec().clone(),
            bn_reestimated: net.bn_reestimated,
            seed,
            metadata,
            blocks,
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn block(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let b = self
            .blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Config(format!("checkpoint has no block {name:?}")))?;
        if b.tensor.shape() != shape {
            return Err(Error::Config(format!("block {name:?} has shape {:?}, expected {:?}", b.tensor.shape(), shape)));
        }
        Ok(b.tensor.clone())
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.block(name, &[1])?.data()[0])
    }

    fn bn(&self, i: usize, channels: usize) -> Result<BnParams> {
        let c = [channels];
        let bn = BnParams {
            gamma: self.block(&format!("hidden.{i}.bn.gamma"), &c)?,
            beta: self.block(&format!("hidden.{i}.bn.beta"), &c)?,
            running_mean: self.block(&format!("hidden.{i}.bn.running_mean"), &c)?,
            running_var: self.block(&format!("hidden.{i}.bn.running_var"), &c)?,
            eps: self.scalar(&format!("hidden.{i}.bn.eps"))?,
            momentum: self.scalar(&format!("hidden.{i}.bn.momentum"))?,
        };
        bn.validate()?;
        Ok(bn)
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.kind != Kind::Model {
            return Err(Error::Config("checkpoint holds a deterministic net, not a trainable model".into()));
        }
        let mut model = Model::zeros(self.spec.clone())?;
        let plan = model.plan().clone();
        for (i, (layer, st)) in model.hidden.iter_mut().zip(&plan.stages).enumerate() {
            layer.weight = self.block(&format!("hidden.{i}.weight"), &st.weight_shape())?;
            if layer.bias.is_some() {
                layer.bias = Some(self.block(&format!("hidden.{i}.bias"), &[st.channels()])?);
            }
            if layer.bn.is_some() {
                layer.bn = Some(self.bn(i, st.channels())?);
            }
        }
        model.softmax_weight = self.block("softmax.weight", &[plan.classes, plan.softmax_in])?;
        model.softmax_bias = self.block("softmax.bias", &[plan.classes])?;
        Ok(model)
    }

    pub fn to_net(&self) -> Result<DeterministicBinaryNet> {
        if self.kind != Kind::Net {
            return Err(Error::Config("checkpoint holds a trainable model, not a deterministic net".into()));
        }
        let plan = self.spec.plan()?;
        let mut stages = Vec::with_capacity(plan.stages.len());
        for (i, st) in plan.stages.iter().enumerate() {
            stages.push(DetStage {
                weights: self.block(&format!("hidden.{i}.weight"), &st.weight_shape())?,
                bias: match self.spec.bias {
                    true => Some(self.block(&format!("hidden.{i}.bias"), &[st.channels()])?),
                    false => None,
                },
                bn: match self.spec.batch_norm {
                    true => Some(self.bn(i, st.channels())?),
                    false => None,
                },
            });
        }
        let mut net = DeterministicBinaryNet::new(
            self.spec.clone(),
            stages,
            self.block("softmax.weight", &[plan.classes, plan.softmax_in])?,
            self.block("softmax.bias", &[plan.classes])?,
        )?;
        net.bn_reestimated = self.bn_reestimated;
        Ok(net)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.kind {
            Kind::Model => 0,
            Kind::Net => 1,
        });
        out.push(match self.spec.mode {
            NetMode::Binary => 0,
            NetMode::FullPrecision => 1,
        });
        out.push(self.spec.batch_norm as u8);
        out.push(self.spec.bias as u8);
        out.push(self.bn_reestimated as u8);
        for d in self.spec.input {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_str(&mut out, &self.spec.arch_string());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            put_str(&mut out, &b.name);
            out.push(b.dtype.code());
            out.extend_from_slice(&(b.tensor.shape().len() as u32).to_le_bytes());
            for &d in b.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let payload = encode_payload(b)?;
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(WHAT, 0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(WHAT, 4, format!("unsupported version {version}")));
        }
        let kind = match r.u8()? {
            0 => Kind::Model,
            1 => Kind::Net,
            k => return Err(r.err(1, format!("unknown kind {k}"))),
        };
        let mode = match r.u8()? {
            0 => NetMode::Binary,
            1 => NetMode::FullPrecision,
            m => return Err(r.err(1, format!("unknown mode {m}"))),
        };
        let batch_norm = r.flag()?;
        let bias = r.flag()?;
        let bn_reestimated = r.flag()?;
        let input = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let arch_at = r.pos;
        let arch = r.string()?;
        let spec = ModelSpec::parse(&arch, input)
            .map_err(|e| Error::format(WHAT, arch_at as u64, e.to_string()))?
            .with_mode(mode)
            .with_batch_norm(batch_norm)
            .with_bias(bias);
        let seed = r.u64()?;
        let n_meta = r.u32()?;
        let mut metadata = Vec::new();
        for _ in 0..n_meta {
            metadata.push((r.string()?, r.string()?));
        }
        let n_blocks = r.u32()?;
        let mut blocks = Vec::new();
        for _ in 0..n_blocks {
            blocks.push(r.block()?);
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(r.err(0, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if crc32fast::hash(&bytes[..body_end]) != stored {
            return Err(Error::format(WHAT, body_end as u64, "checksum mismatch"));
        }
        Ok(Self {
            kind,
            spec,
            bn_reestimated,
            seed,
            metadata,
            blocks,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode_payload(b: &Block) -> Result<Vec<u8>> {
    let data = b.tensor.data();
    Ok(match b.dtype {
        Dtype::F64 => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        Dtype::F32 => data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
        Dtype::Bits => bitpack::pack(&b.tensor)?.words().iter().flat_map(|w| w.to_le_bytes()).collect(),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// An error about the field that started `back` bytes ago.
    fn err(&self, back: usize, detail: impl Into<String>) -> Error {
        Error::format(WHAT, (self.pos - back) as u64, detail)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                WHAT,
                self.pos as u64,
                format!("truncated: needed {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(1, format!("flag byte {v} is neither 0 nor 1"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(WHAT, at as u64, "string is not UTF-8"))
    }

    fn block(&mut self) -> Result<Block> {
        let name = self.string()?;
        let dtype = Dtype::from_code(self.u8()?).ok_or_else(|| self.err(1, "unknown dtype"))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| self.err(8, "shape overflows"))?;
        let expected = match dtype {
            Dtype::F64 => len.checked_mul(8),
            Dtype::F32 => len.checked_mul(4),
            Dtype::Bits => len.div_ceil(64).checked_mul(8),
        };
        let size = self.u64()?;
        if expected != Some(size as usize) {
            return Err(self.err(8, format!("block {name:?} payload of {size} bytes does not match shape {shape:?}")));
        }
        let payload_at = self.pos;
        let payload = self.take(size as usize)?;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Dtype::Bits => {
                let words: Vec<u64> = payload.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
                (0..len).map(|i| if words[i / 64] >> (i % 64) & 1 == 1 { 1.0 } else { -1.0 }).collect()
            }
        };
        let tensor = Tensor::new(shape, data).map_err(|e| Error::format(WHAT, payload_at as u64, e.to_string()))?;
        Ok(Block { name, dtype, tensor })
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use blrnet_core::export::{export, ExportMode};
    use blrnet_core::train::xavier_init;
    use blrnet_core::RngStream;

    fn small_model() -> Model {
        let spec = ModelSpec::parse("4C3-MP2-8FC-SM3", [1, 6, 6]).unwrap().with_bias(true);
        let mut m = xavier_init(&spec, 3).unwrap();
        m.hidden[0].bn.as_mut().unwrap().running_mean = Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.25]);
        m
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let m = small_model();
        let c = Checkpoint::from_model(&m, 9, vec![("k".into(), "v".into())]);
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back, c);
        let m2 = back.to_model().unwrap();
        for ((_, a), (_, b)) in m.params().iter().zip(m2.params().iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(m2, m);
    }

    #[test]
    fn net_round_trip() {
        let m = small_model();
        let mut net = export(&m, ExportMode::Sample, &mut RngStream::new(1)).unwrap();
        net.bn_reestimated = true;
        let c = Checkpoint::from_net(&net, 1, vec![]);
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap().to_net().unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::from_model(&small_model(), 0, vec![]).encode().unwrap();
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(Checkpoint::decode(&v).unwrap_err().to_string().contains("version"));
        let mut v = bytes.clone();
        let k = v.len() - 20;
        v[k] ^= 1;
        assert!(Checkpoint::decode(&v).unwrap_err().to_string().contains("checksum"));
        let err = Checkpoint::decode(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Format { offset, .. } if offset > 0));
    }

    #[test]
    fn f32_blocks_round() {
        let mut c = Checkpoint::from_model(&small_model(), 0, vec![]);
        c.blocks[0].dtype = Dtype::F32;
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        let want: Vec<f64> = c.blocks[0].tensor.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(back.blocks[0].tensor.data(), &want[..]);
    }
}
