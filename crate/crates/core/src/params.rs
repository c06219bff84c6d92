//! Named parameter storage, the Adam optimizer and the binary checkpoint format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Trainable tensors with gradient accumulators and Adam moment buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    step: u64,
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.id_of(&name).is_some() {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let n = value.len();
        self.slots.push(Slot {
            name,
            grad: Tensor::zeros(value.shape()),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(ParamId(self.slots.len() - 1))
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].grad
    }

    /// Number of completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f32]) {
        let slot = &mut self.slots[id.0];
        debug_assert_eq!(slot.grad.len(), g.len());
        for (dst, &src) in slot.grad.data_mut().iter_mut().zip(g) {
            *dst += src;
        }
        self.grads_ready = true;
    }

    pub fn zero_grad(&mut self) {
        for slot in &mut self.slots {
            slot.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_ready = false;
    }

    /// One bias-corrected Adam update over every parameter; gradients are
    /// zeroed afterwards. Fails if no backward pass has filled the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        if !self.grads_ready {
            return Err(Error::contract("adam_step called without populated gradients"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let lr = cfg.learning_rate as f64;
        let eps = cfg.epsilon as f64;
        for slot in &mut self.slots {
            let grads = slot.grad.data();
            let values = slot.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i] as f64;
                let m = b1 * slot.m[i] as f64 + (1.0 - b1) * g;
                let v = b2 * slot.v[i] as f64 + (1.0 - b2) * g * g;
                slot.m[i] = m as f32;
                slot.v[i] = v as f32;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                values[i] = (values[i] as f64 - update) as f32;
            }
        }
        self.zero_grad();
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            records: self
                .slots
                .iter()
                .map(|s| (s.name.clone(), s.value.clone()))
                .collect(),
        }
    }

    /// Overwrites parameter values from a checkpoint; every parameter must be
    /// present with a matching shape.
    pub fn load_values(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for slot in &mut self.slots {
            let t = ckpt
                .get(&slot.name)
                .ok_or_else(|| Error::format(format!("checkpoint lacks parameter `{}`", slot.name)))?;
            if t.shape() != slot.value.shape() {
                return Err(Error::Dimension {
                    op: "load_values",
                    left: slot.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            slot.value = t.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f32| b > 0.0 && b < 1.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::domain(format!(
                "Adam betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::domain(format!("Adam epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ROOD";
const CHECKPOINT_VERSION: u16 = 1;
const META_PREFIX: &str = "meta.";

/// An ordered list of named tensors. Scalar metadata is stored as
/// single-element records whose names start with `meta.`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set_meta(&mut self, key: &str, value: f32) {
        let name = format!("{META_PREFIX}{key}");
        self.records.retain(|(n, _)| *n != name);
        self.records.push((name, Tensor::scalar(value)));
    }

    pub fn meta(&self, key: &str) -> Option<f32> {
        self.get(&format!("{META_PREFIX}{key}"))
            .and_then(|t| t.item().ok())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, t) in &self.records {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::format(format!("record name too long: {} bytes", name.len())))?;
            let rank = u8::try_from(t.rank())
                .map_err(|_| Error::format(format!("rank {} does not fit in a byte", t.rank())))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::format(format!("dimension {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("bad checkpoint magic"));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let mut records = Vec::new();
        while !r.is_done() {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("record name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f32()?);
            }
            records.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Little-endian cursor over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::format(format!("truncated input at byte {}", self.pos)));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_store(v: f32) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn adam_requires_gradients() {
        let (mut s, _) = scalar_store(1.0);
        assert!(matches!(s.adam_step(&AdamConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let (mut s, id) = scalar_store(0.25);
        s.accumulate_grad(id, &[0.0]);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.value(id).data(), &[0.25]);
        assert_eq!(s.step_count(), 1);
        assert!(!s.grads_ready());
    }

    #[test]
    fn adam_single_step_matches_hand_formula() {
        let cfg = AdamConfig::with_lr(0.1);
        let (mut s, id) = scalar_store(1.0);
        s.accumulate_grad(id, &[1.0]);
        s.adam_step(&cfg).unwrap();
        // m = 0.1, v = 0.001; bias-corrected m̂ = 1, v̂ = 1.
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let m_hat = (1.0 - b1) / (1.0 - b1);
        let v_hat = (1.0 - b2) / (1.0 - b2);
        let expected = 1.0 - 0.1 * m_hat / (v_hat.sqrt() + eps);
        assert!((s.value(id).data()[0] as f64 - expected).abs() < 1e-6);
        assert_eq!(s.grad(id).data(), &[0.0]);
    }

    #[test]
    fn adam_constant_gradient_is_monotone() {
        let (mut s, id) = scalar_store(0.0);
        let mut prev = 0.0;
        for _ in 0..50 {
            s.accumulate_grad(id, &[-0.3]);
            s.adam_step(&AdamConfig::with_lr(0.01)).unwrap();
            let now = s.value(id).data()[0];
            assert!(now > prev);
            prev = now;
        }
    }

    #[test]
    fn adam_config_validation() {
        let mut cfg = AdamConfig::default();
        cfg.beta1 = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = AdamConfig::default();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOPE\x01\x00").is_err());
        let mut ok = Checkpoint::default();
        ok.set_meta("d", 32.0);
        let mut bytes = ok.to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn checkpoint_header_layout() {
        let mut c = Checkpoint::default();
        c.records.push(("ab".into(), Tensor::matrix(1, 2, vec![1.0, -2.5]).unwrap()));
        let bytes = c.to_bytes().unwrap();
        let mut expected = b"ROOD".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(2);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            dims in proptest::collection::vec(1usize..5, 1..4),
            seed_bits in proptest::collection::vec(any::<u32>(), 64),
            name in "[a-z.]{1,12}",
        ) {
            let n: usize = dims.iter().product();
            // Arbitrary bit patterns, NaN payloads included, must survive.
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed_bits[i % seed_bits.len()])).collect();
            let t = Tensor::new(dims, data).unwrap();
            let c = Checkpoint { records: vec![(name, t)] };
            let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.records.len(), 1);
            prop_assert_eq!(&back.records[0].0, &c.records[0].0);
            prop_assert_eq!(back.records[0].1.shape(), c.records[0].1.shape());
            let a: Vec<u32> = back.records[0].1.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = c.records[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
