//! Named parameter slots with paired gradient buffers, Adam state and a
//! binary checkpoint container.
//!
//! Slot names are namespaced with `/`, e.g. `enc/w0`, `prop/head2/h1`,
//! `fc/w`. Optimizer steps are restricted to a namespace list so the two
//! training branches only touch their own parameter groups.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug)]
pub struct Slot {
    value: Tensor,
    grad: Tensor,
    trainable: bool,
    adam: Option<AdamState>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classic Adam-L2: added to the gradient as `wd * theta`. Zero disables.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    slots: BTreeMap<String, Slot>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        let grad = Tensor::zeros_like(&value);
        self.slots.insert(name.to_string(), Slot { value, grad, trainable, adam: None });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::Argument(format!("unknown parameter slot `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| Error::Argument(format!("unknown parameter slot `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.grad)
            .ok_or_else(|| Error::Argument(format!("unknown parameter slot `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.fill(0.0);
        }
    }

    /// Adds backward-pass gradients into the slot gradient buffers.
    pub fn accumulate(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let slot = self
                .slots
                .get_mut(name)
                .ok_or_else(|| Error::Argument(format!("gradient for unknown slot `{name}`")))?;
            if slot.grad.shape() != g.shape() {
                return Err(Error::Argument(format!("gradient shape mismatch for `{name}`")));
            }
            for (a, b) in slot.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// One Adam update over trainable slots whose name starts with any of
    /// the given namespaces (e.g. `["enc", "prop"]`). Moments persist.
    pub fn adam_step(&mut self, namespaces: &[&str], cfg: &AdamConfig) {
        for (name, slot) in self.slots.iter_mut() {
            if !slot.trainable {
                continue;
            }
            if !namespaces.iter().any(|ns| {
                name == ns || name.starts_with(&format!("{ns}/"))
            }) {
                continue;
            }
            let n = slot.value.numel();
            let state = slot.adam.get_or_insert_with(|| AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            state.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
            for i in 0..n {
                let mut g = slot.grad.data()[i];
                if cfg.weight_decay != 0.0 {
                    g += cfg.weight_decay * slot.value.data()[i];
                }
                state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
                state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                slot.value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }

    // ---- checkpoint container ----
    //
    // Layout (all integers little-endian):
    //   magic "GPNSTORE", version u32, slot count u32
    //   per slot: name_len u32, name bytes, trainable u8,
    //             rank u32, dims u32 * rank, values f64 * numel
    //   moments section: per slot a u8 presence flag; when set,
    //             step u64, m f64 * numel, v f64 * numel

    const MAGIC: &'static [u8; 8] = b"GPNSTORE";
    const VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(Self::MAGIC)?;
        w.write_u32::<LittleEndian>(Self::VERSION)?;
        w.write_u32::<LittleEndian>(self.slots.len() as u32)?;
        for (name, slot) in &self.slots {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(slot.trainable as u8)?;
            let dims: Vec<u32> = match *slot.value.shape() {
                Shape::Scalar => vec![],
                Shape::Vector(n) => vec![n as u32],
                Shape::Matrix(r, c) => vec![r as u32, c as u32],
            };
            w.write_u32::<LittleEndian>(dims.len() as u32)?;
            for d in &dims {
                w.write_u32::<LittleEndian>(*d)?;
            }
            for v in slot.value.data() {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        for slot in self.slots.values() {
            match &slot.adam {
                None => w.write_u8(0)?,
                Some(state) => {
                    w.write_u8(1)?;
                    w.write_u64::<LittleEndian>(state.t)?;
                    for v in &state.m {
                        w.write_f64::<LittleEndian>(*v)?;
                    }
                    for v in &state.v {
                        w.write_f64::<LittleEndian>(*v)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Parse("bad checkpoint magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != Self::VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut store = ParameterStore::new();
        let mut order = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Parse("non-utf8 slot name".into()))?;
            let trainable = r.read_u8()? != 0;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let shape = match dims.len() {
                0 => Shape::Scalar,
                1 => Shape::Vector(dims[0]),
                2 => Shape::Matrix(dims[0], dims[1]),
                n => return Err(Error::Parse(format!("unsupported tensor rank {n}"))),
            };
            let numel = shape.numel();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.read_f64::<LittleEndian>()?);
            }
            let mut t = Tensor::zeros(shape);
            t.data_mut().copy_from_slice(&data);
            store.insert(&name, t, trainable);
            order.push(name);
        }
        for name in &order {
            let flag = r.read_u8()?;
            if flag != 0 {
                let t = r.read_u64::<LittleEndian>()?;
                let numel = store.value(name)?.numel();
                let mut m = Vec::with_capacity(numel);
                for _ in 0..numel {
                    m.push(r.read_f64::<LittleEndian>()?);
                }
                let mut v = Vec::with_capacity(numel);
                for _ in 0..numel {
                    v.push(r.read_f64::<LittleEndian>()?);
                }
                store.slots.get_mut(name).unwrap().adam = Some(AdamState { m, v, t });
            }
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_moments_leaves_params_unchanged() {
        let mut store = ParameterStore::new();
        store.insert("enc/w", Tensor::vector(vec![1.0, -2.0, 0.5]), true);
        store.zero_grad();
        store.adam_step(&["enc"], &AdamConfig::default());
        assert_eq!(store.value("enc/w").unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn single_scalar_adam_step_matches_recurrence() {
        let mut store = ParameterStore::new();
        store.insert("p", Tensor::scalar(0.7), true);
        store
            .accumulate(&BTreeMap::from([("p".to_string(), Tensor::scalar(1.0))]))
            .unwrap();
        let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
        store.adam_step(&["p"], &cfg);
        // Hand-evaluated: m=0.1, v=0.001, m_hat=1, v_hat=1, step = lr/(1+eps).
        let expected = 0.7 - 1e-3 * 1.0 / (1.0f64.sqrt() + 1e-8);
        assert!((store.value("p").unwrap().as_scalar() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_stores_step_identically() {
        let mut a = ParameterStore::new();
        a.insert("prop/h", Tensor::vector(vec![0.1, 0.2]), true);
        let mut b = a.clone();
        let g = BTreeMap::from([("prop/h".to_string(), Tensor::vector(vec![0.5, -0.3]))]);
        a.accumulate(&g).unwrap();
        b.accumulate(&g).unwrap();
        let cfg = AdamConfig { weight_decay: 1e-5, ..AdamConfig::default() };
        a.adam_step(&["prop"], &cfg);
        b.adam_step(&["prop"], &cfg);
        assert_eq!(a.value("prop/h").unwrap().data(), b.value("prop/h").unwrap().data());
    }

    #[test]
    fn namespace_filter_restricts_updates() {
        let mut store = ParameterStore::new();
        store.insert("enc/w", Tensor::scalar(1.0), true);
        store.insert("prop/w", Tensor::scalar(1.0), true);
        let g = BTreeMap::from([
            ("enc/w".to_string(), Tensor::scalar(1.0)),
            ("prop/w".to_string(), Tensor::scalar(1.0)),
        ]);
        store.accumulate(&g).unwrap();
        store.adam_step(&["enc"], &AdamConfig::default());
        assert!(store.value("enc/w").unwrap().as_scalar() < 1.0);
        assert_eq!(store.value("prop/w").unwrap().as_scalar(), 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_with_moments() {
        let mut store = ParameterStore::new();
        store.insert("enc/w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]), true);
        store.insert("mem/5", Tensor::vector(vec![0.25, -0.5]), false);
        let g = BTreeMap::from([(
            "enc/w".to_string(),
            Tensor::matrix(2, 2, vec![0.1, 0.0, -0.1, 0.2]),
        )]);
        store.accumulate(&g).unwrap();
        store.adam_step(&["enc"], &AdamConfig::default());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        store.save(&path).unwrap();
        let loaded = ParameterStore::load(&path).unwrap();
        assert_eq!(loaded.value("enc/w").unwrap(), store.value("enc/w").unwrap());
        assert_eq!(loaded.value("mem/5").unwrap(), store.value("mem/5").unwrap());
        // A further identical step must agree, so moments made the trip.
        let g2 = BTreeMap::from([(
            "enc/w".to_string(),
            Tensor::matrix(2, 2, vec![0.3, -0.2, 0.0, 0.1]),
        )]);
        let mut a = store.clone();
        let mut b = loaded;
        a.zero_grad();
        b.zero_grad();
        a.accumulate(&g2).unwrap();
        b.accumulate(&g2).unwrap();
        a.adam_step(&["enc"], &AdamConfig::default());
        b.adam_step(&["enc"], &AdamConfig::default());
        assert_eq!(a.value("enc/w").unwrap(), b.value("enc/w").unwrap());
    }
}
