//! Seeded parameter storage.
//!
//! `candle_nn::VarMap` draws initial values from a thread-local generator, so
//! two runs with the same configuration start from different weights. The
//! [`ParamStore`] here plugs into `VarBuilder` and draws every initial value
//! from a ChaCha stream instead, in parameter-creation order.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::VarBuilder;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::util::seeded_rng;

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Inner>,
}

struct Inner {
    vars: Mutex<HashMap<String, Var>>,
    rng: Mutex<ChaCha8Rng>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Inner {
                vars: Mutex::new(HashMap::new()),
                rng: Mutex::new(seeded_rng(seed)),
            }),
        }
    }

    pub fn var_builder(&self, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), DType::F32, device.clone())
    }

    /// Trainable variables sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let map = self.inner.vars.lock().expect("param lock");
        let mut out: Vec<_> = map.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Snapshot of current values sorted by name.
    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites every variable from `values`; names and shapes must match exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.vars();
        if vars.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                vars.len(),
                values.len()
            )));
        }
        for (name, var) in vars {
            let v = values
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if v.shape() != var.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    v.shape(),
                    var.shape()
                )));
            }
            var.set(&v.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    /// Sets one variable in place (e.g. zero-initialising an output layer).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let map = self.inner.vars.lock().expect("param lock");
        let var = map
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown variable `{name}`")))?;
        var.set(value)?;
        Ok(())
    }

    fn init_tensor(&self, shape: &Shape, init: Init, device: &Device) -> candle_core::Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = self.inner.rng.lock().expect("rng lock");
        let data: Vec<f32> = match init {
            Init::Const(c) => vec![c as f32; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up) as f32).collect(),
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| (mean + stdev * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => (0..n)
                        .map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32)
                        .collect(),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect()
                    }
                }
            }
        };
        Tensor::from_vec(data, shape.clone(), device)
    }
}

impl SimpleBackend for ParamStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        if let Some(v) = self.inner.vars.lock().expect("param lock").get(name) {
            if v.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs requested {s:?}", v.shape());
            }
            return v.as_tensor().to_dtype(dtype);
        }
        let t = self.init_tensor(&s, h, dev)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().to_dtype(dtype)?;
        self.inner
            .vars
            .lock()
            .expect("param lock")
            .insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.inner.vars.lock().expect("param lock").get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("cannot find tensor {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.inner.vars.lock().expect("param lock").contains_key(name)
    }
}

/// Largest absolute elementwise difference between two named-tensor lists.
pub fn max_abs_diff(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::Param("tensor lists differ in length".into()));
    }
    let mut worst = 0f32;
    for ((na, ta), (nb, tb)) in a.iter().zip(b) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(Error::Param(format!("tensor `{na}` does not match `{nb}`")));
        }
        let d = (ta - tb)?.abs()?.max_all()?.to_scalar::<f32>()?;
        worst = worst.max(d);
    }
    Ok(worst)
}
