use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::checkpoint::ArrayMap;
use crate::model::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay applied to weight matrices only.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Adam over one parameter group. A zero learning rate leaves the group
/// untouched, so frozen parameters stay bit-identical.
#[derive(Debug, Clone)]
pub struct AdamGroup {
    name: String,
    cfg: AdamConfig,
    state: BTreeMap<String, Moments>,
    t: u64,
}

impl AdamGroup {
    pub fn new(name: &str, cfg: AdamConfig) -> Self {
        AdamGroup {
            name: name.to_string(),
            cfg,
            state: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Squared L2 norm of this group's gradients.
    pub fn grad_sq_norm(&self, params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for (_, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                total += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
            }
        }
        Ok(total)
    }

    /// One update at learning rate `lr`, gradients multiplied by `grad_scale`.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        if lr == 0.0 {
            return Ok(());
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.flatten_all()?.to_vec1::<f32>()?;
            let mut p = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            });
            let decay = if var.rank() >= 2 { self.cfg.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let gi = g[i] as f64 * grad_scale;
                let m = b1 * st.m[i] as f64 + (1.0 - b1) * gi;
                let v = b2 * st.v[i] as f64 + (1.0 - b2) * gi * gi;
                st.m[i] = m as f32;
                st.v[i] = v as f32;
                let update = (m / bc1) / ((v / bc2).sqrt() + self.cfg.eps);
                let pi = p[i] as f64;
                p[i] = (pi - lr * (update + decay * pi)) as f32;
            }
            var.set(&Tensor::from_vec(p, var.dims(), var.device())?)?;
        }
        Ok(())
    }

    /// Moments as arrays `{group}/m/{param}` and `{group}/v/{param}`, plus the step count.
    pub fn export(&self, out: &mut ArrayMap) {
        for (k, st) in &self.state {
            out.insert(format!("{}/m/{k}", self.name), (vec![st.m.len()], st.m.clone()));
            out.insert(format!("{}/v/{k}", self.name), (vec![st.v.len()], st.v.clone()));
        }
        out.insert(format!("{}/t", self.name), (vec![1], vec![self.t as f32]));
    }

    pub fn import(&mut self, arrays: &ArrayMap) -> Result<()> {
        let prefix_m = format!("{}/m/", self.name);
        self.state.clear();
        for (k, (_, m)) in arrays.iter().filter(|(k, _)| k.starts_with(&prefix_m)) {
            let param = &k[prefix_m.len()..];
            let v = arrays
                .get(&format!("{}/v/{param}", self.name))
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {param}")))?;
            self.state.insert(
                param.to_string(),
                Moments {
                    m: m.clone(),
                    v: v.1.clone(),
                },
            );
        }
        self.t = arrays
            .get(&format!("{}/t", self.name))
            .map(|(_, t)| t[0] as u64)
            .unwrap_or(0);
        Ok(())
    }
}
