//! SGD with Nesterov momentum and a milestone learning-rate schedule.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Scalar;

/// `lr₀ · decay^(milestones passed)`; a milestone counts from its own epoch on.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| epoch >= m).count();
    cfg.lr * cfg.lr_decay.powi(passed as i32)
}

/// Nesterov SGD in velocity form: `v ← μv + g`, `p ← p − lr·(g + μv)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdNesterov<S: Scalar = f32> {
    pub momentum: f64,
    /// One buffer per store entry; empty for buffers that are not trained.
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> SgdNesterov<S> {
    pub fn new(store: &ParamStore<S>, momentum: f64) -> Self {
        let velocity = store
            .ids()
            .map(|id| match store.kind(id) {
                ParamKind::Trainable => vec![S::zero(); store.get(id).numel()],
                ParamKind::Buffer => Vec::new(),
            })
            .collect();
        Self { momentum, velocity }
    }

    pub fn velocity(&self, id: ParamId) -> &[S] {
        &self.velocity[id.index()]
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Vec<S>) -> Result<()> {
        let slot = self
            .velocity
            .get_mut(id.index())
            .ok_or_else(|| Error::invalid(format!("no parameter {}", id.index())))?;
        if slot.len() != v.len() {
            return Err(Error::shape(format!(
                "velocity length {} does not match parameter length {}",
                v.len(),
                slot.len()
            )));
        }
        *slot = v;
        Ok(())
    }

    /// Updates every trainable parameter. Parameters missing from `grads`
    /// get a zero gradient (their velocity still decays).
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, &[S])], lr: f64) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::shape("optimizer state does not match the parameter store"));
        }
        let (mu, lr) = (S::from_f64(self.momentum), S::from_f64(lr));
        let mut by_id: Vec<Option<&[S]>> = vec![None; store.len()];
        for &(id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        for id in store.trainable_ids().collect::<Vec<_>>() {
            let v = &mut self.velocity[id.index()];
            let p = store.get_mut(id).data_mut();
            if let Some(g) = by_id[id.index()] {
                if g.len() != p.len() {
                    return Err(Error::shape(format!(
                        "gradient length {} does not match parameter length {}",
                        g.len(),
                        p.len()
                    )));
                }
            }
            for i in 0..p.len() {
                let g = by_id[id.index()].map_or(S::zero(), |g| g[i]);
                v[i] = mu * v[i] + g;
                p[i] = p[i] - lr * (g + mu * v[i]);
            }
        }
        Ok(())
    }
}
