//! Central finite-difference gradient checking over a parameter store.

use std::collections::HashMap;

use crate::autograd::{OpKind, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Denominator floor for the relative error of all-zero gradients.
const REL_FLOOR: f64 = 1e-8;
/// Step shrink factor and number of retries for kink-crossing entries.
const KINK_SHRINK: f64 = 1e-2;
const KINK_RETRIES: usize = 3;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Flip the backward rule of one op kind when computing analytic gradients.
    pub fault: Option<OpKind>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamError {
    pub name: String,
    pub numel: usize,
    /// `max|a - n| / max(max|a|, max|n|)` over the tensor.
    pub rel_error: f64,
    pub abs_error: f64,
    /// Same measure with every entry differenced at the nominal step.
    pub strict_rel_error: f64,
    /// Entries whose nominal-step difference changed a ReLU sign and were
    /// re-estimated with a smaller step.
    pub kink_entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    /// True when every parameter is within tolerance; vacuously true when empty.
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.rel_error < self.tolerance)
    }

    pub fn max_strict_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.strict_rel_error).fold(0.0, f64::max)
    }

    pub fn kink_entries(&self) -> usize {
        self.params.iter().map(|p| p.kink_entries).sum()
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.params.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences for every trainable tensor in `store`.
///
/// `f` may update buffers (batch-norm running statistics); they are restored
/// after every evaluation so each one sees the same state. Two evaluations at
/// the same point must agree bit for bit.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &mut ParamStore<f64>) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let buffers: Vec<_> = store
        .ids()
        .filter(|&id| store.kind(id) == ParamKind::Buffer)
        .map(|id| (id, store.get(id).clone()))
        .collect();
    let mut eval = |store: &mut ParamStore<f64>, tape: &mut Tape<f64>| -> Result<(Var, f64, Vec<bool>)> {
        let loss = f(tape, store)?;
        for (id, t) in &buffers {
            *store.get_mut(*id) = t.clone();
        }
        let value = tape.value(loss);
        if value.numel() != 1 {
            return Err(Error::shape(format!("grad_check needs a scalar, got {:?}", value.shape())));
        }
        let v = value.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok((loss, v, tape.relu_pattern()))
    };

    let mut tape = match opts.fault {
        Some(kind) => Tape::with_fault(kind),
        None => Tape::new(),
    };
    let (loss, base, pattern) = eval(store, &mut tape)?;
    tape.backward(loss)?;
    let analytic: HashMap<_, Vec<f64>> = tape.param_grads().into_iter().map(|(id, g)| (id, g.to_vec())).collect();
    drop(tape);

    let (_, again, _) = eval(store, &mut Tape::new())?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "objective changed between identical evaluations: {base} vs {again}"
        )));
    }

    let ids: Vec<_> = store.trainable_ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = store.get(id).numel();
        let mut numeric = vec![0.0; numel];
        let mut strict = vec![0.0; numel];
        let mut kink_entries = 0;
        for i in 0..numel {
            let orig = store.get(id).data()[i];
            let mut step = opts.step;
            for attempt in 0..=KINK_RETRIES {
                store.get_mut(id).data_mut()[i] = orig + step;
                let (_, plus, p_plus) = eval(store, &mut Tape::new())?;
                store.get_mut(id).data_mut()[i] = orig - step;
                let (_, minus, p_minus) = eval(store, &mut Tape::new())?;
                store.get_mut(id).data_mut()[i] = orig;
                let diff = (plus - minus) / (2.0 * step);
                if attempt == 0 {
                    strict[i] = diff;
                }
                numeric[i] = diff;
                if p_plus == pattern && p_minus == pattern {
                    break;
                }
                if attempt == 0 {
                    kink_entries += 1;
                }
                step *= KINK_SHRINK;
            }
        }
        let zeros = vec![0.0; numel];
        let a = analytic.get(&id).unwrap_or(&zeros);
        let (rel_error, abs_error) = relative_error(a, &numeric);
        let (strict_rel_error, _) = relative_error(a, &strict);
        params.push(ParamError {
            name: store.name(id).to_string(),
            numel,
            rel_error,
            abs_error,
            strict_rel_error,
            kink_entries,
        });
    }
    Ok(GradCheckReport {
        params,
        tolerance: opts.tolerance,
    })
}

fn relative_error(a: &[f64], n: &[f64]) -> (f64, f64) {
    let abs = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|v| v.abs()).fold(REL_FLOOR, f64::max);
    (abs / scale, abs)
}

/// Registers `t` as a trainable input so its gradient is checked too.
pub fn add_input(store: &mut ParamStore<f64>, name: &str, t: Tensor<f64>) -> Result<crate::ParamId> {
    store.add(name, t, ParamKind::Trainable)
}
