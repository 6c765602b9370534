//! Finite-difference gradient verification.
//!
//! Numeric derivatives here are computed from forward evaluations only, so
//! they stay independent of the backward rules they are compared against.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{AbodeNet, Mode, ModelConfig, ParamGroup};
use crate::tensor::{Fault, Graph, Tensor};

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Smallest denominator used by [`relative_error`].
pub const ERROR_FLOOR: f64 = 1e-6;
/// Acceptance threshold for the end-to-end check.
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` with respect to every element of
/// `inputs[which]`.
pub fn central_difference(mut f: impl FnMut(&[Tensor]) -> f64, inputs: &[Tensor], which: usize, h: f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|i| {
            let orig = inputs[which].data()[i];
            work[which].data_mut()[i] = orig + h;
            let plus = f(&work);
            work[which].data_mut()[i] = orig - h;
            let minus = f(&work);
            work[which].data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    /// Coordinates sampled from each parameter tensor (all of them when the
    /// tensor is smaller).
    pub coords_per_tensor: usize,
    pub batch: usize,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl GradcheckOptions {
    pub fn new() -> Self {
        GradcheckOptions {
            coords_per_tensor: 24,
            batch: 2,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub group: ParamGroup,
    pub checked: usize,
    /// Coordinates skipped because `±h` straddled a ReLU or max-pool switch.
    pub skipped_nonsmooth: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub group: ParamGroup,
    pub tensors: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn group(&self, group: ParamGroup) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.group == group)
    }
}

/// Builds the default network with randomized parameters (including
/// non-zero attention scalars), draws a small random batch, and compares
/// backpropagated parameter gradients of the NLL loss against central
/// differences.
///
/// Batch norm runs on batch statistics and the spectral-norm vectors are
/// frozen, so the loss is a deterministic function of the parameters.
pub fn check_model(seed: u64, options: &GradcheckOptions) -> Result<GradcheckReport> {
    check_model_with(ModelConfig::default(), seed, options)
}

pub fn check_model_with(config: ModelConfig, seed: u64, options: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = AbodeNet::new(config.clone(), &mut rng)?;
    model.randomize_for_gradcheck(&mut rng);
    let (f, t) = (config.input_features, config.window);
    let batch = options.batch.max(1);
    let x = Tensor::from_fn([batch, 1, f, t], |_| rng.gen_range(0.0..1.0));
    let mut targets = Tensor::zeros([batch, config.classes]);
    for n in 0..batch {
        let class = n % config.classes;
        targets.data_mut()[n * config.classes + class] = 1.0;
    }

    let loss_of = |model: &mut AbodeNet| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = model.forward(&mut g, xv, Mode::TrainFrozen)?;
        let loss = g.nll_loss(out.log_probs, &targets)?;
        Ok((g.value(loss).data()[0], g.branch_signature()))
    };

    let mut g = Graph::new();
    if let Some(fault) = options.fault {
        g.inject_fault(fault);
    }
    let xv = g.constant(x.clone());
    let out = model.forward(&mut g, xv, Mode::TrainFrozen)?;
    let loss = g.nll_loss(out.log_probs, &targets)?;
    let base_signature = g.branch_signature();
    g.backward(loss)?;
    let analytic: Vec<(String, ParamGroup, Vec<f64>)> = model
        .params()
        .iter()
        .map(|(name, p)| {
            let var = out.params.get(name);
            let grad = g
                .grad(var)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            (name.clone(), p.group, grad)
        })
        .collect();

    let mut tensors = Vec::new();
    for (name, group, grad) in analytic {
        let numel = grad.len();
        let want = options.coords_per_tensor.max(1).min(numel);
        let mut order: Vec<usize> = if want == numel {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, numel.min(want * 4)).into_vec()
        };
        order.reverse();
        let mut checked = 0;
        let mut skipped = 0;
        let mut worst: f64 = 0.0;
        while checked < want {
            let Some(i) = order.pop() else { break };
            let orig = model.params().get(&name).expect("registered").value.data()[i];
            model.param_mut(&name).data_mut()[i] = orig + STEP;
            let (plus, sig_plus) = loss_of(&mut model)?;
            model.param_mut(&name).data_mut()[i] = orig - STEP;
            let (minus, sig_minus) = loss_of(&mut model)?;
            model.param_mut(&name).data_mut()[i] = orig;
            if sig_plus != base_signature || sig_minus != base_signature {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(grad[i], numeric));
            checked += 1;
        }
        tensors.push(TensorCheck {
            name,
            group,
            checked,
            skipped_nonsmooth: skipped,
            max_rel_error: worst,
        });
    }

    let groups = ParamGroup::ALL
        .iter()
        .map(|&group| {
            let members: Vec<&TensorCheck> = tensors.iter().filter(|t| t.group == group).collect();
            let max_rel_error = members.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
            let checked = members.iter().map(|t| t.checked).sum();
            GroupCheck {
                group,
                tensors: members.len(),
                checked,
                max_rel_error,
                passed: checked > 0 && max_rel_error < TOLERANCE,
            }
        })
        .collect();

    Ok(GradcheckReport {
        seed,
        tolerance: TOLERANCE,
        groups,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let x = Tensor::new([3], vec![-1.0, 0.5, 2.0]).unwrap();
        let g = central_difference(|t| t[0].data().iter().map(|v| v * v * v).sum(), &[x], 0, STEP);
        for (got, want) in g.iter().zip([3.0, 0.75, 12.0]) {
            assert!((got - want).abs() < 1e-7);
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 2e-9) - 1e-3).abs() < 1e-15);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
