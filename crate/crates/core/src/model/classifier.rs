//! Global max pooling followed by a spectrally normalized affine layer.

use crate::error::{Result, TensorError};
use crate::tensor::{bilinear, Graph, Tensor, Var};

/// Result of power iteration on a `[rows, cols]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerIteration {
    /// Left singular vector estimate, length `rows`.
    pub u: Vec<f64>,
    /// Right singular vector estimate, length `cols`.
    pub v: Vec<f64>,
    /// `u^T W v`.
    pub sigma: f64,
}

fn normalize(mut x: Vec<f64>, eps: f64) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
    x.iter_mut().for_each(|v| *v /= norm);
    x
}

/// Runs `iters` steps of `v = norm(W^T u)`, `u = norm(W v)` from `u`.
pub fn power_iteration(w: &Tensor, u: &[f64], iters: usize, eps: f64) -> Result<PowerIteration> {
    let shape = w.shape();
    if shape.len() != 2 || shape[0] != u.len() {
        return Err(TensorError::shape(
            "power_iteration",
            format!("weight {shape:?} with u of length {}", u.len()),
        )
        .into());
    }
    let (rows, cols) = (shape[0], shape[1]);
    let data = w.data();
    let mut u = u.to_vec();
    let mut v = vec![0.0; cols];
    for _ in 0..iters.max(1) {
        let mut wt_u = vec![0.0; cols];
        for (row, ui) in data.chunks(cols).zip(&u) {
            wt_u.iter_mut().zip(row).for_each(|(acc, w)| *acc += w * ui);
        }
        v = normalize(wt_u, eps);
        let w_v: Vec<f64> = data
            .chunks(cols)
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        u = normalize(w_v, eps);
    }
    debug_assert_eq!(u.len(), rows);
    let sigma = bilinear(data, &u, &v);
    Ok(PowerIteration { u, v, sigma })
}

/// Divides `w` by its power-iteration estimate of the top singular value.
/// Returns the normalized matrix, the updated `u` and the estimate.
pub fn spectral_normalize(w: &Tensor, u: &[f64], iters: usize, eps: f64) -> Result<(Tensor, Vec<f64>, f64)> {
    let p = power_iteration(w, u, iters, eps)?;
    let denom = p.sigma.max(eps);
    let data = w.data().iter().map(|x| x / denom).collect();
    Ok((Tensor::new(w.shape().to_vec(), data)?, p.u, p.sigma))
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierOutput {
    pub pooled: Var,
    pub weight: Var,
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
}

/// `softmax(GMP(m) · (W / sigma) + b)` with `u`, `v` the current singular
/// vector estimates for `W`.
pub fn classify(
    g: &mut Graph,
    m: Var,
    weight: Var,
    bias: Var,
    u: &[f64],
    v: &[f64],
    eps: f64,
) -> Result<ClassifierOutput> {
    let pooled = g.global_max_pool(m)?;
    let normalized = g.spectral_scale(weight, u, v, eps)?;
    let logits = g.linear(pooled, normalized, Some(bias))?;
    let probs = g.softmax(logits);
    let log_probs = g.log_softmax(logits);
    Ok(ClassifierOutput {
        pooled,
        weight: normalized,
        logits,
        probs,
        log_probs,
    })
}
