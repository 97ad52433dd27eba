//! Training objectives.
//!
//! The total loss is `info_nce + beta * l_m`: a symmetric contrastive term
//! that keeps positive pairs mutually identifiable, plus the mean squared
//! distance between paired embeddings. Under spherical Gaussian encoders
//! with shared variance `sigma^2`, `l_m / (2 sigma^2)` is the expected KL
//! divergence between the two conditional representation distributions,
//! which upper-bounds the information a representation keeps about its own
//! input.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::logsumexp;
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Every knob of the combined objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub beta: f64,
    pub temperature_init: f64,
    pub temperature_trainable: bool,
    pub normalize_embeddings: bool,
    pub sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 0.0,
            temperature_init: 0.07,
            temperature_trainable: true,
            normalize_embeddings: true,
            sigma: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.temperature_init > 0.0 && self.temperature_init.is_finite()) {
            return Err(Error::config(format!(
                "temperature_init must be > 0, got {}",
                self.temperature_init
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// How the contrastive logits are scaled.
#[derive(Clone, Copy, Debug)]
pub enum Temperature {
    Fixed(f64),
    /// Scalar node holding `log τ`; gradients flow into it.
    Log(Var),
}

fn inverse_temperature<T: Scalar>(tape: &mut Tape<T>, temperature: Temperature) -> Result<Var> {
    match temperature {
        Temperature::Fixed(t) => {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::config(format!("temperature must be > 0, got {t}")));
            }
            Ok(tape.constant(Tensor::scalar(T::from_f64(1.0 / t))))
        }
        Temperature::Log(log_t) => {
            let neg = tape.neg(log_t)?;
            tape.exp(neg)
        }
    }
}

fn check_pair<T: Scalar>(tape: &Tape<T>, za: Var, zb: Var, op: &str) -> Result<()> {
    let (a, b) = (tape.value(za), tape.value(zb));
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(Error::config(format!(
            "{op}: embeddings must be matching [n × d] matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Row-normalises `z` when `normalize` is set.
pub fn prepare<T: Scalar>(tape: &mut Tape<T>, z: Var, normalize: bool) -> Result<Var> {
    if normalize {
        tape.l2_normalize(z)
    } else {
        Ok(z)
    }
}

/// `s[i][k] = <z_alpha[i], z_beta[k]>`.
pub fn similarity<T: Scalar>(tape: &mut Tape<T>, za: Var, zb: Var) -> Result<Var> {
    check_pair(tape, za, zb, "similarity")?;
    let zbt = tape.transpose(zb)?;
    tape.matmul(za, zbt)
}

/// Symmetric InfoNCE: the mean of the alpha→beta and beta→alpha
/// cross-entropies with the diagonal as targets.
pub fn info_nce<T: Scalar>(tape: &mut Tape<T>, za: Var, zb: Var, temperature: Temperature) -> Result<Var> {
    let s = similarity(tape, za, zb)?;
    let inv_t = inverse_temperature(tape, temperature)?;
    let logits = tape.mul(s, inv_t)?;
    let lse_rows = tape.logsumexp(logits, Some(1))?;
    let lse_cols = tape.logsumexp(logits, Some(0))?;
    let diag = tape.diag(logits)?;
    let r = tape.mean(lse_rows, None)?;
    let c = tape.mean(lse_cols, None)?;
    let both = tape.add(r, c)?;
    let half = tape.scale(both, 0.5)?;
    let pos = tape.mean(diag, None)?;
    tape.sub(half, pos)
}

/// Mean squared Euclidean distance between paired rows.
pub fn l_m<T: Scalar>(tape: &mut Tape<T>, za: Var, zb: Var) -> Result<Var> {
    check_pair(tape, za, zb, "l_m")?;
    let diff = tape.sub(za, zb)?;
    let sq = tape.mul(diff, diff)?;
    let per_row = tape.sum(sq, Some(1))?;
    tape.mean(per_row, None)
}

/// Nodes of one evaluation of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub info_nce: Var,
    pub l_m: Var,
}

/// `info_nce + beta * l_m`, normalising the raw encoder outputs first when
/// asked to. The temperature only receives gradient through `info_nce`.
pub fn combined_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z_alpha: Var,
    z_beta: Var,
    temperature: Temperature,
    beta: f64,
    normalize: bool,
) -> Result<LossParts> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::config(format!("beta must be finite and >= 0, got {beta}")));
    }
    let za = prepare(tape, z_alpha, normalize)?;
    let zb = prepare(tape, z_beta, normalize)?;
    let nce = info_nce(tape, za, zb, temperature)?;
    let lm = l_m(tape, za, zb)?;
    let weighted = tape.scale(lm, beta)?;
    let total = tape.add(nce, weighted)?;
    Ok(LossParts {
        total,
        info_nce: nce,
        l_m: lm,
    })
}

/// `KL(N(mu_a, σ²I) || N(mu_b, σ²I)) = ||mu_a - mu_b||² / (2σ²)`.
pub fn kl_spherical_gaussian(mu_a: &[f64], mu_b: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config(format!("sigma must be > 0, got {sigma}")));
    }
    if mu_a.len() != mu_b.len() {
        return Err(Error::config("mean vectors differ in length"));
    }
    let sq: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (2.0 * sigma * sigma))
}

/// Square similarity matrix between two batches of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    s: Tensor<f64>,
}

impl SimilarityMatrix {
    pub fn new(s: Tensor<f64>) -> Result<Self> {
        if s.rank() != 2 || s.rows() != s.cols() {
            return Err(Error::config(format!(
                "similarity matrix must be square, got {:?}",
                s.shape()
            )));
        }
        if !s.is_finite() {
            return Err(Error::numeric("similarity", "non-finite entry"));
        }
        Ok(Self { s })
    }

    /// Cosine similarities when `normalize`, raw dot products otherwise.
    pub fn from_embeddings(za: &Tensor<f64>, zb: &Tensor<f64>, normalize: bool) -> Result<Self> {
        let mut tape = Tape::new();
        let a = tape.constant(za.clone());
        let b = tape.constant(zb.clone());
        let a = prepare(&mut tape, a, normalize)?;
        let b = prepare(&mut tape, b, normalize)?;
        let s = similarity(&mut tape, a, b)?;
        Self::new(tape.value(s).clone())
    }

    pub fn tensor(&self) -> &Tensor<f64> {
        &self.s
    }

    pub fn n(&self) -> usize {
        self.s.rows()
    }

    /// Mean over rows of `-(s_ii/τ' - logsumexp_k(s_ik/τ))`.
    pub fn dual_temp_info_nce(&self, tau_num: f64, tau_den: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let s = tape.constant(self.s.clone());
        let loss = dual_temp_info_nce(&mut tape, s, tau_num, tau_den)?;
        tape.value(loss).item()
    }
}

fn positive_temperature(t: f64, what: &str) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{what} must be > 0, got {t}")))
    }
}

/// Row-direction InfoNCE whose positive logit uses `tau_num` while the
/// normaliser uses `tau_den` throughout.
pub fn dual_temp_info_nce<T: Scalar>(tape: &mut Tape<T>, s: Var, tau_num: f64, tau_den: f64) -> Result<Var> {
    positive_temperature(tau_num, "numerator temperature")?;
    positive_temperature(tau_den, "denominator temperature")?;
    let scaled = tape.scale(s, 1.0 / tau_den)?;
    let lse = tape.logsumexp(scaled, Some(1))?;
    let lse_mean = tape.mean(lse, None)?;
    let diag = tape.diag(s)?;
    let pos = tape.mean(diag, None)?;
    let pos = tape.scale(pos, 1.0 / tau_num)?;
    tape.sub(lse_mean, pos)
}

fn pick<T: Scalar>(tape: &mut Tape<T>, row: Var, i: usize) -> Result<Var> {
    let n = tape.value(row).len();
    if i >= n {
        return Err(Error::config(format!("index {i} out of range for row of {n}")));
    }
    let mut onehot = vec![T::zero(); n];
    onehot[i] = T::one();
    let mask = tape.constant(Tensor::new(tape.value(row).shape().to_vec(), onehot)?);
    let masked = tape.mul(row, mask)?;
    tape.sum(masked, None)
}

/// Per-anchor combined loss on unit-norm embeddings, written in terms of
/// one similarity row: `-log softmax(s/τ)_i + 2β(1 - s_ii)`.
pub fn regularized_row_loss<T: Scalar>(tape: &mut Tape<T>, s_row: Var, i: usize, tau: f64, beta: f64) -> Result<Var> {
    positive_temperature(tau, "temperature")?;
    let scaled = tape.scale(s_row, 1.0 / tau)?;
    let lse = tape.logsumexp(scaled, None)?;
    let s_ii = pick(tape, s_row, i)?;
    let pos = tape.scale(s_ii, 1.0 / tau)?;
    let nce = tape.sub(lse, pos)?;
    // 2β(1 - s_ii) = 2β - 2β s_ii
    let reg = tape.scale(s_ii, -2.0 * beta)?;
    let two_beta = tape.constant(Tensor::scalar(T::from_f64(2.0 * beta)));
    let reg = tape.add(reg, two_beta)?;
    tape.add(nce, reg)
}

/// Per-anchor dual-temperature loss: `-(s_ii/τ' - logsumexp_k(s_ik/τ))`.
pub fn dual_temp_row_loss<T: Scalar>(tape: &mut Tape<T>, s_row: Var, i: usize, tau_num: f64, tau_den: f64) -> Result<Var> {
    positive_temperature(tau_num, "numerator temperature")?;
    positive_temperature(tau_den, "denominator temperature")?;
    let scaled = tape.scale(s_row, 1.0 / tau_den)?;
    let lse = tape.logsumexp(scaled, None)?;
    let s_ii = pick(tape, s_row, i)?;
    let pos = tape.scale(s_ii, 1.0 / tau_num)?;
    tape.sub(lse, pos)
}

/// Closed-form `∂/∂s_ii` of [`regularized_row_loss`]:
/// `-(1/τ)(1 - p_ii) - 2β` with `p = softmax(s/τ)`.
pub fn regularized_row_grad_ii(s_row: &[f64], i: usize, tau: f64, beta: f64) -> f64 {
    let p_ii = softmax_at(s_row, i, tau);
    -(1.0 - p_ii) / tau - 2.0 * beta
}

/// Closed-form `∂/∂s_ii` of [`dual_temp_row_loss`]:
/// `-1/τ' + p_ii/τ` with `p = softmax(s/τ)`.
pub fn dual_temp_row_grad_ii(s_row: &[f64], i: usize, tau_num: f64, tau_den: f64) -> f64 {
    -1.0 / tau_num + softmax_at(s_row, i, tau_den) / tau_den
}

fn softmax_at(s_row: &[f64], i: usize, tau: f64) -> f64 {
    let lse = logsumexp(s_row.iter().map(|&s| s / tau));
    (s_row[i] / tau - lse).exp()
}

/// Weight β at which the regularised loss and the dual-temperature loss
/// have the same gradient with respect to the positive similarity `s_ii`.
///
/// Equating the two closed forms above, the softmax term `p_ii / τ`
/// appears on both sides because the normaliser is shared, leaving
/// `β = (τ - τ') / (2 τ τ')` for every row. The row is still validated so
/// the call fails on the same inputs as the gradients it stands for.
/// Off-diagonal gradients of the two losses coincide for any β.
pub fn beta_from_temperatures(s_row: &[f64], i: usize, tau: f64, tau_prime: f64) -> Result<f64> {
    positive_temperature(tau, "temperature")?;
    positive_temperature(tau_prime, "numerator temperature")?;
    if i >= s_row.len() {
        return Err(Error::config(format!("index {i} out of range for row of {}", s_row.len())));
    }
    if s_row.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("beta_from_temperatures", "non-finite similarity"));
    }
    let p_ii = softmax_at(s_row, i, tau);
    // (g_regularized(β=0) - g_dual) / 2, kept in this form so the shared
    // softmax terms cancel exactly rather than by assumption.
    let g_plain = -(1.0 - p_ii) / tau;
    let g_dual = -1.0 / tau_prime + p_ii / tau;
    let beta = 0.5 * (g_plain - g_dual);
    if !beta.is_finite() {
        return Err(Error::numeric("beta_from_temperatures", "non-finite result"));
    }
    Ok(beta)
}
