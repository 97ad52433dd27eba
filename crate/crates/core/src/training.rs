//! Optimisation loop: fresh batches every step, Adam, step-decay schedule,
//! then a frozen-encoder evaluation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::datasets::{sample_batch, PairBatch, Scenario};
use crate::encoders::{EncoderStack, MlpConfig, DEFAULT_REPR_DIM, DEFAULT_WIDTH};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossConfig, Temperature};
use crate::metrics::{cka, essence_metrics, urr, FactorLabels, Kernel, MetricsReport, ProbeConfig};
use crate::seed::stable_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    pub learning_rate: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub adam_betas: (f64, f64),
    pub adam_epsilon: f64,
    pub loss: LossConfig,
    /// Hidden widths of the encoder for the rich modality.
    pub alpha_hidden: Vec<usize>,
    /// Hidden widths of the encoder for the factor modality.
    pub beta_hidden: Vec<usize>,
    pub repr_dim: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            samples_per_epoch: 12_800,
            learning_rate: 1e-3,
            step_size: 20,
            gamma: 0.3,
            adam_betas: (0.9, 0.999),
            adam_epsilon: 1e-8,
            loss: LossConfig::default(),
            alpha_hidden: vec![DEFAULT_WIDTH; 2],
            beta_hidden: vec![DEFAULT_WIDTH; 2],
            repr_dim: DEFAULT_REPR_DIM,
            eval_samples: 4096,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("samples_per_epoch", self.samples_per_epoch),
            ("step_size", self.step_size),
            ("repr_dim", self.repr_dim),
            ("eval_samples", self.eval_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.gamma > 0.0) || !(self.adam_epsilon > 0.0) {
            return Err(Error::config("learning_rate, gamma and adam_epsilon must be > 0"));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::config("adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.samples_per_epoch / self.batch_size).max(1)
    }

    /// `lr₀ · γ^⌊epoch / step_size⌋`
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.gamma.powi((epoch / self.step_size) as i32)
    }

    pub fn alpha_config(&self, scenario: &Scenario) -> MlpConfig {
        MlpConfig::new(scenario.alpha_dim(), self.alpha_hidden.clone(), self.repr_dim)
    }

    pub fn beta_config(&self, scenario: &Scenario) -> MlpConfig {
        MlpConfig::new(scenario.beta_dim(), self.beta_hidden.clone(), self.repr_dim)
    }

    /// Depth of the rich-modality encoder.
    pub fn alpha_depth(&self) -> usize {
        self.alpha_hidden.len() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut AdamState<T>,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::config("adam: parameter, gradient and state counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::config(format!("adam: tensor {i} has mismatched lengths")));
        }
        if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(
                "adam_step",
                format!("non-finite gradient in tensor {i} at element {bad}"),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64(hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let c1 = T::from_f64(1.0 / (1.0 - hp.beta1.powi(t)));
    let c2 = T::from_f64(1.0 / (1.0 - hp.beta2.powi(t)));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(hp.epsilon);
    let one = T::one();
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let m_hat = m[k] * c1;
            let v_hat = v[k] * c2;
            p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

impl<T: Scalar> EncoderStack<T> {
    /// Mutable views of every trainable tensor, in the order of the
    /// gradients returned by [`loss_and_grads`]. The temperature is last and
    /// only present when trainable.
    fn trainable_slices(&mut self) -> Vec<&mut [T]> {
        let trainable = self.temperature_trainable;
        let mut out: Vec<&mut [T]> = Vec::new();
        for mlp in [&mut self.alpha, &mut self.beta] {
            for l in mlp.layers_mut() {
                out.push(l.weight.data_mut());
                out.push(l.bias.data_mut());
            }
        }
        if trainable {
            out.push(std::slice::from_mut(&mut self.log_temperature));
        }
        out
    }

    fn trainable_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = [&self.alpha, &self.beta]
            .iter()
            .flat_map(|m| m.layers().iter().flat_map(|l| [l.weight.len(), l.bias.len()]))
            .collect();
        if self.temperature_trainable {
            sizes.push(1);
        }
        sizes
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult<T: Scalar> {
    pub stack: EncoderStack<T>,
    pub loss_history: Vec<f64>,
    pub temperature_history: Vec<f64>,
    pub report: MetricsReport,
}

/// Loss value and parameter gradients of one training step.
pub struct StepOutput<T> {
    pub loss: f64,
    pub grads: Vec<Vec<T>>,
}

/// Forward and backward pass of the combined loss on one batch. Gradients
/// are ordered like the stack's trainable tensors.
pub fn loss_and_grads<T: Scalar>(
    stack: &EncoderStack<T>,
    batch: &PairBatch,
    loss: &LossConfig,
) -> Result<StepOutput<T>> {
    let mut tape = Tape::<T>::new();
    let va = stack.alpha.attach(&mut tape);
    let vb = stack.beta.attach(&mut tape);
    let log_t = tape.leaf(Tensor::scalar(stack.log_temperature), stack.temperature_trainable);
    let xa = tape.constant(batch.x_alpha.cast());
    let xb = tape.constant(batch.x_beta.cast());
    let za = va.encode(&mut tape, xa)?;
    let zb = vb.encode(&mut tape, xb)?;
    let parts = combined_loss(
        &mut tape,
        za,
        zb,
        Temperature::Log(log_t),
        loss.beta,
        loss.normalize_embeddings,
    )?;
    let value = tape.value(parts.total).item()?.to_f64();
    tape.backward(parts.total)?;
    let mut vars: Vec<_> = va.params().chain(vb.params()).collect();
    if stack.temperature_trainable {
        vars.push(log_t);
    }
    let grads = vars
        .into_iter()
        .map(|v| {
            tape.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); tape.value(v).len()])
        })
        .collect();
    Ok(StepOutput { loss: value, grads })
}

fn batch_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    stable_hash(seed, &format!("train/{epoch}/{step}"))
}

/// Trains both encoders on `scenario` and evaluates the result.
pub fn train<T: Scalar>(config: &TrainConfig, scenario: &Scenario) -> Result<RunResult<T>> {
    train_with_log(config, scenario, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with_log<T: Scalar>(
    config: &TrainConfig,
    scenario: &Scenario,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<RunResult<T>> {
    config.validate()?;
    let mut stack = EncoderStack::<T>::init(
        &config.alpha_config(scenario),
        &config.beta_config(scenario),
        config.loss.temperature_init,
        config.loss.temperature_trainable,
        stable_hash(config.seed, "init"),
    )?;
    let hp = AdamParams {
        beta1: config.adam_betas.0,
        beta2: config.adam_betas.1,
        epsilon: config.adam_epsilon,
    };
    let mut state = AdamState::<T>::new(stack.trainable_sizes());
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut temperature_history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        let mut total = 0.0;
        let steps = config.steps_per_epoch();
        for step in 0..steps {
            let batch = sample_batch(scenario, config.batch_size, batch_seed(config.seed, epoch, step))?;
            let out = loss_and_grads(&stack, &batch, &config.loss).map_err(|e| match e {
                Error::Numeric { op, detail } => Error::numeric(
                    op,
                    format!("{detail} (epoch {epoch}, batch {step})"),
                ),
                other => other,
            })?;
            if !out.loss.is_finite() {
                return Err(Error::numeric(
                    "train",
                    format!("non-finite loss at epoch {epoch}, batch {step}"),
                ));
            }
            total += out.loss;
            let grads: Vec<&[T]> = out.grads.iter().map(Vec::as_slice).collect();
            let mut params = stack.trainable_slices();
            adam_step(&mut params, &grads, &mut state, lr, &hp).map_err(|e| match e {
                Error::Numeric { op, detail } => Error::numeric(
                    op,
                    format!("{detail} (epoch {epoch}, batch {step})"),
                ),
                other => other,
            })?;
        }
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            mean_loss: total / steps as f64,
            temperature: stack.temperature(),
        };
        loss_history.push(record.mean_loss);
        temperature_history.push(record.temperature);
        on_epoch(&record);
    }

    let opts = EvalOptions {
        n: config.eval_samples,
        seed: stable_hash(config.seed, "eval"),
        chunk: config.batch_size,
        loss: config.loss.clone(),
        probe: ProbeConfig::default(),
    };
    let report = evaluate(&stack, scenario, &opts)?;
    Ok(RunResult {
        stack,
        loss_history,
        temperature_history,
        report,
    })
}

/// Knobs of [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub n: usize,
    pub seed: u64,
    /// The reported loss is the mean combined loss over chunks of this size.
    pub chunk: usize,
    pub loss: LossConfig,
    pub probe: ProbeConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n: 4096,
            seed: 0,
            chunk: 128,
            loss: LossConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

/// Embeddings of both modalities as `f64`, normalised if configured.
pub fn embed<T: Scalar>(stack: &EncoderStack<T>, batch: &PairBatch, normalize: bool) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let za = stack.alpha.encode(&batch.x_alpha.cast())?.cast::<f64>();
    let zb = stack.beta.encode(&batch.x_beta.cast())?.cast::<f64>();
    if !normalize {
        return Ok((za, zb));
    }
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(za);
    let b = tape.constant(zb);
    let a = tape.l2_normalize(a)?;
    let b = tape.l2_normalize(b)?;
    Ok((tape.value(a).clone(), tape.value(b).clone()))
}

/// Measures a frozen encoder pair on a fresh batch.
pub fn evaluate<T: Scalar>(stack: &EncoderStack<T>, scenario: &Scenario, opts: &EvalOptions) -> Result<MetricsReport> {
    let batch = sample_batch(scenario, opts.n, opts.seed)?;
    let (za, zb) = embed(stack, &batch, opts.loss.normalize_embeddings)?;
    let world = scenario.world();
    let columns: Vec<Vec<usize>> = (0..world.factors().len()).map(|f| batch.label_column(f)).collect();
    let factor = |f: usize| FactorLabels {
        name: &world.factors()[f].name,
        labels: &columns[f],
        cardinality: world.factors()[f].cardinality,
    };
    let withheld: Vec<FactorLabels> = scenario.withheld().iter().map(|&f| factor(f)).collect();
    let provided: Vec<FactorLabels> = scenario.provided().iter().map(|&f| factor(f)).collect();

    let urr = urr(&za, &withheld, &opts.probe)?;
    let (mi_essence_nats, essence_accuracy) = essence_metrics(&za, &provided, &opts.probe)?;
    let cka = cka(&za, &zb, Kernel::Linear)?.clamp(0.0, 1.0);
    let loss_final = chunked_loss(stack, &batch, opts)?;
    Ok(MetricsReport {
        urr,
        cka,
        mi_essence_nats,
        essence_accuracy,
        temperature_final: stack.temperature(),
        loss_final,
    })
}

fn chunked_loss<T: Scalar>(stack: &EncoderStack<T>, batch: &PairBatch, opts: &EvalOptions) -> Result<f64> {
    let chunk = opts.chunk.max(1);
    let n = batch.len();
    let mut total = 0.0;
    let mut count = 0;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let sub = PairBatch {
            x_alpha: take_rows(&batch.x_alpha, &rows)?,
            x_beta: take_rows(&batch.x_beta, &rows)?,
            labels: batch.labels[start..end].to_vec(),
        };
        let mut tape = Tape::<T>::new();
        let xa = tape.constant(stack.alpha.encode(&sub.x_alpha.cast())?);
        let xb = tape.constant(stack.beta.encode(&sub.x_beta.cast())?);
        let t = Temperature::Fixed(stack.temperature());
        let parts = combined_loss(&mut tape, xa, xb, t, opts.loss.beta, opts.loss.normalize_embeddings)?;
        total += tape.value(parts.total).item()?.to_f64();
        count += 1;
    }
    Ok(total / count as f64)
}

fn take_rows(t: &Tensor<f64>, rows: &[usize]) -> Result<Tensor<f64>> {
    let mut data = Vec::with_capacity(rows.len() * t.cols());
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::matrix(rows.len(), t.cols(), data)
}
