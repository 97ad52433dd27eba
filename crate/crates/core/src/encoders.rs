//! MLP encoders for both modalities.
//!
//! Encoders output the mean of a spherical Gaussian over the representation
//! space; the shared variance is a constant and never materialised.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::gemm_nn;
use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::child_rng;

pub const DEFAULT_WIDTH: usize = 64;
pub const DEFAULT_REPR_DIM: usize = 16;

/// Affine layers separated by ReLU; the last layer has no activation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
        }
    }

    /// `depth` affine layers of constant `width`.
    pub fn with_depth(input_dim: usize, depth: usize, width: usize, output_dim: usize) -> Self {
        Self::new(input_dim, vec![width; depth.saturating_sub(1)], output_dim)
    }

    pub fn depth(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config(format!("all MLP dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth() + 1);
        dims.push(self.input_dim);
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Scalar> {
    /// `[in × out]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Scalar> {
    config: MlpConfig,
    layers: Vec<Linear<T>>,
}

/// Parameters of an [`Mlp`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl<T: Scalar> Mlp<T> {
    /// He initialisation: weights ~ N(0, 2 / fan_in), zero biases.
    pub fn init(config: &MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| {
                let mut rng = child_rng(seed, &format!("layer{i}"));
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive standard deviation");
                let w = (0..fan_in * fan_out)
                    .map(|_| T::from_f64(normal.sample(&mut rng)))
                    .collect();
                Ok(Linear {
                    weight: Tensor::matrix(fan_in, fan_out, w)?,
                    bias: Tensor::vector(vec![T::zero(); fan_out])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Plain forward pass without recording a tape.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.cols() != self.config.input_dim {
            return Err(Error::config(format!(
                "encoder expects [n × {}], got {:?}",
                self.config.input_dim,
                x.shape()
            )));
        }
        let n = x.rows();
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, m) = layer.weight.dims2();
            let mut out = Vec::with_capacity(n * m);
            for _ in 0..n {
                out.extend_from_slice(layer.bias.data());
            }
            gemm_nn(&h, layer.weight.data(), &mut out, n, k, m);
            if i != last {
                out.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            h = out;
        }
        let out = Tensor::matrix(n, self.config.output_dim, h)?;
        if !out.is_finite() {
            return Err(Error::numeric("encode", "non-finite activation"));
        }
        Ok(out)
    }

    /// Records the parameters on `tape` as trainable leaves.
    pub fn attach(&self, tape: &mut Tape<T>) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }
}

impl MlpVars {
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if i != last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// The two modality encoders plus a log-parameterised temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack<T: Scalar> {
    pub alpha: Mlp<T>,
    pub beta: Mlp<T>,
    pub log_temperature: T,
    pub temperature_trainable: bool,
}

impl<T: Scalar> EncoderStack<T> {
    pub fn init(
        alpha: &MlpConfig,
        beta: &MlpConfig,
        temperature_init: f64,
        temperature_trainable: bool,
        seed: u64,
    ) -> Result<Self> {
        if !(temperature_init > 0.0 && temperature_init.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be positive, got {temperature_init}"
            )));
        }
        if alpha.output_dim != beta.output_dim {
            return Err(Error::config("both encoders must share the representation dimension"));
        }
        Ok(Self {
            alpha: Mlp::init(alpha, crate::seed::stable_hash(seed, "alpha"))?,
            beta: Mlp::init(beta, crate::seed::stable_hash(seed, "beta"))?,
            log_temperature: T::from_f64(temperature_init.ln()),
            temperature_trainable,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.to_f64().exp()
    }

    /// Named parameter tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, mlp) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), l.weight.clone()));
                out.push((format!("{prefix}.{i}.bias"), l.bias.clone()));
            }
        }
        out.push(("log_temperature".into(), Tensor::scalar(self.log_temperature)));
        out
    }

    /// Serialises to the checkpoint text format: one line per tensor,
    /// `name,rows,cols,v0,v1,...`, row-major, values printed with the
    /// shortest representation that round-trips. Vectors use `rows = 1` and
    /// the temperature flag is stored as `temperature_trainable,1,1,{0|1}`.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::from("# mmib checkpoint v1\n");
        for (name, t) in self.named_tensors() {
            let (r, c) = t.dims2();
            let _ = write!(s, "{name},{r},{c}");
            for v in t.data() {
                let _ = write!(s, ",{}", v);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "temperature_trainable,1,1,{}", u8::from(self.temperature_trainable));
        s
    }

    /// Restores parameters into a stack built from the same configurations.
    pub fn from_checkpoint(alpha: &MlpConfig, beta: &MlpConfig, text: &str) -> Result<Self> {
        let mut stack = Self::init(alpha, beta, 1.0, false, 0)?;
        let mut seen = 0;
        for (lineno, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let name = parts.next().unwrap_or_default();
            let bad = |what: &str| Error::config(format!("checkpoint line {}: {what}", lineno + 1));
            let rows: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad("rows"))?;
            let cols: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad("cols"))?;
            let values = parts
                .map(|p| p.parse::<f64>().map(T::from_f64))
                .collect::<std::result::Result<Vec<T>, _>>()
                .map_err(|_| bad("unparsable value"))?;
            if values.len() != rows * cols {
                return Err(bad("value count does not match shape"));
            }
            if name == "temperature_trainable" {
                stack.temperature_trainable = values[0] != T::zero();
                continue;
            }
            if name == "log_temperature" {
                stack.log_temperature = values[0];
                seen += 1;
                continue;
            }
            let target = stack
                .tensor_mut(name)
                .ok_or_else(|| bad(&format!("unknown tensor {name}")))?;
            if target.dims2() != (rows, cols) {
                return Err(bad(&format!("shape mismatch for {name}")));
            }
            target.data_mut().copy_from_slice(&values);
            seen += 1;
        }
        let expected = 2 * (stack.alpha.layers.len() + stack.beta.layers.len()) + 1;
        if seen != expected {
            return Err(Error::config(format!(
                "checkpoint has {seen} of {expected} tensors"
            )));
        }
        Ok(stack)
    }

    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let mut it = name.split('.');
        let mlp = match it.next()? {
            "alpha" => &mut self.alpha,
            "beta" => &mut self.beta,
            _ => return None,
        };
        let layer = mlp.layers.get_mut(it.next()?.parse::<usize>().ok()?)?;
        match it.next()? {
            "weight" => Some(&mut layer.weight),
            "bias" => Some(&mut layer.bias),
            _ => None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(alpha: &MlpConfig, beta: &MlpConfig, path: &Path) -> Result<Self> {
        Self::from_checkpoint(alpha, beta, &std::fs::read_to_string(path)?)
    }
}
