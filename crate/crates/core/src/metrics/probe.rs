use crate::autodiff::kernels::{dot, logsumexp};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Settings of the linear (multinomial logistic) probe.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    pub weight_decay: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            weight_decay: 1e-4,
            max_iters: 5000,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    /// `max(0, log c - held-out cross-entropy)` in nats.
    pub mi_nats: f64,
    pub test_cross_entropy: f64,
    pub test_accuracy: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Split<'a> {
    x: Vec<f64>,
    y: &'a [usize],
    n: usize,
}

/// Lower bound on `I(z; label)` from a linear probe trained on the first
/// `train_fraction` of the samples and scored on the rest.
pub fn probe(z: &Tensor<f64>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<ProbeResult> {
    if z.rank() != 2 || z.rows() != labels.len() {
        return Err(Error::config(format!(
            "probe: {} labels for representation of shape {:?}",
            labels.len(),
            z.shape()
        )));
    }
    if classes < 2 {
        return Err(Error::config("probe needs at least two classes"));
    }
    let (n, d) = z.dims2();
    if n < 10 * classes {
        return Err(Error::config(format!(
            "probe needs at least {} samples for {classes} classes, got {n}",
            10 * classes
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::config(format!("label {bad} out of range for {classes} classes")));
    }
    let n_train = ((n as f64) * cfg.train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::config("train split must leave samples on both sides"));
    }
    let mut present = vec![false; classes];
    labels[..n_train].iter().for_each(|&l| present[l] = true);
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::config(format!(
            "class {missing} absent from the probe training split; resample"
        )));
    }

    // Standardise with training statistics. The probe is affine, so this
    // only changes conditioning (and the scale the weight decay sees).
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for i in 0..n_train {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    for i in 0..n_train {
        for j in 0..d {
            sd[j] += (z.at(i, j) - mean[j]).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| {
        *s = (*s / n_train as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    });
    let standardize = |range: std::ops::Range<usize>| -> Vec<f64> {
        range
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| (z.at(i, j) - mean[j]) / sd[j])
            .collect()
    };
    let train = Split {
        x: standardize(0..n_train),
        y: &labels[..n_train],
        n: n_train,
    };
    let test = Split {
        x: standardize(n_train..n),
        y: &labels[n_train..],
        n: n - n_train,
    };

    let mut model = Softmax::new(d, classes);
    let (iterations, converged) = model.fit(&train, cfg);
    let (ce, acc) = model.score(&test);
    let mi = ((classes as f64).ln() - ce).max(0.0);
    Ok(ProbeResult {
        mi_nats: mi,
        test_cross_entropy: ce,
        test_accuracy: acc,
        iterations,
        converged,
    })
}

/// Convenience wrapper returning only the MI lower bound.
pub fn probe_mi(z: &Tensor<f64>, labels: &[usize], classes: usize) -> Result<f64> {
    Ok(probe(z, labels, classes, &ProbeConfig::default())?.mi_nats)
}

/// Affine map `d → c` followed by softmax; parameters stored as one vector
/// `[W (c×d, one row per class) | b (c)]`.
struct Softmax {
    d: usize,
    c: usize,
    theta: Vec<f64>,
}

impl Softmax {
    fn new(d: usize, c: usize) -> Self {
        Self {
            d,
            c,
            theta: vec![0.0; d * c + c],
        }
    }

    fn logits_into(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.d;
        let bias = &theta[d * self.c..];
        for (k, o) in out.iter_mut().enumerate() {
            *o = bias[k] + dot(&theta[k * d..(k + 1) * d], x);
        }
    }

    /// Regularised mean cross-entropy and its gradient.
    fn objective(&self, theta: &[f64], data: &Split, lambda: f64, g: &mut [f64]) -> f64 {
        let (d, c) = (self.d, self.c);
        let mut logits = vec![0.0; c];
        let mut loss = 0.0;
        g.iter_mut().for_each(|v| *v = 0.0);
        let inv_n = 1.0 / data.n as f64;
        for i in 0..data.n {
            let x = &data.x[i * d..(i + 1) * d];
            self.logits_into(theta, x, &mut logits);
            let lse = logsumexp(logits.iter().copied());
            loss += lse - logits[data.y[i]];
            for k in 0..c {
                let r = ((logits[k] - lse).exp() - f64::from(u8::from(k == data.y[i]))) * inv_n;
                g[d * c + k] += r;
                for (gv, xv) in g[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *gv += r * xv;
                }
            }
        }
        let w = &theta[..d * c];
        let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
        for (gv, wv) in g[..d * c].iter_mut().zip(w) {
            *gv += lambda * wv;
        }
        loss * inv_n + reg
    }

    /// Full-batch gradient descent with backtracking (step halving on an
    /// Armijo failure, doubling after a success).
    fn fit(&mut self, data: &Split, cfg: &ProbeConfig) -> (usize, bool) {
        let p = self.theta.len();
        let mut grad = vec![0.0; p];
        let mut trial = vec![0.0; p];
        let mut trial_grad = vec![0.0; p];
        let mut step = 1.0;
        let mut f = self.objective(&self.theta, data, cfg.weight_decay, &mut grad);
        for iter in 0..cfg.max_iters {
            let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
            if gnorm2.sqrt() < cfg.grad_tol {
                return (iter, true);
            }
            loop {
                for k in 0..p {
                    trial[k] = self.theta[k] - step * grad[k];
                }
                let ft = self.objective(&trial, data, cfg.weight_decay, &mut trial_grad);
                if ft <= f - 0.5 * step * gnorm2 {
                    f = ft;
                    break;
                }
                step *= 0.5;
                if step < 1e-12 {
                    return (iter, false);
                }
            }
            std::mem::swap(&mut self.theta, &mut trial);
            std::mem::swap(&mut grad, &mut trial_grad);
            step = (step * 2.0).min(1e4);
        }
        (cfg.max_iters, false)
    }

    /// Mean cross-entropy (nats) and accuracy.
    fn score(&self, data: &Split) -> (f64, f64) {
        let d = self.d;
        let mut logits = vec![0.0; self.c];
        let mut ce = 0.0;
        let mut hits = 0usize;
        for i in 0..data.n {
            self.logits_into(&self.theta, &data.x[i * d..(i + 1) * d], &mut logits);
            ce += logsumexp(logits.iter().copied()) - logits[data.y[i]];
            let argmax = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(k, _)| k)
                .unwrap_or(0);
            hits += usize::from(argmax == data.y[i]);
        }
        (ce / data.n as f64, hits as f64 / data.n as f64)
    }
}
