#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mmib::autodiff::{finite_diff_check, Tape, Tensor, Var};
use mmib::losses::{combined_loss, Temperature};
use mmib::seed::rng;
use mmib::Result;

pub const PRIMITIVES: [&str; 24] = [
    "matmul_left",
    "matmul_right",
    "add_same",
    "add_row",
    "add_scalar",
    "sub_row_rhs",
    "mul_same",
    "mul_row_rhs",
    "mul_scalar_rhs",
    "relu",
    "exp",
    "log",
    "sum_all",
    "sum_axis0",
    "mean_axis1",
    "logsumexp_axis0",
    "logsumexp_axis1",
    "l2_normalize",
    "scale_neg",
    "transpose",
    "concat_axis0",
    "concat_axis1",
    "index_rows",
    "diag",
];

pub fn matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero so that kinks and poles stay outside the
/// finite-difference stencil.
fn away_from_zero(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| {
            let m = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Reduces any output to a scalar through fixed random weights, so every
/// output entry contributes to the checked gradient.
fn weighted_sum(t: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = t.value(v).shape().to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let w = t.constant(w);
    let p = t.mul(v, w)?;
    t.sum(p, None)
}

/// Relative finite-difference error of one primitive on one seeded
/// instance.
pub fn primitive_error(name: &str, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, n, k) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let x = match name {
        "relu" => away_from_zero(&mut r, m, n),
        "log" => matrix(&mut r, m, n).map(|v| v.abs() + 0.2),
        "l2_normalize" => away_from_zero(&mut r, m, n),
        "diag" => matrix(&mut r, m, m),
        _ => matrix(&mut r, m, n),
    };
    let other_same = matrix(&mut r, m, n);
    let row = matrix(&mut r, 1, n).into_data();
    let row = Tensor::vector(row).unwrap();
    let single = Tensor::vector(vec![r.random_range(-1.0..1.0)]).unwrap();
    let right = matrix(&mut r, n, k);
    let left = matrix(&mut r, k, m);
    let extra_rows = matrix(&mut r, k, n);
    let extra_cols = matrix(&mut r, m, k);
    let ids: Vec<usize> = (0..k + 1).map(|_| r.random_range(0..m)).collect();
    let name = name.to_string();

    let f = move |t: &mut Tape<f64>, x: Var| -> Result<Var> {
        let out = match name.as_str() {
            "matmul_left" => {
                let b = t.constant(right.clone());
                t.matmul(x, b)?
            }
            "matmul_right" => {
                let a = t.constant(left.clone());
                t.matmul(a, x)?
            }
            "add_same" => {
                let b = t.constant(other_same.clone());
                t.add(x, b)?
            }
            "add_row" => {
                let b = t.constant(row.clone());
                t.add(x, b)?
            }
            "add_scalar" => {
                let b = t.constant(single.clone());
                t.add(x, b)?
            }
            "sub_row_rhs" => {
                // gradient into a broadcast operand: x is the row vector
                let a = t.constant(other_same.clone());
                let xr = t.index_rows(x, &[0])?;
                let xr = t.sum(xr, Some(0))?;
                t.sub(a, xr)?
            }
            "mul_same" => {
                let b = t.constant(other_same.clone());
                t.mul(x, b)?
            }
            "mul_row_rhs" => {
                let a = t.constant(other_same.clone());
                let xr = t.index_rows(x, &[m - 1])?;
                let xr = t.sum(xr, Some(0))?;
                t.mul(a, xr)?
            }
            "mul_scalar_rhs" => {
                let a = t.constant(other_same.clone());
                let s = t.sum(x, None)?;
                t.mul(a, s)?
            }
            "relu" => t.relu(x)?,
            "exp" => t.exp(x)?,
            "log" => t.log(x)?,
            "sum_all" => t.sum(x, None)?,
            "sum_axis0" => t.sum(x, Some(0))?,
            "mean_axis1" => t.mean(x, Some(1))?,
            "logsumexp_axis0" => t.logsumexp(x, Some(0))?,
            "logsumexp_axis1" => t.logsumexp(x, Some(1))?,
            "l2_normalize" => t.l2_normalize(x)?,
            "scale_neg" => {
                let y = t.scale(x, 2.5)?;
                t.neg(y)?
            }
            "transpose" => t.transpose(x)?,
            "concat_axis0" => {
                let b = t.constant(extra_rows.clone());
                t.concat(x, b, 0)?
            }
            "concat_axis1" => {
                let b = t.constant(extra_cols.clone());
                t.concat(b, x, 1)?
            }
            "index_rows" => t.index_rows(x, &ids)?,
            "diag" => t.diag(x)?,
            other => panic!("unknown primitive {other}"),
        };
        weighted_sum(t, out, seed)
    };
    finite_diff_check(f, &x, 1e-5).unwrap()
}

/// Relative finite-difference error of the combined loss with respect to
/// `z_alpha` (`wrt = 0`), `z_beta` (`1`) or the log-temperature (`2`).
pub fn combined_loss_error(seed: u64, wrt: usize) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(2..7);
    let d = r.random_range(2..6);
    let za = matrix(&mut r, n, d);
    let zb = matrix(&mut r, n, d);
    let log_tau = Tensor::scalar(r.random_range(0.05f64..1.0).ln());
    let beta = r.random_range(0.0..1.0);
    let normalize = r.random_bool(0.5);
    let build = move |t: &mut Tape<f64>, a: Var, b: Var, lt: Var| -> Result<Var> {
        Ok(combined_loss(t, a, b, Temperature::Log(lt), beta, normalize)?.total)
    };
    match wrt {
        0 => {
            let (zb, lt) = (zb, log_tau);
            finite_diff_check(
                move |t, x| {
                    let b = t.constant(zb.clone());
                    let l = t.constant(lt.clone());
                    build(t, x, b, l)
                },
                &za,
                1e-5,
            )
        }
        1 => {
            let (za, lt) = (za, log_tau);
            finite_diff_check(
                move |t, x| {
                    let a = t.constant(za.clone());
                    let l = t.constant(lt.clone());
                    build(t, a, x, l)
                },
                &zb,
                1e-5,
            )
        }
        _ => finite_diff_check(
            move |t, x| {
                let a = t.constant(za.clone());
                let b = t.constant(zb.clone());
                build(t, a, b, x)
            },
            &log_tau,
            1e-5,
        ),
    }
    .unwrap()
}

pub fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, k) = a.dims2();
    let m = b.cols();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a.at(i, t) * b.at(t, j)).sum();
        }
    }
    Tensor::matrix(n, m, out).unwrap()
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian-ish columns.
pub fn random_orthogonal(r: &mut ChaCha8Rng, d: usize) -> Tensor<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Tensor::matrix(d, d, (0..d * d).map(|k| cols[k % d][k / d]).collect()).unwrap()
}

/// Autodiff gradient of a per-anchor loss with respect to its similarity row.
pub fn row_gradient(
    s_row: &[f64],
    loss: impl Fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Vec<f64> {
    let mut t = Tape::new();
    let s = t.param(Tensor::vector(s_row.to_vec()).unwrap());
    let l = loss(&mut t, s).unwrap();
    t.backward(l).unwrap();
    t.grad(s).unwrap().to_vec()
}

/// Similarity row of cosine-like values in [-1, 1] with the anchor at `i`.
pub fn random_row(r: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let n = r.random_range(2..65);
    let row = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    (row, r.random_range(0..n))
}

pub fn one_hot(labels: &[usize], width: usize) -> Tensor<f64> {
    let mut data = vec![0.0; labels.len() * width];
    for (i, &l) in labels.iter().enumerate() {
        data[i * width + l] = 1.0;
    }
    Tensor::matrix(labels.len(), width, data).unwrap()
}

pub fn uniform_labels(r: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

/// URR of the three analytic probe constructions on `c = 4` uniform labels:
/// one-hot of the label, independent noise, and one-hot of `label mod 2`.
pub fn probe_calibration(n: usize, seed: u64) -> [f64; 3] {
    use mmib::metrics::{urr, FactorLabels, ProbeConfig};
    let mut r = rng(seed);
    let labels = uniform_labels(&mut r, n, 4);
    let coarse: Vec<usize> = labels.iter().map(|l| l % 2).collect();
    let f = [FactorLabels { name: "y", labels: &labels, cardinality: 4 }];
    let cfg = ProbeConfig::default();
    let score = |z: &Tensor<f64>| urr(z, &f, &cfg).unwrap()[0].1;
    [
        score(&one_hot(&labels, 4)),
        score(&matrix(&mut r, n, 4)),
        score(&one_hot(&coarse, 2)),
    ]
}

/// Worst deviation from the linear-CKA identities: self-similarity,
/// orthogonal, isotropic-scale and translation invariance, and symmetry.
pub fn cka_identity_error(seed: u64) -> f64 {
    use mmib::metrics::{cka, Kernel};
    let mut r = rng(seed);
    let (n, d) = (r.random_range(5..60), r.random_range(1..7));
    let za = matrix(&mut r, n, d);
    let db = r.random_range(1..7);
    let zb = matrix(&mut r, n, db);
    let q = random_orthogonal(&mut r, d);
    let shift: Vec<f64> = (0..d).map(|_| r.random_range(-5.0..5.0)).collect();
    let scale = r.random_range(0.1..10.0);
    let moved = za.map(|v| v * scale);
    let moved = Tensor::matrix(n, d, moved.data().iter().enumerate().map(|(k, v)| v + shift[k % d]).collect()).unwrap();
    let c = |a: &Tensor<f64>, b: &Tensor<f64>| cka(a, b, Kernel::Linear).unwrap();
    let base = c(&za, &zb);
    [
        (c(&za, &za) - 1.0).abs(),
        (c(&za, &matmul(&za, &q)) - 1.0).abs(),
        (c(&za, &moved) - 1.0).abs(),
        (c(&matmul(&za, &q), &zb) - base).abs(),
        (c(&moved, &zb) - base).abs(),
        (c(&zb, &za) - base).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Relative error between the closed-form Gaussian KL and a Monte-Carlo
/// estimate of `E_p[log p/q]` for one random `(mu_a, mu_b, sigma)` triple.
pub fn kl_monte_carlo_error(seed: u64, samples: usize) -> f64 {
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    let d = 3;
    let sigma = r.random_range(0.1..0.5);
    let (mu_a, mu_b) = loop {
        let a: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let gap: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        if gap.sqrt() >= 0.5 {
            break (a, b);
        }
    };
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut acc = 0.0;
    for _ in 0..samples {
        for k in 0..d {
            let x = mu_a[k] + normal.sample(&mut r);
            acc += ((x - mu_b[k]).powi(2) - (x - mu_a[k]).powi(2)) / (2.0 * sigma * sigma);
        }
    }
    let mc = acc / samples as f64;
    let closed = mmib::losses::kl_spherical_gaussian(&mu_a, &mu_b, sigma).unwrap();
    ((mc - closed) / closed).abs()
}
