use crate::autodiff::kernels::{dot, gemm_tn};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Kernel used to compare representations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    Linear,
    /// `exp(-||x - y||² / (2 h²))` with a fixed bandwidth `h`.
    Rbf(f64),
    /// RBF with the median pairwise distance of each input as bandwidth.
    RbfMedian,
}

/// Gram matrix of one set of representations under a kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    k: Tensor<f64>,
    kernel: Kernel,
}

impl GramMatrix {
    pub fn new(z: &Tensor<f64>, kernel: Kernel) -> Result<Self> {
        if z.rank() != 2 {
            return Err(Error::config("gram matrix needs an [n × d] input"));
        }
        let n = z.rows();
        let mut k = vec![0.0; n * n];
        match kernel {
            Kernel::Linear => {
                for i in 0..n {
                    for j in 0..=i {
                        let v = dot(z.row(i), z.row(j));
                        k[i * n + j] = v;
                        k[j * n + i] = v;
                    }
                }
            }
            Kernel::Rbf(_) | Kernel::RbfMedian => {
                let h = match kernel {
                    Kernel::Rbf(h) => h,
                    _ => rbf_bandwidth_median(z)?,
                };
                if !(h > 0.0 && h.is_finite()) {
                    return Err(Error::config(format!("rbf bandwidth must be > 0, got {h}")));
                }
                let denom = 2.0 * h * h;
                for i in 0..n {
                    k[i * n + i] = 1.0;
                    for j in 0..i {
                        let v = (-sq_dist(z.row(i), z.row(j)) / denom).exp();
                        k[i * n + j] = v;
                        k[j * n + i] = v;
                    }
                }
            }
        }
        Ok(Self {
            k: Tensor::matrix(n, n, k)?,
            kernel,
        })
    }

    /// Wraps a precomputed matrix, which must be square and symmetric.
    pub fn from_matrix(k: Tensor<f64>, kernel: Kernel) -> Result<Self> {
        if k.rank() != 2 || k.rows() != k.cols() {
            return Err(Error::config("gram matrix must be square"));
        }
        let n = k.rows();
        for i in 0..n {
            for j in 0..i {
                if (k.at(i, j) - k.at(j, i)).abs() > 1e-9 {
                    return Err(Error::config(format!("gram matrix not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { k, kernel })
    }

    pub fn n(&self) -> usize {
        self.k.rows()
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.k
    }

    /// `H K H` with `H = I - 11ᵀ/n`.
    fn centered(&self) -> Vec<f64> {
        let n = self.n();
        let k = self.k.data();
        let row_mean: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let col_mean: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k[i * n + j]).sum::<f64>() / n as f64).collect();
        let grand = row_mean.iter().sum::<f64>() / n as f64;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = k[i * n + j] - row_mean[i] - col_mean[j] + grand;
            }
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Empirical HSIC: `trace(K H L H) / (n - 1)²`.
pub fn hsic(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    let n = k.n();
    if n != l.n() {
        return Err(Error::config(format!("hsic: sample counts differ ({n} vs {})", l.n())));
    }
    if n < 2 {
        return Err(Error::config("hsic needs at least two samples"));
    }
    let kc = k.centered();
    let ld = l.k.data();
    // trace(HKH · L) = Σ_ij (HKH)_ij L_ji
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += kc[i * n + j] * ld[j * n + i];
        }
    }
    Ok(acc / ((n - 1) * (n - 1)) as f64)
}

/// Centered kernel alignment between two representations of the same
/// samples.
pub fn cka(za: &Tensor<f64>, zb: &Tensor<f64>, kernel: Kernel) -> Result<f64> {
    if za.rank() != 2 || zb.rank() != 2 || za.rows() != zb.rows() {
        return Err(Error::config(format!(
            "cka: inputs must share the sample count, got {:?} and {:?}",
            za.shape(),
            zb.shape()
        )));
    }
    if za.rows() < 3 {
        return Err(Error::config("cka needs at least three samples"));
    }
    match kernel {
        Kernel::Linear => linear_cka(za, zb),
        _ => {
            let k = GramMatrix::new(za, kernel)?;
            let l = GramMatrix::new(zb, kernel)?;
            cka_from_grams(&k, &l)
        }
    }
}

/// CKA from two precomputed Gram matrices.
pub fn cka_from_grams(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    let kl = hsic(k, l)?;
    let kk = hsic(k, k)?;
    let ll = hsic(l, l)?;
    for (name, v, g) in [("first", kk, k), ("second", ll, l)] {
        let scale: f64 = g.k.data().iter().map(|x| x * x).sum::<f64>() / ((g.n() - 1) * (g.n() - 1)) as f64;
        if !(v > 1e-24 * scale.max(1e-300)) {
            return Err(Error::degenerate(
                "cka",
                format!("{name} centered gram matrix is zero"),
            ));
        }
    }
    Ok(kl / (kk * ll).sqrt())
}

/// Linear CKA computed in feature space:
/// `||Xᵀ Y||²_F / (||Xᵀ X||_F ||Yᵀ Y||_F)` on column-centered inputs, which
/// equals the Gram-matrix form without building `n × n` matrices.
fn linear_cka(za: &Tensor<f64>, zb: &Tensor<f64>) -> Result<f64> {
    let x = center_columns(za);
    let y = center_columns(zb);
    for (name, c, raw) in [("first", &x, za), ("second", &y, zb)] {
        let cn: f64 = c.iter().map(|v| v * v).sum();
        let rn: f64 = raw.data().iter().map(|v| v * v).sum();
        if !(cn > 1e-24 * rn.max(1e-300)) {
            return Err(Error::degenerate("cka", format!("{name} input has zero variance")));
        }
    }
    let n = za.rows();
    let cross = frob_sq_tn(&x, &y, n, za.cols(), zb.cols());
    let xx = frob_sq_tn(&x, &x, n, za.cols(), za.cols());
    let yy = frob_sq_tn(&y, &y, n, zb.cols(), zb.cols());
    Ok(cross / (xx.sqrt() * yy.sqrt()))
}

fn center_columns(z: &Tensor<f64>) -> Vec<f64> {
    let (n, d) = z.dims2();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut out = z.data().to_vec();
    for row in out.chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

/// `||Aᵀ B||²_F` for `A [n × p]`, `B [n × q]`.
fn frob_sq_tn(a: &[f64], b: &[f64], n: usize, p: usize, q: usize) -> f64 {
    let mut m = vec![0.0; p * q];
    gemm_tn(a, b, &mut m, n, p, q);
    m.iter().map(|v| v * v).sum()
}

/// Median Euclidean distance over all pairs of rows.
pub fn rbf_bandwidth_median(z: &Tensor<f64>) -> Result<f64> {
    let n = z.rows();
    if z.rank() != 2 || n < 2 {
        return Err(Error::config("bandwidth estimate needs at least two rows"));
    }
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            d.push(sq_dist(z.row(i), z.row(j)).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if median <= 0.0 {
        return Err(Error::degenerate("rbf_bandwidth_median", "median pairwise distance is zero"));
    }
    Ok(median)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(values: &[f64]) -> Tensor<f64> {
        Tensor::matrix(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn constant_kernel_has_zero_hsic() {
        let k = GramMatrix::new(&col(&[1.0, 2.0, 5.0]), Kernel::Linear).unwrap();
        let l = GramMatrix::from_matrix(Tensor::matrix(3, 3, vec![2.0; 9]).unwrap(), Kernel::Linear).unwrap();
        assert!(hsic(&k, &l).unwrap().abs() < 1e-12);
    }

    #[test]
    fn two_point_hand_value() {
        // K = [[1,-1],[-1,1]] is already centered, so trace(KHKH) = trace(K²) = 4.
        let k = GramMatrix::new(&col(&[1.0, -1.0]), Kernel::Linear).unwrap();
        assert_eq!(k.matrix().data(), &[1.0, -1.0, -1.0, 1.0]);
        assert!((hsic(&k, &k).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn hsic_is_symmetric() {
        let k = GramMatrix::new(&col(&[0.3, 1.0, -2.0, 0.7]), Kernel::Linear).unwrap();
        let l = GramMatrix::new(&col(&[1.0, 0.1, 0.4, -0.2]), Kernel::Rbf(1.0)).unwrap();
        assert!((hsic(&k, &l).unwrap() - hsic(&l, &k).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_is_config_error() {
        let k = GramMatrix::new(&col(&[1.0]), Kernel::Linear).unwrap();
        assert!(matches!(hsic(&k, &k), Err(Error::Config(_))));
    }

    #[test]
    fn linear_fast_path_matches_gram_route() {
        let za = Tensor::matrix(6, 2, (0..12).map(|i| ((i * 7 % 5) as f64).sin()).collect()).unwrap();
        let zb = Tensor::matrix(6, 3, (0..18).map(|i| ((i * 3 % 7) as f64).cos()).collect()).unwrap();
        let fast = cka(&za, &zb, Kernel::Linear).unwrap();
        let slow = cka_from_grams(
            &GramMatrix::new(&za, Kernel::Linear).unwrap(),
            &GramMatrix::new(&zb, Kernel::Linear).unwrap(),
        )
        .unwrap();
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let za = Tensor::matrix(4, 2, vec![1.0; 8]).unwrap();
        let zb = Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(cka(&za, &zb, Kernel::Linear), Err(Error::Degenerate { .. })));
        assert!(cka(&zb, &za, Kernel::Rbf(1.0)).is_err());
    }

    #[test]
    fn bandwidth_examples() {
        let same = Tensor::matrix(3, 2, vec![1.0; 6]).unwrap();
        assert!(rbf_bandwidth_median(&same).is_err());
        let two = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        assert!((rbf_bandwidth_median(&two).unwrap() - 5.0).abs() < 1e-12);
    }
}
