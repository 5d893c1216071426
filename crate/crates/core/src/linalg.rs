//! Dense matrix kernels and the largest-singular-value estimate.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// C += A * B on flat row-major slices. ikj loop order so the inner loop
/// streams both B and C rows.
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
}

/// Matrix product of two 2-d tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions disagree: {}x{} vs {}x{}",
            m, k, k2, n
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::new(vec![m, n], out))
}

pub(crate) fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape(format!("{what}: expected 2-d tensor, got {other:?}"))),
    }
}

/// A * B with f64 accumulation, returning f32. Used where products feed
/// further compositions (merged weights) and rounding should not stack.
pub fn matmul_f64(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for p in 0..k {
            let a_ip = a[i * k + p] as f64;
            if a_ip == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += a_ip * b[p * n + j] as f64;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Largest singular value via power iteration on the Gram matrix.
///
/// Iterates on the smaller of MᵀM / MMᵀ in f64, stopping at relative
/// change 1e-6 in the Rayleigh quotient or after 1000 rounds. A zero
/// matrix yields 0.
pub fn sigma_max(m: &Tensor) -> Result<f32> {
    let (rows, cols) = dims2(m, "sigma_max")?;
    if !m.all_finite() {
        return Err(Error::Data("sigma_max: matrix has non-finite entries".into()));
    }
    let data: Vec<f64> = m.iter().map(|&v| v as f64).collect();

    // Gram side: G = MᵀM (cols x cols) or MMᵀ (rows x rows), whichever is smaller.
    let (g, n) = if cols <= rows {
        let mut g = vec![0.0f64; cols * cols];
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            for i in 0..cols {
                for j in 0..cols {
                    g[i * cols + j] += row[i] * row[j];
                }
            }
        }
        (g, cols)
    } else {
        let mut g = vec![0.0f64; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                let mut s = 0.0;
                for c in 0..cols {
                    s += data[i * cols + c] * data[j * cols + c];
                }
                g[i * rows + j] = s;
            }
        }
        (g, rows)
    };

    let mut rng = Rng::split(0x51_67_4d_41, n as u64);
    let mut v: Vec<f64> = (0..n).map(|_| rng.next_f64() - 0.5).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    if nv == 0.0 {
        return Ok(0.0);
    }
    v.iter_mut().for_each(|x| *x /= nv);

    let mut lambda_prev = 0.0f64;
    for _ in 0..1000 {
        let mut gv = vec![0.0f64; n];
        for i in 0..n {
            let row = &g[i * n..(i + 1) * n];
            gv[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let lambda: f64 = gv.iter().zip(&v).map(|(a, b)| a * b).sum();
        let gv_norm = norm(&gv);
        if gv_norm == 0.0 {
            return Ok(0.0);
        }
        v = gv.iter().map(|x| x / gv_norm).collect();
        if lambda > 0.0 && ((lambda - lambda_prev).abs() / lambda) < 1e-6 {
            return Ok(lambda.max(0.0).sqrt() as f32);
        }
        lambda_prev = lambda;
    }
    Ok(lambda_prev.max(0.0).sqrt() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::new(vec![2, 2], vec![5.0, -1.0, 2.5, 0.25]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);
    }

    #[test]
    fn hand_product() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 1], vec![0.0, 1.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn inner_dim_mismatch_is_error() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![4, 2]);
        assert!(matches!(matmul(&a, &b), Err(crate::error::Error::Shape(_))));
    }

    #[test]
    fn random_product_vs_triple_loop() {
        let mut rng = Rng::new(42);
        let a = Tensor::uniform(vec![5, 7], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(vec![7, 3], -1.0, 1.0, &mut rng);
        let c = matmul(&a, &b).unwrap();
        // naive triple-loop oracle
        for i in 0..5 {
            for j in 0..3 {
                let mut want = 0.0f32;
                for p in 0..7 {
                    want += a.data()[i * 7 + p] * b.data()[p * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - want).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn sigma_max_identity() {
        let i3 = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert!((sigma_max(&i3).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sigma_max_diagonal() {
        let d = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 4.0]);
        assert!((sigma_max(&d).unwrap() - 4.0).abs() < 1e-5);
    }

    #[test]
    fn sigma_max_zero_matrix() {
        let z = Tensor::zeros(vec![4, 6]);
        assert_eq!(sigma_max(&z).unwrap(), 0.0);
    }

    #[test]
    fn sigma_max_scales_homogeneously() {
        let mut rng = Rng::new(9);
        let m = Tensor::uniform(vec![5, 4], -1.0, 1.0, &mut rng);
        let s = sigma_max(&m).unwrap();
        let scaled = Tensor::new(vec![5, 4], m.iter().map(|v| v * -2.5).collect());
        let s2 = sigma_max(&scaled).unwrap();
        assert!((s2 - 2.5 * s).abs() / (2.5 * s) < 1e-5);
    }
}
