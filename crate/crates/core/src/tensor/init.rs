use rand::Rng;
use rand_distr::StandardNormal;

/// Orthogonal `[rows, cols]` matrix scaled by `gain`, in row-major order.
///
/// A Gaussian matrix is orthonormalized with modified Gram-Schmidt, which
/// yields the QR factor with a positive diagonal in R. When `rows < cols`
/// the transpose is built so rows end up orthonormal instead of columns.
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<f32> {
    let (tall, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // Column-major tall x short.
    let mut q: Vec<f64> = (0..tall * short).map(|_| rng.sample(StandardNormal)).collect();
    for j in 0..short {
        for i in 0..j {
            let dot: f64 = (0..tall).map(|r| q[i * tall + r] * q[j * tall + r]).sum();
            for r in 0..tall {
                q[j * tall + r] -= dot * q[i * tall + r];
            }
        }
        let norm = (0..tall).map(|r| q[j * tall + r].powi(2)).sum::<f64>().sqrt().max(1e-300);
        for r in 0..tall {
            q[j * tall + r] /= norm;
        }
    }
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let v = if rows >= cols { q[c * tall + r] } else { q[r * tall + c] };
            out[r * cols + c] = (gain * v) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram(m: &[f32], rows: usize, cols: usize, by_cols: bool) -> Vec<f64> {
        let n = if by_cols { cols } else { rows };
        let mut g = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                g[a * n + b] = if by_cols {
                    (0..rows).map(|r| m[r * cols + a] as f64 * m[r * cols + b] as f64).sum()
                } else {
                    (0..cols).map(|c| m[a * cols + c] as f64 * m[b * cols + c] as f64).sum()
                };
            }
        }
        g
    }

    #[test]
    fn tall_matrix_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = orthogonal(&mut rng, 12, 5, 1.0);
        let g = gram(&m, 12, 5, true);
        for a in 0..5 {
            for b in 0..5 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((g[a * 5 + b] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn wide_matrix_has_scaled_orthogonal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = orthogonal(&mut rng, 3, 9, 2.0f64.sqrt());
        let g = gram(&m, 3, 9, false);
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 2.0 } else { 0.0 };
                assert!((g[a * 3 + b] - want).abs() < 1e-5);
            }
        }
    }
}
