//! Dense singular value decomposition by one-sided Jacobi rotations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 80;

/// `M = U · diag(S) · V` with `U` P×m (orthonormal columns), `V` m×Q
/// (orthonormal rows) and `S` descending, `m = min(P, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    pub fn rank_len(&self) -> usize {
        self.s.len()
    }

    /// Keeps the leading `k` triplets.
    pub fn truncate(&self, k: usize) -> Svd {
        let k = k.min(self.s.len());
        let (p, m) = (self.u.rows(), self.u.cols());
        let q = self.v.cols();
        let mut u = Vec::with_capacity(p * k);
        for i in 0..p {
            u.extend_from_slice(&self.u.data()[i * m..i * m + k]);
        }
        Svd {
            u: Tensor::from_parts(vec![p, k], u),
            s: self.s[..k].to_vec(),
            v: Tensor::from_parts(vec![k, q], self.v.data()[..k * q].to_vec()),
        }
    }

    pub fn reconstruct(&self) -> Tensor {
        reconstruct(&self.u, &self.s, &self.v)
    }
}

/// `U · diag(S) · V`.
pub fn reconstruct(u: &Tensor, s: &[f64], v: &Tensor) -> Tensor {
    let (p, k) = (u.rows(), u.cols());
    let mut us = u.data().to_vec();
    for i in 0..p {
        for j in 0..k {
            us[i * k + j] *= s[j];
        }
    }
    Tensor::from_parts(vec![p, k], us)
        .matmul(v)
        .expect("factor dims agree by construction")
}

pub fn svd(m: &Tensor) -> Result<Svd> {
    if m.dims().len() != 2 {
        return Err(Error::Shape(format!("svd needs a matrix, got {:?}", m.dims())));
    }
    if !m.all_finite() {
        return Err(Error::Input("svd input has non-finite entries".into()));
    }
    let (p, q) = (m.rows(), m.cols());
    if p >= q {
        Ok(jacobi_tall(m))
    } else {
        let t = jacobi_tall(&m.transpose());
        Ok(Svd { u: t.v.transpose(), s: t.s, v: t.u.transpose() })
    }
}

/// One-sided Jacobi for rows ≥ cols.
fn jacobi_tall(a: &Tensor) -> Svd {
    let (rows, n) = (a.rows(), a.cols());
    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..rows).map(|i| a.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut vcols, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let smax = norms.iter().copied().fold(0.0, f64::max);
    let tiny = smax * rows.max(n) as f64 * f64::EPSILON;

    let mut ucols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for &j in &order {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > tiny && sigma > 0.0 {
            ucols.push(Some(cols[j].iter().map(|x| x / sigma).collect()));
        } else {
            ucols.push(None);
        }
    }
    let ucols = complete_basis(ucols, rows);

    let mut u = vec![0.0; rows * n];
    for (k, col) in ucols.iter().enumerate() {
        for i in 0..rows {
            u[i * n + k] = col[i];
        }
    }
    // rows of V are the sorted right singular vectors
    let mut v = Vec::with_capacity(n * n);
    for &j in &order {
        v.extend_from_slice(&vcols[j]);
    }
    Svd {
        u: Tensor::from_parts(vec![rows, n], u),
        s,
        v: Tensor::from_parts(vec![n, n], v),
    }
}

/// Fills missing columns with unit vectors orthogonal to the rest.
fn complete_basis(cols: Vec<Option<Vec<f64>>>, rows: usize) -> Vec<Vec<f64>> {
    let mut done: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(cols.len());
    let mut next_basis = 0;
    for c in cols {
        match c {
            Some(v) => out.push(v),
            None => {
                let v = loop {
                    assert!(next_basis < rows, "cannot complete orthonormal basis");
                    let mut cand = vec![0.0; rows];
                    cand[next_basis] = 1.0;
                    next_basis += 1;
                    for _ in 0..2 {
                        for d in &done {
                            let proj = dot(&cand, d);
                            for (x, y) in cand.iter_mut().zip(d) {
                                *x -= proj * y;
                            }
                        }
                    }
                    let norm = dot(&cand, &cand).sqrt();
                    if norm > 0.5 {
                        break cand.into_iter().map(|x| x / norm).collect::<Vec<_>>();
                    }
                };
                done.push(v.clone());
                out.push(v);
            }
        }
    }
    out
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, p: usize, q: usize) -> Tensor {
        Tensor::new(vec![p, q], (0..p * q).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn orthonormality_error(m: &Tensor) -> f64 {
        // m has orthonormal columns
        let g = m.transpose().matmul(m).unwrap();
        g.max_abs_diff(&Tensor::identity(g.rows()))
    }

    #[test]
    fn diagonal() {
        let m = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let d = svd(&m).unwrap();
        assert!((d.s[0] - 3.0).abs() < 1e-14 && (d.s[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rank_one_outer_product() {
        let a = [1.0, 2.0, 2.0];
        let b = [3.0, 4.0];
        let rows: Vec<Vec<f64>> = a.iter().map(|x| b.iter().map(|y| x * y).collect()).collect();
        let m = Tensor::from_rows(&rows).unwrap();
        let d = svd(&m).unwrap();
        assert!((d.s[0] - 15.0).abs() < 1e-12);
        assert!(d.s[1].abs() < 1e-12);
        assert!(orthonormality_error(&d.u) < 1e-8);
        assert!(orthonormality_error(&d.v.transpose()) < 1e-8);
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let d = svd(&Tensor::zeros(&[5, 3])).unwrap();
        assert_eq!(d.s, vec![0.0; 3]);
        assert!(orthonormality_error(&d.u) < 1e-12);
        assert!(d.reconstruct().frobenius() == 0.0);
    }

    #[test]
    fn random_reconstruction_wide_and_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            for (p, q) in [(20, 7), (7, 20)] {
                let m = random_matrix(&mut rng, p, q);
                let d = svd(&m).unwrap();
                let err = d.reconstruct().sub(&m).unwrap().frobenius();
                assert!(err <= 1e-10 * m.frobenius().max(1.0), "err {err}");
                assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
                assert!(orthonormality_error(&d.u) < 1e-8);
                assert!(orthonormality_error(&d.v.transpose()) < 1e-8);
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Tensor::zeros(&[2, 2]);
        m.data_mut()[0] = f64::INFINITY;
        assert!(matches!(svd(&m), Err(Error::Input(_))));
    }
}
