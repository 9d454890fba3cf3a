//! Small dense matrix routines for the channel-mixing layers.

use super::rng::Rng;
use super::tensor::{lit, Real, Tensor};
use crate::error::{Error, Result};

/// LU factorisation with partial pivoting of a square matrix, in `f64`.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new<T: Real>(m: &Tensor<T>) -> Result<Self> {
        let n = match *m.shape() {
            [r, c] if r == c => r,
            _ => {
                return Err(Error::InvalidShape {
                    op: "lu",
                    shape: m.shape().to_vec(),
                    reason: "expected a square matrix".into(),
                })
            }
        };
        let mut lu: Vec<f64> = m.data().iter().map(|v| v.to_f64().unwrap()).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for r in k + 1..n {
                let v = lu[r * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            if pivot == 0.0 {
                continue;
            }
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                for c in k + 1..n {
                    lu[r * n + c] -= f * lu[k * n + c];
                }
            }
        }
        Ok(Self { n, lu, perm, sign })
    }

    pub fn det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i]).product::<f64>() * self.sign
    }

    /// `log |det|`, summed over the pivots.
    pub fn log_abs_det(&self) -> f64 {
        (0..self.n)
            .map(|i| self.lu[i * self.n + i].abs().ln())
            .sum()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                y[i] -= self.lu[i * n + j] * y[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                y[i] -= self.lu[i * n + j] * y[j];
            }
            y[i] /= self.lu[i * n + i];
        }
        y
    }

    pub fn inverse<T: Real>(&self) -> Result<Tensor<T>> {
        let n = self.n;
        let mut out = vec![T::zero(); n * n];
        let mut e = vec![0.0; n];
        for c in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[c] = 1.0;
            let col = self.solve(&e);
            for r in 0..n {
                out[r * n + c] = lit(col[r]);
            }
        }
        let t = Tensor::from_parts(vec![n, n], out)?;
        t.ensure_finite("inverse")?;
        Ok(t)
    }
}

/// Smallest `|det|` accepted for an invertible channel-mixing matrix.
pub const MIN_ABS_DET: f64 = 1e-12;

/// Factorises `m`, rejecting near-singular matrices.
pub fn checked_lu<T: Real>(m: &Tensor<T>) -> Result<Lu> {
    let lu = Lu::new(m)?;
    let det = lu.det();
    if !(det.abs() > MIN_ABS_DET) {
        return Err(Error::SingularMatrix { det });
    }
    Ok(lu)
}

/// Random orthogonal matrix: modified Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal<T: Real>(rng: &mut Rng, n: usize) -> Tensor<T> {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gaussian()).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= d * b;
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            let data = rows.into_iter().flatten().map(lit).collect();
            return Tensor::from_parts(vec![n, n], data).expect("square");
        }
    }
}

pub fn identity<T: Real>(n: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = T::one();
    }
    t
}
