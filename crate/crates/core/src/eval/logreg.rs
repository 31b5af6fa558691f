//! L2-regularized multinomial logistic regression, minimizing
//! `Σ_i CE(softmax(x_i W + b), y_i) + (λ/2)·‖W‖²` with L-BFGS.

use std::collections::VecDeque;

use rob_tensor::Matrix;

use crate::error::{Result, RobError};

pub const GRAD_TOL: f64 = 1e-6;
const MAX_ITER: usize = 5000;
const HISTORY: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct LogReg {
    /// `d × C`.
    pub weights: Matrix,
    /// `1 × C`, not regularized.
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogReg {
    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        let s = x
            .matmul(&self.weights)
            .expect("feature width matches the fitted weights");
        (0..s.rows())
            .map(|r| {
                let row = s.row(r);
                let mut best = 0;
                for c in 1..row.len() {
                    if row[c] + self.bias[c] > row[best] + self.bias[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

struct Problem<'a> {
    x: &'a Matrix,
    y: &'a [usize],
    classes: usize,
    lambda: f64,
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        (self.x.cols() + 1) * self.classes
    }

    fn unpack(&self, theta: &[f64]) -> (Matrix, Vec<f64>) {
        let d = self.x.cols();
        let w =
            Matrix::from_vec(d, self.classes, theta[..d * self.classes].to_vec()).expect("sized");
        (w, theta[d * self.classes..].to_vec())
    }

    /// Objective value and gradient.
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let (w, b) = self.unpack(theta);
        let n = self.x.rows();
        let c = self.classes;
        let mut scores = self.x.matmul(&w).expect("sized");
        let mut f = 0.0;
        for r in 0..n {
            let row = scores.row_mut(r);
            for (v, bc) in row.iter_mut().zip(&b) {
                *v += bc;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            f += lse - row[self.y[r]];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
            row[self.y[r]] -= 1.0;
        }
        // scores now hold dCE/dlogits
        let gw = self.x.matmul_t(&scores, true, false).expect("sized");
        let mut grad = Vec::with_capacity(self.dim());
        for (i, g) in gw.data().iter().enumerate() {
            grad.push(g + self.lambda * w.data()[i]);
        }
        for k in 0..c {
            grad.push((0..n).map(|r| scores.get(r, k)).sum());
        }
        f += 0.5 * self.lambda * w.data().iter().map(|v| v * v).sum::<f64>();
        (f, grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn fit_logreg(x: &Matrix, y: &[usize], classes: usize, lambda: f64) -> Result<LogReg> {
    if x.rows() != y.len() || x.rows() == 0 {
        return Err(RobError::contract(
            "logistic regression needs one label per non-empty row",
        ));
    }
    if y.iter().any(|&l| l >= classes) {
        return Err(RobError::contract("label out of range"));
    }
    if !(lambda > 0.0) {
        return Err(RobError::config(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let p = Problem {
        x,
        y,
        classes,
        lambda,
    };
    let mut theta = vec![0.0; p.dim()];
    let (mut f, mut g) = p.eval(&theta);
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    while norm(&g) > GRAD_TOL && iterations < MAX_ITER {
        iterations += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, yv, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(yv).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist.back().map_or(1.0 / norm(&g).max(1.0), |(s, yv, _)| {
            dot(s, yv) / dot(yv, yv)
        });
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, yv, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let beta = rho * dot(yv, &q);
            q.iter_mut()
                .zip(s)
                .for_each(|(qi, si)| *qi += (a - beta) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        // backtracking under the Armijo condition
        let mut step = 1.0;
        let (theta_new, f_new, g_new) = loop {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let (fc, gc) = p.eval(&cand);
            if fc <= f + 1e-4 * step * slope || step < 1e-20 {
                break (cand, fc, gc);
            }
            step *= 0.5;
        };
        let s: Vec<f64> = theta_new.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 {
            hist.push_back((s, yv, 1.0 / sy));
            if hist.len() > HISTORY {
                hist.pop_front();
            }
        }
        let stalled = f - f_new <= f64::EPSILON * f.abs().max(1.0) && step < 1e-20;
        theta = theta_new;
        f = f_new;
        g = g_new;
        if stalled {
            break;
        }
    }
    let (weights, bias) = p.unpack(&theta);
    Ok(LogReg {
        weights,
        bias,
        iterations,
        grad_norm: norm(&g),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_and_matches_a_numeric_gradient() {
        let x = Matrix::from_rows(&[
            vec![1.0, 0.2],
            vec![0.9, -0.1],
            vec![-1.0, 0.3],
            vec![-0.8, -0.2],
            vec![0.1, 1.0],
            vec![0.0, 0.9],
        ])
        .unwrap();
        let y = [0, 0, 1, 1, 2, 2];
        let model = fit_logreg(&x, &y, 3, 0.1).unwrap();
        assert!(model.grad_norm <= GRAD_TOL);
        assert_eq!(model.predict(&x), y.to_vec());

        let p = Problem {
            x: &x,
            y: &y,
            classes: 3,
            lambda: 0.1,
        };
        let theta: Vec<f64> = (0..p.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let (_, g) = p.eval(&theta);
        for i in 0..theta.len() {
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (p.eval(&a).0 - p.eval(&b).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }
}
