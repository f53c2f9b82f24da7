//! Test-side oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// `1/2 b'Kb + eps sum|b| - y'b`
pub fn svr_dual_objective(k: &[f64], y: &[f64], eps: f64, beta: &[f64]) -> f64 {
    let m = y.len();
    let mut v = 0.0;
    for i in 0..m {
        for j in 0..m {
            v += 0.5 * beta[i] * k[i * m + j] * beta[j];
        }
        v += eps * beta[i].abs() - y[i] * beta[i];
    }
    v
}

/// Exhaustive minimiser of the ε-SVR dual over `sum b = 0`, `|b_i| <= C`.
///
/// Every variable is assigned one of five states (at -C, free negative, at 0,
/// free positive, at +C). Within a state assignment the objective is a
/// quadratic with fixed signs, so the free block solves a linear KKT system.
/// Feasible stationary points are collected and the smallest objective wins.
pub fn brute_force_svr_dual(k: &[f64], y: &[f64], c: f64, eps: f64) -> (f64, Vec<f64>) {
    let m = y.len();
    let mut best = (f64::INFINITY, vec![0.0; m]);
    let mut states = vec![0usize; m];
    loop {
        let free: Vec<usize> = (0..m).filter(|&i| states[i] == 1 || states[i] == 3).collect();
        let mut beta = vec![0.0; m];
        for i in 0..m {
            beta[i] = match states[i] {
                0 => -c,
                4 => c,
                _ => 0.0,
            };
        }
        let fixed_sum: f64 = beta.iter().sum();
        let feasible = if free.is_empty() {
            fixed_sum.abs() < 1e-12
        } else {
            let nf = free.len();
            let mut a = DMatrix::<f64>::zeros(nf + 1, nf + 1);
            let mut rhs = DVector::<f64>::zeros(nf + 1);
            for (r, &i) in free.iter().enumerate() {
                let sign = if states[i] == 1 { -1.0 } else { 1.0 };
                for (s, &j) in free.iter().enumerate() {
                    a[(r, s)] = k[i * m + j];
                }
                a[(r, nf)] = 1.0;
                let fixed_part: f64 = (0..m).map(|j| k[i * m + j] * beta[j]).sum();
                rhs[r] = y[i] - eps * sign - fixed_part;
            }
            for s in 0..nf {
                a[(nf, s)] = 1.0;
            }
            rhs[nf] = -fixed_sum;
            // singular blocks (rank-deficient kernels) fall back to the pseudo-inverse
            let sol = a.clone().full_piv_lu().solve(&rhs).or_else(|| a.clone().svd(true, true).solve(&rhs, 1e-12).ok());
            match sol {
                Some(sol) if (&a * &sol - &rhs).norm() < 1e-9 * (1.0 + rhs.norm()) => {
                    let mut ok = true;
                    for (r, &i) in free.iter().enumerate() {
                        let v = sol[r];
                        let sign = if states[i] == 1 { -1.0 } else { 1.0 };
                        ok &= sign * v >= -1e-12 && v.abs() <= c + 1e-12;
                        beta[i] = v;
                    }
                    ok
                }
                _ => false,
            }
        };
        if feasible {
            let obj = svr_dual_objective(k, y, eps, &beta);
            if obj < best.0 {
                best = (obj, beta);
            }
        }
        // next state assignment
        let mut pos = 0;
        loop {
            if pos == m {
                return best;
            }
            states[pos] += 1;
            if states[pos] < 5 {
                break;
            }
            states[pos] = 0;
            pos += 1;
        }
    }
}
