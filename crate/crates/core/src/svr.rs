//! Linear ε-insensitive support vector regression.
//!
//! The dual is solved in the 2m-variable form used by LIBSVM: `alpha` holds
//! the upper-tube multipliers (sign +1) followed by the lower-tube ones
//! (sign -1), and pairs are optimised analytically.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Checkpoint;
use crate::rng::seeded;
use crate::tensor::Tensor;

const TAU: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvrConfig {
    #[serde(rename = "C")]
    pub c: f64,
    pub epsilon: f64,
    /// Stop once the maximal KKT violation falls below this.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SvrConfig {
    fn default() -> Self {
        SvrConfig { c: 0.5, epsilon: 0.13, tolerance: 1e-3, max_iter: 10_000_000 }
    }
}

impl SvrConfig {
    pub fn new(c: f64, epsilon: f64) -> Self {
        SvrConfig { c, epsilon, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) || !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "need C > 0 and epsilon >= 0, got C={} epsilon={}",
                self.c, self.epsilon
            )));
        }
        if !(self.tolerance > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("tolerance and max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitStats {
    pub iterations: usize,
    /// Maximal KKT violation at exit.
    pub violation: f64,
    pub converged: bool,
    /// `1/2 b'Kb + eps sum|b| - y'b` at the returned dual coefficients.
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvrModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// `alpha_i - alpha*_i` per training row.
    pub dual_coeffs: Vec<f64>,
    pub config: SvrConfig,
    pub stats: FitStats,
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map(Vec::len).ok_or(Error::Empty("svr rows"))?;
    for row in x {
        if row.len() != d {
            return Err(Error::shape("svr", &[row.len()], &[d]));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("svr features".into()));
        }
    }
    Ok(d)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dual objective in terms of `beta = alpha - alpha*`.
pub fn dual_objective(kernel: &[f64], y: &[f64], epsilon: f64, beta: &[f64]) -> f64 {
    let m = y.len();
    let mut quad = 0.0;
    for i in 0..m {
        quad += beta[i] * dot(&kernel[i * m..(i + 1) * m], beta);
    }
    0.5 * quad + epsilon * beta.iter().map(|b| b.abs()).sum::<f64>() - dot(y, beta)
}

/// Gram matrix of the rows, row-major `m x m`.
pub fn linear_kernel(x: &[Vec<f64>]) -> Vec<f64> {
    let m = x.len();
    let flat: Vec<f64> = x.iter().flatten().copied().collect();
    let d = if m == 0 { 0 } else { flat.len() / m };
    let mut k = vec![0.0; m * m];
    if d > 0 {
        crate::tensor::gemm(m, d, m, 1.0, &flat, false, &flat, true, 0.0, &mut k);
    }
    k
}

/// Solves the ε-SVR dual with SMO and recovers the primal weights.
pub fn fit(x: &[Vec<f64>], y: &[f64], config: &SvrConfig) -> Result<SvrModel> {
    config.validate()?;
    let d = check_rows(x)?;
    let m = x.len();
    if y.len() != m {
        return Err(Error::shape("svr fit", &[m], &[y.len()]));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("svr targets".into()));
    }
    let kernel = linear_kernel(x);
    let c = config.c;
    let n = 2 * m;
    let z = |t: usize| if t < m { 1.0 } else { -1.0 };
    let k = |s: usize, t: usize| kernel[(s % m) * m + t % m];
    let mut alpha = vec![0.0; n];
    // gradient of 1/2 a'Qa + p'a at a = 0 is p
    let mut grad: Vec<f64> =
        (0..n).map(|t| if t < m { config.epsilon - y[t] } else { config.epsilon + y[t - m] }).collect();
    let mut iterations = 0;
    let mut violation;
    loop {
        // maximal violating pair
        let (mut gmax, mut gmax2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let (mut i, mut j) = (usize::MAX, usize::MAX);
        for t in 0..n {
            let up = if z(t) > 0.0 { alpha[t] < c } else { alpha[t] > 0.0 };
            let low = if z(t) > 0.0 { alpha[t] > 0.0 } else { alpha[t] < c };
            let v = -z(t) * grad[t];
            if up && v >= gmax {
                gmax = v;
                i = t;
            }
            if low && -v >= gmax2 {
                gmax2 = -v;
                j = t;
            }
        }
        violation = (gmax + gmax2).max(0.0);
        if i == usize::MAX || j == usize::MAX || gmax + gmax2 < config.tolerance || iterations >= config.max_iter {
            break;
        }
        iterations += 1;
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let mut quad = k(i, i) + k(j, j) - 2.0 * k(i, j);
        if quad <= 0.0 {
            quad = TAU;
        }
        if z(i) != z(j) {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += z(t) * (z(i) * k(t, i) * di + z(j) * k(t, j) * dj);
        }
    }
    let rho = compute_rho(&alpha, &grad, m, c);
    let dual_coeffs: Vec<f64> = (0..m).map(|t| alpha[t] - alpha[t + m]).collect();
    let mut weights = vec![0.0; d];
    for (row, b) in x.iter().zip(&dual_coeffs) {
        for (w, v) in weights.iter_mut().zip(row) {
            *w += b * v;
        }
    }
    let objective = dual_objective(&kernel, y, config.epsilon, &dual_coeffs);
    Ok(SvrModel {
        weights,
        bias: -rho,
        dual_coeffs,
        config: config.clone(),
        stats: FitStats { iterations, violation, converged: violation < config.tolerance, objective },
    })
}

/// Offset from the free multipliers, or the midpoint of the feasible interval.
fn compute_rho(alpha: &[f64], grad: &[f64], m: usize, c: f64) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..2 * m {
        let z = if t < m { 1.0 } else { -1.0 };
        let yg = z * grad[t];
        if alpha[t] >= c {
            if z < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if z > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    }
}

impl SvrModel {
    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::shape("svr predict", &[x.len()], &[self.weights.len()]));
        }
        Ok(dot(&self.weights, x) + self.bias)
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        x.iter().map(|row| self.predict_one(row)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let s = &self.stats;
        let mut ckpt = Checkpoint::new()
            .with_meta("kind", "svr")
            .with_meta("dims", self.weights.len())
            .with_meta("rows", self.dual_coeffs.len())
            .with_meta("C", self.config.c)
            .with_meta("epsilon", self.config.epsilon)
            .with_meta("tolerance", self.config.tolerance)
            .with_meta("max_iter", self.config.max_iter)
            .with_meta("iterations", s.iterations)
            .with_meta("violation", s.violation)
            .with_meta("converged", s.converged)
            .with_meta("objective", s.objective);
        // tensors cannot be empty, so zero-length vectors are stored as one zero
        let vec_tensor = |v: &[f64]| {
            let mut t = Tensor::zeros(&[v.len().max(1)]);
            t.data_mut()[..v.len()].copy_from_slice(v);
            t
        };
        ckpt.push("weights", vec_tensor(&self.weights));
        ckpt.push("bias", vec_tensor(&[self.bias]));
        ckpt.push("dual_coeffs", vec_tensor(&self.dual_coeffs));
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let dims: usize = ckpt.meta_value("dims")?;
        let weights = ckpt.require("weights")?.data().to_vec();
        if weights.len() != dims.max(1) {
            return Err(Error::Format(format!("svr weights have {} entries, header says {dims}", weights.len())));
        }
        Ok(SvrModel {
            weights: weights[..dims].to_vec(),
            bias: ckpt.require("bias")?.data()[0],
            dual_coeffs: {
                let n: usize = ckpt.meta_value("rows")?;
                ckpt.require("dual_coeffs")?.data()[..n].to_vec()
            },
            config: SvrConfig {
                c: ckpt.meta_value("C")?,
                epsilon: ckpt.meta_value("epsilon")?,
                tolerance: ckpt.meta_value("tolerance")?,
                max_iter: ckpt.meta_value("max_iter")?,
            },
            stats: FitStats {
                iterations: ckpt.meta_value("iterations")?,
                violation: ckpt.meta_value("violation")?,
                converged: ckpt.meta_value("converged")?,
                objective: ckpt.meta_value("objective")?,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        SvrModel::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSearchSpec {
    #[serde(rename = "C_grid")]
    pub c_grid: Vec<f64>,
    pub epsilon_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for GridSearchSpec {
    fn default() -> Self {
        GridSearchSpec {
            c_grid: vec![0.1, 0.25, 0.5, 1.0, 2.0],
            epsilon_grid: vec![0.05, 0.1, 0.13, 0.2],
            folds: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvCell {
    pub c: f64,
    pub epsilon: f64,
    /// Validation RMSE per fold; `None` when a fold's fit failed.
    pub fold_rmse: Option<Vec<f64>>,
}

impl CvCell {
    pub fn mean_rmse(&self) -> Option<f64> {
        self.fold_rmse.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvTable {
    pub cells: Vec<CvCell>,
}

impl CvTable {
    /// `C,epsilon,fold,rmse`; failed cells are written with an empty rmse.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("C,epsilon,fold,rmse\n");
        for cell in &self.cells {
            match &cell.fold_rmse {
                Some(v) => {
                    for (f, r) in v.iter().enumerate() {
                        let _ = writeln!(out, "{},{},{f},{r}", cell.c, cell.epsilon);
                    }
                }
                None => {
                    let _ = writeln!(out, "{},{},,", cell.c, cell.epsilon);
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::shape("rmse", &[pred.len()], &[truth.len()]));
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// K-fold cross-validated grid search; returns the best config and the table.
pub fn grid_search_cv(
    x: &[Vec<f64>],
    y: &[f64],
    spec: &GridSearchSpec,
    base: &SvrConfig,
) -> Result<(SvrConfig, CvTable)> {
    if spec.folds < 2 || spec.c_grid.is_empty() || spec.epsilon_grid.is_empty() {
        return Err(Error::Config("grid search needs folds >= 2 and non-empty grids".into()));
    }
    if x.len() < spec.folds || x.len() != y.len() {
        return Err(Error::Config(format!("{} rows cannot fill {} folds", x.len(), spec.folds)));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.shuffle(&mut seeded(spec.seed));
    let mut fold_of = vec![0; x.len()];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % spec.folds;
    }
    let mut cells = Vec::new();
    for &c in &spec.c_grid {
        for &epsilon in &spec.epsilon_grid {
            let cfg = SvrConfig { c, epsilon, ..base.clone() };
            let scores: Result<Vec<f64>> = (0..spec.folds)
                .map(|f| {
                    let pick = |keep: bool| -> (Vec<Vec<f64>>, Vec<f64>) {
                        (0..x.len()).filter(|&i| (fold_of[i] == f) != keep).map(|i| (x[i].clone(), y[i])).unzip()
                    };
                    let (tx, ty) = pick(true);
                    let (vx, vy) = pick(false);
                    let model = fit(&tx, &ty, &cfg)?;
                    rmse(&model.predict(&vx)?, &vy)
                })
                .collect();
            cells.push(CvCell { c, epsilon, fold_rmse: scores.ok() });
        }
    }
    let best = cells
        .iter()
        .filter_map(|cell| cell.mean_rmse().map(|s| (s, cell)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.c.total_cmp(&b.1.c)).then(a.1.epsilon.total_cmp(&b.1.epsilon)))
        .map(|(_, cell)| SvrConfig { c: cell.c, epsilon: cell.epsilon, ..base.clone() })
        .ok_or_else(|| Error::Config("every grid cell failed".into()))?;
    Ok((best, CvTable { cells }))
}
