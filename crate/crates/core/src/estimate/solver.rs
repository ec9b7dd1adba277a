//! Weighted moment solver.
//!
//! Minimises `sum_t w_t (m_t(theta) - a_t)^2` over the natural parameters
//! `(sigma_b1..sigma_bK, sigma_1..sigma_K, sigma_eps, rho)` with box
//! constraints, using a projected Levenberg-Marquardt iteration started
//! from several deterministic points derived from a linear solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{project_psd, ModelSpec, VarianceComponents};

use super::moments::{MomentSystem, PairClass};

const MAX_LM_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub theta: VarianceComponents,
    /// Weighted objective at the solution.
    pub objective: f64,
    pub boundary: Vec<String>,
    pub gamma_unidentified: bool,
    pub iterations: usize,
}

/// Parameter-vector layout: loadings, genetic SDs, free error SDs,
/// correlations.
struct Layout {
    k: usize,
    /// Error SD index per phenotype, `None` when pinned to one.
    eps: Vec<Option<usize>>,
    rho: Vec<(usize, usize)>,
    n: usize,
}

impl Layout {
    fn new(spec: &ModelSpec) -> Self {
        let k = spec.k();
        let mut n = 2 * k;
        let eps = (0..k)
            .map(|i| {
                if spec.is_binary(i) {
                    None
                } else {
                    n += 1;
                    Some(n - 1)
                }
            })
            .collect();
        let rho: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
        n += rho.len();
        Layout { k, eps, rho, n }
    }

    fn rho_index(&self, a: usize, b: usize) -> usize {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        let base = self.n - self.rho.len();
        base + self.rho.iter().position(|&p| p == (a, b)).expect("pair in layout")
    }

    fn bounds(&self, i: usize) -> (f64, f64) {
        if i < self.k {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else if i >= self.n - self.rho.len() {
            (-1.0, 1.0)
        } else {
            (0.0, f64::INFINITY)
        }
    }

    fn project(&self, x: &mut DVector<f64>) {
        for i in 0..self.n {
            let (lo, hi) = self.bounds(i);
            x[i] = x[i].clamp(lo, hi);
        }
    }

    fn sigma_eps(&self, x: &DVector<f64>, k: usize) -> f64 {
        self.eps[k].map_or(1.0, |i| x[i])
    }

    fn rho(&self, x: &DVector<f64>, a: usize, b: usize) -> f64 {
        if a == b {
            1.0
        } else {
            x[self.rho_index(a, b)]
        }
    }

    fn encode(&self, theta: &VarianceComponents) -> DVector<f64> {
        let mut x = DVector::zeros(self.n);
        for k in 0..self.k {
            x[k] = theta.sigma_shared[k];
            x[self.k + k] = theta.sigma_g[k];
            if let Some(i) = self.eps[k] {
                x[i] = theta.sigma_eps[k];
            }
        }
        for &(a, b) in &self.rho {
            x[self.rho_index(a, b)] = theta.rho[(a, b)];
        }
        x
    }

    fn decode(&self, x: &DVector<f64>) -> Result<VarianceComponents> {
        let k = self.k;
        let mut rho = DMatrix::identity(k, k);
        for &(a, b) in &self.rho {
            rho[(a, b)] = x[self.rho_index(a, b)];
            rho[(b, a)] = rho[(a, b)];
        }
        if k > 2 {
            rho = nearest_correlation(&rho);
        }
        VarianceComponents::from_loadings(
            (0..k).map(|i| x[i]).collect(),
            (0..k).map(|i| x[k + i]).collect(),
            (0..k).map(|i| self.sigma_eps(x, i)).collect(),
            rho,
        )
    }

    /// Weighted residuals and their Jacobian.
    fn evaluate(&self, system: &MomentSystem, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let t = system.len();
        let k = self.k;
        let mut r = DVector::zeros(t);
        let mut jac = DMatrix::zeros(t, self.n);
        for (e, eq) in system.equations.iter().enumerate() {
            let (a, b) = (eq.k, eq.m);
            let (c, same) = eq.class.coefficients();
            let sw = eq.weight.sqrt();
            let (sa, sb) = (x[a], x[b]);
            let (ga, gb) = (x[k + a], x[k + b]);
            let rho = self.rho(x, a, b);
            let mut model = sa * sb + c * rho * ga * gb;
            jac[(e, a)] += sw * sb;
            jac[(e, b)] += sw * sa;
            jac[(e, k + a)] += sw * c * rho * gb;
            jac[(e, k + b)] += sw * c * rho * ga;
            if a != b {
                jac[(e, self.rho_index(a, b))] = sw * c * ga * gb;
            }
            if same && a == b {
                let s = self.sigma_eps(x, a);
                model += s * s;
                if let Some(i) = self.eps[a] {
                    jac[(e, i)] = sw * 2.0 * s;
                }
            }
            r[e] = sw * (model - eq.value);
        }
        (r, jac)
    }

    /// Starting point from the linear least-squares problem in the
    /// covariance entries `(B, G, D)`.
    fn linear_start(&self, system: &MomentSystem) -> DVector<f64> {
        let k = self.k;
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a..k).map(move |b| (a, b))).collect();
        let np = pairs.len();
        let free_eps: Vec<usize> = (0..k).filter(|&i| self.eps[i].is_some()).collect();
        let cols = 2 * np + free_eps.len();
        let t = system.len();
        let mut a_mat = DMatrix::zeros(t, cols);
        let mut rhs = DVector::zeros(t);
        for (e, eq) in system.equations.iter().enumerate() {
            let sw = eq.weight.sqrt();
            let (c, same) = eq.class.coefficients();
            let p = pairs.iter().position(|&q| q == (eq.k, eq.m)).expect("pair k <= m");
            a_mat[(e, p)] = sw;
            a_mat[(e, np + p)] = sw * c;
            let mut target = eq.value;
            if same && eq.k == eq.m {
                match free_eps.iter().position(|&i| i == eq.k) {
                    Some(d) => a_mat[(e, 2 * np + d)] = sw,
                    None => target -= 1.0,
                }
            }
            rhs[e] = sw * target;
        }
        let sol = a_mat
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(cols));
        let sym = |off: usize| {
            let mut m = DMatrix::zeros(k, k);
            for (p, &(a, b)) in pairs.iter().enumerate() {
                m[(a, b)] = sol[off + p];
                m[(b, a)] = sol[off + p];
            }
            m
        };
        let shared = sym(0).symmetric_eigen();
        let top = shared.eigenvalues.imax();
        let scale = shared.eigenvalues[top].max(0.0).sqrt();
        let mut loadings: Vec<f64> = (0..k).map(|i| scale * shared.eigenvectors[(i, top)]).collect();
        if loadings[0] < 0.0 {
            loadings.iter_mut().for_each(|v| *v = -*v);
        }
        let g = project_psd(&sym(np));
        let mut x = DVector::zeros(self.n);
        for i in 0..k {
            x[i] = loadings[i];
            x[k + i] = g[(i, i)].max(0.0).sqrt();
        }
        for (d, &i) in free_eps.iter().enumerate() {
            x[self.eps[i].expect("free error SD")] = sol[2 * np + d].max(0.0).sqrt();
        }
        for &(a, b) in &self.rho {
            let denom = x[k + a] * x[k + b];
            x[self.rho_index(a, b)] = if denom > 0.0 {
                (g[(a, b)] / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
        x
    }

    fn starts(&self, system: &MomentSystem, warm: Option<&VarianceComponents>, restarts: usize) -> Vec<DVector<f64>> {
        let k = self.k;
        let lin = self.linear_start(system);
        let mut out = Vec::new();
        if let Some(w) = warm {
            out.push(self.encode(w));
        }
        let mut flipped = lin.clone();
        for i in 1..k {
            flipped[i] = -flipped[i];
        }
        let mut decorrelated = lin.clone();
        for i in 0..k {
            decorrelated[i] *= 0.5;
        }
        for &(a, b) in &self.rho {
            decorrelated[self.rho_index(a, b)] = 0.0;
        }
        let mut inflated = lin.clone();
        for i in 0..k {
            let var = system
                .equations
                .iter()
                .find(|e| e.k == i && e.m == i && e.class == PairClass::SameMember)
                .map_or(1.0, |e| e.value.max(1e-8));
            inflated[i] *= -0.5;
            inflated[k + i] = inflated[k + i].max((var / 3.0).sqrt()) * 1.2;
        }
        let mut balanced = DVector::zeros(self.n);
        for i in 0..k {
            let var = system
                .equations
                .iter()
                .find(|e| e.k == i && e.m == i && e.class == PairClass::SameMember)
                .map_or(1.0, |e| e.value.max(1e-8));
            let s = (var / 3.0).sqrt();
            balanced[i] = s;
            balanced[k + i] = s;
            if let Some(j) = self.eps[i] {
                balanced[j] = s;
            }
        }
        for x in [lin, flipped, decorrelated, inflated, balanced]
            .into_iter()
            .take(restarts.max(1))
        {
            out.push(x);
        }
        out
    }
}

/// Nearest correlation matrix by eigenvalue clipping and rescaling.
fn nearest_correlation(rho: &DMatrix<f64>) -> DMatrix<f64> {
    let p = project_psd(rho);
    let d: Vec<f64> = (0..p.nrows()).map(|i| p[(i, i)].max(1e-12).sqrt()).collect();
    DMatrix::from_fn(p.nrows(), p.ncols(), |a, b| {
        if a == b {
            1.0
        } else {
            (p[(a, b)] / (d[a] * d[b])).clamp(-1.0, 1.0)
        }
    })
}

struct LmOutcome {
    x: DVector<f64>,
    cost: f64,
    iterations: usize,
    converged: bool,
}

fn levenberg_marquardt(layout: &Layout, system: &MomentSystem, mut x: DVector<f64>) -> LmOutcome {
    layout.project(&mut x);
    let (mut r, mut jac) = layout.evaluate(system, &x);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let scale = 1.0 + system.equations.iter().map(|e| e.value.abs() * e.weight).sum::<f64>();
    for it in 0..MAX_LM_ITERATIONS {
        if cost <= 1e-30 * scale * scale {
            return LmOutcome {
                x,
                cost,
                iterations: it,
                converged: true,
            };
        }
        let g = jac.transpose() * &r;
        let free: Vec<usize> = (0..layout.n)
            .filter(|&i| {
                let (lo, hi) = layout.bounds(i);
                !((x[i] <= lo && g[i] > 0.0) || (x[i] >= hi && g[i] < 0.0))
            })
            .collect();
        let gmax = free.iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
        if free.is_empty() || gmax <= 1e-15 * scale {
            return LmOutcome {
                x,
                cost,
                iterations: it,
                converged: true,
            };
        }
        let jf = jac.select_columns(&free);
        let a = jf.transpose() * &jf;
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
        loop {
            let mut m = a.clone();
            for d in 0..free.len() {
                m[(d, d)] += lambda * (a[(d, d)] + 1e-12 * scale);
            }
            let step = match m.cholesky() {
                Some(ch) => ch.solve(&(-&gf)),
                None => {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        return LmOutcome {
                            x,
                            cost,
                            iterations: it,
                            converged: true,
                        };
                    }
                    continue;
                }
            };
            let mut trial = x.clone();
            for (d, &i) in free.iter().enumerate() {
                trial[i] += step[d];
            }
            layout.project(&mut trial);
            let (tr, tj) = layout.evaluate(system, &trial);
            let tcost = tr.norm_squared();
            if tcost < cost {
                let moved = (&trial - &x).amax();
                let gain = cost - tcost;
                x = trial;
                r = tr;
                jac = tj;
                cost = tcost;
                lambda = (lambda / 3.0).max(1e-15);
                if moved <= 1e-12 * (1.0 + x.amax()) || gain <= 1e-12 * cost {
                    return LmOutcome {
                        x,
                        cost,
                        iterations: it + 1,
                        converged: true,
                    };
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                // no descent direction remains
                return LmOutcome {
                    x,
                    cost,
                    iterations: it + 1,
                    converged: true,
                };
            }
        }
    }
    LmOutcome {
        x,
        cost,
        iterations: MAX_LM_ITERATIONS,
        converged: false,
    }
}

/// Solves the weighted moment equations for the variance components.
pub fn solve_theta(system: &MomentSystem, spec: &ModelSpec) -> Result<SolveReport> {
    solve_theta_from(system, spec, None, 5)
}

/// As [`solve_theta`], optionally adding `warm` as the first start.
pub fn solve_theta_from(
    system: &MomentSystem,
    spec: &ModelSpec,
    warm: Option<&VarianceComponents>,
    restarts: usize,
) -> Result<SolveReport> {
    let layout = Layout::new(spec);
    if let Some(e) = system.equations.iter().find(|e| e.m >= layout.k || e.k > e.m) {
        return Err(Error::Dimension(format!(
            "equation {} does not fit {} phenotypes",
            e.label(),
            layout.k
        )));
    }
    if system.len() < layout.n {
        return Err(Error::Domain(format!(
            "{} moment equations cannot identify {} parameters",
            system.len(),
            layout.n
        )));
    }
    if system.equations.iter().any(|e| !e.value.is_finite()) {
        return Err(Error::Domain("non-finite moment statistic".into()));
    }
    let mut best: Option<LmOutcome> = None;
    let mut total_iterations = 0;
    for start in layout.starts(system, warm, restarts) {
        let out = levenberg_marquardt(&layout, system, start);
        total_iterations += out.iterations;
        let better = match &best {
            None => true,
            Some(b) => (out.converged && !b.converged) || (out.converged == b.converged && out.cost < b.cost),
        };
        if better {
            best = Some(out);
        }
    }
    let best = best.expect("at least one start");
    if !best.converged {
        return Err(Error::NonConvergence {
            iterations: total_iterations,
            best_residual: best.cost,
            detail: "moment solver".into(),
        });
    }
    let theta = layout.decode(&best.x)?;
    let mut boundary = Vec::new();
    for k in 0..layout.k {
        if theta.sigma_g[k] == 0.0 {
            boundary.push(format!("sigma{}", k + 1));
        }
        if layout.eps[k].is_some() && theta.sigma_eps[k] == 0.0 {
            boundary.push(format!("sigma_eps{}", k + 1));
        }
    }
    for &(a, b) in &layout.rho {
        if theta.rho[(a, b)].abs() >= 1.0 {
            boundary.push(format!("rho{}{}", a + 1, b + 1));
        }
    }
    let magnitude = (0..layout.k)
        .map(|i| theta.total_variance(i))
        .fold(0.0, f64::max)
        .sqrt();
    let gamma_unidentified = theta.sigma_shared[0] <= 1e-6 * (1.0 + magnitude);
    Ok(SolveReport {
        objective: system.objective(&theta),
        theta,
        boundary,
        gamma_unidentified,
        iterations: total_iterations,
    })
}

/// Solver parameter vector, used for convergence checks.
pub(crate) fn theta_vector(spec: &ModelSpec, theta: &VarianceComponents) -> DVector<f64> {
    Layout::new(spec).encode(theta)
}

/// Inverse of [`theta_vector`] after clamping to the parameter box.
pub(crate) fn theta_from_vector(spec: &ModelSpec, x: &DVector<f64>) -> Result<VarianceComponents> {
    let layout = Layout::new(spec);
    if x.len() != layout.n {
        return Err(Error::Dimension(format!(
            "{} solver parameters, expected {}",
            x.len(),
            layout.n
        )));
    }
    let mut x = x.clone();
    layout.project(&mut x);
    layout.decode(&x)
}
