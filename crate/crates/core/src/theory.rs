//! Label-skew heterogeneity on identifiable toy models.
//!
//! Clients share Gaussian class conditionals `N(μ_y, σ²I)` and differ only
//! in their class priors. A linear softmax model with the last class's row
//! pinned to zero has a unique maximum-likelihood estimate, so the sample
//! variance of fitted parameters across clients is meaningful:
//!
//! - the *standard* parameterisation fits `softmax(Wx + b)` and converges to
//!   client-specific parameters (variance tends to a nonzero constant);
//! - the *calibrated* parameterisation fits `softmax(Wx + b + log π_i)` and
//!   converges to parameters shared by every client (variance tends to zero,
//!   up to the bias introduced by the smoothing constant δ).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassPrior;
use crate::metrics::sample_variance;
use crate::seed;

/// Shared Gaussian class conditionals with per-client priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDistribution {
    /// One mean per class, each of dimension `d`.
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    /// `priors[i][y] = p_i(y)`.
    pub priors: Vec<Vec<f64>>,
}

impl ToyDistribution {
    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn clients(&self) -> usize {
        self.priors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.len() < 2 {
            return Err(Error::Config("toy distribution needs at least 2 classes".into()));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Config("class means must share a positive dimension".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.priors.is_empty() {
            return Err(Error::Config("toy distribution needs at least one client".into()));
        }
        for (i, p) in self.priors.iter().enumerate() {
            if p.len() != self.classes() {
                return Err(Error::Config(format!("client {i} prior has {} entries", p.len())));
            }
            if p.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("client {i} prior has a negative entry")));
            }
            if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("client {i} prior does not sum to 1")));
            }
        }
        Ok(())
    }

    /// `true` when every pair of clients differs in some class prior.
    pub fn is_skewed(&self) -> bool {
        let m = self.clients();
        (0..m).all(|i| (i + 1..m).all(|u| self.priors[i] != self.priors[u]))
    }

    /// The toy used for the heterogeneity checks: two 1-D classes at ±1,
    /// σ = 1, three clients with priors 0.9/0.1, 0.5/0.5, 0.1/0.9.
    pub fn two_class_default() -> Self {
        Self {
            means: vec![vec![-1.0], vec![1.0]],
            sigma: 1.0,
            priors: vec![vec![0.9, 0.1], vec![0.5, 0.5], vec![0.1, 0.9]],
        }
    }

    fn log_likelihoods(&self, x: &[f64]) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        self.means
            .iter()
            .map(|mu| -mu.iter().zip(x).map(|(m, v)| (v - m) * (v - m)).sum::<f64>() / (2.0 * s2))
            .collect()
    }
}

/// Bayes posterior `p_i(y | x)` with exact Gaussian likelihoods.
pub fn analytic_posterior(dist: &ToyDistribution, client: usize, x: &[f64]) -> Result<Vec<f64>> {
    if client >= dist.clients() {
        return Err(Error::Index(format!("client {client} of {}", dist.clients())));
    }
    if x.len() != dist.dim() {
        return Err(Error::Shape(format!("point has {} coordinates, expected {}", x.len(), dist.dim())));
    }
    let logs: Vec<f64> = dist
        .log_likelihoods(x)
        .iter()
        .zip(&dist.priors[client])
        .map(|(l, p)| if *p > 0.0 { l + p.ln() } else { f64::NEG_INFINITY })
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.iter().map(|v| v / total).collect())
}

/// Cartesian grid spanning `[min μ − 6σ, max μ + 6σ]` on every axis.
pub fn default_grid(dist: &ToyDistribution, points_per_axis: usize) -> Vec<Vec<f64>> {
    let d = dist.dim();
    let n = points_per_axis.max(2);
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let lo = dist.means.iter().map(|m| m[k]).fold(f64::INFINITY, f64::min) - 6.0 * dist.sigma;
            let hi = dist.means.iter().map(|m| m[k]).fold(f64::NEG_INFINITY, f64::max) + 6.0 * dist.sigma;
            (0..n).map(|t| lo + (hi - lo) * t as f64 / (n - 1) as f64).collect()
        })
        .collect();
    let mut grid = vec![Vec::new()];
    for axis in &axes {
        grid = grid
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGap {
    pub gap: f64,
    /// Where the gap is attained.
    pub argmax: Vec<f64>,
    /// `false` when the two clients have identical priors.
    pub skewed: bool,
}

/// `max_{x ∈ grid, y} |p_i(y|x) − p_u(y|x)|`.
pub fn posterior_gap(dist: &ToyDistribution, i: usize, u: usize, grid: &[Vec<f64>]) -> Result<PosteriorGap> {
    if i == u {
        return Err(Error::Config("posterior gap needs two distinct clients".into()));
    }
    let skewed = dist.priors.get(i) != dist.priors.get(u);
    let mut best = PosteriorGap {
        gap: 0.0,
        argmax: grid.first().cloned().unwrap_or_default(),
        skewed,
    };
    for x in grid {
        let a = analytic_posterior(dist, i, x)?;
        let b = analytic_posterior(dist, u, x)?;
        let g = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        if g > best.gap {
            best.gap = g;
            best.argmax = x.clone();
        }
    }
    if !skewed {
        log::info!("clients {i} and {u} share a prior: not skewed");
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    Standard,
    Calibrated,
}

/// Linear softmax fit with the last class pinned to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    /// Row-major `C × d`; the last row is zero.
    pub weights: Vec<f64>,
    /// Length `C`; the last entry is zero.
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LinearFit {
    /// Free parameters `(W_0, b_0, …, W_{C−2}, b_{C−2})` as one vector.
    pub fn free_params(&self) -> Vec<f64> {
        let c = self.bias.len();
        let d = self.weights.len() / c;
        let mut out = Vec::with_capacity((c - 1) * (d + 1));
        for k in 0..c - 1 {
            out.extend_from_slice(&self.weights[k * d..(k + 1) * d]);
            out.push(self.bias[k]);
        }
        out
    }
}

/// Stopping rule for [`fit_local_mle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100_000,
        }
    }
}

/// Weighted mean negative log-likelihood and its gradient over the free
/// parameters.
fn nll_grad(
    theta: &[f64],
    xs: &[Vec<f64>],
    ys: &[usize],
    ws: &[f64],
    classes: usize,
    offset: &[f64],
) -> (f64, Vec<f64>) {
    let d = xs[0].len();
    let stride = d + 1;
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    let mut z = vec![0.0; classes];
    for ((x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        for k in 0..classes {
            z[k] = offset[k]
                + if k + 1 < classes {
                    let row = &theta[k * stride..k * stride + d];
                    row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + theta[k * stride + d]
                } else {
                    0.0
                };
        }
        let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - top).exp()).sum();
        let lse = top + sum.ln();
        loss += w * (lse - z[y]);
        for k in 0..classes - 1 {
            let r = (z[k] - lse).exp() - if k == y { 1.0 } else { 0.0 };
            let g = &mut grad[k * stride..(k + 1) * stride];
            for (gv, xv) in g[..d].iter_mut().zip(x) {
                *gv += w * r * xv;
            }
            g[d] += w * r;
        }
    }
    (loss, grad)
}

/// Upper bound on the largest eigenvalue of the weighted second-moment
/// matrix of `[x, 1]`.
fn second_moment_top_eigen(xs: &[Vec<f64>], ws: &[f64]) -> f64 {
    let d = xs[0].len() + 1;
    let mut m = vec![0.0; d * d];
    for (x, &w) in xs.iter().zip(ws) {
        for a in 0..d {
            let xa = if a + 1 == d { 1.0 } else { x[a] };
            for b in 0..d {
                let xb = if b + 1 == d { 1.0 } else { x[b] };
                m[a * d + b] += w * xa * xb;
            }
        }
    }
    // Gershgorin: never below the true top eigenvalue
    (0..d)
        .map(|a| (0..d).map(|b| m[a * d + b].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Full-batch gradient descent on the weighted mean NLL.
///
/// The step is `1/L` with `L ≥ ½·λ_max(E[x̃ x̃ᵀ])`, an upper bound on the
/// softmax NLL curvature, so every step decreases the objective.
fn fit_weighted(
    xs: &[Vec<f64>],
    ys: &[usize],
    ws: &[f64],
    classes: usize,
    offset: &[f64],
    init: Option<&[f64]>,
    opts: FitOptions,
) -> Result<LinearFit> {
    let d = xs[0].len();
    let p = (classes - 1) * (d + 1);
    let mut theta = match init {
        Some(v) if v.len() == p => v.to_vec(),
        Some(v) => return Err(Error::Shape(format!("initial point has {} entries, expected {p}", v.len()))),
        None => vec![0.0; p],
    };
    let lipschitz = 0.5 * second_moment_top_eigen(xs, ws);
    if !(lipschitz > 0.0) {
        return Err(Error::Domain("degenerate design matrix".into()));
    }
    let step = 1.0 / lipschitz;
    let mut iterations = 0;
    let mut grad_norm;
    loop {
        let (_, g) = nll_grad(&theta, xs, ys, ws, classes, offset);
        grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient during fit".into()));
        }
        if grad_norm < opts.tol {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::NoConvergence { iterations, grad_norm });
        }
        for (t, gv) in theta.iter_mut().zip(&g) {
            *t -= step * gv;
        }
        iterations += 1;
    }
    let mut weights = vec![0.0; classes * d];
    let mut bias = vec![0.0; classes];
    for k in 0..classes - 1 {
        weights[k * d..(k + 1) * d].copy_from_slice(&theta[k * (d + 1)..k * (d + 1) + d]);
        bias[k] = theta[k * (d + 1) + d];
    }
    Ok(LinearFit {
        weights,
        bias,
        iterations,
        grad_norm,
    })
}

/// Maximum-likelihood linear softmax fit on one client's samples.
///
/// `Calibrated` adds `log π` (from `prior`) to the logits.
pub fn fit_local_mle(
    xs: &[Vec<f64>],
    ys: &[usize],
    classes: usize,
    parameterization: Parameterization,
    prior: Option<&ClassPrior>,
    init: Option<&[f64]>,
    opts: FitOptions,
) -> Result<LinearFit> {
    if classes < 2 {
        return Err(Error::Config("fit needs at least 2 classes".into()));
    }
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Shape("one label per sample and at least one sample".into()));
    }
    if xs.len() < classes {
        return Err(Error::Domain(format!("{} samples for {classes} classes", xs.len())));
    }
    if let Some(y) = ys.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!("label {y} with {classes} classes")));
    }
    let offset = match parameterization {
        Parameterization::Standard => vec![0.0; classes],
        Parameterization::Calibrated => {
            let prior = prior.ok_or_else(|| Error::Config("calibrated fit needs a prior".into()))?;
            if prior.classes() != classes {
                return Err(Error::Shape("prior class count".into()));
            }
            prior.pi().iter().map(|p| p.ln()).collect()
        }
    };
    let w = vec![1.0 / xs.len() as f64; xs.len()];
    fit_weighted(xs, ys, &w, classes, &offset, init, opts)
}

/// Standard-parameterisation MLE against client `i`'s population, with the
/// expectation over `x | y` computed by a trapezoid rule on ±10σ per axis.
pub fn population_mle(dist: &ToyDistribution, client: usize, nodes_per_axis: usize) -> Result<LinearFit> {
    dist.validate()?;
    if dist.dim() > 2 {
        return Err(Error::Config("population quadrature supports d <= 2".into()));
    }
    let n = nodes_per_axis.max(3);
    let h = 20.0 / (n - 1) as f64;
    let axis: Vec<(f64, f64)> = (0..n)
        .map(|t| {
            let z = -10.0 + h * t as f64;
            let end = if t == 0 || t == n - 1 { 0.5 } else { 1.0 };
            (z, end * h * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect();
    let mut offsets = vec![(Vec::new(), 1.0)];
    for _ in 0..dist.dim() {
        offsets = offsets
            .into_iter()
            .flat_map(|(p, w): (Vec<f64>, f64)| {
                axis.iter().map(move |&(z, wz)| {
                    let mut q = p.clone();
                    q.push(z);
                    (q, w * wz)
                })
            })
            .collect();
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for (y, mu) in dist.means.iter().enumerate() {
        let py = dist.priors[client][y];
        if py == 0.0 {
            continue;
        }
        for (z, w) in &offsets {
            xs.push(mu.iter().zip(z).map(|(m, zv)| m + dist.sigma * zv).collect());
            ys.push(y);
            ws.push(py * w);
        }
    }
    let total: f64 = ws.iter().sum();
    for w in &mut ws {
        *w /= total;
    }
    fit_weighted(&xs, &ys, &ws, dist.classes(), &vec![0.0; dist.classes()], None, FitOptions::default())
}

/// Closed-form population parameters of the standard parameterisation for
/// equal-covariance Gaussians (last class pinned).
pub fn closed_form_parameters(dist: &ToyDistribution, client: usize) -> Vec<f64> {
    let c = dist.classes();
    let s2 = dist.sigma * dist.sigma;
    let last = &dist.means[c - 1];
    let norm2 = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let mut out = Vec::new();
    for k in 0..c - 1 {
        let mu = &dist.means[k];
        out.extend(mu.iter().zip(last).map(|(a, b)| (a - b) / s2));
        out.push(
            -(norm2(mu) - norm2(last)) / (2.0 * s2) + (dist.priors[client][k] / dist.priors[client][c - 1]).ln(),
        );
    }
    out
}

/// Draws `n` labelled points from client `i`'s distribution.
pub fn sample_client<R: Rng + ?Sized>(dist: &ToyDistribution, client: usize, n: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<usize>) {
    let normal = Normal::new(0.0, dist.sigma).expect("positive sigma");
    let prior = &dist.priors[client];
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut y = prior.len() - 1;
        for (k, p) in prior.iter().enumerate() {
            acc += p;
            if u < acc {
                y = k;
                break;
            }
        }
        xs.push(dist.means[y].iter().map(|m| m + normal.sample(rng)).collect());
        ys.push(y);
    }
    (xs, ys)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub delta: f64,
    pub fit: FitOptionsSerde,
}

/// Serializable mirror of [`FitOptions`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptionsSerde {
    pub tol: f64,
    pub max_iter: usize,
}

impl From<FitOptionsSerde> for FitOptions {
    fn from(v: FitOptionsSerde) -> Self {
        Self {
            tol: v.tol,
            max_iter: v.max_iter,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![200, 2_000, 20_000],
            seeds: vec![0, 1, 2, 3, 4],
            delta: 0.01,
            fit: FitOptionsSerde {
                tol: 1e-8,
                max_iter: 100_000,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub sizes: Vec<usize>,
    /// Median over seeds of `s²` per size.
    pub s2_standard: Vec<f64>,
    pub s2_calibrated: Vec<f64>,
    /// `[size][seed]`.
    pub s2_standard_per_seed: Vec<Vec<f64>>,
    pub s2_calibrated_per_seed: Vec<Vec<f64>>,
    /// Largest analytic posterior gap over client pairs.
    pub posterior_gap: f64,
    /// Population MLE of each client under the standard parameterisation.
    pub theta_star: Vec<Vec<f64>>,
    /// `(s*)²` over `theta_star`.
    pub s_star_sq: f64,
    /// Samples redrawn because a client missed a class.
    pub resamples: usize,
    pub skewed: bool,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `s²` of standard and calibrated local MLEs across clients, for each sample
/// size, medians over seeds.
pub fn variance_sweep(dist: &ToyDistribution, cfg: &SweepConfig) -> Result<TheoryReport> {
    dist.validate()?;
    if dist.clients() < 2 {
        return Err(Error::Config("variance sweep needs at least 2 clients".into()));
    }
    if cfg.sizes.is_empty() || cfg.sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("sweep sizes must be non-empty and strictly increasing".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    if cfg.sizes[0] < dist.classes() {
        return Err(Error::Config("smallest sweep size below the class count".into()));
    }
    let opts: FitOptions = cfg.fit.into();
    let classes = dist.classes();
    let mut resamples = 0;
    let mut std_per = Vec::new();
    let mut cal_per = Vec::new();
    for &n in &cfg.sizes {
        let mut std_row = Vec::new();
        let mut cal_row = Vec::new();
        for &s in &cfg.seeds {
            let mut std_fits = Vec::new();
            let mut cal_fits = Vec::new();
            for i in 0..dist.clients() {
                let mut rng = seed::rng(s, &[seed::tag::THEORY, n as u64, i as u64]);
                let (xs, ys) = loop {
                    let (xs, ys) = sample_client(dist, i, n, &mut rng);
                    let mut counts = vec![0usize; classes];
                    for &y in &ys {
                        counts[y] += 1;
                    }
                    let needed = dist.priors[i].iter().zip(&counts).all(|(p, c)| *p == 0.0 || *c > 0);
                    if needed && counts.iter().filter(|&&c| c > 0).count() >= 2 {
                        break (xs, ys);
                    }
                    resamples += 1;
                    log::warn!("client {i} at n = {n} missed a class; redrawing");
                };
                let mut counts = vec![0usize; classes];
                for &y in &ys {
                    counts[y] += 1;
                }
                let prior = ClassPrior::from_counts(&counts, cfg.delta)?;
                std_fits.push(fit_local_mle(&xs, &ys, classes, Parameterization::Standard, None, None, opts)?.free_params());
                cal_fits.push(
                    fit_local_mle(&xs, &ys, classes, Parameterization::Calibrated, Some(&prior), None, opts)?.free_params(),
                );
            }
            let views: Vec<&[f64]> = std_fits.iter().map(|v| v.as_slice()).collect();
            std_row.push(sample_variance(&views)?);
            let views: Vec<&[f64]> = cal_fits.iter().map(|v| v.as_slice()).collect();
            cal_row.push(sample_variance(&views)?);
        }
        std_per.push(std_row);
        cal_per.push(cal_row);
    }
    let grid = default_grid(dist, if dist.dim() == 1 { 2001 } else { 101 });
    let mut gap: f64 = 0.0;
    for i in 0..dist.clients() {
        for u in i + 1..dist.clients() {
            gap = gap.max(posterior_gap(dist, i, u, &grid)?.gap);
        }
    }
    let theta_star = if dist.dim() <= 2 {
        (0..dist.clients())
            .map(|i| population_mle(dist, i, 401).map(|f| f.free_params()))
            .collect::<Result<Vec<_>>>()?
    } else {
        (0..dist.clients()).map(|i| closed_form_parameters(dist, i)).collect()
    };
    let views: Vec<&[f64]> = theta_star.iter().map(|v| v.as_slice()).collect();
    let s_star_sq = sample_variance(&views)?;
    Ok(TheoryReport {
        sizes: cfg.sizes.clone(),
        s2_standard: std_per.iter().map(|r| median(r)).collect(),
        s2_calibrated: cal_per.iter().map(|r| median(r)).collect(),
        s2_standard_per_seed: std_per,
        s2_calibrated_per_seed: cal_per,
        posterior_gap: gap,
        theta_star,
        s_star_sq,
        resamples,
        skewed: dist.is_skewed(),
    })
}

/// Thresholds for [`check_report`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryThresholds {
    /// Calibrated `s²` must shrink by at least this factor from the smallest
    /// to the largest size.
    pub calibrated_decrease: f64,
    /// Standard `s²` must exceed calibrated `s²` by this factor at the
    /// largest size.
    pub separation: f64,
    /// Standard `s²` at the largest size within this factor of `(s*)²`.
    pub s_star_factor: f64,
    /// Minimum posterior gap for skewed clients.
    pub min_gap: f64,
}

impl Default for TheoryThresholds {
    fn default() -> Self {
        Self {
            calibrated_decrease: 10.0,
            separation: 10.0,
            s_star_factor: 2.0,
            min_gap: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Evaluates the heterogeneity claims on a sweep report.
///
/// For skewed clients: posterior gap, calibrated decrease, eventual
/// monotonicity, standard/calibrated separation and agreement of the
/// standard curve with `(s*)²`. Without skew both curves must shrink and
/// the posterior gap must vanish.
pub fn check_report(report: &TheoryReport, t: &TheoryThresholds) -> Vec<Check> {
    let last = report.sizes.len() - 1;
    let cal = &report.s2_calibrated;
    let std = &report.s2_standard;
    let tail = &cal[last.saturating_sub(2)..];
    let monotone = tail.windows(2).all(|w| w[1] < w[0]);
    let mut checks = vec![check(
        "calibrated_s2_eventually_decreasing",
        monotone,
        format!("last values {tail:?}"),
    )];
    if report.skewed {
        checks.push(check(
            "posterior_gap",
            report.posterior_gap > t.min_gap,
            format!("gap {:.6} (threshold {})", report.posterior_gap, t.min_gap),
        ));
        checks.push(check(
            "calibrated_s2_shrinks",
            cal[last] < cal[0] / t.calibrated_decrease,
            format!("s2 {:.3e} at n={} vs {:.3e} at n={}", cal[last], report.sizes[last], cal[0], report.sizes[0]),
        ));
        checks.push(check(
            "standard_vs_calibrated_separation",
            std[last] >= t.separation * cal[last],
            format!("standard {:.3e} vs calibrated {:.3e}", std[last], cal[last]),
        ));
        let ratio = std[last] / report.s_star_sq;
        checks.push(check(
            "standard_s2_near_population",
            ratio <= t.s_star_factor && ratio >= 1.0 / t.s_star_factor,
            format!("standard {:.4} vs (s*)^2 {:.4} (ratio {ratio:.3})", std[last], report.s_star_sq),
        ));
    } else {
        checks.push(check(
            "posterior_gap_vanishes",
            report.posterior_gap < 1e-12,
            format!("gap {:.3e}", report.posterior_gap),
        ));
        checks.push(check(
            "standard_s2_decreasing",
            std[last] < std[0],
            format!("standard {:.3e} -> {:.3e}", std[0], std[last]),
        ));
    }
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equidistant_point_with_equal_priors() {
        let dist = ToyDistribution {
            priors: vec![vec![0.5, 0.5], vec![1.0, 0.0]],
            ..ToyDistribution::two_class_default()
        };
        let p = analytic_posterior(&dist, 0, &[0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        for x in [-3.0, 0.0, 2.5] {
            assert_eq!(analytic_posterior(&dist, 1, &[x]).unwrap(), vec![1.0, 0.0]);
        }
    }

    #[test]
    fn midpoint_posterior_equals_prior() {
        let dist = ToyDistribution::two_class_default();
        let p = analytic_posterior(&dist, 0, &[0.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15 && (p[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn gap_examples() {
        let dist = ToyDistribution::two_class_default();
        let grid = default_grid(&dist, 201);
        let g02 = posterior_gap(&dist, 0, 2, &grid).unwrap();
        assert!(g02.gap > 0.5);
        assert!(g02.skewed);
        let g20 = posterior_gap(&dist, 2, 0, &grid).unwrap();
        assert_eq!(g02.gap, g20.gap);
        let same = ToyDistribution { priors: vec![vec![0.3, 0.7]; 2], ..dist };
        let g = posterior_gap(&same, 0, 1, &grid).unwrap();
        assert_eq!(g.gap, 0.0);
        assert!(!g.skewed);
        assert!(posterior_gap(&same, 1, 1, &grid).is_err());
    }

    #[test]
    fn grid_spans_six_sigma() {
        let dist = ToyDistribution::two_class_default();
        let g = default_grid(&dist, 5);
        assert_eq!(g.first().unwrap(), &vec![-7.0]);
        assert_eq!(g.last().unwrap(), &vec![7.0]);
    }

    #[test]
    fn balanced_client_calibrated_equals_standard() {
        let dist = ToyDistribution { priors: vec![vec![0.5, 0.5]], ..ToyDistribution::two_class_default() };
        let mut rng = seed::rng(1, &[]);
        let (mut xs, mut ys) = sample_client(&dist, 0, 300, &mut rng);
        // force exactly balanced counts
        let zeros = ys.iter().filter(|&&y| y == 0).count();
        let keep = zeros.min(300 - zeros);
        let mut c = [0, 0];
        let mut sel = Vec::new();
        for (j, &y) in ys.iter().enumerate() {
            if c[y] < keep {
                c[y] += 1;
                sel.push(j);
            }
        }
        xs = sel.iter().map(|&j| xs[j].clone()).collect();
        ys = sel.iter().map(|&j| ys[j]).collect();
        let prior = ClassPrior::from_counts(&[keep, keep], 0.01).unwrap();
        let a = fit_local_mle(&xs, &ys, 2, Parameterization::Standard, None, None, FitOptions::default()).unwrap();
        let b = fit_local_mle(&xs, &ys, 2, Parameterization::Calibrated, Some(&prior), None, FitOptions::default()).unwrap();
        for (u, v) in a.free_params().iter().zip(b.free_params()) {
            assert!((u - v).abs() < 1e-7);
        }
    }

    #[test]
    fn fit_meets_stopping_rule_and_pins_last_class() {
        let dist = ToyDistribution::two_class_default();
        let mut rng = seed::rng(2, &[]);
        let (xs, ys) = sample_client(&dist, 0, 500, &mut rng);
        let f = fit_local_mle(&xs, &ys, 2, Parameterization::Standard, None, None, FitOptions::default()).unwrap();
        assert!(f.grad_norm < 1e-8);
        assert_eq!(f.weights[1], 0.0);
        assert_eq!(f.bias[1], 0.0);
    }

    #[test]
    fn fit_reports_non_convergence() {
        let dist = ToyDistribution::two_class_default();
        let mut rng = seed::rng(3, &[]);
        let (xs, ys) = sample_client(&dist, 0, 100, &mut rng);
        let err = fit_local_mle(&xs, &ys, 2, Parameterization::Standard, None, None, FitOptions { tol: 1e-8, max_iter: 3 });
        assert!(matches!(err, Err(Error::NoConvergence { iterations: 3, .. })));
    }

    #[test]
    fn population_fit_matches_closed_form() {
        let dist = ToyDistribution::two_class_default();
        for i in 0..3 {
            let fit = population_mle(&dist, i, 401).unwrap().free_params();
            let exact = closed_form_parameters(&dist, i);
            for (a, b) in fit.iter().zip(&exact) {
                assert!((a - b).abs() < 1e-6, "client {i}: {fit:?} vs {exact:?}");
            }
        }
    }

    #[test]
    fn identical_priors_not_skewed() {
        let dist = ToyDistribution { priors: vec![vec![0.5, 0.5]; 3], ..ToyDistribution::two_class_default() };
        assert!(!dist.is_skewed());
        assert!(ToyDistribution::two_class_default().is_skewed());
    }

    #[test]
    fn invalid_distributions() {
        let base = ToyDistribution::two_class_default();
        assert!(ToyDistribution { sigma: 0.0, ..base.clone() }.validate().is_err());
        assert!(ToyDistribution { priors: vec![vec![0.6, 0.6]], ..base.clone() }.validate().is_err());
        assert!(ToyDistribution { means: vec![vec![0.0]], ..base }.validate().is_err());
    }
}
