//! Curvature diagnostics through gradient differencing: Hessian-vector
//! products, Hutchinson trace, Lanczos extreme eigenvalues and stochastic
//! Lanczos quadrature for the spectral density.
//!
//! For a network the "Hessian" is that of the surrogate-gradient graph: the
//! oracle returns the BPTT gradient and curvature is probed by central
//! differences of it.

use serde::{Deserialize, Serialize};

use crate::data::{subset, Dataset};
use crate::error::{param_err, shape_err, Error, Result};
use crate::network::{Mode, Network};
use crate::numerics::rng::purpose;
use crate::numerics::RngStream;
use crate::train::batch_gradients_mode;

/// Samples in the fixed curvature evaluation batch.
pub const HESSIAN_BATCH: usize = 512;
/// Finite-difference step relative to `‖θ‖`.
pub const DEFAULT_EPS_REL: f64 = 1e-3;

/// Maps a flat parameter vector to `(loss, gradient)`. Must be deterministic.
pub trait GradientOracle {
    fn dim(&self) -> usize;
    fn loss_and_gradient(&mut self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// `L(θ) = ½ θᵀAθ` for an explicit symmetric matrix.
#[derive(Clone, Debug)]
pub struct QuadraticOracle {
    n: usize,
    a: Vec<f64>,
}

impl QuadraticOracle {
    /// `a` is row-major `n × n` and must be symmetric.
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != n * n || n == 0 {
            return Err(shape_err(format!("matrix data of length {} is not {n}×{n}", a.len())));
        }
        for i in 0..n {
            for j in 0..i {
                if a[i * n + j] != a[j * n + i] {
                    return Err(param_err(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n, a })
    }

    pub fn diagonal(d: &[f64]) -> Result<Self> {
        let n = d.len();
        let mut a = vec![0.0; n * n];
        for (i, &v) in d.iter().enumerate() {
            a[i * n + i] = v;
        }
        Self::new(n, a)
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.a[i * self.n + i]).sum()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.a.chunks_exact(self.n).map(|row| dot(row, x)).collect()
    }
}

impl GradientOracle for QuadraticOracle {
    fn dim(&self) -> usize {
        self.n
    }

    fn loss_and_gradient(&mut self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.n, theta.len())?;
        let g = self.apply(theta);
        Ok((0.5 * dot(theta, &g), g))
    }
}

/// MSE loss of a network on a fixed batch. Every call re-seeds the encoder
/// so identical parameters give identical gradients.
#[derive(Clone, Debug)]
pub struct NetworkOracle {
    net: Network,
    batch: Dataset,
    mode: Mode,
    encoder_seed: u64,
}

impl NetworkOracle {
    pub fn new(net: &Network, batch: Dataset, mode: Mode, encoder_seed: u64) -> Result<Self> {
        if batch.is_empty() {
            return Err(param_err("curvature batch must be nonempty"));
        }
        Ok(Self { net: net.clone(), batch, mode, encoder_seed })
    }

    pub fn theta(&self) -> Vec<f64> {
        self.net.flat_params()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }
}

impl GradientOracle for NetworkOracle {
    fn dim(&self) -> usize {
        self.net.param_count()
    }

    fn loss_and_gradient(&mut self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.net.set_flat_params(theta)?;
        let mut rng = RngStream::for_purpose(self.encoder_seed, purpose::ENCODER, 0);
        let (loss, grads) = batch_gradients_mode(&self.net, self.batch.images(), self.batch.labels(), self.mode, &mut rng)?;
        Ok((loss, grads.flat()))
    }
}

/// Fixed seeded class-stratified curvature batch drawn from `test`.
pub fn evaluation_batch(test: &Dataset, seed: u64) -> Result<Dataset> {
    subset(test, HESSIAN_BATCH.min(test.len()), seed ^ (purpose::EVAL_SUBSET << 32))
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(shape_err(format!("vector of dimension {got} where {expected} was expected")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `1e-3·‖θ‖`, falling back to `1e-3` at the origin.
pub fn default_eps(theta: &[f64]) -> f64 {
    let n = norm(theta);
    DEFAULT_EPS_REL * if n > 0.0 { n } else { 1.0 }
}

/// Central-difference Hessian-vector product along the unit direction of
/// `v`, rescaled by `‖v‖`.
pub fn hvp(oracle: &mut dyn GradientOracle, theta: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>> {
    check_dim(oracle.dim(), theta.len())?;
    check_dim(theta.len(), v.len())?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(param_err(format!("hvp step must be > 0, got {eps}")));
    }
    let vn = norm(v);
    if vn == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let step = |sign: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + sign * eps * d / vn).collect() };
    let (_, gp) = oracle.loss_and_gradient(&step(1.0))?;
    let (_, gm) = oracle.loss_and_gradient(&step(-1.0))?;
    let scale = vn / (2.0 * eps);
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) * scale).collect())
}

/// The Hessian at a fixed point, as a linear operator.
pub struct HessianOperator<'a> {
    oracle: &'a mut dyn GradientOracle,
    theta: Vec<f64>,
    eps: f64,
    products: usize,
}

impl<'a> HessianOperator<'a> {
    pub fn new(oracle: &'a mut dyn GradientOracle, theta: &[f64], eps: f64) -> Result<Self> {
        check_dim(oracle.dim(), theta.len())?;
        Ok(Self { oracle, theta: theta.to_vec(), eps, products: 0 })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Number of Hessian-vector products evaluated so far.
    pub fn products(&self) -> usize {
        self.products
    }

    pub fn apply(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        self.products += 1;
        hvp(self.oracle, &self.theta, v, self.eps)
    }
}

/// Mean and standard error of `vᵀHv` over Rademacher probes.
pub fn hutchinson_trace(op: &mut HessianOperator, n_probes: usize, rng: &mut RngStream) -> Result<(f64, f64)> {
    if n_probes < 2 {
        return Err(param_err(format!("hutchinson needs at least 2 probes, got {n_probes}")));
    }
    let mut samples = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let v: Vec<f64> = (0..op.dim()).map(|_| rng.rademacher()).collect();
        let hv = op.apply(&v)?;
        samples.push(dot(&v, &hv));
    }
    let n = n_probes as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Eigen-decomposition of the symmetric tridiagonal matrix with diagonal
/// `alpha` and off-diagonal `beta` by implicit QL. Returns eigenvalues in
/// ascending order and the first component of each unit eigenvector.
pub fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = alpha.len();
    if n == 0 || beta.len() + 1 != n {
        return Err(shape_err(format!(
            "tridiagonal matrix needs |beta| = |alpha| - 1, got {} and {}",
            alpha.len(),
            beta.len()
        )));
    }
    let mut d = alpha.to_vec();
    let mut e = beta.to_vec();
    e.push(0.0);
    let mut z = vec![0.0; n];
    z[0] = 1.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 64 {
                return Err(Error::Parameter("tridiagonal QL iteration did not converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let zf = z[i + 1];
                z[i + 1] = s * z[i] + c * zf;
                z[i] = c * z[i] - s * zf;
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
    Ok((order.iter().map(|&i| d[i]).collect(), order.iter().map(|&i| z[i]).collect()))
}

/// Lanczos recurrence with full reorthogonalization.
struct Lanczos {
    basis: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    /// Unnormalized residual waiting to become the next basis vector.
    residual: Option<Vec<f64>>,
}

enum Advance {
    Continued,
    /// The Krylov space became invariant.
    Breakdown,
}

impl Lanczos {
    fn new(start: &[f64]) -> Result<Self> {
        let n = norm(start);
        if n == 0.0 {
            return Err(param_err("lanczos start vector is zero"));
        }
        Ok(Self {
            basis: vec![start.iter().map(|x| x / n).collect()],
            alpha: Vec::new(),
            beta: Vec::new(),
            residual: None,
        })
    }

    fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn orthogonalize(&self, w: &mut [f64]) {
        for _ in 0..2 {
            for q in &self.basis {
                let c = dot(w, q);
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
    }

    /// Applies the operator to the newest basis vector and extends `T`.
    fn advance(&mut self, op: &mut HessianOperator) -> Result<Advance> {
        if let Some(w) = self.residual.take() {
            let b = norm(&w);
            self.beta.push(b);
            self.basis.push(w.iter().map(|x| x / b).collect());
        }
        let q = self.basis.last().unwrap();
        let mut w = op.apply(q)?;
        let scale = norm(&w);
        self.alpha.push(dot(&w, q));
        self.orthogonalize(&mut w);
        let b = norm(&w);
        if b <= 1e-10 * scale || b == 0.0 || self.basis.len() == w.len() {
            return Ok(Advance::Breakdown);
        }
        self.residual = Some(w);
        Ok(Advance::Continued)
    }

    /// Continues in a fresh direction orthogonal to the current basis, with
    /// a zero coupling to the block built so far. Returns `false` when the
    /// basis already spans the space.
    fn restart(&mut self, rng: &mut RngStream) -> bool {
        let n = self.basis[0].len();
        for _ in 0..4 {
            let mut w: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
            let before = norm(&w);
            self.orthogonalize(&mut w);
            let after = norm(&w);
            if after > 1e-8 * before {
                self.beta.push(0.0);
                self.basis.push(w.iter().map(|x| x / after).collect());
                return true;
            }
        }
        false
    }

    fn ritz(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        tridiagonal_eigen(&self.alpha, &self.beta[..self.alpha.len() - 1])
    }
}

/// Largest `k` Ritz values (descending) after at most `max_iters` Lanczos
/// steps, stopping early once successive largest values differ by `< tol`.
pub fn top_eigenvalues(op: &mut HessianOperator, k: usize, max_iters: usize, tol: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(param_err("k must be >= 1"));
    }
    let limit = max_iters.min(op.dim());
    let start: Vec<f64> = (0..op.dim()).map(|_| rng.standard_normal()).collect();
    let mut lz = Lanczos::new(&start)?;
    // stop once all k leading Ritz values have settled
    let mut prev: Option<Vec<f64>> = None;
    while lz.steps() < limit {
        if let Advance::Breakdown = lz.advance(op)? {
            if lz.steps() < limit && !lz.restart(rng) {
                break;
            }
        }
        if lz.steps() >= k {
            let top: Vec<f64> = lz.ritz()?.0.into_iter().rev().take(k).collect();
            if prev.as_ref().is_some_and(|p| p.iter().zip(&top).all(|(a, b)| (a - b).abs() < tol)) {
                break;
            }
            prev = Some(top);
        }
    }
    if k > lz.steps() {
        return Err(param_err(format!(
            "requested {k} eigenvalues but only {} Lanczos iterations were possible",
            lz.steps()
        )));
    }
    let (values, _) = lz.ritz()?;
    Ok(values.into_iter().rev().take(k).collect())
}

/// Stochastic Lanczos quadrature: probe-averaged Ritz nodes and weights.
/// Coincident nodes are merged; nodes ascend and weights sum to 1.
pub fn spectral_density(
    op: &mut HessianOperator,
    lanczos_steps: usize,
    n_probes: usize,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if lanczos_steps < 2 {
        return Err(param_err(format!("spectral density needs at least 2 Lanczos steps, got {lanczos_steps}")));
    }
    if n_probes == 0 {
        return Err(param_err("spectral density needs at least 1 probe"));
    }
    let mut pairs = Vec::new();
    for _ in 0..n_probes {
        let v: Vec<f64> = (0..op.dim()).map(|_| rng.rademacher()).collect();
        let mut lz = Lanczos::new(&v)?;
        while lz.steps() < lanczos_steps.min(op.dim()) {
            if let Advance::Breakdown = lz.advance(op)? {
                break;
            }
        }
        let (nodes, first) = lz.ritz()?;
        let total: f64 = first.iter().map(|z| z * z).sum();
        for (node, z) in nodes.into_iter().zip(first) {
            pairs.push((node, z * z / total / n_probes as f64));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut nodes: Vec<f64> = Vec::with_capacity(pairs.len());
    let mut weights: Vec<f64> = Vec::with_capacity(pairs.len());
    for (node, w) in pairs {
        match nodes.last() {
            Some(&last) if (node - last).abs() <= 1e-9 * last.abs().max(1.0) => *weights.last_mut().unwrap() += w,
            _ => {
                nodes.push(node);
                weights.push(w);
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok((nodes, weights))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianSettings {
    pub k: usize,
    pub probes: usize,
    /// Lanczos iteration cap for the top-k eigenvalues; interior Ritz values
    /// need several times k steps to settle.
    pub max_iters: usize,
    /// Lanczos steps per spectral density probe.
    pub lanczos_steps: usize,
    pub density_probes: usize,
    pub tol: f64,
    /// Finite-difference step relative to `‖θ‖`.
    pub eps_rel: f64,
}

impl Default for HessianSettings {
    fn default() -> Self {
        Self { k: 50, probes: 100, max_iters: 200, lanczos_steps: 80, density_probes: 4, tol: 1e-6, eps_rel: DEFAULT_EPS_REL }
    }
}

impl HessianSettings {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(param_err("hessian.k must be >= 1"));
        }
        if self.probes < 2 {
            return Err(param_err("hessian.probes must be >= 2"));
        }
        if self.max_iters < self.k {
            return Err(param_err(format!("hessian.max_iters must be >= k = {}, got {}", self.k, self.max_iters)));
        }
        if self.lanczos_steps < 2 {
            return Err(param_err(format!("hessian.lanczos_steps must be >= 2, got {}", self.lanczos_steps)));
        }
        if !(self.eps_rel > 0.0 && self.tol >= 0.0) {
            return Err(param_err("hessian.eps_rel must be > 0 and hessian.tol >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub trace_estimate: f64,
    pub trace_stderr: f64,
    pub top_eigenvalues: Vec<f64>,
    pub density_nodes: Vec<f64>,
    pub density_weights: Vec<f64>,
    pub param_count: usize,
    pub n_probes: usize,
}

/// Runs trace, top-k and (when `with_density`) spectral density estimates.
pub fn analyze(
    oracle: &mut dyn GradientOracle,
    theta: &[f64],
    settings: &HessianSettings,
    with_density: bool,
    seed: u64,
) -> Result<HessianReport> {
    settings.validate()?;
    let param_count = theta.len();
    let norm_theta = norm(theta);
    let eps = settings.eps_rel * if norm_theta > 0.0 { norm_theta } else { 1.0 };
    let mut op = HessianOperator::new(oracle, theta, eps)?;
    let mut rng = RngStream::for_purpose(seed, purpose::PROBES, 0);
    let (trace_estimate, trace_stderr) = hutchinson_trace(&mut op, settings.probes, &mut rng)?;
    let mut rng = RngStream::for_purpose(seed, purpose::LANCZOS, 0);
    let top_eigenvalues = top_eigenvalues(&mut op, settings.k, settings.max_iters, settings.tol, &mut rng)?;
    let (density_nodes, density_weights) = if with_density {
        let mut rng = RngStream::for_purpose(seed, purpose::LANCZOS, 1);
        spectral_density(&mut op, settings.lanczos_steps, settings.density_probes.max(1), &mut rng)?
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(HessianReport {
        trace_estimate,
        trace_stderr,
        top_eigenvalues,
        density_nodes,
        density_weights,
        param_count,
        n_probes: settings.probes,
    })
}
