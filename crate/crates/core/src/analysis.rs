//! Convergence-bound evaluation and the measured quantities that feed it:
//! the heterogeneity gap, the scheduling gradient-approximation error,
//! per-round contraction and error terms, the bound recursion, and
//! estimation of the problem constants (strong convexity, smoothness,
//! gradient bound) from data.

use crate::error::{Error, Result};
use crate::model::{LocalDataset, ModelSpec, ModelVector, Schedule, TrainingConfig};
use crate::par::map_indexed;
use crate::rng::{rng_from, stream, subseed};
use rand::Rng;
use std::collections::BTreeSet;

/// A per-round scalar sequence: constant or tabulated (the last tabulated
/// value extends past the end).
#[derive(Debug, Clone, PartialEq)]
pub enum Sequence {
    Constant(f64),
    PerRound(Vec<f64>),
}

impl Sequence {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Sequence::Constant(v) => *v,
            Sequence::PerRound(v) => v.get(t).copied().unwrap_or_else(|| *v.last().unwrap()),
        }
    }

    fn is_valid(&self) -> bool {
        match self {
            Sequence::Constant(v) => v.is_finite(),
            Sequence::PerRound(v) => !v.is_empty() && v.iter().all(|x| x.is_finite()),
        }
    }
}

/// Everything the per-round bound terms depend on.
#[derive(Debug, Clone)]
pub struct BoundParams {
    /// Strong-convexity modulus of the objective.
    pub mu: f64,
    /// Smoothness (largest Hessian eigenvalue bound) `L`.
    pub smoothness: f64,
    /// Uniform bound `G^2` on squared stochastic gradient norms.
    pub grad_bound2: f64,
    /// Heterogeneity gap between the global optimum and the weighted local
    /// optima.
    pub gamma: f64,
    /// Local steps per round.
    pub tau: usize,
    /// Learning-rate schedule `eta(i)`.
    pub eta: Schedule,
    /// Receive antennas `K`.
    pub antennas: usize,
    /// Complex symbols per update (half the parameter dimension).
    pub half_dim: usize,
    pub sigma_z2: f64,
    pub sigma_h2: f64,
    /// Transmit-scaling schedule `alpha(i)`.
    pub alpha: Schedule,
    /// Scheduled-set size per round `|S(i)|`.
    pub scheduled_size: Sequence,
    /// Gradient-approximation error of the schedule per round.
    pub epsilon: Sequence,
    /// Bound on model-to-optimum distances entering the cross term.
    pub c: f64,
}

impl BoundParams {
    fn validate(&self) -> Result<()> {
        if self.mu < 0.0 || !self.mu.is_finite() {
            return Err(Error::Config(format!("mu must be non-negative, got {}", self.mu)));
        }
        if self.smoothness < 0.0 || !self.smoothness.is_finite() {
            return Err(Error::Config(format!(
                "smoothness must be non-negative, got {}",
                self.smoothness
            )));
        }
        if self.grad_bound2 < 0.0 || !self.grad_bound2.is_finite() {
            return Err(Error::Config(format!(
                "grad_bound2 must be non-negative, got {}",
                self.grad_bound2
            )));
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.c < 0.0 || !self.c.is_finite() {
            return Err(Error::Config(format!("c must be non-negative, got {}", self.c)));
        }
        if self.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if self.antennas == 0 {
            return Err(Error::Config("antennas must be at least 1".into()));
        }
        if self.half_dim == 0 {
            return Err(Error::Config("half_dim must be at least 1".into()));
        }
        if !(self.sigma_h2 > 0.0 && self.sigma_h2.is_finite()) {
            return Err(Error::Config(format!("sigma_h2 must be positive, got {}", self.sigma_h2)));
        }
        if self.sigma_z2 < 0.0 || !self.sigma_z2.is_finite() {
            return Err(Error::Config(format!(
                "sigma_z2 must be non-negative, got {}",
                self.sigma_z2
            )));
        }
        if !self.scheduled_size.is_valid() || !self.epsilon.is_valid() {
            return Err(Error::Config("per-round sequences must be non-empty and finite".into()));
        }
        Ok(())
    }

    /// Checks the step-size precondition `0 < eta(i) <= min(1, 1/(mu tau))`
    /// and returns `eta(i)`.
    fn eta_checked(&self, i: usize) -> Result<f64> {
        let eta = self.eta.at(i);
        let limit = if self.mu > 0.0 {
            (1.0 / (self.mu * self.tau as f64)).min(1.0)
        } else {
            1.0
        };
        if !(eta > 0.0) || eta > limit + 1e-12 {
            return Err(Error::Config(format!(
                "eta({i}) = {eta} violates 0 < eta <= min(1, 1/(mu tau)) = {limit}"
            )));
        }
        Ok(eta)
    }
}

/// Per-round contraction factor `A(i) = 1 - mu eta (tau - eta (tau - 1))`.
pub fn contraction(i: usize, params: &BoundParams) -> Result<f64> {
    params.validate()?;
    let eta = params.eta_checked(i)?;
    let tau = params.tau as f64;
    Ok(1.0 - params.mu * eta * (tau - eta * (tau - 1.0)))
}

/// The six labeled components of the per-round error term `B(i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    /// Cross-user interference residual after combining.
    pub interference: f64,
    /// Receiver-noise term.
    pub noise: f64,
    /// Local drift accumulated over the `tau` steps.
    pub drift: f64,
    /// Data-heterogeneity term.
    pub heterogeneity: f64,
    /// Squared partial-participation term.
    pub participation_sq: f64,
    /// Cross term between participation error and distance bound `c`.
    pub participation_cross: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.interference
            + self.noise
            + self.drift
            + self.heterogeneity
            + self.participation_sq
            + self.participation_cross
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.interference,
            self.noise,
            self.drift,
            self.heterogeneity,
            self.participation_sq,
            self.participation_cross,
        ]
    }
}

/// Per-round error term `B(i)`, broken into its labeled components.
pub fn round_error(i: usize, params: &BoundParams) -> Result<BoundTerms> {
    params.validate()?;
    let eta = params.eta_checked(i)?;
    let tau = params.tau as f64;
    let g2 = params.grad_bound2;
    let g = g2.sqrt();
    let k = params.antennas as f64;
    let s = params.scheduled_size.at(i);
    if !(s >= 1.0) {
        return Err(Error::Config(format!(
            "scheduled size at round {i} must be at least 1, got {s}"
        )));
    }
    let alpha = params.alpha.at(i);
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha({i}) must be positive, got {alpha}")));
    }
    let eps = params.epsilon.at(i);
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("epsilon({i}) must be non-negative, got {eps}")));
    }

    let interference = eta * eta * tau * tau * g2 / k;
    let noise =
        params.sigma_z2 * params.half_dim as f64 / (alpha * alpha * k * s * params.sigma_h2);
    let drift = (1.0 + params.mu * (1.0 - eta))
        * eta
        * eta
        * g2
        * (tau * (tau - 1.0) * (2.0 * tau - 1.0))
        / 6.0;
    let heterogeneity =
        eta * eta * (tau * tau + tau - 1.0) * g2 + 2.0 * eta * (tau - 1.0) * params.gamma;
    let participation = eta * eta * tau * (tau - 1.0) * params.smoothness * g + eta * tau * eps;
    Ok(BoundTerms {
        interference,
        noise,
        drift,
        heterogeneity,
        participation_sq: participation * participation,
        participation_cross: participation * params.c,
    })
}

/// Evaluates the bound recursion `U(t+1) = A(t) U(t) + B(t)` from
/// `U(0) = initial_dist2` for `horizon` rounds; the returned vector holds
/// `U(0) ..= U(horizon)`.
pub fn bound_trajectory(
    initial_dist2: f64,
    horizon: usize,
    params: &BoundParams,
) -> Result<Vec<f64>> {
    if initial_dist2 < 0.0 || !initial_dist2.is_finite() {
        return Err(Error::Config(format!(
            "initial squared distance must be non-negative, got {initial_dist2}"
        )));
    }
    let mut out = Vec::with_capacity(horizon + 1);
    let mut u = initial_dist2;
    out.push(u);
    for i in 0..horizon {
        let a = contraction(i, params)?;
        let b = round_error(i, params)?.total();
        u = a * u + b;
        out.push(u);
    }
    Ok(out)
}

/// Heterogeneity gap `Gamma = F* - sum_m w_m F_m*` from converged optimal
/// losses. Weights must sum to 1; a tiny negative result (numerical) clamps
/// to zero.
pub fn compute_gamma(
    global_opt_loss: f64,
    local_opt_losses: &[f64],
    weights: &[f64],
) -> Result<f64> {
    if local_opt_losses.is_empty() {
        return Err(Error::Empty("local optimal losses"));
    }
    if weights.len() != local_opt_losses.len() {
        return Err(Error::DimensionMismatch {
            context: "gamma weights",
            expected: local_opt_losses.len(),
            actual: weights.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("weights sum to {sum}, expected 1")));
    }
    let weighted: f64 = local_opt_losses.iter().zip(weights).map(|(l, w)| l * w).sum();
    let gamma = global_opt_loss - weighted;
    if gamma < -1e-6 {
        return Err(Error::Config(format!(
            "gamma = {gamma} is substantially negative; optimal losses are inconsistent"
        )));
    }
    Ok(gamma.max(0.0))
}

/// Gradient-approximation error of a schedule: the distance between the
/// uniform average of all users' gradients and the average over the
/// scheduled subset.
pub fn compute_epsilon(
    full_gradients: &[ModelVector],
    scheduled: &BTreeSet<usize>,
) -> Result<f64> {
    if full_gradients.is_empty() {
        return Err(Error::Empty("gradient list"));
    }
    if scheduled.is_empty() {
        return Err(Error::Empty("scheduled set"));
    }
    let dim = full_gradients[0].dim();
    for g in full_gradients {
        if g.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "gradient dimensions",
                expected: dim,
                actual: g.dim(),
            });
        }
    }
    if let Some(&m) = scheduled.iter().find(|&&m| m >= full_gradients.len()) {
        return Err(Error::Config(format!(
            "scheduled user {m} out of range for {} users",
            full_gradients.len()
        )));
    }
    let mut diff = vec![0.0; dim];
    let inv_all = 1.0 / full_gradients.len() as f64;
    for g in full_gradients {
        for (d, v) in diff.iter_mut().zip(g.as_slice()) {
            *d += v * inv_all;
        }
    }
    let inv_s = 1.0 / scheduled.len() as f64;
    for &m in scheduled {
        for (d, v) in diff.iter_mut().zip(full_gradients[m].as_slice()) {
            *d -= v * inv_s;
        }
    }
    Ok(diff.iter().map(|d| d * d).sum::<f64>().sqrt())
}

/// Estimated problem constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constants {
    /// Strong convexity: the configured L2 penalty.
    pub mu: f64,
    /// Smoothness estimate `L`.
    pub smoothness: f64,
    /// Gradient-norm bound estimate `G^2`.
    pub grad_bound2: f64,
}

/// Probe-run settings for [`estimate_constants`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantsProbe {
    /// Federated probe rounds used to gather gradient statistics.
    pub rounds: usize,
    pub tau: usize,
    pub eta: f64,
    pub batch_size: usize,
    /// Power-iteration cap; exceeding it is an error.
    pub power_iters: usize,
    /// Relative convergence tolerance of the power iteration.
    pub power_tol: f64,
    pub seed: u64,
}

impl Default for ConstantsProbe {
    fn default() -> Self {
        Self {
            rounds: 20,
            tau: 5,
            eta: 0.05,
            batch_size: 32,
            power_iters: 200,
            power_tol: 1e-5,
            seed: 0,
        }
    }
}

fn weighted_gradient(
    spec: &ModelSpec,
    datasets: &[LocalDataset],
    weights: &[f64],
    point: &ModelVector,
) -> Result<ModelVector> {
    let grads: Vec<Result<ModelVector>> =
        map_indexed(datasets.len(), |m| spec.gradient(point, &datasets[m]));
    let mut acc = ModelVector::zeros(spec.dim());
    for (g, &w) in grads.into_iter().zip(weights) {
        acc = &acc + &g?.scale(w);
    }
    Ok(acc)
}

/// Largest eigenvalue of the Hessian of the weighted objective at `point`,
/// via power iteration on central-difference Hessian-vector products.
/// Errors if the iteration has not converged after `max_iters` steps.
pub fn hessian_top_eigenvalue(
    spec: &ModelSpec,
    datasets: &[LocalDataset],
    weights: &[f64],
    point: &ModelVector,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<f64> {
    if datasets.is_empty() {
        return Err(Error::Empty("dataset list"));
    }
    let dim = spec.dim();
    let mut rng = rng_from(seed, &[stream::PROBE, 1]);
    let mut v = ModelVector::new((0..dim).map(|_| rng.random::<f64>() - 0.5).collect()).normalized();
    if v.norm() == 0.0 {
        v = ModelVector::new((0..dim).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect());
    }
    let h = 1e-5 * point.norm().max(1.0);
    let mut lambda_prev = f64::INFINITY;
    for _ in 0..max_iters {
        let up = point + &v.scale(h);
        let dn = point - &v.scale(h);
        let gp = weighted_gradient(spec, datasets, weights, &up)?;
        let gn = weighted_gradient(spec, datasets, weights, &dn)?;
        let hv = (&gp - &gn).scale(1.0 / (2.0 * h));
        let lambda = v.dot(&hv);
        let norm = hv.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        if (lambda - lambda_prev).abs() <= tol * lambda.abs().max(1e-9) {
            return Ok(lambda.max(0.0));
        }
        lambda_prev = lambda;
        v = hv.scale(1.0 / norm);
    }
    Err(Error::NoConvergence(max_iters))
}

/// Estimates the bound constants from the federated problem itself:
/// `mu` is the configured L2 penalty, `L` the largest Hessian eigenvalue
/// seen at the start, middle, and end of a short federated probe run, and
/// `G^2` 1.5 times the largest squared mini-batch gradient norm observed
/// during that run.
pub fn estimate_constants(
    spec: &ModelSpec,
    datasets: &[LocalDataset],
    probe: &ConstantsProbe,
) -> Result<Constants> {
    if datasets.is_empty() {
        return Err(Error::Empty("dataset list"));
    }
    if probe.rounds == 0 || probe.tau == 0 {
        return Err(Error::Config("probe rounds and tau must be at least 1".into()));
    }
    let total: usize = datasets.iter().map(|d| d.len()).sum();
    let weights: Vec<f64> = datasets.iter().map(|d| d.len() as f64 / total as f64).collect();

    let mut theta = ModelVector::zeros(spec.dim());
    let mut checkpoints = vec![theta.clone()];
    let mut max_grad2 = 0.0f64;
    let cfg_batch = |d: &LocalDataset| probe.batch_size.min(d.len()).max(1);

    for r in 0..probe.rounds {
        let locals: Vec<Result<(ModelVector, f64)>> = map_indexed(datasets.len(), |m| {
            let data = &datasets[m];
            let tc = TrainingConfig { tau: probe.tau, eta: probe.eta, batch_size: cfg_batch(data) };
            let mut rng = rng_from(probe.seed, &[stream::PROBE, 2, r as u64, m as u64]);
            let mut local = theta.clone();
            let mut local_max = 0.0f64;
            // Random mini-batches; only the gradient magnitudes matter here.
            for _ in 0..tc.tau {
                let idx: Vec<usize> =
                    (0..tc.batch_size).map(|_| rng.random_range(0..data.len())).collect();
                let g = spec.gradient(&local, &data.subset(&idx))?;
                let n2 = g.as_slice().iter().map(|x| x * x).sum::<f64>();
                local_max = local_max.max(n2);
                local = &local - &g.scale(tc.eta);
            }
            Ok((local, local_max))
        });
        let mut mean = ModelVector::zeros(spec.dim());
        let inv = 1.0 / datasets.len() as f64;
        for l in locals {
            let (local, local_max) = l?;
            max_grad2 = max_grad2.max(local_max);
            mean = &mean + &local.scale(inv);
        }
        theta = mean;
        if r + 1 == probe.rounds / 2 || r + 1 == probe.rounds {
            checkpoints.push(theta.clone());
        }
    }

    let mut smoothness = 0.0f64;
    for (i, point) in checkpoints.iter().enumerate() {
        let l = hessian_top_eigenvalue(
            spec,
            datasets,
            &weights,
            point,
            probe.power_iters,
            probe.power_tol,
            subseed(probe.seed, &[stream::PROBE, 3, i as u64]),
        )?;
        smoothness = smoothness.max(l);
    }

    Ok(Constants { mu: spec.l2_reg, smoothness, grad_bound2: max_grad2 * 1.5 })
}

/// Default distance-bound heuristic for the cross term:
/// `c = 2 sqrt(2 Gamma / mu) + 2 sqrt(G^2) tau eta0`.
pub fn default_distance_bound(gamma: f64, mu: f64, grad_bound2: f64, tau: usize, eta0: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!(
            "distance-bound heuristic requires mu > 0, got {mu}"
        )));
    }
    Ok(2.0 * (2.0 * gamma / mu).sqrt() + 2.0 * grad_bound2.sqrt() * tau as f64 * eta0)
}

/// Deterministic full-batch gradient descent with backtracking line search,
/// run until the gradient norm drops to `grad_tol`. Returns the minimizer
/// and its loss. Intended as a reference optimizer for `F*` and `F_m*`.
pub fn minimize_reference(
    spec: &ModelSpec,
    data: &LocalDataset,
    grad_tol: f64,
    max_iters: usize,
) -> Result<(ModelVector, f64)> {
    let mut theta = ModelVector::zeros(spec.dim());
    let mut loss = spec.loss(&theta, data)?;
    let mut step = 1.0f64;
    for _ in 0..max_iters {
        let grad = spec.gradient(&theta, data)?;
        let g2: f64 = grad.as_slice().iter().map(|g| g * g).sum();
        if g2.sqrt() <= grad_tol {
            return Ok((theta, loss));
        }
        step = (step * 2.0).min(1e6);
        loop {
            let cand = &theta - &grad.scale(step);
            // Near the optimum the guaranteed decrease 0.5*step*g2 drops
            // below the floating-point resolution of the loss itself, so the
            // sufficient-decrease test becomes noise; switch to gradient-norm
            // descent there.
            let fp_limited = 0.5 * step * g2 <= 4.0 * f64::EPSILON * loss.abs().max(1.0);
            let accepted = if fp_limited {
                let cand_g2: f64 =
                    spec.gradient(&cand, data)?.as_slice().iter().map(|g| g * g).sum();
                cand_g2 < g2
            } else {
                spec.loss(&cand, data)? <= loss - 0.5 * step * g2
            };
            if accepted {
                theta = cand;
                loss = spec.loss(&theta, data)?;
                break;
            }
            step *= 0.5;
            if step < 1e-18 {
                return Err(Error::NoConvergence(max_iters));
            }
        }
    }
    Err(Error::NoConvergence(max_iters))
}
