//! Exact-solve discrete gradient flow of the MMD functional, gradient flows
//! of general functionals under the regularized Riemannian structure, and
//! the convergence diagnostics attached to both.
//!
//! One flow step solves the witness equation `(alpha D + beta I) f = mu`
//! for the current mean-embedding difference and moves the generator
//! parameters along `L f`. Diagnostics track the descent rate, the
//! per-step contraction exponent `chi = lambda a / (alpha lambda a + beta)`
//! built from the smallest nonzero eigenvalue `lambda` of `D` and the
//! null-space alignment `a` of the witness, the exponential bound
//! `F_1 exp(-sum eps_j chi_j)`, and the step-size condition derived from
//! empirical Lipschitz constants.

use crate::discrepancy::{
    resolvent_solve_dense, witness_solve_with_dense, RegularizationParams, WitnessSolution,
};
use crate::error::{Error, Result};
use crate::generator::{Generator, LatentSampler};
use crate::linalg;
use crate::operators::{self, OperatorA, Spectrum};
use crate::rkhs::{FeatureMap, RkhsFunction};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Learning-rate schedule (`l` counts iterations from 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { c: f64 },
    InvSqrt { c: f64 },
    Inv { c: f64 },
}

impl StepSchedule {
    pub fn eps(&self, iter: usize) -> f64 {
        let l = iter.max(1) as f64;
        match self {
            StepSchedule::Constant { c } => *c,
            StepSchedule::InvSqrt { c } => c / l.sqrt(),
            StepSchedule::Inv { c } => c / l,
        }
    }

    fn validate(&self) -> Result<()> {
        let c = match self {
            StepSchedule::Constant { c }
            | StepSchedule::InvSqrt { c }
            | StepSchedule::Inv { c } => *c,
        };
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "step size must be positive, got {c}"
            )));
        }
        Ok(())
    }
}

/// Configuration of an exact-solve flow run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Use the adaptive rule `alpha_l = tau/2`, `beta_l = alpha_l *
    /// lambda_i(theta_l)` instead of the fixed pair; requires spectral
    /// diagnostics.
    #[serde(default)]
    pub adaptive: bool,
    pub step: StepSchedule,
    pub iterations: usize,
    pub latent_batch: usize,
    #[serde(default = "default_target_batch")]
    pub target_batch: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub seed: u64,
    /// Fixed latent batch per run (deterministic flow) by default; enable to
    /// resample each iteration (stochastic flow).
    #[serde(default)]
    pub resample_latents: bool,
    /// Record `lambda_i`, alignment, `chi` and the exponential bound each
    /// iteration (costs one `m x m` eigendecomposition per step).
    #[serde(default = "default_true")]
    pub spectral_diagnostics: bool,
    #[serde(default)]
    pub record_thetas: bool,
    /// Early stop when `F` falls at or below this value (0 disables).
    #[serde(default)]
    pub f_tolerance: f64,
    /// Stop when the null-space alignment falls to `tau` or below.
    #[serde(default)]
    pub halt_on_stall: bool,
    /// Halve the step (up to 10 times) whenever the post-step alignment
    /// would fall to `tau` or below; requires spectral diagnostics.
    #[serde(default)]
    pub backtrack: bool,
    /// Number of probe pairs for the empirical Lipschitz constants feeding
    /// the step-size condition; 0 skips the estimate.
    #[serde(default)]
    pub lipschitz_probes: usize,
    /// Populate `wallclock_ms` with real timings (breaks byte-identical
    /// reruns; off by default).
    #[serde(default)]
    pub timings: bool,
    /// Record a parameter snapshot every this many iterations (0 disables).
    #[serde(default)]
    pub snapshot_every: usize,
}

fn default_tau() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

fn default_target_batch() -> usize {
    512
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            alpha: 100.0,
            beta: 0.5,
            adaptive: false,
            step: StepSchedule::Constant { c: 1e-3 },
            iterations: 1000,
            latent_batch: 512,
            target_batch: 512,
            tau: 0.5,
            seed: 0,
            resample_latents: false,
            spectral_diagnostics: true,
            record_thetas: false,
            f_tolerance: 0.0,
            halt_on_stall: false,
            backtrack: false,
            lipschitz_probes: 0,
            timings: false,
            snapshot_every: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.adaptive {
            if !(self.alpha > 0.0) || !self.alpha.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "flow alpha must be positive, got {}",
                    self.alpha
                )));
            }
            if !(self.beta > 0.0) || !self.beta.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "flow beta must be positive, got {}",
                    self.beta
                )));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if self.latent_batch == 0 || self.target_batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if (self.adaptive || self.backtrack) && !self.spectral_diagnostics {
            return Err(Error::InvalidConfig(
                "adaptive regularization and backtracking need spectral diagnostics".into(),
            ));
        }
        self.step.validate()
    }
}

/// One trajectory row. `bound` on row `l` is `F_1 exp(-sum_{j<=l} eps_j
/// chi_j)`, the Theorem bound on the *next* iterate's `F`. `rate_residual`
/// on row `l` compares `(F_{l+1} - F_l)/eps_l` against the analytic descent
/// rate at `l` (filled once the next iterate is known). Missing diagnostics
/// are NaN.
#[derive(Debug, Clone, Copy)]
pub struct FlowDiagnostics {
    pub iter: usize,
    pub f_value: f64,
    pub mmd: f64,
    pub mmd_ab: f64,
    pub lambda_i: f64,
    pub alignment: f64,
    pub chi: f64,
    pub eps: f64,
    pub bound: f64,
    pub rate_residual: f64,
    /// 1.0 / 0.0 when the step-size condition was evaluated, NaN otherwise.
    pub stepcond_ok: f64,
    pub wallclock_ms: f64,
    /// Alignment fell to tau or below at this step.
    pub stalled: bool,
    /// All eigenvalues of `D` were below the rank cutoff.
    pub degenerate: bool,
}

impl FlowDiagnostics {
    fn nan_row(iter: usize) -> Self {
        FlowDiagnostics {
            iter,
            f_value: f64::NAN,
            mmd: f64::NAN,
            mmd_ab: f64::NAN,
            lambda_i: f64::NAN,
            alignment: f64::NAN,
            chi: f64::NAN,
            eps: f64::NAN,
            bound: f64::NAN,
            rate_residual: f64::NAN,
            stepcond_ok: f64::NAN,
            wallclock_ms: 0.0,
            stalled: false,
            degenerate: false,
        }
    }
}

/// A finished (or aborted) flow run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub rows: Vec<FlowDiagnostics>,
    pub thetas: Option<Vec<Array1<f64>>>,
    /// `(iteration, post-update parameters)` at the snapshot cadence.
    pub snapshots: Vec<(usize, Array1<f64>)>,
    pub final_theta: Array1<f64>,
    pub f_initial: f64,
    pub c_estimate: Option<f64>,
    /// Set when the run aborted (non-finite parameters, degenerate adaptive
    /// rule); the rows collected so far are kept.
    pub aborted: Option<String>,
}

/// Analytic descent rate `-(2/alpha) (F - beta * mmd_ab^2)`.
pub fn descent_rate(f_value: f64, mmd_ab_value: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "descent rate needs alpha > 0, got {alpha}"
        )));
    }
    Ok(-(2.0 / alpha) * (f_value - beta * mmd_ab_value * mmd_ab_value))
}

/// Per-step contraction exponent `chi = lambda a / (alpha lambda a + beta)`.
pub fn chi(lambda_i: f64, alignment: f64, alpha: f64, beta: f64) -> Result<f64> {
    if alignment <= 0.0 {
        return Err(Error::NullSpaceStall);
    }
    if !(lambda_i > 0.0) || !(alpha > 0.0) || !(beta > 0.0) || alignment > 1.0 {
        return Err(Error::InvalidParameter(format!(
            "chi needs lambda_i > 0, alpha > 0, beta > 0, alignment in (0,1]; got \
             lambda_i={lambda_i}, a={alignment}, alpha={alpha}, beta={beta}"
        )));
    }
    Ok(lambda_i * alignment / (alpha * lambda_i * alignment + beta))
}

/// Largest admissible step `eps = beta / (C (1 + sqrt(F_1)))` from the
/// step-size condition.
pub fn step_size_bound(c_estimate: f64, beta: f64, f_initial: f64) -> Result<f64> {
    if !(c_estimate > 0.0) || !(beta > 0.0) || f_initial < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "step size bound needs C > 0, beta > 0, F >= 0; got C={c_estimate}, beta={beta}, \
             F={f_initial}"
        )));
    }
    Ok(beta / (c_estimate * (1.0 + f_initial.sqrt())))
}

/// Probe configuration for the empirical Lipschitz constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Probe pairs per estimate (running maxima grow with this).
    pub pairs: usize,
    /// Latent points over which generator constants are averaged.
    pub z_probes: usize,
    pub seed: u64,
    /// Scale of the Gaussian cloud for feature-map probes.
    pub x_scale: f64,
    /// Size of the parameter perturbations.
    pub theta_step: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            pairs: 16,
            z_probes: 16,
            seed: 0,
            x_scale: 3.0,
            theta_step: 1e-3,
        }
    }
}

/// Empirical Lipschitz constants and their combination into the step-size
/// constant `C`.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzEstimates {
    /// Feature(-kernel) Lipschitz constant over point pairs.
    pub l: f64,
    /// Lipschitz constant of the feature Jacobian over point pairs.
    pub l_tilde: f64,
    /// Mean over latents of the generator's parameter-Lipschitz quotient.
    pub e_d: f64,
    /// Mean of its square.
    pub e_d_sq: f64,
    /// Mean of the Jacobian's parameter-Lipschitz quotient.
    pub e_d_tilde: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    /// `c1*c2 + c3 + c4`.
    pub combined: f64,
}

/// Estimate the Lipschitz constants by running maxima of difference
/// quotients over seeded probe pairs.
pub fn estimate_lipschitz(
    map: &FeatureMap,
    gen: &Generator,
    theta: &ArrayView1<f64>,
    probe: &ProbeConfig,
) -> Result<LipschitzEstimates> {
    if probe.pairs < 2 {
        return Err(Error::InvalidParameter(
            "lipschitz estimation needs at least 2 probe pairs".into(),
        ));
    }
    if probe.z_probes == 0 {
        return Err(Error::InvalidParameter("z_probes must be positive".into()));
    }
    let d = map.input_dim();
    let p = gen.param_count();
    let mz = gen.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    // fixed latent probe set, drawn before the pair loop so estimates with
    // more pairs extend the same stream
    let z_set =
        Array2::<f64>::from_shape_fn((probe.z_probes, mz), |_| StandardNormal.sample(&mut rng));
    let mut l_max = 0.0_f64;
    let mut lt_max = 0.0_f64;
    let mut d_max = vec![0.0_f64; probe.z_probes];
    let mut dt_max = vec![0.0_f64; probe.z_probes];
    for _ in 0..probe.pairs {
        let x1 = Array1::from_shape_fn(d, |_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * probe.x_scale
        });
        let x2 = Array1::from_shape_fn(d, |_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * probe.x_scale
        });
        let dx = (&x1 - &x2).dot(&(&x1 - &x2)).sqrt();
        if dx > 0.0 {
            let df = {
                let f1 = map.phi(&x1.view())?;
                let f2 = map.phi(&x2.view())?;
                (&f1 - &f2).dot(&(&f1 - &f2)).sqrt()
            };
            l_max = l_max.max(df / dx);
            let j1 = map.phi_jacobian(&x1.view())?;
            let j2 = map.phi_jacobian(&x2.view())?;
            let dj = linalg::fro_norm(&(&j1 - &j2).view());
            lt_max = lt_max.max(dj / dx);
        }
        let t1 = perturb(theta, probe.theta_step, &mut rng);
        let t2 = perturb(theta, probe.theta_step, &mut rng);
        let dt = (&t1 - &t2).dot(&(&t1 - &t2)).sqrt();
        if dt > 0.0 {
            for (k, z) in z_set.outer_iter().enumerate() {
                let g1 = gen.forward(&t1.view(), &z)?;
                let g2 = gen.forward(&t2.view(), &z)?;
                let dg = (&g1 - &g2).dot(&(&g1 - &g2)).sqrt();
                d_max[k] = d_max[k].max(dg / dt);
                let j1 = gen.jacobian_theta(&t1.view(), &z)?;
                let j2 = gen.jacobian_theta(&t2.view(), &z)?;
                let dj = linalg::fro_norm(&(&j1 - &j2).view());
                dt_max[k] = dt_max[k].max(dj / dt);
            }
        }
    }
    let e_d = d_max.iter().sum::<f64>() / probe.z_probes as f64;
    let e_d_sq = d_max.iter().map(|v| v * v).sum::<f64>() / probe.z_probes as f64;
    let e_d_tilde = dt_max.iter().sum::<f64>() / probe.z_probes as f64;
    let c1 = l_max * e_d;
    let c2 = ((d * p) as f64).sqrt() * l_max * e_d;
    let c3 = (p as f64).sqrt() * lt_max * e_d_sq;
    let c4 = (d as f64).sqrt() * l_max * e_d_tilde;
    Ok(LipschitzEstimates {
        l: l_max,
        l_tilde: lt_max,
        e_d,
        e_d_sq,
        e_d_tilde,
        c1,
        c2,
        c3,
        c4,
        combined: c1 * c2 + c3 + c4,
    })
}

fn perturb(theta: &ArrayView1<f64>, step: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let mut t = theta.to_owned();
    for v in t.iter_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v += step * g;
    }
    t
}

/// Result of a single exact-solve flow step.
pub struct FlowStep {
    pub new_theta: Array1<f64>,
    pub f_value: f64,
    pub mmd: f64,
    pub witness: WitnessSolution,
    pub direction: Array1<f64>,
    /// The assembled operator was numerically zero.
    pub degenerate: bool,
}

/// Take one witness-driven update `theta + eps * L f` over an explicit
/// latent batch.
pub fn flow_step(
    map: &FeatureMap,
    gen: &Generator,
    theta: &ArrayView1<f64>,
    target_mu: &RkhsFunction,
    latents: &ArrayView2<f64>,
    params: &RegularizationParams,
    eps: f64,
) -> Result<FlowStep> {
    let (a, _, mu_q) = operators::assemble_with_pushforward(map, gen, theta, latents)?;
    let mu_diff = RkhsFunction::new(&target_mu.weights - &mu_q.weights);
    let f_value = 0.5 * mu_diff.weights.dot(&mu_diff.weights);
    let mmd = mu_diff.norm_h();
    let dense_d = a.dense_d();
    let witness = witness_solve_with_dense(&a, &dense_d.view(), &mu_diff, params)?;
    let direction = a.apply_l(&witness.f_star)?;
    let degenerate = linalg::fro_norm(&a.matrix().view()) == 0.0;
    let mut new_theta = theta.to_owned();
    new_theta.scaled_add(eps, &direction);
    Ok(FlowStep {
        new_theta,
        f_value,
        mmd,
        witness,
        direction,
        degenerate,
    })
}

struct StepState {
    a: OperatorA,
    dense_d: Array2<f64>,
    mu_q: RkhsFunction,
}

fn compute_state(
    map: &FeatureMap,
    gen: &Generator,
    theta: &ArrayView1<f64>,
    latents: &ArrayView2<f64>,
) -> Result<StepState> {
    let (a, _, mu_q) = operators::assemble_with_pushforward(map, gen, theta, latents)?;
    let dense_d = a.dense_d();
    Ok(StepState { a, dense_d, mu_q })
}

struct IterDiag {
    witness: WitnessSolution,
    alignment: f64,
    lambda_i: f64,
    degenerate: bool,
    alpha: f64,
    beta: f64,
}

/// Spectrum (optional), the regularization pair for this iterate, the
/// witness solve, and the alignment of the witness.
fn iter_diagnostics(
    state: &StepState,
    target_mu: &RkhsFunction,
    config: &FlowConfig,
    want_spectrum: bool,
) -> Result<IterDiag> {
    let mu_diff = RkhsFunction::new(&target_mu.weights - &state.mu_q.weights);
    let spectrum = if want_spectrum {
        Some(Spectrum::from_dense_d(
            &state.dense_d.view(),
            operators::DEFAULT_RANK_THRESHOLD,
        )?)
    } else {
        None
    };
    let (lambda_i, degenerate) = match &spectrum {
        Some(s) => match s.smallest_nonzero_eig() {
            Ok(v) => (v, false),
            Err(Error::DegenerateOperator) => (f64::NAN, true),
            Err(e) => return Err(e),
        },
        None => (f64::NAN, false),
    };
    let (alpha, beta) = if config.adaptive {
        if degenerate || !lambda_i.is_finite() {
            return Err(Error::DegenerateOperator);
        }
        let a = config.tau / 2.0;
        (a, a * lambda_i)
    } else {
        (config.alpha, config.beta)
    };
    let params = RegularizationParams::new(alpha, beta)?;
    let witness = witness_solve_with_dense(&state.a, &state.dense_d.view(), &mu_diff, &params)?;
    let alignment = match &spectrum {
        Some(s) => s.nullspace_alignment(&witness.f_star).unwrap_or(f64::NAN),
        None => f64::NAN,
    };
    Ok(IterDiag {
        witness,
        alignment,
        lambda_i,
        degenerate,
        alpha,
        beta,
    })
}

/// Run the exact-solve flow.
pub fn run_flow(
    map: &FeatureMap,
    gen: &Generator,
    theta0: &ArrayView1<f64>,
    target_samples: &ArrayView2<f64>,
    config: &FlowConfig,
) -> Result<Trajectory> {
    config.validate()?;
    let target_mu = map.mean_embedding(target_samples)?;
    let mut sampler = LatentSampler::new(gen.latent_dim(), config.seed)?;
    let mut latents = sampler.sample(config.latent_batch)?;
    let c_estimate = if config.lipschitz_probes >= 2 {
        let probe = ProbeConfig {
            pairs: config.lipschitz_probes,
            seed: config.seed ^ 0x9e37_79b9,
            ..ProbeConfig::default()
        };
        Some(estimate_lipschitz(map, gen, theta0, &probe)?.combined)
    } else {
        None
    };

    let mut theta = theta0.to_owned();
    let mut rows: Vec<FlowDiagnostics> = Vec::with_capacity(config.iterations);
    let mut thetas = config.record_thetas.then(Vec::new);
    let mut f_initial = f64::NAN;
    let mut chi_sum = 0.0_f64;
    let mut bound_valid = true;
    let mut last_rate: Option<f64> = None;
    let mut aborted = None;
    let mut pending: Option<StepState> = None;
    let mut snapshots = Vec::new();
    let started = std::time::Instant::now();

    for iter in 1..=config.iterations {
        let state = match pending.take() {
            Some(s) => s,
            None => compute_state(map, gen, &theta.view(), &latents.view())?,
        };
        let mu_diff = RkhsFunction::new(&target_mu.weights - &state.mu_q.weights);
        let f_value = 0.5 * mu_diff.weights.dot(&mu_diff.weights);
        let mmd = mu_diff.norm_h();
        if iter == 1 {
            f_initial = f_value;
        }
        // backfill the previous row's finite-difference rate residual
        if let (Some(prev), Some(rate)) = (rows.last_mut(), last_rate) {
            if prev.eps > 0.0 && rate != 0.0 {
                let fd = (f_value - prev.f_value) / prev.eps;
                prev.rate_residual = ((fd - rate) / rate).abs();
            }
        }

        let diag = match iter_diagnostics(&state, &target_mu, config, config.spectral_diagnostics) {
            Ok(d) => d,
            Err(Error::DegenerateOperator) => {
                aborted = Some(format!(
                    "adaptive regularization hit a degenerate operator at iteration {iter}"
                ));
                rows.push(FlowDiagnostics {
                    f_value,
                    mmd,
                    degenerate: true,
                    ..FlowDiagnostics::nan_row(iter)
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let mut eps = config.step.eps(iter);
        let chi_val = if diag.lambda_i.is_finite() && diag.alignment.is_finite() {
            chi(diag.lambda_i, diag.alignment, diag.alpha, diag.beta).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        let stepcond_ok = match c_estimate {
            Some(c) => {
                let max_eps = step_size_bound(c, diag.beta, f_initial)?;
                if eps <= max_eps {
                    1.0
                } else {
                    0.0
                }
            }
            None => f64::NAN,
        };

        let direction = state.a.apply_l(&diag.witness.f_star)?;
        let mut new_theta = theta.clone();
        new_theta.scaled_add(eps, &direction);

        // optional backtracking: keep the post-step alignment above tau
        if config.backtrack && !diag.degenerate {
            let mut halvings = 0;
            loop {
                let next_state = compute_state(map, gen, &new_theta.view(), &latents.view())?;
                let next_diag = iter_diagnostics(&next_state, &target_mu, config, true)?;
                if next_diag.alignment.is_nan() || next_diag.alignment > config.tau {
                    pending = Some(next_state);
                    break;
                }
                halvings += 1;
                if halvings > 10 {
                    pending = Some(next_state);
                    break;
                }
                eps *= 0.5;
                new_theta = theta.clone();
                new_theta.scaled_add(eps, &direction);
            }
        }

        if chi_val.is_finite() && bound_valid {
            chi_sum += eps * chi_val;
        } else {
            bound_valid = false;
        }
        let bound = if bound_valid {
            f_initial * (-chi_sum).exp()
        } else {
            f64::NAN
        };
        last_rate = Some(descent_rate(
            f_value,
            diag.witness.value,
            diag.alpha,
            diag.beta,
        )?);

        let stalled = diag.alignment.is_finite() && diag.alignment <= config.tau;
        let wallclock_ms = if config.timings {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        rows.push(FlowDiagnostics {
            iter,
            f_value,
            mmd,
            mmd_ab: diag.witness.value,
            lambda_i: diag.lambda_i,
            alignment: diag.alignment,
            chi: chi_val,
            eps,
            bound,
            rate_residual: f64::NAN,
            stepcond_ok,
            wallclock_ms,
            stalled,
            degenerate: diag.degenerate,
        });
        if let Some(t) = thetas.as_mut() {
            t.push(theta.clone());
        }

        if new_theta.iter().any(|v| !v.is_finite()) {
            aborted = Some(format!("non-finite parameters at iteration {iter}"));
            break;
        }
        theta = new_theta;
        if config.snapshot_every > 0 && iter % config.snapshot_every == 0 {
            snapshots.push((iter, theta.clone()));
        }
        if config.f_tolerance > 0.0 && f_value <= config.f_tolerance {
            break;
        }
        if stalled && config.halt_on_stall {
            break;
        }
        if config.resample_latents {
            latents = sampler.sample(config.latent_batch)?;
            pending = None;
        }
    }

    Ok(Trajectory {
        rows,
        thetas,
        snapshots,
        final_theta: theta,
        f_initial,
        c_estimate,
        aborted,
    })
}

/// Pointwise scalar maps for the entropy functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarMap {
    Identity,
    Square,
    Exp,
}

impl ScalarMap {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            ScalarMap::Identity => s,
            ScalarMap::Square => s * s,
            ScalarMap::Exp => s.exp(),
        }
    }

    pub fn deriv(&self, s: f64) -> f64 {
        match self {
            ScalarMap::Identity => 1.0,
            ScalarMap::Square => 2.0 * s,
            ScalarMap::Exp => s.exp(),
        }
    }
}

/// Functional on the statistical manifold, described through its
/// mean-embedding representation.
#[derive(Debug, Clone)]
pub enum FunctionalSpec {
    /// `0.5 * mmd^2` to a fixed target embedding.
    MmdToTarget { target_mu: RkhsFunction },
    /// `int V d q_theta` with `V` in the RKHS.
    Potential { v: RkhsFunction },
    /// `int f dq * int g dq`.
    Interaction { f: RkhsFunction, g: RkhsFunction },
    /// `int f(mu_q(x)) dx` discretized on quadrature nodes and weights.
    Entropy {
        map: ScalarMap,
        nodes: Array2<f64>,
        weights: Array1<f64>,
    },
}

impl FunctionalSpec {
    pub fn validate(&self, feature_dim: usize, input_dim: usize) -> Result<()> {
        let check = |dim: usize, what: &'static str| -> Result<()> {
            if dim != feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: feature_dim,
                    got: dim,
                    context: what,
                });
            }
            Ok(())
        };
        match self {
            FunctionalSpec::MmdToTarget { target_mu } => check(target_mu.dim(), "target embedding"),
            FunctionalSpec::Potential { v } => check(v.dim(), "potential"),
            FunctionalSpec::Interaction { f, g } => {
                check(f.dim(), "interaction f")?;
                check(g.dim(), "interaction g")
            }
            FunctionalSpec::Entropy { nodes, weights, .. } => {
                if nodes.nrows() == 0 {
                    return Err(Error::InvalidConfig(
                        "entropy functional needs a nonempty quadrature set".into(),
                    ));
                }
                if nodes.ncols() != input_dim {
                    return Err(Error::DimensionMismatch {
                        expected: input_dim,
                        got: nodes.ncols(),
                        context: "quadrature nodes",
                    });
                }
                if weights.len() != nodes.nrows() {
                    return Err(Error::DimensionMismatch {
                        expected: nodes.nrows(),
                        got: weights.len(),
                        context: "quadrature weights",
                    });
                }
                Ok(())
            }
        }
    }

    /// The representer `h_theta` of the functional's derivative at the
    /// current pushforward embedding.
    pub fn h_theta(&self, map: &FeatureMap, mu_q: &RkhsFunction) -> Result<RkhsFunction> {
        match self {
            FunctionalSpec::MmdToTarget { target_mu } => {
                Ok(RkhsFunction::new(&mu_q.weights - &target_mu.weights))
            }
            FunctionalSpec::Potential { v } => Ok(v.clone()),
            FunctionalSpec::Interaction { f, g } => {
                let fq = f.inner(mu_q);
                let gq = g.inner(mu_q);
                Ok(RkhsFunction::new(&g.weights * fq + &f.weights * gq))
            }
            FunctionalSpec::Entropy {
                map: smap,
                nodes,
                weights,
            } => {
                let feats = map.phi_batch(&nodes.view())?;
                let vals = feats.dot(&mu_q.weights);
                let coef = Array1::from_iter(
                    vals.iter()
                        .zip(weights.iter())
                        .map(|(&s, &w)| w * smap.deriv(s)),
                );
                Ok(RkhsFunction::new(feats.t().dot(&coef)))
            }
        }
    }

    /// Evaluate the functional at the current pushforward embedding.
    pub fn value(&self, map: &FeatureMap, mu_q: &RkhsFunction) -> Result<f64> {
        match self {
            FunctionalSpec::MmdToTarget { target_mu } => {
                let diff = &target_mu.weights - &mu_q.weights;
                Ok(0.5 * diff.dot(&diff))
            }
            FunctionalSpec::Potential { v } => Ok(v.inner(mu_q)),
            FunctionalSpec::Interaction { f, g } => Ok(f.inner(mu_q) * g.inner(mu_q)),
            FunctionalSpec::Entropy {
                map: smap,
                nodes,
                weights,
            } => {
                let feats = map.phi_batch(&nodes.view())?;
                let vals = feats.dot(&mu_q.weights);
                Ok(vals
                    .iter()
                    .zip(weights.iter())
                    .map(|(&s, &w)| w * smap.eval(s))
                    .sum())
            }
        }
    }
}

/// Gradient of a functional with respect to the regularized Riemannian
/// structure.
pub struct FunctionalGradient {
    pub h: RkhsFunction,
    pub u: RkhsFunction,
    /// `L u`, the manifold gradient; the descent update is `theta - eps *
    /// grad`.
    pub grad: Array1<f64>,
}

/// Compute `grad F = L u` with `(alpha D + beta I) u = h_theta`.
pub fn functional_gradient(
    fspec: &FunctionalSpec,
    map: &FeatureMap,
    a: &OperatorA,
    dense_d: &ArrayView2<f64>,
    mu_q: &RkhsFunction,
    params: &RegularizationParams,
) -> Result<FunctionalGradient> {
    let h = fspec.h_theta(map, mu_q)?;
    let (u, _residual) = resolvent_solve_dense(a, dense_d, &h, params)?;
    let grad = a.apply_l(&u)?;
    Ok(FunctionalGradient { h, u, grad })
}

/// Run the gradient flow `theta <- theta - eps * grad F` of a general
/// functional. Spectral diagnostics fields are populated as in `run_flow`;
/// the `mmd` columns are NaN unless the functional is `MmdToTarget`.
pub fn run_functional_flow(
    map: &FeatureMap,
    gen: &Generator,
    theta0: &ArrayView1<f64>,
    fspec: &FunctionalSpec,
    config: &FlowConfig,
) -> Result<Trajectory> {
    config.validate()?;
    fspec.validate(map.output_dim(), map.input_dim())?;
    if config.adaptive {
        return Err(Error::InvalidConfig(
            "adaptive regularization applies to the MMD flow only".into(),
        ));
    }
    let params = RegularizationParams::new(config.alpha, config.beta)?;
    let mut sampler = LatentSampler::new(gen.latent_dim(), config.seed)?;
    let mut latents = sampler.sample(config.latent_batch)?;
    let mut theta = theta0.to_owned();
    let mut rows = Vec::with_capacity(config.iterations);
    let mut thetas = config.record_thetas.then(Vec::new);
    let mut f_initial = f64::NAN;
    let mut aborted = None;
    let mut snapshots = Vec::new();
    let started = std::time::Instant::now();

    for iter in 1..=config.iterations {
        let state = compute_state(map, gen, &theta.view(), &latents.view())?;
        let f_value = fspec.value(map, &state.mu_q)?;
        if iter == 1 {
            f_initial = f_value;
        }
        let fg = functional_gradient(
            fspec,
            map,
            &state.a,
            &state.dense_d.view(),
            &state.mu_q,
            &params,
        )?;
        let (lambda_i, alignment, chi_val, degenerate) = if config.spectral_diagnostics {
            let spec =
                Spectrum::from_dense_d(&state.dense_d.view(), operators::DEFAULT_RANK_THRESHOLD)?;
            match spec.smallest_nonzero_eig() {
                Ok(l) => {
                    let align = spec.nullspace_alignment(&fg.u).unwrap_or(f64::NAN);
                    let c = if align.is_finite() {
                        chi(l, align, config.alpha, config.beta).unwrap_or(f64::NAN)
                    } else {
                        f64::NAN
                    };
                    (l, align, c, false)
                }
                Err(Error::DegenerateOperator) => (f64::NAN, f64::NAN, f64::NAN, true),
                Err(e) => return Err(e),
            }
        } else {
            (f64::NAN, f64::NAN, f64::NAN, false)
        };
        let mmd = match fspec {
            FunctionalSpec::MmdToTarget { .. } => (2.0 * f_value.max(0.0)).sqrt(),
            _ => f64::NAN,
        };
        let eps = config.step.eps(iter);
        let wallclock_ms = if config.timings {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        rows.push(FlowDiagnostics {
            iter,
            f_value,
            mmd,
            mmd_ab: f64::NAN,
            lambda_i,
            alignment,
            chi: chi_val,
            eps,
            bound: f64::NAN,
            rate_residual: f64::NAN,
            stepcond_ok: f64::NAN,
            wallclock_ms,
            stalled: alignment.is_finite() && alignment <= config.tau,
            degenerate,
        });
        if let Some(t) = thetas.as_mut() {
            t.push(theta.clone());
        }
        theta.scaled_add(-eps, &fg.grad);
        if config.snapshot_every > 0 && iter % config.snapshot_every == 0 {
            snapshots.push((iter, theta.clone()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            aborted = Some(format!("non-finite parameters at iteration {iter}"));
            break;
        }
        if config.resample_latents {
            latents = sampler.sample(config.latent_batch)?;
        }
    }
    Ok(Trajectory {
        rows,
        thetas,
        snapshots,
        final_theta: theta,
        f_initial,
        c_estimate: None,
        aborted,
    })
}

/// Riemannian metric tensor `g(xi_1, xi_2) = alpha <D w1, D w2> + beta
/// <A w1, A w2>` for tangent representers `w1, w2`.
pub fn metric_tensor(
    a: &OperatorA,
    phi1: &RkhsFunction,
    phi2: &RkhsFunction,
    params: &RegularizationParams,
) -> Result<f64> {
    let l1 = a.apply_l(phi1)?;
    let l2 = a.apply_l(phi2)?;
    let d1 = a.apply_lt(&l1.view())?;
    let d2 = a.apply_lt(&l2.view())?;
    Ok(params.alpha() * d1.inner(&d2) + params.beta() * l1.dot(&l2))
}

/// Per-row outcome of the continuous-time decay bound check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayCheck {
    /// The bound's conditions held up to this row (alignment above tau and
    /// diagnostics available).
    pub covered: bool,
    /// `F_row <= F_0 exp(-sum)`, with slack for roundoff. Meaningful only
    /// when covered.
    pub ok: bool,
}

/// Check the exponential decay bound along a trajectory, with `gamma(row)`
/// supplying the functional's gradient-domination constant (2 for the MMD).
pub fn decay_bound_check<F>(trajectory: &Trajectory, tau: f64, gamma: F) -> Vec<DecayCheck>
where
    F: Fn(usize) -> f64,
{
    let mut out = Vec::with_capacity(trajectory.rows.len());
    if trajectory.rows.is_empty() {
        return out;
    }
    let f0 = trajectory.rows[0].f_value;
    let mut exponent = 0.0_f64;
    let mut covered = true;
    for (idx, row) in trajectory.rows.iter().enumerate() {
        if !row.alignment.is_finite() || row.alignment <= tau || !row.chi.is_finite() {
            covered = false;
        }
        let bound = f0 * (-exponent).exp();
        let ok = row.f_value <= bound * (1.0 + 1e-12) + 1e-300;
        out.push(DecayCheck { covered, ok });
        if covered {
            exponent += row.eps * gamma(idx) * row.chi;
        }
    }
    out
}
