//! Stochastic min-max training: RMSProp critic steps on the witness weights
//! against a generator-parameter gradient penalty, alternating with RMSProp
//! generator updates along the learned witness.
//!
//! The critic minimizes `M(w) = <w, mu_q - mu_p> + alpha |A w|^2` (an
//! optional explicit ridge `(beta/2) |w|^2` can be added); with the kernel
//! fixed, only the last linear layer trains, so the penalty is quadratic in
//! `w` and its gradient `2 alpha A^T A w` is exact. The generator then
//! descends `-mean f(G(z))`, which moves the pushforward toward high
//! witness values.

use crate::error::{Error, Result};
use crate::generator::{Generator, LatentSampler};
use crate::operators::{self, BatchOperator};
use crate::par;
use crate::rkhs::{FeatureMap, RkhsFunction};
use crate::targets::MixtureTarget;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// RMSProp optimizer state: a running mean of squared gradients.
#[derive(Debug, Clone)]
pub struct RmsPropState {
    acc: Array1<f64>,
    rho: f64,
    eps_num: f64,
    lr: f64,
}

impl RmsPropState {
    pub fn new(dim: usize, lr: f64, rho: f64, eps_num: f64) -> Result<RmsPropState> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "rho must lie in (0,1), got {rho}"
            )));
        }
        if !(eps_num > 0.0) || !(lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate and numerical floor must be positive, got lr={lr}, eps={eps_num}"
            )));
        }
        Ok(RmsPropState {
            acc: Array1::zeros(dim),
            rho,
            eps_num,
            lr,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// `s <- rho s + (1-rho) g^2; params <- params - lr * g / (sqrt(s) +
    /// eps)`. Non-finite gradients abort.
    pub fn step(&mut self, params: &mut Array1<f64>, grad: &ArrayView1<f64>) -> Result<()> {
        if grad.len() != self.acc.len() || params.len() != self.acc.len() {
            return Err(Error::DimensionMismatch {
                expected: self.acc.len(),
                got: grad.len().max(params.len()),
                context: "rmsprop update",
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient in rmsprop step".into()));
        }
        for ((s, p), &g) in self.acc.iter_mut().zip(params.iter_mut()).zip(grad.iter()) {
            *s = self.rho * *s + (1.0 - self.rho) * g * g;
            *p -= self.lr * g / (s.sqrt() + self.eps_num);
        }
        Ok(())
    }
}

/// Training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanConfig {
    /// Gradient penalty weight; 0 recovers the unregularized baseline.
    pub alpha: f64,
    /// Critic iterations per generator step.
    pub n_critic: usize,
    /// Minibatch size.
    pub batch: usize,
    pub iterations: usize,
    pub lr_critic: f64,
    pub lr_generator: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_eps_num")]
    pub eps_num: f64,
    pub seed: u64,
    /// Optional explicit ridge `(ridge/2) |w|^2` on the critic objective.
    #[serde(default)]
    pub explicit_ridge: f64,
    /// Estimate the squared penalty with two independent half-batches.
    #[serde(default)]
    pub split_batch: bool,
    /// Resample minibatches inside the critic loop instead of once per
    /// outer iteration.
    #[serde(default)]
    pub resample_per_critic_step: bool,
    /// Draw the target minibatches from a fixed pool of this size with
    /// cached features (0 draws fresh target samples every time).
    #[serde(default = "default_target_pool")]
    pub target_pool: usize,
    /// Populate `wallclock_ms` with real timings (breaks byte-identical
    /// reruns; off by default).
    #[serde(default)]
    pub timings: bool,
    /// Record a parameter snapshot every this many iterations (0 disables).
    #[serde(default)]
    pub snapshot_every: usize,
}

fn default_rho() -> f64 {
    0.9
}

fn default_eps_num() -> f64 {
    1e-8
}

fn default_target_pool() -> usize {
    16384
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            alpha: 100.0,
            n_critic: 5,
            batch: 512,
            iterations: 20_000,
            lr_critic: 1e-4,
            lr_generator: 1e-4,
            rho: 0.9,
            eps_num: 1e-8,
            seed: 0,
            explicit_ridge: 0.0,
            split_batch: false,
            resample_per_critic_step: false,
            target_pool: 16384,
            timings: false,
            snapshot_every: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_critic < 1 {
            return Err(Error::InvalidConfig("n_critic must be at least 1".into()));
        }
        if self.batch < 2 {
            return Err(Error::InvalidConfig("batch must be at least 2".into()));
        }
        if self.split_batch && self.batch % 2 != 0 {
            return Err(Error::InvalidConfig(
                "split-batch estimation needs an even batch size".into(),
            ));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if self.explicit_ridge < 0.0 {
            return Err(Error::InvalidConfig("ridge must be nonnegative".into()));
        }
        if self.target_pool > 0 && self.target_pool < self.batch {
            return Err(Error::InvalidConfig(
                "target pool must be at least one batch".into(),
            ));
        }
        Ok(())
    }
}

/// Critic objective and its exact gradient in `w` (reference path through
/// the materialized operator).
///
/// `M = <w, mu_q - mu_p> + alpha |A w|^2`, `grad = (mu_q - mu_p) + 2 alpha
/// A^T A w`.
pub fn critic_objective(
    map: &FeatureMap,
    gen: &Generator,
    theta: &ArrayView1<f64>,
    w: &RkhsFunction,
    x_batch: &ArrayView2<f64>,
    z_batch: &ArrayView2<f64>,
    alpha: f64,
) -> Result<(f64, Array1<f64>)> {
    critic_objective_with_ridge(map, gen, theta, w, x_batch, z_batch, alpha, 0.0)
}

/// As [`critic_objective`] with an explicit ridge `(ridge/2) |w|^2` added.
#[allow(clippy::too_many_arguments)]
pub fn critic_objective_with_ridge(
    map: &FeatureMap,
    gen: &Generator,
    theta: &ArrayView1<f64>,
    w: &RkhsFunction,
    x_batch: &ArrayView2<f64>,
    z_batch: &ArrayView2<f64>,
    alpha: f64,
    ridge: f64,
) -> Result<(f64, Array1<f64>)> {
    if x_batch.nrows() == 0 || z_batch.nrows() == 0 {
        return Err(Error::EmptyBatch("critic objective"));
    }
    let mu_p = map.mean_embedding(x_batch)?;
    let (a, _, mu_q) = operators::assemble_with_pushforward(map, gen, theta, z_batch)?;
    let diff = RkhsFunction::new(&mu_q.weights - &mu_p.weights);
    let mut m = w.inner(&diff);
    let mut grad = diff.weights;
    if alpha != 0.0 {
        let lw = a.apply_l(w)?;
        m += alpha * lw.dot(&lw);
        let penalty_grad = a.apply_lt(&lw.view())?;
        grad.scaled_add(2.0 * alpha, &penalty_grad.weights);
    }
    if ridge != 0.0 {
        m += 0.5 * ridge * w.weights.dot(&w.weights);
        grad.scaled_add(ridge, &w.weights);
    }
    Ok((m, grad))
}

/// The generator update direction `d_theta = -grad_theta mean f(G(z))`
/// (reference path through the materialized operator).
pub fn generator_direction(
    map: &FeatureMap,
    gen: &Generator,
    theta: &ArrayView1<f64>,
    w: &RkhsFunction,
    z_batch: &ArrayView2<f64>,
) -> Result<Array1<f64>> {
    let a = operators::assemble(map, gen, theta, z_batch)?;
    Ok(-a.apply_l(w)?)
}

/// One per-iteration log row.
#[derive(Debug, Clone, Copy)]
pub struct TrainRow {
    pub iter: usize,
    /// `0.5 * mmd^2` on this iteration's minibatches.
    pub f_value: f64,
    pub mmd: f64,
    pub critic_m: f64,
    pub critic_steps: usize,
    pub grad_norm_w: f64,
    pub grad_norm_theta: f64,
    pub wallclock_ms: f64,
}

/// A finished (or aborted) training run.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
    /// `(iteration, post-update parameters)` at the snapshot cadence.
    pub snapshots: Vec<(usize, Array1<f64>)>,
    pub final_theta: Array1<f64>,
    pub final_w: RkhsFunction,
    pub aborted: Option<String>,
}

enum CriticBatch<'a> {
    Whole(BatchOperator<'a>),
    Halves(BatchOperator<'a>, BatchOperator<'a>),
}

fn make_batch<'a>(
    map: &'a FeatureMap,
    gen: &'a Generator,
    theta: &Array1<f64>,
    latent: &mut LatentSampler,
    config: &GanConfig,
    with_jac: bool,
) -> Result<CriticBatch<'a>> {
    let z = latent.sample(config.batch)?;
    if config.split_batch && config.alpha != 0.0 {
        let half = config.batch / 2;
        let z1 = z.slice(ndarray::s![..half, ..]).to_owned();
        let z2 = z.slice(ndarray::s![half.., ..]).to_owned();
        Ok(CriticBatch::Halves(
            BatchOperator::new(map, gen, &theta.view(), &z1.view(), true)?,
            BatchOperator::new(map, gen, &theta.view(), &z2.view(), true)?,
        ))
    } else {
        Ok(CriticBatch::Whole(BatchOperator::new(
            map,
            gen,
            &theta.view(),
            &z.view(),
            with_jac,
        )?))
    }
}

impl CriticBatch<'_> {
    fn mu_q(&self) -> RkhsFunction {
        match self {
            CriticBatch::Whole(op) => op.mu_q(),
            CriticBatch::Halves(a, b) => {
                RkhsFunction::new((&a.mu_q().weights + &b.mu_q().weights) / 2.0)
            }
        }
    }

    /// Penalty value `alpha * |A w|^2` (or the split-batch estimator
    /// `alpha <A_1 w, A_2 w>`) and its gradient in `w`.
    fn penalty(&self, w: &RkhsFunction, alpha: f64) -> (f64, Array1<f64>) {
        match self {
            CriticBatch::Whole(op) => {
                let lw = op.apply_l(w);
                let value = alpha * lw.dot(&lw);
                let grad = op.apply_lt(&lw.view()).weights * (2.0 * alpha);
                (value, grad)
            }
            CriticBatch::Halves(a, b) => {
                let l1 = a.apply_l(w);
                let l2 = b.apply_l(w);
                let value = alpha * l1.dot(&l2);
                let mut grad = a.apply_lt(&l2.view()).weights;
                grad += &b.apply_lt(&l1.view()).weights;
                (value, grad * alpha)
            }
        }
    }

    /// Full-batch `A w` for the generator direction.
    fn apply_l(&self, w: &RkhsFunction) -> Array1<f64> {
        match self {
            CriticBatch::Whole(op) => op.apply_l(w),
            CriticBatch::Halves(a, b) => {
                let mut v = a.apply_l(w);
                v += &b.apply_l(w);
                v / 2.0
            }
        }
    }
}

/// Target minibatch source: either a fixed featurized pool or fresh draws.
struct TargetStream<'a> {
    map: &'a FeatureMap,
    target: &'a MixtureTarget,
    pool_feats: Option<Array2<f64>>,
    rng: ChaCha8Rng,
}

impl<'a> TargetStream<'a> {
    fn new(
        map: &'a FeatureMap,
        target: &'a MixtureTarget,
        pool: usize,
        seed: u64,
    ) -> Result<TargetStream<'a>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool_feats = if pool > 0 {
            let samples = target.sample(pool, &mut rng)?;
            Some(map.phi_batch(&samples.view())?)
        } else {
            None
        };
        Ok(TargetStream {
            map,
            target,
            pool_feats,
            rng,
        })
    }

    fn mu_p(&mut self, n: usize) -> Result<RkhsFunction> {
        match &self.pool_feats {
            Some(feats) => {
                let pool = feats.nrows();
                let mut batch = Array2::<f64>::zeros((n, feats.ncols()));
                for i in 0..n {
                    let k = self.rng.gen_range(0..pool);
                    batch.row_mut(i).assign(&feats.row(k));
                }
                Ok(RkhsFunction::new(par::column_mean(&batch.view())))
            }
            None => {
                let samples = self.target.sample(n, &mut self.rng)?;
                self.map.mean_embedding(&samples.view())
            }
        }
    }
}

/// Run the min-max training loop.
pub fn train(
    map: &FeatureMap,
    gen: &Generator,
    theta0: &ArrayView1<f64>,
    target: &MixtureTarget,
    config: &GanConfig,
) -> Result<TrainLog> {
    config.validate()?;
    let m = map.output_dim();
    let with_jac = config.alpha != 0.0;
    let mut theta = theta0.to_owned();
    let mut w = Array1::<f64>::zeros(m);
    let mut critic_opt = RmsPropState::new(m, config.lr_critic, config.rho, config.eps_num)?;
    let mut gen_opt = RmsPropState::new(
        gen.param_count(),
        config.lr_generator,
        config.rho,
        config.eps_num,
    )?;
    let mut targets =
        TargetStream::new(map, target, config.target_pool, config.seed ^ 0x7423_11aa)?;
    let mut latent = LatentSampler::new(gen.latent_dim(), config.seed ^ 0x51ce_0042)?;

    let mut rows = Vec::with_capacity(config.iterations);
    let mut aborted = None;
    let mut snapshots = Vec::new();
    let started = std::time::Instant::now();

    for iter in 1..=config.iterations {
        let mut batch = make_batch(map, gen, &theta, &mut latent, config, with_jac)?;
        let mut mu_p = targets.mu_p(config.batch)?;
        let mut mu_q = batch.mu_q();
        let mmd = {
            let d = &mu_q.weights - &mu_p.weights;
            d.dot(&d).sqrt()
        };
        let f_value = 0.5 * mmd * mmd;

        let mut critic_m = f64::NAN;
        let mut grad_norm_w = f64::NAN;
        let mut step_result = Ok(());
        for _ in 0..config.n_critic {
            if config.resample_per_critic_step {
                batch = make_batch(map, gen, &theta, &mut latent, config, with_jac)?;
                mu_p = targets.mu_p(config.batch)?;
                mu_q = batch.mu_q();
            }
            let wf = RkhsFunction::new(w.clone());
            let diff = &mu_q.weights - &mu_p.weights;
            let mut m_val = wf.weights.dot(&diff);
            let mut grad = diff;
            if config.alpha != 0.0 {
                let (pv, pg) = batch.penalty(&wf, config.alpha);
                m_val += pv;
                grad += &pg;
            }
            if config.explicit_ridge != 0.0 {
                m_val += 0.5 * config.explicit_ridge * wf.weights.dot(&wf.weights);
                grad.scaled_add(config.explicit_ridge, &wf.weights);
            }
            critic_m = m_val;
            grad_norm_w = grad.dot(&grad).sqrt();
            step_result = critic_opt.step(&mut w, &grad.view());
            if step_result.is_err() {
                break;
            }
        }
        if let Err(e) = step_result {
            aborted = Some(format!("critic update failed at iteration {iter}: {e}"));
            break;
        }

        // generator step on the freshly learned witness
        if config.resample_per_critic_step {
            batch = make_batch(map, gen, &theta, &mut latent, config, with_jac)?;
        }
        let wf = RkhsFunction::new(w.clone());
        let d_theta = -batch.apply_l(&wf);
        let grad_norm_theta = d_theta.dot(&d_theta).sqrt();
        if let Err(e) = gen_opt.step(&mut theta, &d_theta.view()) {
            aborted = Some(format!("generator update failed at iteration {iter}: {e}"));
            break;
        }

        let wallclock_ms = if config.timings {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        rows.push(TrainRow {
            iter,
            f_value,
            mmd,
            critic_m,
            critic_steps: config.n_critic,
            grad_norm_w,
            grad_norm_theta,
            wallclock_ms,
        });
        if config.snapshot_every > 0 && iter % config.snapshot_every == 0 {
            snapshots.push((iter, theta.clone()));
        }
        if theta.iter().any(|v| !v.is_finite()) || w.iter().any(|v| !v.is_finite()) {
            aborted = Some(format!("non-finite state at iteration {iter}"));
            break;
        }
    }

    Ok(TrainLog {
        rows,
        snapshots,
        final_theta: theta,
        final_w: RkhsFunction::new(w),
        aborted,
    })
}

/// Nearest-mean mode occupancy of generated samples (diagnostic for mode
/// coverage).
pub fn mode_occupancy(
    gen: &Generator,
    theta: &ArrayView1<f64>,
    target: &MixtureTarget,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut latent = LatentSampler::new(gen.latent_dim(), seed)?;
    let z = latent.sample(n_samples)?;
    let (x, _) = gen.forward_batch(theta, &z.view())?;
    let k = target.components();
    let mut counts = vec![0usize; k];
    for row in x.axis_iter(Axis(0)) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let mut d = 0.0;
            for j in 0..target.dim() {
                let diff = row[j] - target.means[[c, j]];
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        counts[best] += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrepancy::{witness_solve, RegularizationParams};
    use crate::rkhs::build_feature_map;
    use crate::targets::eight_gaussians;
    use ndarray::array;

    #[test]
    fn rmsprop_closed_forms() {
        // zero gradient with zero accumulator leaves parameters unchanged
        let mut opt = RmsPropState::new(2, 0.01, 0.9, 1e-8).unwrap();
        let mut p = array![1.0, -2.0];
        opt.step(&mut p.clone(), &array![0.0, 0.0].view()).unwrap();
        let p0 = p.clone();
        opt.step(&mut p, &array![0.0, 0.0].view()).unwrap();
        assert_eq!(p, p0);

        // first scalar step: s = 0.1 * 16 = 1.6, delta = -0.01*4/(sqrt(1.6)+1e-8)
        let mut opt = RmsPropState::new(1, 0.01, 0.9, 1e-8).unwrap();
        let mut p = array![2.0];
        opt.step(&mut p, &array![4.0].view()).unwrap();
        let want = 2.0 - 0.01 * 4.0 / (1.6_f64.sqrt() + 1e-8);
        assert_eq!(p[0], want);
        assert!((p[0] - (2.0 - 0.031622776)).abs() < 1e-8);

        // repeated identical gradients shrink the effective step
        let d1 = 2.0 - p[0];
        let before = p[0];
        opt.step(&mut p, &array![4.0].view()).unwrap();
        let d2 = before - p[0];
        assert!(d2 < d1, "second step {d2} not smaller than first {d1}");

        // non-finite gradients abort
        assert!(opt.step(&mut p, &array![f64::NAN].view()).is_err());
    }

    #[test]
    fn critic_objective_closed_forms() {
        let map = build_feature_map(2, &[8], 6, 3).unwrap();
        let gen = Generator::mlp(3, &[5], 2).unwrap();
        let theta = gen.init_theta(5);
        let t = eight_gaussians(2.0, 0.04, 7).unwrap();
        let x = t.sampler().sample(16).unwrap();
        let mut ls = LatentSampler::new(3, 9).unwrap();
        let z = ls.sample(16).unwrap();

        // w = 0: M = 0 and the gradient is the embedding difference
        let zero = RkhsFunction::zeros(6);
        let (m, grad) =
            critic_objective(&map, &gen, &theta.view(), &zero, &x.view(), &z.view(), 3.0).unwrap();
        assert_eq!(m, 0.0);
        let mu_p = map.mean_embedding(&x.view()).unwrap();
        let (_, _, mu_q) =
            operators::assemble_with_pushforward(&map, &gen, &theta.view(), &z.view()).unwrap();
        let want = &mu_q.weights - &mu_p.weights;
        assert!((&grad - &want).mapv(f64::abs).sum() < 1e-14);

        // identical embeddings leave only the nonnegative penalty
        let (x2, _) = gen.forward_batch(&theta.view(), &z.view()).unwrap();
        let w = RkhsFunction::new(Array1::from_elem(6, 0.3));
        let (m, _) =
            critic_objective(&map, &gen, &theta.view(), &w, &x2.view(), &z.view(), 3.0).unwrap();
        let a = operators::assemble(&map, &gen, &theta.view(), &z.view()).unwrap();
        let lw = a.apply_l(&w).unwrap();
        assert!((m - 3.0 * lw.dot(&lw)).abs() < 1e-12);
        assert!(m >= 0.0);
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let map = build_feature_map(2, &[8], 6, 11).unwrap();
        let gen = Generator::mlp(3, &[5], 2).unwrap();
        let theta = gen.init_theta(13);
        let t = eight_gaussians(2.0, 0.04, 17).unwrap();
        let x = t.sampler().sample(12).unwrap();
        let mut ls = LatentSampler::new(3, 19).unwrap();
        let z = ls.sample(12).unwrap();
        let w0 = Array1::from_shape_fn(6, |k| 0.1 * (k as f64 - 2.5));
        let alpha = 2.0;
        let (_, grad) = critic_objective(
            &map,
            &gen,
            &theta.view(),
            &RkhsFunction::new(w0.clone()),
            &x.view(),
            &z.view(),
            alpha,
        )
        .unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut wp = w0.clone();
            let mut wm = w0.clone();
            wp[k] += h;
            wm[k] -= h;
            let (mp, _) = critic_objective(
                &map,
                &gen,
                &theta.view(),
                &RkhsFunction::new(wp),
                &x.view(),
                &z.view(),
                alpha,
            )
            .unwrap();
            let (mm, _) = critic_objective(
                &map,
                &gen,
                &theta.view(),
                &RkhsFunction::new(wm),
                &x.view(),
                &z.view(),
                alpha,
            )
            .unwrap();
            let fd = (mp - mm) / (2.0 * h);
            assert!(
                (grad[k] - fd).abs() / fd.abs().max(1e-8) < 1e-6,
                "coordinate {k}: {} vs fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn penalty_gradient_identity() {
        // the penalty part of the gradient equals 2 alpha L^T(L w) exactly
        let map = build_feature_map(2, &[8], 6, 23).unwrap();
        let gen = Generator::mlp(3, &[5], 2).unwrap();
        let theta = gen.init_theta(29);
        let t = eight_gaussians(2.0, 0.04, 31).unwrap();
        let x = t.sampler().sample(8).unwrap();
        let mut ls = LatentSampler::new(3, 37).unwrap();
        let z = ls.sample(8).unwrap();
        let w = RkhsFunction::new(Array1::from_shape_fn(6, |k| (k as f64 * 0.7).sin()));
        let alpha = 5.0;
        let (_, grad_with) =
            critic_objective(&map, &gen, &theta.view(), &w, &x.view(), &z.view(), alpha).unwrap();
        let (_, grad_without) =
            critic_objective(&map, &gen, &theta.view(), &w, &x.view(), &z.view(), 0.0).unwrap();
        let penalty_part = &grad_with - &grad_without;
        let a = operators::assemble(&map, &gen, &theta.view(), &z.view()).unwrap();
        let want = a.apply_lt(&a.apply_l(&w).unwrap().view()).unwrap().weights * (2.0 * alpha);
        assert_eq!(penalty_part, want);
    }

    #[test]
    fn generator_direction_closed_forms_and_fd() {
        // constant generator + identity map: direction is -w
        let map = crate::rkhs::FeatureMap::identity(2).unwrap();
        let gen = Generator::constant(2).unwrap();
        let theta = array![0.5, -0.5];
        let z = Array2::zeros((4, 2));
        let w = RkhsFunction::new(array![0.3, 0.7]);
        let d = generator_direction(&map, &gen, &theta.view(), &w, &z.view()).unwrap();
        assert!((&d + &w.weights).mapv(f64::abs).sum() < 1e-14);
        let zero = RkhsFunction::zeros(2);
        let d0 = generator_direction(&map, &gen, &theta.view(), &zero, &z.view()).unwrap();
        assert!(d0.iter().all(|v| *v == 0.0));

        // sign-flipped finite differences of the batch mean of f(G(z))
        let map = build_feature_map(2, &[8], 6, 41).unwrap();
        let gen = Generator::mlp(3, &[5], 2).unwrap();
        let theta = gen.init_theta(43);
        let mut ls = LatentSampler::new(3, 47).unwrap();
        let z = ls.sample(10).unwrap();
        let w = RkhsFunction::new(Array1::from_shape_fn(6, |k| 0.2 * (k as f64 + 1.0)));
        let d = generator_direction(&map, &gen, &theta.view(), &w, &z.view()).unwrap();
        let mean_f = |th: &Array1<f64>| -> f64 {
            let (x, _) = gen.forward_batch(&th.view(), &z.view()).unwrap();
            w.eval_batch(&map, &x.view()).unwrap().sum() / 10.0
        };
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        for _ in 0..20 {
            let k = rng.gen_range(0..gen.param_count());
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            let fd = (mean_f(&tp) - mean_f(&tm)) / (2.0 * h);
            assert!(
                (d[k] + fd).abs() / fd.abs().max(1e-8) < 1e-4,
                "coordinate {k}: {} vs -fd {}",
                d[k],
                -fd
            );
        }
    }

    fn small_config(alpha: f64, iters: usize) -> GanConfig {
        GanConfig {
            alpha,
            n_critic: 3,
            batch: 32,
            iterations: iters,
            lr_critic: 1e-3,
            lr_generator: 1e-3,
            seed: 7,
            target_pool: 256,
            ..GanConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let map = build_feature_map(2, &[16], 12, 3).unwrap();
        let gen = Generator::mlp(4, &[8], 2).unwrap();
        let theta0 = gen.init_theta(5);
        let target = eight_gaussians(2.0, 0.04, 11).unwrap();
        let cfg = small_config(10.0, 5);
        let log1 = train(&map, &gen, &theta0.view(), &target, &cfg).unwrap();
        let log2 = train(&map, &gen, &theta0.view(), &target, &cfg).unwrap();
        assert_eq!(log1.final_theta, log2.final_theta);
        assert_eq!(log1.final_w.weights, log2.final_w.weights);
        for (a, b) in log1.rows.iter().zip(&log2.rows) {
            assert_eq!(a.mmd, b.mmd);
            assert_eq!(a.critic_m, b.critic_m);
        }
        assert!(log1.aborted.is_none());
    }

    #[test]
    fn alpha_zero_baseline_runs() {
        let map = build_feature_map(2, &[16], 12, 3).unwrap();
        let gen = Generator::mlp(4, &[8], 2).unwrap();
        let theta0 = gen.init_theta(5);
        let target = eight_gaussians(2.0, 0.04, 11).unwrap();
        let log = train(&map, &gen, &theta0.view(), &target, &small_config(0.0, 5)).unwrap();
        assert!(log.aborted.is_none());
        assert_eq!(log.rows.len(), 5);
        for row in &log.rows {
            assert!(row.mmd.is_finite());
        }
    }

    #[test]
    fn split_batch_and_literal_resampling_run() {
        let map = build_feature_map(2, &[16], 12, 3).unwrap();
        let gen = Generator::mlp(4, &[8], 2).unwrap();
        let theta0 = gen.init_theta(5);
        let target = eight_gaussians(2.0, 0.04, 11).unwrap();
        let mut cfg = small_config(10.0, 3);
        cfg.split_batch = true;
        let log = train(&map, &gen, &theta0.view(), &target, &cfg).unwrap();
        assert!(log.aborted.is_none());
        let mut cfg = small_config(10.0, 3);
        cfg.resample_per_critic_step = true;
        cfg.target_pool = 0;
        let log = train(&map, &gen, &theta0.view(), &target, &cfg).unwrap();
        assert!(log.aborted.is_none());
    }

    #[test]
    fn critic_sgd_approaches_direct_witness_solve() {
        // with the explicit ridge, many small critic steps approach the
        // resolvent solution of the doubled-penalty system
        let map = crate::rkhs::FeatureMap::random(2, &[10], 8, 61, true).unwrap();
        let gen = Generator::mlp(3, &[6], 2).unwrap();
        let theta = gen.init_theta(67);
        let target = eight_gaussians(2.0, 0.04, 71).unwrap();
        let x = target.sampler().sample(64).unwrap();
        let mut ls = LatentSampler::new(3, 73).unwrap();
        let z = ls.sample(64).unwrap();
        let alpha = 0.5;
        let ridge = 2.0;

        let mut w = Array1::<f64>::zeros(8);
        let mut opt = RmsPropState::new(8, 1e-3, 0.9, 1e-8).unwrap();
        for _ in 0..500 {
            let (_, grad) = critic_objective_with_ridge(
                &map,
                &gen,
                &theta.view(),
                &RkhsFunction::new(w.clone()),
                &x.view(),
                &z.view(),
                alpha,
                ridge,
            )
            .unwrap();
            opt.step(&mut w, &grad.view()).unwrap();
        }
        // direct solve: minimizer satisfies (2 alpha D + ridge I) w = mu_p - mu_q
        let mu_p = map.mean_embedding(&x.view()).unwrap();
        let (a, _, mu_q) =
            operators::assemble_with_pushforward(&map, &gen, &theta.view(), &z.view()).unwrap();
        let mu = RkhsFunction::new(&mu_p.weights - &mu_q.weights);
        let params = RegularizationParams::new(2.0 * alpha, ridge).unwrap();
        let direct = witness_solve(&a, &mu, &params).unwrap();
        let rel = (&w - &direct.f_star.weights).mapv(f64::abs).sum()
            / direct.f_star.weights.mapv(f64::abs).sum();
        assert!(rel <= 0.05, "critic SGD off the direct solve by {rel}");
    }

    #[test]
    fn config_validation() {
        let mut c = GanConfig::default();
        c.n_critic = 0;
        assert!(c.validate().is_err());
        let mut c = GanConfig::default();
        c.batch = 1;
        assert!(c.validate().is_err());
        let mut c = GanConfig::default();
        c.batch = 33;
        c.split_batch = true;
        assert!(c.validate().is_err());
        let mut c = GanConfig::default();
        c.alpha = -1.0;
        assert!(c.validate().is_err());
        let mut c = GanConfig::default();
        c.target_pool = 8;
        assert!(c.validate().is_err());
        assert!(GanConfig::default().validate().is_ok());
    }

    #[test]
    fn mode_occupancy_counts_sum() {
        let gen = Generator::mlp(4, &[8], 2).unwrap();
        let theta = gen.init_theta(5);
        let target = eight_gaussians(2.0, 0.04, 11).unwrap();
        let counts = mode_occupancy(&gen, &theta.view(), &target, 256, 13).unwrap();
        assert_eq!(counts.len(), 8);
        assert_eq!(counts.iter().sum::<usize>(), 256);
    }
}
