//! The gradient-regularized discrepancy: witness solves, values, and the
//! constraint-set machinery.
//!
//! The witness of the regularized discrepancy between the target and the
//! pushforward solves `(alpha D + beta I) f* = mu` where `mu` is the mean
//! embedding difference, and the squared discrepancy is `0.5 <mu, f*>`.
//! `beta > 0` makes the system positive definite; `beta = 0` is rejected.

use crate::error::{Error, Result};
use crate::linalg;
use crate::operators::OperatorA;
use crate::rkhs::RkhsFunction;
use ndarray::{Array1, ArrayView2};
use serde::{Deserialize, Serialize};

/// Regularization weights `alpha >= 0`, `beta > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationParams {
    alpha: f64,
    beta: f64,
}

impl RegularizationParams {
    pub fn new(alpha: f64, beta: f64) -> Result<RegularizationParams> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "alpha must be finite and nonnegative, got {alpha}"
            )));
        }
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "beta must be strictly positive (the resolvent requires it), got {beta}"
            )));
        }
        Ok(RegularizationParams { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Result of a witness solve.
#[derive(Debug, Clone)]
pub struct WitnessSolution {
    pub f_star: RkhsFunction,
    /// The discrepancy value `sqrt(max(0, 0.5 <mu, f*>))`.
    pub value: f64,
    /// `|(alpha D + beta I) w - mu| / |mu|`, measured with the factored
    /// operator (not the materialized system matrix).
    pub residual: f64,
    pub params: RegularizationParams,
    /// Fingerprint of the operator's theta snapshot.
    pub operator_fingerprint: u64,
    pub batch_size: usize,
}

const RESIDUAL_TOL: f64 = 1e-8;
const MAX_REFINEMENTS: usize = 8;

/// Solve `(alpha D + beta I) u = rhs` for an explicit dense `D`, refining
/// against the factored residual `alpha A^T(A u) + beta u - rhs` until it is
/// below `1e-8` relative.
pub(crate) fn resolvent_solve_dense(
    a: &OperatorA,
    dense_d: &ArrayView2<f64>,
    rhs: &RkhsFunction,
    params: &RegularizationParams,
) -> Result<(RkhsFunction, f64)> {
    let m = a.feature_dim();
    if rhs.dim() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: rhs.dim(),
            context: "resolvent right-hand side",
        });
    }
    if rhs.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "resolvent right-hand side is not finite".into(),
        ));
    }
    let rhs_norm = rhs.norm_h();
    if rhs_norm == 0.0 {
        return Ok((RkhsFunction::zeros(m), 0.0));
    }
    let (alpha, beta) = (params.alpha(), params.beta());
    if alpha == 0.0 {
        // closed form; exact for beta = 1/2 and machine-exact in general
        let w = &rhs.weights * (1.0 / beta);
        let f = RkhsFunction::new(w);
        let res = residual_norm(a, &f, rhs, alpha, beta) / rhs_norm;
        return Ok((f, res));
    }
    let mut system = dense_d.to_owned();
    system *= alpha;
    for i in 0..m {
        system[[i, i]] += beta;
    }
    let factor = linalg::cholesky(&system.view())
        .map_err(|e| Error::Numeric(format!("resolvent factorization failed: {e}")))?;
    let mut w = RkhsFunction::new(factor.solve(&rhs.weights.view()));
    let mut res = residual_vec(a, &w, rhs, alpha, beta);
    let mut res_norm = norm(&res) / rhs_norm;
    for _ in 0..MAX_REFINEMENTS {
        if res_norm <= RESIDUAL_TOL {
            break;
        }
        let delta = factor.solve(&res.view());
        w.weights += &delta;
        res = residual_vec(a, &w, rhs, alpha, beta);
        let new_norm = norm(&res) / rhs_norm;
        if !new_norm.is_finite() || new_norm >= res_norm {
            break;
        }
        res_norm = new_norm;
    }
    if res_norm > RESIDUAL_TOL {
        return Err(Error::Numeric(format!(
            "resolvent solve stalled at relative residual {res_norm:.3e} (target {RESIDUAL_TOL:.0e})"
        )));
    }
    Ok((w, res_norm))
}

fn residual_vec(
    a: &OperatorA,
    w: &RkhsFunction,
    rhs: &RkhsFunction,
    alpha: f64,
    beta: f64,
) -> Array1<f64> {
    let dw = a.apply_d(w).expect("dimension checked");
    let mut r = rhs.weights.clone();
    r -= &(&dw.weights * alpha);
    r -= &(&w.weights * beta);
    r
}

fn residual_norm(
    a: &OperatorA,
    w: &RkhsFunction,
    rhs: &RkhsFunction,
    alpha: f64,
    beta: f64,
) -> f64 {
    norm(&residual_vec(a, w, rhs, alpha, beta))
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Solve the witness equation `(alpha D + beta I) f* = mu_diff`.
pub fn witness_solve(
    a: &OperatorA,
    mu_diff: &RkhsFunction,
    params: &RegularizationParams,
) -> Result<WitnessSolution> {
    let dense = a.dense_d();
    witness_solve_with_dense(a, &dense.view(), mu_diff, params)
}

/// As [`witness_solve`] but reusing a precomputed dense `D = A^T A`.
pub fn witness_solve_with_dense(
    a: &OperatorA,
    dense_d: &ArrayView2<f64>,
    mu_diff: &RkhsFunction,
    params: &RegularizationParams,
) -> Result<WitnessSolution> {
    let (f_star, residual) = resolvent_solve_dense(a, dense_d, mu_diff, params)?;
    let value_sq = 0.5 * mu_diff.inner(&f_star);
    let value = value_sq.max(0.0).sqrt();
    Ok(WitnessSolution {
        f_star,
        value,
        residual,
        params: *params,
        operator_fingerprint: a.theta_fingerprint(),
        batch_size: a.batch_size(),
    })
}

/// The regularized discrepancy value.
pub fn mmd_ab(a: &OperatorA, mu_diff: &RkhsFunction, params: &RegularizationParams) -> Result<f64> {
    Ok(witness_solve(a, mu_diff, params)?.value)
}

/// `Delta(f) = <f, mu_p - mu_q>`: the mean discrepancy that `f` witnesses.
pub fn delta(f: &RkhsFunction, mu_p: &RkhsFunction, mu_q: &RkhsFunction) -> Result<f64> {
    if f.dim() != mu_p.dim() || f.dim() != mu_q.dim() {
        return Err(Error::DimensionMismatch {
            expected: f.dim(),
            got: mu_p.dim().max(mu_q.dim()),
            context: "delta embeddings",
        });
    }
    Ok(f.weights.dot(&(&mu_p.weights - &mu_q.weights)))
}

/// Constraint functional `2 <f, (alpha D + beta I) f>`; membership in the
/// constraint set means the value is at most 1.
pub fn constraint_value(
    a: &OperatorA,
    f: &RkhsFunction,
    params: &RegularizationParams,
) -> Result<f64> {
    let lf = a.apply_l(f)?;
    Ok(2.0 * (params.alpha() * lf.dot(&lf) + params.beta() * f.weights.dot(&f.weights)))
}

/// Scale `f` onto the constraint boundary (constraint value exactly 1).
pub fn normalize_to_boundary(
    a: &OperatorA,
    f: &RkhsFunction,
    params: &RegularizationParams,
) -> Result<RkhsFunction> {
    let c = constraint_value(a, f, params)?;
    if c <= 0.0 {
        return Err(Error::InvalidParameter(
            "cannot normalize the zero function onto the constraint boundary".into(),
        ));
    }
    Ok(RkhsFunction::new(&f.weights / c.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{Generator, LatentSampler};
    use crate::operators::{assemble, BatchOperator};
    use crate::rkhs::{build_feature_map, FeatureMap};
    use ndarray::array;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64) -> (OperatorA, RkhsFunction) {
        let map = build_feature_map(2, &[10, 10], 6, seed).unwrap();
        let gen = Generator::mlp(3, &[7], 2).unwrap();
        let theta = gen.init_theta(seed + 1);
        let mut s = LatentSampler::new(3, seed + 2).unwrap();
        let z = s.sample(24).unwrap();
        let a = assemble(&map, &gen, &theta.view(), &z.view()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let mu = RkhsFunction::new(Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)));
        (a, mu)
    }

    #[test]
    fn params_validation() {
        assert!(RegularizationParams::new(0.0, 0.5).is_ok());
        assert!(RegularizationParams::new(-0.1, 0.5).is_err());
        assert!(RegularizationParams::new(1.0, 0.0).is_err());
        assert!(RegularizationParams::new(1.0, -1.0).is_err());
        assert!(RegularizationParams::new(f64::NAN, 0.5).is_err());
    }

    #[test]
    fn scalar_resolvent_constant_identity_case() {
        let map = FeatureMap::identity(2).unwrap();
        let gen = Generator::constant(2).unwrap();
        let theta = array![0.0, 0.0];
        let z = Array2::zeros((3, 2));
        let a = assemble(&map, &gen, &theta.view(), &z.view()).unwrap();
        let mu = RkhsFunction::new(array![3.0, 4.0]);
        let params = RegularizationParams::new(2.0, 0.5).unwrap();
        let sol = witness_solve(&a, &mu, &params).unwrap();
        // D = I: w = mu / (alpha + beta), value = |mu| / sqrt(2 (alpha+beta))
        let want_w = &mu.weights / 2.5;
        let err = (&sol.f_star.weights - &want_w).mapv(f64::abs).sum();
        assert!(err < 1e-12);
        assert!((sol.value - 5.0 / (2.0 * 2.5f64).sqrt()).abs() < 1e-12);
        assert!(sol.residual <= 1e-8);
    }

    #[test]
    fn alpha_zero_reproduces_plain_mmd() {
        let (a, mu) = random_instance(5);
        let params = RegularizationParams::new(0.0, 0.5).unwrap();
        let sol = witness_solve(&a, &mu, &params).unwrap();
        // beta = 1/2: w = 2 mu and the value equals |mu| exactly
        assert_eq!(sol.value, mu.norm_h());
        let err = (&sol.f_star.weights - &(&mu.weights * 2.0))
            .mapv(f64::abs)
            .sum();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn zero_rhs_gives_zero_witness() {
        let (a, _) = random_instance(7);
        let params = RegularizationParams::new(1.0, 0.3).unwrap();
        let sol = witness_solve(&a, &RkhsFunction::zeros(6), &params).unwrap();
        assert_eq!(sol.value, 0.0);
        assert!(sol.f_star.weights.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn witness_residual_below_tolerance() {
        for seed in [11, 13, 17, 19] {
            let (a, mu) = random_instance(seed);
            let params = RegularizationParams::new(3.0, 0.2).unwrap();
            let sol = witness_solve(&a, &mu, &params).unwrap();
            assert!(sol.residual <= 1e-8, "residual {} too large", sol.residual);
            assert!(sol.value >= 0.0);
        }
    }

    #[test]
    fn upper_bound_and_gap_identity() {
        // sqrt(2 beta) mmd_ab <= mmd, with the gap exactly alpha <mu, D f*>
        for seed in [23, 29, 31] {
            let (a, mu) = random_instance(seed);
            let params = RegularizationParams::new(1.7, 0.4).unwrap();
            let sol = witness_solve(&a, &mu, &params).unwrap();
            let mmd = mu.norm_h();
            let lhs = (2.0 * params.beta()).sqrt() * sol.value;
            assert!(
                lhs <= mmd * (1.0 + 1e-10),
                "upper bound violated: {lhs} vs {mmd}"
            );
            let gap = mmd * mmd - 2.0 * params.beta() * sol.value * sol.value;
            let want = params.alpha() * mu.inner(&a.apply_d(&sol.f_star).unwrap());
            assert!(
                (gap - want).abs() <= 1e-10 * gap.abs().max(1.0),
                "gap identity off: {gap} vs {want}"
            );
            assert!(want >= -1e-12);
        }
    }

    #[test]
    fn equality_when_mu_in_nullspace() {
        // p = 2 < m = 6, so D has a null space; build mu inside it
        let map = build_feature_map(2, &[8], 6, 5).unwrap();
        let gen = Generator::constant(2).unwrap();
        let theta = array![0.3, -0.1];
        let z = Array2::zeros((4, 2));
        let a = assemble(&map, &gen, &theta.view(), &z.view()).unwrap();
        let spec = a.spectrum().unwrap();
        let cutoff = spec.zero_cutoff();
        let null_idx = (0..6).find(|&k| spec.eigenvalues[k] <= cutoff).unwrap();
        let mu = RkhsFunction::new(spec.eigenvectors.column(null_idx).to_owned());
        let params = RegularizationParams::new(2.0, 0.4).unwrap();
        let sol = witness_solve(&a, &mu, &params).unwrap();
        let lhs = (2.0 * params.beta()).sqrt() * sol.value;
        let mmd = mu.norm_h();
        assert!(
            (lhs - mmd).abs() <= 1e-6 * mmd,
            "equality in the bound should hold: {lhs} vs {mmd}"
        );
    }

    #[test]
    fn delta_and_constraint_basics() {
        let (a, mu) = random_instance(37);
        let params = RegularizationParams::new(1.0, 0.5).unwrap();
        let zero = RkhsFunction::zeros(6);
        assert_eq!(delta(&zero, &mu, &RkhsFunction::zeros(6)).unwrap(), 0.0);
        assert_eq!(constraint_value(&a, &zero, &params).unwrap(), 0.0);
        // f = mu_p - mu_q gives |mu_p - mu_q|^2
        let mu_q = RkhsFunction::zeros(6);
        let d = delta(&mu, &mu, &mu_q).unwrap();
        assert!((d - mu.norm_h().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn normalized_witness_sits_on_boundary_and_attains_value() {
        for seed in [41, 43] {
            let (a, mu) = random_instance(seed);
            let params = RegularizationParams::new(2.5, 0.3).unwrap();
            let sol = witness_solve(&a, &mu, &params).unwrap();
            let f_hat = normalize_to_boundary(&a, &sol.f_star, &params).unwrap();
            let c = constraint_value(&a, &f_hat, &params).unwrap();
            assert!((c - 1.0).abs() < 1e-10, "boundary constraint {c}");
            // Delta at the normalized witness equals the discrepancy value
            let d = delta(&f_hat, &mu, &RkhsFunction::zeros(6)).unwrap();
            assert!(
                (d - sol.value).abs() <= 1e-10 * sol.value.max(1e-300),
                "delta {d} vs value {}",
                sol.value
            );
        }
    }

    #[test]
    fn feasible_functions_never_beat_the_witness() {
        let (a, mu) = random_instance(47);
        let params = RegularizationParams::new(1.3, 0.6).unwrap();
        let sol = witness_solve(&a, &mu, &params).unwrap();
        let mu_q = RkhsFunction::zeros(6);
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        for _ in 0..1000 {
            let f_raw = RkhsFunction::new(Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)));
            let c = constraint_value(&a, &f_raw, &params).unwrap();
            // scale into the feasible set with a random slack
            let scale = rng.gen_range(0.0..1.0) / c.sqrt().max(1e-300);
            let f = RkhsFunction::new(&f_raw.weights * scale);
            let d = delta(&f, &mu, &mu_q).unwrap();
            assert!(
                d <= sol.value + 1e-10 * sol.value.max(1.0),
                "feasible f with Delta {d} beats witness value {}",
                sol.value
            );
        }
    }

    #[test]
    fn duality_sandwich_and_monotonicity_in_beta() {
        let (a, mu) = random_instance(53);
        let params = RegularizationParams::new(2.0, 0.5).unwrap();
        let sol = witness_solve(&a, &mu, &params).unwrap();
        let mu_q = RkhsFunction::zeros(6);
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let objective = |f: &RkhsFunction| -> f64 {
            let lf = a.apply_l(f).unwrap();
            delta(f, &mu, &mu_q).unwrap()
                - 0.5 * params.alpha() * lf.dot(&lf)
                - 0.5 * params.beta() * f.weights.dot(&f.weights)
        };
        let at_witness = objective(&sol.f_star);
        let val_sq = sol.value * sol.value;
        assert!(
            (at_witness - val_sq).abs() <= 1e-10 * val_sq.max(1.0),
            "unconstrained objective at witness {at_witness} vs value^2 {val_sq}"
        );
        for _ in 0..200 {
            let f = RkhsFunction::new(Array1::from_shape_fn(6, |_| rng.gen_range(-2.0..2.0)));
            assert!(objective(&f) <= val_sq + 1e-10 * val_sq.max(1.0));
        }
        // monotone decrease in beta
        let mut last = f64::INFINITY;
        for beta in [0.1, 0.3, 0.9, 2.7] {
            let p = RegularizationParams::new(2.0, beta).unwrap();
            let v = mmd_ab(&a, &mu, &p).unwrap();
            assert!(v < last, "mmd_ab must strictly decrease in beta");
            last = v;
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn constraint_value_scales_quadratically(
                w in prop::collection::vec(-2.0..2.0f64, 6),
                c in 0.01..10.0f64,
            ) {
                let (a, _) = random_instance(7);
                let params = RegularizationParams::new(1.3, 0.4).unwrap();
                let f = RkhsFunction::new(Array1::from_vec(w));
                let base = constraint_value(&a, &f, &params).unwrap();
                let scaled = constraint_value(
                    &a,
                    &RkhsFunction::new(&f.weights * c),
                    &params,
                )
                .unwrap();
                prop_assert!((scaled - c * c * base).abs() <= 1e-9 * (c * c * base).max(1e-12));
            }

            #[test]
            fn witness_value_is_positively_homogeneous(
                w in prop::collection::vec(-2.0..2.0f64, 6),
                c in 0.01..10.0f64,
            ) {
                // the resolvent is linear, so the value scales linearly in mu
                let (a, _) = random_instance(7);
                let params = RegularizationParams::new(1.3, 0.4).unwrap();
                let mu = RkhsFunction::new(Array1::from_vec(w));
                let v1 = witness_solve(&a, &mu, &params).unwrap().value;
                let v2 = witness_solve(&a, &RkhsFunction::new(&mu.weights * c), &params)
                    .unwrap()
                    .value;
                prop_assert!((v2 - c * v1).abs() <= 1e-8 * (c * v1).max(1e-12));
            }
        }
    }

    #[test]
    fn batch_and_dense_witness_agree() {
        // same solve driven through BatchOperator-provided mu_q
        let map = build_feature_map(2, &[10, 10], 6, 61).unwrap();
        let gen = Generator::mlp(3, &[7], 2).unwrap();
        let theta = gen.init_theta(62);
        let mut s = LatentSampler::new(3, 63).unwrap();
        let z = s.sample(16).unwrap();
        let a = assemble(&map, &gen, &theta.view(), &z.view()).unwrap();
        let fac = BatchOperator::new(&map, &gen, &theta.view(), &z.view(), true).unwrap();
        let mu_q_dense = {
            let (_, _, mu) =
                crate::operators::assemble_with_pushforward(&map, &gen, &theta.view(), &z.view())
                    .unwrap();
            mu
        };
        let diff = (&fac.mu_q().weights - &mu_q_dense.weights)
            .mapv(f64::abs)
            .sum();
        assert!(diff < 1e-12);
        let params = RegularizationParams::new(1.0, 0.5).unwrap();
        let sol = witness_solve(&a, &mu_q_dense, &params).unwrap();
        assert!(sol.residual <= 1e-8);
    }
}
