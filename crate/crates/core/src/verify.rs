//! Runtime verification suites: seeded property checks for every module,
//! runnable from the command line as a self-test. Output is deterministic.

use crate::discrepancy::{self, RegularizationParams};
use crate::error::{Error, Result};
use crate::flow::{self, FlowConfig, ProbeConfig, StepSchedule};
use crate::generator::{Generator, LatentSampler};
use crate::operators::{self, BatchOperator, Spectrum};
use crate::rkhs::{build_feature_map, FeatureMap, RkhsFunction};
use crate::targets::eight_gaussians;
use crate::trainer::{self, GanConfig, RmsPropState};
use ndarray::{array, Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// All checks of one module suite.
#[derive(Debug, Clone)]
pub struct Suite {
    pub name: &'static str,
    pub checks: Vec<Check>,
}

impl Suite {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub const SUITE_NAMES: [&str; 7] = [
    "rkhs",
    "generator",
    "operators",
    "discrepancy",
    "flow",
    "trainer",
    "targets",
];

/// Run one suite by name.
pub fn run_suite(name: &str) -> Result<Suite> {
    match name {
        "rkhs" => Ok(rkhs_suite()),
        "generator" => Ok(generator_suite()),
        "operators" => Ok(operators_suite()),
        "discrepancy" => Ok(discrepancy_suite()),
        "flow" => Ok(flow_suite()),
        "trainer" => Ok(trainer_suite()),
        "targets" => Ok(targets_suite()),
        other => Err(Error::InvalidConfig(format!(
            "unknown suite '{other}'; valid names: {}",
            SUITE_NAMES.join(", ")
        ))),
    }
}

/// Run every suite.
pub fn run_all() -> Vec<Suite> {
    SUITE_NAMES
        .iter()
        .map(|n| run_suite(n).expect("known suite"))
        .collect()
}

/// Render suites as a fixed-width pass/fail table.
pub fn render_table(suites: &[Suite]) -> String {
    let mut out = String::new();
    for suite in suites {
        out.push_str(&format!("[{}]\n", suite.name));
        for c in &suite.checks {
            let status = if c.pass { "PASS" } else { "FAIL" };
            out.push_str(&format!("  {status}  {:<44} {}\n", c.name, c.detail));
        }
    }
    let total: usize = suites.iter().map(|s| s.checks.len()).sum();
    let passed: usize = suites
        .iter()
        .map(|s| s.checks.iter().filter(|c| c.pass).count())
        .sum();
    out.push_str(&format!("{passed}/{total} checks passed\n"));
    out
}

fn check<F>(name: &'static str, f: F) -> Check
where
    F: FnOnce() -> std::result::Result<String, String>,
{
    match f() {
        Ok(detail) => Check {
            name,
            pass: true,
            detail,
        },
        Err(detail) => Check {
            name,
            pass: false,
            detail,
        },
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

fn small_instance(seed: u64) -> (FeatureMap, Generator, Array1<f64>, Array2<f64>) {
    let map = build_feature_map(2, &[10, 10], 6, seed).unwrap();
    let gen = Generator::mlp(3, &[7], 2).unwrap();
    let theta = gen.init_theta(seed + 1);
    let mut s = LatentSampler::new(3, seed + 2).unwrap();
    let z = s.sample(24).unwrap();
    (map, gen, theta, z)
}

fn rkhs_suite() -> Suite {
    let mut checks = Vec::new();
    checks.push(check("deterministic construction", || {
        let a = build_feature_map(2, &[32, 32], 16, 7).map_err(|e| e.to_string())?;
        let b = build_feature_map(2, &[32, 32], 16, 7).map_err(|e| e.to_string())?;
        let x = array![0.3, -0.8];
        let fa = a.phi(&x.view()).map_err(|e| e.to_string())?;
        let fb = b.phi(&x.view()).map_err(|e| e.to_string())?;
        if fa == fb {
            Ok("identical rebuilds".into())
        } else {
            Err("rebuild differs".into())
        }
    }));
    checks.push(check("identity mode passthrough", || {
        let map = FeatureMap::identity(2).map_err(|e| e.to_string())?;
        let x = array![3.0, -1.0];
        if map.phi(&x.view()).map_err(|e| e.to_string())? == x {
            Ok("phi(x) = x".into())
        } else {
            Err("identity map transformed its input".into())
        }
    }));
    checks.push(check("jacobian vs finite differences", || {
        let map = build_feature_map(3, &[8, 8], 5, 9).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst = 0.0_f64;
        let mut tested = 0;
        while tested < 6 {
            let x = Array1::from_shape_fn(3, |_| rng.gen_range(-2.0..2.0));
            if map
                .min_abs_hidden_preactivation(&x.view())
                .map_err(|e| e.to_string())?
                < 1e-3
            {
                continue;
            }
            tested += 1;
            let jac = map.phi_jacobian(&x.view()).map_err(|e| e.to_string())?;
            let h = 1e-5;
            for i in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (&map.phi(&xp.view()).map_err(|e| e.to_string())?
                    - &map.phi(&xm.view()).map_err(|e| e.to_string())?)
                    / (2.0 * h);
                let num = (&fd - &jac.row(i)).mapv(|v| v * v).sum().sqrt();
                let den = fd.mapv(|v| v * v).sum().sqrt().max(1e-12);
                worst = worst.max(num / den);
            }
        }
        if worst < 1e-4 {
            Ok(format!("max rel err {worst:.2e}"))
        } else {
            Err(format!("finite differences disagree: {worst:.2e}"))
        }
    }));
    checks.push(check("gram matrix PSD", || {
        let map = build_feature_map(2, &[12, 12], 8, 17).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pts = Array2::from_shape_fn((20, 2), |_| rng.gen_range(-2.0..2.0));
        let feats = map.phi_batch(&pts.view()).map_err(|e| e.to_string())?;
        let gram = feats.dot(&feats.t());
        let eig = crate::linalg::symmetric_eigen(&gram.view()).map_err(|e| e.to_string())?;
        let min = eig.values[0];
        let max = eig.values[eig.values.len() - 1];
        if min >= -1e-8 * max.max(1.0) {
            Ok(format!("min eigenvalue {min:.2e}"))
        } else {
            Err(format!("negative eigenvalue {min:.2e}"))
        }
    }));
    checks.push(check("mean embedding linearity", || {
        let map = build_feature_map(2, &[8], 4, 21).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let b1 = Array2::from_shape_fn((16, 2), |_| rng.gen_range(-2.0..2.0));
        let b2 = Array2::from_shape_fn((16, 2), |_| rng.gen_range(-2.0..2.0));
        let mut union = Array2::zeros((32, 2));
        union.slice_mut(ndarray::s![..16, ..]).assign(&b1);
        union.slice_mut(ndarray::s![16.., ..]).assign(&b2);
        let mu_union = map
            .mean_embedding(&union.view())
            .map_err(|e| e.to_string())?;
        let avg = (&map
            .mean_embedding(&b1.view())
            .map_err(|e| e.to_string())?
            .weights
            + &map
                .mean_embedding(&b2.view())
                .map_err(|e| e.to_string())?
                .weights)
            / 2.0;
        let err = (&mu_union.weights - &avg).mapv(f64::abs).sum();
        if err < 1e-10 {
            Ok(format!("abs err {err:.2e}"))
        } else {
            Err(format!("linearity off by {err:.2e}"))
        }
    }));
    Suite {
        name: "rkhs",
        checks,
    }
}

fn generator_suite() -> Suite {
    let mut checks = Vec::new();
    checks.push(check("constant mode identities", || {
        let g = Generator::constant(2).map_err(|e| e.to_string())?;
        let theta = array![2.0, 5.0];
        let z = array![0.1, 0.2];
        let fwd = g
            .forward(&theta.view(), &z.view())
            .map_err(|e| e.to_string())?;
        let jac = g
            .jacobian_theta(&theta.view(), &z.view())
            .map_err(|e| e.to_string())?;
        if fwd == theta && jac == Array2::<f64>::eye(2) {
            Ok("forward = theta, J = I".into())
        } else {
            Err("constant mode identities broken".into())
        }
    }));
    checks.push(check("parameter jacobian vs finite differences", || {
        let g = Generator::mlp(3, &[6, 6], 2).map_err(|e| e.to_string())?;
        let theta = g.init_theta(7);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0_f64;
        let mut tested = 0;
        while tested < 3 {
            let z = Array1::from_shape_fn(3, |_| rng.gen_range(-1.5..1.5));
            if g.min_abs_hidden_preactivation(&theta.view(), &z.view())
                .map_err(|e| e.to_string())?
                < 1e-3
            {
                continue;
            }
            tested += 1;
            let jac = g
                .jacobian_theta(&theta.view(), &z.view())
                .map_err(|e| e.to_string())?;
            let h = 1e-5;
            let mut idx = ChaCha8Rng::seed_from_u64(tested);
            for _ in 0..15 {
                let k = idx.gen_range(0..g.param_count());
                let mut tp = theta.clone();
                let mut tm = theta.clone();
                tp[k] += h;
                tm[k] -= h;
                let fp = g
                    .forward(&tp.view(), &z.view())
                    .map_err(|e| e.to_string())?;
                let fm = g
                    .forward(&tm.view(), &z.view())
                    .map_err(|e| e.to_string())?;
                for j in 0..2 {
                    let fd = (fp[j] - fm[j]) / (2.0 * h);
                    worst = worst.max((jac[[k, j]] - fd).abs() / fd.abs().max(1e-6));
                }
            }
        }
        if worst < 1e-4 {
            Ok(format!("max rel err {worst:.2e}"))
        } else {
            Err(format!("finite differences disagree: {worst:.2e}"))
        }
    }));
    checks.push(check("matrix mass symmetry and PSD", || {
        let g = Generator::mlp(3, &[6], 2).map_err(|e| e.to_string())?;
        let theta = g.init_theta(21);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..4 {
            let z1 = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
            let z2 = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
            let g12 = g
                .gamma_kernel(&theta.view(), &z1.view(), &z2.view())
                .map_err(|e| e.to_string())?;
            let g21 = g
                .gamma_kernel(&theta.view(), &z2.view(), &z1.view())
                .map_err(|e| e.to_string())?;
            if (&g12.t() - &g21).mapv(f64::abs).sum() > 1e-12 {
                return Err("transpose symmetry broken".into());
            }
            let gz = g
                .gamma_kernel(&theta.view(), &z1.view(), &z1.view())
                .map_err(|e| e.to_string())?;
            let eig = crate::linalg::symmetric_eigen(&gz.view()).map_err(|e| e.to_string())?;
            if eig.values[0] < -1e-10 * eig.values[eig.values.len() - 1].max(1e-12) {
                return Err("Gamma(z,z) not PSD".into());
            }
        }
        Ok("symmetry and PSD hold".into())
    }));
    checks.push(check("latent stream reproducible", || {
        let mut s1 = LatentSampler::new(8, 9).map_err(|e| e.to_string())?;
        let mut s2 = LatentSampler::new(8, 9).map_err(|e| e.to_string())?;
        let a = s1.sample(16).map_err(|e| e.to_string())?;
        let b = s2.sample(16).map_err(|e| e.to_string())?;
        let c = s1.sample(16).map_err(|e| e.to_string())?;
        if a == b && a != c {
            Ok("seeded and advancing".into())
        } else {
            Err("stream misbehaved".into())
        }
    }));
    Suite {
        name: "generator",
        checks,
    }
}

fn operators_suite() -> Suite {
    let mut checks = Vec::new();
    checks.push(check("adjointness", || {
        let (map, gen, theta, z) = small_instance(5);
        let a =
            operators::assemble(&map, &gen, &theta.view(), &z.view()).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut worst = 0.0_f64;
        for _ in 0..100 {
            let f = RkhsFunction::new(Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)));
            let v = Array1::from_shape_fn(gen.param_count(), |_| rng.gen_range(-1.0..1.0));
            let lhs = a.apply_l(&f).map_err(|e| e.to_string())?.dot(&v);
            let rhs = f.inner(&a.apply_lt(&v.view()).map_err(|e| e.to_string())?);
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
        }
        if worst < 1e-12 {
            Ok(format!("max rel err {worst:.2e}"))
        } else {
            Err(format!("adjointness off by {worst:.2e}"))
        }
    }));
    checks.push(check("grammian symmetric PSD", || {
        let (map, gen, theta, z) = small_instance(7);
        let a =
            operators::assemble(&map, &gen, &theta.view(), &z.view()).map_err(|e| e.to_string())?;
        let spec = a.spectrum().map_err(|e| e.to_string())?;
        let min = spec.eigenvalues[spec.eigenvalues.len() - 1];
        if min >= 0.0 {
            Ok(format!(
                "eigenvalues in [{min:.2e}, {:.2e}]",
                spec.eigenvalues[0]
            ))
        } else {
            Err("negative eigenvalue survived clipping".into())
        }
    }));
    checks.push(check("energy identity vs finite differences", || {
        let (map, gen, theta, z) = small_instance(9);
        let a =
            operators::assemble(&map, &gen, &theta.view(), &z.view()).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let f = RkhsFunction::new(Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)));
        let quad = f.inner(&a.apply_d(&f).map_err(|e| e.to_string())?);
        let h = 1e-5;
        let mean_f = |th: &Array1<f64>| -> f64 {
            let (x, _) = gen.forward_batch(&th.view(), &z.view()).unwrap();
            f.eval_batch(&map, &x.view()).unwrap().sum() / z.nrows() as f64
        };
        let p = gen.param_count();
        let mut grad = Array1::<f64>::zeros(p);
        for k in 0..p {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            grad[k] = (mean_f(&tp) - mean_f(&tm)) / (2.0 * h);
        }
        let err = rel_err(quad, grad.dot(&grad));
        if err < 1e-3 {
            Ok(format!("rel err {err:.2e}"))
        } else {
            Err(format!("energy identity off by {err:.2e}"))
        }
    }));
    checks.push(check("spectrum reconstruction", || {
        let (map, gen, theta, z) = small_instance(11);
        let a =
            operators::assemble(&map, &gen, &theta.view(), &z.view()).map_err(|e| e.to_string())?;
        let d = a.dense_d();
        let spec = Spectrum::from_dense_d(&d.view(), 1e-8).map_err(|e| e.to_string())?;
        let lam = Array2::from_diag(&spec.eigenvalues);
        let rec = spec.eigenvectors.dot(&lam).dot(&spec.eigenvectors.t());
        let rel = crate::linalg::fro_norm(&(&rec - &d).view()) / crate::linalg::fro_norm(&d.view());
        let vtv = spec.eigenvectors.t().dot(&spec.eigenvectors);
        let ortho = crate::linalg::fro_norm(&(&vtv - &Array2::<f64>::eye(6)).view());
        if rel < 1e-8 && ortho < 1e-8 {
            Ok(format!(
                "reconstruction {rel:.2e}, orthonormality {ortho:.2e}"
            ))
        } else {
            Err(format!(
                "reconstruction {rel:.2e}, orthonormality {ortho:.2e}"
            ))
        }
    }));
    checks.push(check("factored operator matches dense", || {
        let (map, gen, theta, z) = small_instance(13);
        let dense =
            operators::assemble(&map, &gen, &theta.view(), &z.view()).map_err(|e| e.to_string())?;
        let fac = BatchOperator::new(&map, &gen, &theta.view(), &z.view(), true)
            .map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let f = RkhsFunction::new(Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)));
        let a = dense.apply_l(&f).map_err(|e| e.to_string())?;
        let b = fac.apply_l(&f);
        let rel = (&a - &b).mapv(f64::abs).sum() / a.mapv(f64::abs).sum().max(1e-300);
        if rel < 1e-10 {
            Ok(format!("rel err {rel:.2e}"))
        } else {
            Err(format!("paths disagree by {rel:.2e}"))
        }
    }));
    Suite {
        name: "operators",
        checks,
    }
}

fn discrepancy_suite() -> Suite {
    let mut checks = Vec::new();
    checks.push(check("witness residual", || {
        let (map, gen, theta, z) = small_instance(17);
        let a =
            operators::assemble(&map, &gen, &theta.view(), &z.view()).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = RkhsFunction::new(Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)));
        let params = RegularizationParams::new(3.0, 0.2).map_err(|e| e.to_string())?;
        let sol = discrepancy::witness_solve(&a, &mu, &params).map_err(|e| e.to_string())?;
        if sol.residual <= 1e-8 {
            Ok(format!("residual {:.2e}", sol.residual))
        } else {
            Err(format!("residual {:.2e} above 1e-8", sol.residual))
        }
    }));
    checks.push(check("plain MMD recovered at alpha = 0", || {
        let (map, gen, theta, z) = small_instance(19);
        let a =
            operators::assemble(&map, &gen, &theta.view(), &z.view()).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mu = RkhsFunction::new(Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)));
        let params = RegularizationParams::new(0.0, 0.5).map_err(|e| e.to_string())?;
        let v = discrepancy::mmd_ab(&a, &mu, &params).map_err(|e| e.to_string())?;
        if v == mu.norm_h() {
            Ok("exact".into())
        } else {
            Err(format!("got {v}, want {}", mu.norm_h()))
        }
    }));
    checks.push(check("upper bound and gap identity", || {
        let (map, gen, theta, z) = small_instance(23);
        let a =
            operators::assemble(&map, &gen, &theta.view(), &z.view()).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = RegularizationParams::new(1.7, 0.4).map_err(|e| e.to_string())?;
        let mut worst = 0.0_f64;
        for _ in 0..50 {
            let mu = RkhsFunction::new(Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)));
            let sol = discrepancy::witness_solve(&a, &mu, &params).map_err(|e| e.to_string())?;
            let mmd = mu.norm_h();
            if (2.0 * params.beta()).sqrt() * sol.value > mmd * (1.0 + 1e-10) {
                return Err("upper bound violated".into());
            }
            let gap = mmd * mmd - 2.0 * params.beta() * sol.value * sol.value;
            let want =
                params.alpha() * mu.inner(&a.apply_d(&sol.f_star).map_err(|e| e.to_string())?);
            worst = worst.max((gap - want).abs() / gap.abs().max(1.0));
        }
        if worst < 1e-10 {
            Ok(format!("max rel err {worst:.2e}"))
        } else {
            Err(format!("gap identity off by {worst:.2e}"))
        }
    }));
    checks.push(check("supremum attained at the witness", || {
        let (map, gen, theta, z) = small_instance(29);
        let a =
            operators::assemble(&map, &gen, &theta.view(), &z.view()).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mu = RkhsFunction::new(Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)));
        let params = RegularizationParams::new(2.5, 0.3).map_err(|e| e.to_string())?;
        let sol = discrepancy::witness_solve(&a, &mu, &params).map_err(|e| e.to_string())?;
        let f_hat = discrepancy::normalize_to_boundary(&a, &sol.f_star, &params)
            .map_err(|e| e.to_string())?;
        let d =
            discrepancy::delta(&f_hat, &mu, &RkhsFunction::zeros(6)).map_err(|e| e.to_string())?;
        let zero = RkhsFunction::zeros(6);
        let mut beaten = false;
        for _ in 0..200 {
            let f_raw = RkhsFunction::new(Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0)));
            let c =
                discrepancy::constraint_value(&a, &f_raw, &params).map_err(|e| e.to_string())?;
            let f = RkhsFunction::new(&f_raw.weights * (rng.gen_range(0.0..1.0) / c.sqrt()));
            if discrepancy::delta(&f, &mu, &zero).map_err(|e| e.to_string())?
                > sol.value + 1e-10 * sol.value.max(1.0)
            {
                beaten = true;
            }
        }
        let err = rel_err(d, sol.value);
        if !beaten && err < 1e-10 {
            Ok(format!("witness attains the value (rel err {err:.2e})"))
        } else {
            Err(format!(
                "supremum property broken (err {err:.2e}, beaten {beaten})"
            ))
        }
    }));
    Suite {
        name: "discrepancy",
        checks,
    }
}

fn flow_suite() -> Suite {
    let mut checks = Vec::new();
    checks.push(check("closed-form contraction", || {
        let map = FeatureMap::identity(2).map_err(|e| e.to_string())?;
        let gen = Generator::constant(2).map_err(|e| e.to_string())?;
        let theta = array![0.0, 0.0];
        let mut target = Array2::<f64>::zeros((4, 2));
        for mut row in target.outer_iter_mut() {
            row.assign(&array![1.0, 2.0]);
        }
        let config = FlowConfig {
            alpha: 2.0,
            beta: 0.5,
            step: StepSchedule::Constant { c: 0.05 },
            iterations: 50,
            latent_batch: 4,
            ..FlowConfig::default()
        };
        let traj = flow::run_flow(&map, &gen, &theta.view(), &target.view(), &config)
            .map_err(|e| e.to_string())?;
        let kappa: f64 = 1.0 - 0.05 / 2.5;
        let f0 = traj.rows[0].f_value;
        let mut worst = 0.0_f64;
        for (l, row) in traj.rows.iter().enumerate() {
            worst = worst.max(rel_err(row.f_value, f0 * kappa.powi(2 * l as i32)));
        }
        if worst < 1e-10 {
            Ok(format!("max rel err {worst:.2e}"))
        } else {
            Err(format!("contraction off by {worst:.2e}"))
        }
    }));
    checks.push(check("descent rate vs finite differences", || {
        let map = build_feature_map(2, &[16, 16], 12, 3).map_err(|e| e.to_string())?;
        let gen = Generator::mlp(4, &[8], 2).map_err(|e| e.to_string())?;
        let theta0 = gen.init_theta(5);
        let target = eight_gaussians(2.0, 0.04, 7)
            .map_err(|e| e.to_string())?
            .sampler()
            .sample(64)
            .map_err(|e| e.to_string())?;
        let config = FlowConfig {
            alpha: 1.0,
            beta: 0.5,
            step: StepSchedule::Constant { c: 1e-3 },
            iterations: 20,
            latent_batch: 32,
            spectral_diagnostics: false,
            seed: 11,
            ..FlowConfig::default()
        };
        let traj = flow::run_flow(&map, &gen, &theta0.view(), &target.view(), &config)
            .map_err(|e| e.to_string())?;
        let checked: Vec<f64> = traj.rows[..traj.rows.len() - 1]
            .iter()
            .map(|r| r.rate_residual)
            .collect();
        let good = checked.iter().filter(|r| **r < 0.05).count();
        if good * 100 >= checked.len() * 95 {
            Ok(format!("{good}/{} steps within 5%", checked.len()))
        } else {
            Err(format!("only {good}/{} steps within 5%", checked.len()))
        }
    }));
    checks.push(check("theorem bound and monotone descent", || {
        let map = build_feature_map(2, &[16], 8, 13).map_err(|e| e.to_string())?;
        let gen = Generator::mlp(4, &[8], 2).map_err(|e| e.to_string())?;
        let theta0 = gen.init_theta(17);
        let target = eight_gaussians(2.0, 0.04, 19)
            .map_err(|e| e.to_string())?
            .sampler()
            .sample(64)
            .map_err(|e| e.to_string())?;
        let config = FlowConfig {
            alpha: 0.5,
            beta: 0.1,
            step: StepSchedule::Constant { c: 5e-3 },
            iterations: 40,
            latent_batch: 32,
            seed: 23,
            ..FlowConfig::default()
        };
        let traj = flow::run_flow(&map, &gen, &theta0.view(), &target.view(), &config)
            .map_err(|e| e.to_string())?;
        for l in 0..traj.rows.len() - 1 {
            if traj.rows[l + 1].f_value > traj.rows[l].f_value + 1e-10 {
                return Err(format!("descent broken at step {l}"));
            }
            if traj.rows[l + 1].f_value > traj.rows[l].bound * (1.0 + 1e-10) {
                return Err(format!("bound broken at step {l}"));
            }
        }
        Ok(format!("{} steps verified", traj.rows.len()))
    }));
    checks.push(check("gradient flow equivalence", || {
        let map = build_feature_map(2, &[10], 8, 29).map_err(|e| e.to_string())?;
        let gen = Generator::mlp(3, &[6], 2).map_err(|e| e.to_string())?;
        let theta = gen.init_theta(31);
        let mut sampler = LatentSampler::new(3, 37).map_err(|e| e.to_string())?;
        let latents = sampler.sample(16).map_err(|e| e.to_string())?;
        let target = eight_gaussians(2.0, 0.04, 41)
            .map_err(|e| e.to_string())?
            .sampler()
            .sample(32)
            .map_err(|e| e.to_string())?;
        let target_mu = map
            .mean_embedding(&target.view())
            .map_err(|e| e.to_string())?;
        let params = RegularizationParams::new(1.5, 0.4).map_err(|e| e.to_string())?;
        let step = flow::flow_step(
            &map,
            &gen,
            &theta.view(),
            &target_mu,
            &latents.view(),
            &params,
            1e-3,
        )
        .map_err(|e| e.to_string())?;
        let (a, _, mu_q) =
            operators::assemble_with_pushforward(&map, &gen, &theta.view(), &latents.view())
                .map_err(|e| e.to_string())?;
        let dense = a.dense_d();
        let fg = flow::functional_gradient(
            &flow::FunctionalSpec::MmdToTarget {
                target_mu: target_mu.clone(),
            },
            &map,
            &a,
            &dense.view(),
            &mu_q,
            &params,
        )
        .map_err(|e| e.to_string())?;
        let rel = (&fg.grad + &step.direction).mapv(f64::abs).sum()
            / step.direction.mapv(f64::abs).sum().max(1e-300);
        if rel < 1e-12 {
            Ok(format!("rel err {rel:.2e}"))
        } else {
            Err(format!("directions differ by {rel:.2e}"))
        }
    }));
    checks.push(check("lipschitz closed forms", || {
        let map = FeatureMap::identity(2).map_err(|e| e.to_string())?;
        let gen = Generator::constant(2).map_err(|e| e.to_string())?;
        let theta = array![0.1, 0.2];
        let est = flow::estimate_lipschitz(
            &map,
            &gen,
            &theta.view(),
            &ProbeConfig {
                pairs: 8,
                z_probes: 4,
                ..ProbeConfig::default()
            },
        )
        .map_err(|e| e.to_string())?;
        if est.l == 1.0 && est.e_d == 1.0 {
            Ok("identity and constant quotients are exactly 1".into())
        } else {
            Err(format!("L = {}, E[D] = {}", est.l, est.e_d))
        }
    }));
    Suite {
        name: "flow",
        checks,
    }
}

fn trainer_suite() -> Suite {
    let mut checks = Vec::new();
    checks.push(check("rmsprop first-step arithmetic", || {
        let mut opt = RmsPropState::new(1, 0.01, 0.9, 1e-8).map_err(|e| e.to_string())?;
        let mut p = array![2.0];
        opt.step(&mut p, &array![4.0].view())
            .map_err(|e| e.to_string())?;
        let want = 2.0 - 0.01 * 4.0 / (1.6_f64.sqrt() + 1e-8);
        if p[0] == want {
            Ok("matches the update formula".into())
        } else {
            Err(format!("got {}, want {want}", p[0]))
        }
    }));
    checks.push(check("critic gradient vs finite differences", || {
        let map = build_feature_map(2, &[8], 6, 11).map_err(|e| e.to_string())?;
        let gen = Generator::mlp(3, &[5], 2).map_err(|e| e.to_string())?;
        let theta = gen.init_theta(13);
        let t = eight_gaussians(2.0, 0.04, 17).map_err(|e| e.to_string())?;
        let x = t.sampler().sample(12).map_err(|e| e.to_string())?;
        let mut ls = LatentSampler::new(3, 19).map_err(|e| e.to_string())?;
        let z = ls.sample(12).map_err(|e| e.to_string())?;
        let w0 = Array1::from_shape_fn(6, |k| 0.1 * (k as f64 - 2.5));
        let (_, grad) = trainer::critic_objective(
            &map,
            &gen,
            &theta.view(),
            &RkhsFunction::new(w0.clone()),
            &x.view(),
            &z.view(),
            2.0,
        )
        .map_err(|e| e.to_string())?;
        let h = 1e-6;
        let mut worst = 0.0_f64;
        for k in 0..6 {
            let mut wp = w0.clone();
            let mut wm = w0.clone();
            wp[k] += h;
            wm[k] -= h;
            let (mp, _) = trainer::critic_objective(
                &map,
                &gen,
                &theta.view(),
                &RkhsFunction::new(wp),
                &x.view(),
                &z.view(),
                2.0,
            )
            .map_err(|e| e.to_string())?;
            let (mm, _) = trainer::critic_objective(
                &map,
                &gen,
                &theta.view(),
                &RkhsFunction::new(wm),
                &x.view(),
                &z.view(),
                2.0,
            )
            .map_err(|e| e.to_string())?;
            let fd = (mp - mm) / (2.0 * h);
            worst = worst.max((grad[k] - fd).abs() / fd.abs().max(1e-8));
        }
        if worst < 1e-6 {
            Ok(format!("max rel err {worst:.2e}"))
        } else {
            Err(format!("critic gradient off by {worst:.2e}"))
        }
    }));
    checks.push(check("training determinism", || {
        let map = build_feature_map(2, &[16], 12, 3).map_err(|e| e.to_string())?;
        let gen = Generator::mlp(4, &[8], 2).map_err(|e| e.to_string())?;
        let theta0 = gen.init_theta(5);
        let target = eight_gaussians(2.0, 0.04, 11).map_err(|e| e.to_string())?;
        let cfg = GanConfig {
            alpha: 10.0,
            n_critic: 2,
            batch: 16,
            iterations: 3,
            lr_critic: 1e-3,
            lr_generator: 1e-3,
            seed: 7,
            target_pool: 64,
            ..GanConfig::default()
        };
        let a =
            trainer::train(&map, &gen, &theta0.view(), &target, &cfg).map_err(|e| e.to_string())?;
        let b =
            trainer::train(&map, &gen, &theta0.view(), &target, &cfg).map_err(|e| e.to_string())?;
        if a.final_theta == b.final_theta && a.final_w.weights == b.final_w.weights {
            Ok("bit-identical reruns".into())
        } else {
            Err("training is not deterministic".into())
        }
    }));
    Suite {
        name: "trainer",
        checks,
    }
}

fn targets_suite() -> Suite {
    let mut checks = Vec::new();
    checks.push(check("ring geometry", || {
        let t = eight_gaussians(2.0, 0.04, 1).map_err(|e| e.to_string())?;
        if t.components() == 8
            && (t.means[[0, 0]] - 2.0).abs() < 1e-12
            && (t.means[[2, 1]] - 2.0).abs() < 1e-12
        {
            Ok("8 modes on the circle".into())
        } else {
            Err("geometry wrong".into())
        }
    }));
    checks.push(check("sampling reproducible", || {
        let t = eight_gaussians(2.0, 0.04, 9).map_err(|e| e.to_string())?;
        let a = t.sampler().sample(64).map_err(|e| e.to_string())?;
        let b = t.sampler().sample(64).map_err(|e| e.to_string())?;
        if a == b {
            Ok("same seed, same batch".into())
        } else {
            Err("sampling not reproducible".into())
        }
    }));
    checks.push(check("occupancy bands", || {
        let t = eight_gaussians(2.0, 0.04, 7).map_err(|e| e.to_string())?;
        let n = 10_000;
        let s = t.sampler().sample(n).map_err(|e| e.to_string())?;
        let mut counts = [0usize; 8];
        for row in s.outer_iter() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..8 {
                let d = (row[0] - t.means[[k, 0]]).powi(2) + (row[1] - t.means[[k, 1]]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            counts[best] += 1;
        }
        let p = 1.0 / 8.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            if (c as f64 - n as f64 * p).abs() > 3.0 * sd {
                return Err(format!("occupancy {counts:?} outside bands"));
            }
        }
        Ok(format!("counts {counts:?}"))
    }));
    Suite {
        name: "targets",
        checks,
    }
}
