//! The operators coupling generator parameters to the RKHS.
//!
//! A single dense `p x m` matrix `A = (1/N) sum_i J_theta G(z_i) P_i`
//! (with `P_i` the `d x m` feature Jacobian at `G(z_i)`) realizes all three
//! operators: `L f = A w`, `L^T v = A^T v`, and the parametric Grammian
//! `D = A^T A`, which is symmetric positive semidefinite by construction.
//!
//! [`BatchOperator`] is the matrix-free counterpart used inside training
//! loops: it replays the same applications from cached activations without
//! materializing `A`.

use crate::error::{Error, Result};
use crate::generator::{GenCache, Generator};
use crate::linalg;
use crate::par;
use crate::rkhs::{FeatureMap, PhiCache, RkhsFunction};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use std::hash::{Hash, Hasher};

/// Default relative cutoff below which an eigenvalue of `D` counts as zero.
pub const DEFAULT_RANK_THRESHOLD: f64 = 1e-8;

/// Samples per assembly chunk; fixed so results are schedule-independent.
const ASSEMBLY_CHUNK: usize = 64;

/// Dense Monte-Carlo estimate of the coupling operator.
#[derive(Debug, Clone)]
pub struct OperatorA {
    matrix: Array2<f64>,
    batch_size: usize,
    theta_fingerprint: u64,
}

fn fingerprint(theta: &ArrayView1<f64>) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in theta.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Assemble the operator over a latent batch.
pub fn assemble(
    map: &FeatureMap,
    gen: &Generator,
    theta: &ArrayView1<f64>,
    latents: &ArrayView2<f64>,
) -> Result<OperatorA> {
    Ok(assemble_with_pushforward(map, gen, theta, latents)?.0)
}

/// Assemble the operator and also return the pushforward batch and its mean
/// embedding (they share the forward pass).
pub fn assemble_with_pushforward(
    map: &FeatureMap,
    gen: &Generator,
    theta: &ArrayView1<f64>,
    latents: &ArrayView2<f64>,
) -> Result<(OperatorA, Array2<f64>, RkhsFunction)> {
    let n = latents.nrows();
    if n == 0 {
        return Err(Error::EmptyBatch("operator assembly"));
    }
    if gen.output_dim() != map.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: map.input_dim(),
            got: gen.output_dim(),
            context: "generator output feeding the feature map",
        });
    }
    let d = gen.output_dim();
    let p = gen.param_count();
    let m = map.output_dim();
    let (x, cache) = gen.forward_batch(theta, latents)?;
    let (feats, p_stacked) = map.phi_with_jacobian_batch(&x.view())?;
    let mu_q = RkhsFunction::new(par::column_mean(&feats.view()));

    let mut a = Array2::<f64>::zeros((p, m));
    let inv_n = 1.0 / n as f64;
    let mut start = 0;
    while start < n {
        let end = (start + ASSEMBLY_CHUNK).min(n);
        let chunk = cache.slice_rows(start, end);
        for j in 0..d {
            let mut cot = Array2::<f64>::zeros((end - start, d));
            cot.slice_mut(s![.., j]).fill(1.0);
            // rows are per-sample gradients of output coordinate j
            let g_j = gen.per_sample_param_grads(theta, &chunk, &cot.view());
            // matching feature-Jacobian rows of coordinate j
            let p_j = p_stacked.slice(s![start * d + j..end * d; d, ..]);
            par::par_gemm(inv_n, &g_j.t(), &p_j, 1.0, &mut a.view_mut());
        }
        start = end;
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "operator assembly produced non-finite entries".into(),
        ));
    }
    Ok((
        OperatorA {
            matrix: a,
            batch_size: n,
            theta_fingerprint: fingerprint(theta),
        },
        x,
        mu_q,
    ))
}

impl OperatorA {
    /// Wrap an explicit matrix (for diagnostics and synthetic tests).
    pub fn from_matrix(matrix: Array2<f64>, batch_size: usize) -> OperatorA {
        OperatorA {
            matrix,
            batch_size,
            theta_fingerprint: 0,
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn theta_fingerprint(&self) -> u64 {
        self.theta_fingerprint
    }

    /// Parameter dimension `p`.
    pub fn param_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Feature dimension `m`.
    pub fn feature_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn check_feature(&self, got: usize) -> Result<()> {
        if got != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim(),
                got,
                context: "RKHS weight vector",
            });
        }
        Ok(())
    }

    /// `L f = A w`: the parameter-space gradient of `<f, mu_q(theta)>`.
    pub fn apply_l(&self, f: &RkhsFunction) -> Result<Array1<f64>> {
        self.check_feature(f.dim())?;
        Ok(self.matrix.dot(&f.weights))
    }

    /// Adjoint `L^T v = A^T v`.
    pub fn apply_lt(&self, v: &ArrayView1<f64>) -> Result<RkhsFunction> {
        if v.len() != self.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim(),
                got: v.len(),
                context: "parameter-space vector",
            });
        }
        Ok(RkhsFunction::new(self.matrix.t().dot(v)))
    }

    /// Parametric Grammian application `D f = A^T (A w)`.
    pub fn apply_d(&self, f: &RkhsFunction) -> Result<RkhsFunction> {
        let lf = self.apply_l(f)?;
        self.apply_lt(&lf.view())
    }

    /// Materialize `D = A^T A` (`m x m`).
    pub fn dense_d(&self) -> Array2<f64> {
        let m = self.feature_dim();
        let mut d = Array2::<f64>::zeros((m, m));
        par::par_gemm(
            1.0,
            &self.matrix.t(),
            &self.matrix.view(),
            0.0,
            &mut d.view_mut(),
        );
        d
    }

    /// Full spectrum of `D` with the default rank threshold.
    pub fn spectrum(&self) -> Result<Spectrum> {
        self.spectrum_with_threshold(DEFAULT_RANK_THRESHOLD)
    }

    /// Full spectrum of `D = A^T A` with a caller-chosen relative rank
    /// threshold. Negative numerical eigenvalues are clipped to zero and the
    /// clip count reported.
    pub fn spectrum_with_threshold(&self, rank_threshold: f64) -> Result<Spectrum> {
        let d = self.dense_d();
        Spectrum::from_dense_d(&d.view(), rank_threshold)
    }
}

/// Eigendecomposition of the parametric Grammian, eigenvalues descending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub eigenvalues: Array1<f64>,
    /// Orthonormal eigenvectors, column `k` pairs with `eigenvalues[k]`.
    pub eigenvectors: Array2<f64>,
    /// Relative cutoff: eigenvalues `<= rank_threshold * lambda_max` count
    /// as zero.
    pub rank_threshold: f64,
    /// How many negative numerical eigenvalues were clipped to zero.
    pub clipped: usize,
}

impl Spectrum {
    /// Decompose an explicit symmetric `D`.
    pub fn from_dense_d(d: &ArrayView2<f64>, rank_threshold: f64) -> Result<Spectrum> {
        let eig = linalg::symmetric_eigen(d)?;
        let m = eig.values.len();
        let mut values = Array1::<f64>::zeros(m);
        let mut vectors = Array2::<f64>::zeros((m, m));
        let mut clipped = 0;
        for k in 0..m {
            let src = m - 1 - k; // descending
            let mut v = eig.values[src];
            if v < 0.0 {
                v = 0.0;
                clipped += 1;
            }
            values[k] = v;
            vectors.column_mut(k).assign(&eig.vectors.column(src));
        }
        Ok(Spectrum {
            eigenvalues: values,
            eigenvectors: vectors,
            rank_threshold,
            clipped,
        })
    }

    /// Absolute cutoff below which an eigenvalue counts as zero.
    pub fn zero_cutoff(&self) -> f64 {
        self.rank_threshold * self.eigenvalues[0]
    }

    /// Smallest eigenvalue above the rank cutoff.
    pub fn smallest_nonzero_eig(&self) -> Result<f64> {
        let cutoff = self.zero_cutoff();
        let mut smallest = None;
        for &v in self.eigenvalues.iter() {
            if v > cutoff {
                smallest = Some(v);
            } else {
                break; // descending order
            }
        }
        smallest.ok_or(Error::DegenerateOperator)
    }

    /// Null-space alignment `a(theta, f) = 1 - |P_null f|^2 / |f|^2`.
    pub fn nullspace_alignment(&self, f: &RkhsFunction) -> Result<f64> {
        let norm_sq = f.weights.dot(&f.weights);
        if norm_sq <= 0.0 {
            return Err(Error::UndefinedAlignment);
        }
        let cutoff = self.zero_cutoff();
        let mut null_sq = 0.0;
        for (k, &v) in self.eigenvalues.iter().enumerate() {
            if v <= cutoff {
                let c = self.eigenvectors.column(k).dot(&f.weights);
                null_sq += c * c;
            }
        }
        Ok((1.0 - null_sq / norm_sq).clamp(0.0, 1.0))
    }
}

/// Matrix-free operator over one latent batch: the same `L`, `L^T`, `D`
/// applications as [`OperatorA`], replayed from cached network activations
/// instead of a materialized matrix.
///
/// With `with_feature_jacobian` the `(n*d) x m` feature Jacobian is cached
/// once, making repeated applications cheap; without it applications
/// backpropagate through the feature map each time (cheaper when the
/// operator is applied once).
pub struct BatchOperator<'a> {
    map: &'a FeatureMap,
    gen: &'a Generator,
    theta: Array1<f64>,
    gen_cache: GenCache,
    phi_cache: Option<PhiCache>,
    p_stacked: Option<Array2<f64>>,
    feats: Array2<f64>,
    n: usize,
}

impl<'a> BatchOperator<'a> {
    pub fn new(
        map: &'a FeatureMap,
        gen: &'a Generator,
        theta: &ArrayView1<f64>,
        latents: &ArrayView2<f64>,
        with_feature_jacobian: bool,
    ) -> Result<BatchOperator<'a>> {
        let n = latents.nrows();
        if n == 0 {
            return Err(Error::EmptyBatch("batch operator"));
        }
        let (x, gen_cache) = gen.forward_batch(theta, latents)?;
        let (feats, phi_cache, p_stacked) = if with_feature_jacobian {
            let (feats, jac) = map.phi_with_jacobian_batch(&x.view())?;
            (feats, None, Some(jac))
        } else {
            let (feats, cache) = map.phi_forward_cache(&x.view())?;
            (feats, Some(cache), None)
        };
        Ok(BatchOperator {
            map,
            gen,
            theta: theta.to_owned(),
            gen_cache,
            phi_cache,
            p_stacked,
            feats,
            n,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.n
    }

    /// Mean embedding of the pushforward batch.
    pub fn mu_q(&self) -> RkhsFunction {
        RkhsFunction::new(par::column_mean(&self.feats.view()))
    }

    /// Mean of `f` over the pushforward batch.
    pub fn mean_f(&self, f: &RkhsFunction) -> f64 {
        self.mu_q().inner(f)
    }

    /// `A w` without materializing `A`.
    pub fn apply_l(&self, f: &RkhsFunction) -> Array1<f64> {
        let d = self.gen.output_dim();
        let cot = match (&self.p_stacked, &self.phi_cache) {
            (Some(p), _) => {
                let flat = p.dot(&f.weights); // (n*d)
                Array2::from_shape_vec((self.n, d), flat.to_vec()).expect("shape")
            }
            (None, Some(cache)) => {
                let mut w_rows = Array2::<f64>::zeros((self.n, f.dim()));
                for mut row in w_rows.outer_iter_mut() {
                    row.assign(&f.weights);
                }
                self.map.phi_vjp(cache, &w_rows.view())
            }
            _ => unreachable!("one cache is always present"),
        };
        let grad = self
            .gen
            .vjp_theta(&self.theta.view(), &self.gen_cache, &cot.view());
        grad / self.n as f64
    }

    /// `A^T v` without materializing `A`.
    pub fn apply_lt(&self, v: &ArrayView1<f64>) -> RkhsFunction {
        let t = self.gen.jvp_theta(&self.theta.view(), &self.gen_cache, v); // n x d
        match (&self.p_stacked, &self.phi_cache) {
            (Some(p), _) => {
                let flat =
                    Array1::from_shape_vec(self.n * t.ncols(), t.into_raw_vec_and_offset().0)
                        .expect("shape");
                RkhsFunction::new(p.t().dot(&flat) / self.n as f64)
            }
            (None, Some(cache)) => {
                let rows = self.map.phi_jvp(cache, &t.view());
                RkhsFunction::new(par::column_mean(&rows.view()))
            }
            _ => unreachable!("one cache is always present"),
        }
    }

    /// `D f = A^T A w`.
    pub fn apply_d(&self, f: &RkhsFunction) -> RkhsFunction {
        let lf = self.apply_l(f);
        self.apply_lt(&lf.view())
    }
}
