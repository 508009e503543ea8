//! Finite-dimensional RKHS built from a fixed random feature map.
//!
//! The feature map `Phi: R^d -> R^m` is a rectifier network whose weights
//! are drawn once from a standard normal and then frozen, so the kernel is
//! `k(x, y) = <Phi(x), Phi(y)>` and every RKHS function is `f(x) = <w,
//! Phi(x)>` for a weight vector `w`. Mean embeddings are empirical feature
//! averages. An `identity` mode with `Phi(x) = x` exists for closed-form
//! tests.

use crate::error::{Error, Result};
use crate::par;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// One dense layer; `w` has shape `(out, in)`.
#[derive(Debug, Clone)]
struct Layer {
    w: Array2<f64>,
    b: Array1<f64>,
}

/// Frozen random feature map.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    widths: Vec<usize>,
    layers: Vec<Layer>,
    seed: u64,
    identity: bool,
    fan_in_scaling: bool,
}

/// Serializable description of a [`FeatureMap`]; weights are regenerated
/// from the seed on `build`, so the blob stays small.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureMapSpec {
    #[serde(default = "default_spec_version")]
    pub version: u32,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub seed: u64,
    #[serde(default)]
    pub identity: bool,
    #[serde(default)]
    pub fan_in_scaling: bool,
}

pub const FEATURE_MAP_SPEC_VERSION: u32 = 1;

fn default_spec_version() -> u32 {
    FEATURE_MAP_SPEC_VERSION
}

impl FeatureMapSpec {
    pub fn build(&self) -> Result<FeatureMap> {
        if self.version != FEATURE_MAP_SPEC_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported feature map spec version {}",
                self.version
            )));
        }
        if self.identity {
            if self.output_dim != self.input_dim {
                return Err(Error::InvalidConfig(
                    "identity feature map requires output_dim == input_dim".into(),
                ));
            }
            return FeatureMap::identity(self.input_dim);
        }
        FeatureMap::random(
            self.input_dim,
            &self.hidden,
            self.output_dim,
            self.seed,
            self.fan_in_scaling,
        )
    }
}

/// Build the random rectifier feature map with standard-normal weights.
pub fn build_feature_map(
    input_dim: usize,
    hidden: &[usize],
    output_dim: usize,
    seed: u64,
) -> Result<FeatureMap> {
    FeatureMap::random(input_dim, hidden, output_dim, seed, false)
}

impl FeatureMap {
    /// Random map with the given widths. `fan_in_scaling` divides each
    /// weight matrix by `sqrt(fan_in)` for better numerical conditioning;
    /// the unscaled draw is the default.
    pub fn random(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        seed: u64,
        fan_in_scaling: bool,
    ) -> Result<FeatureMap> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input_dim);
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig(
                "all feature map widths must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for l in 0..widths.len() - 1 {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let scale = if fan_in_scaling {
                1.0 / (n_in as f64).sqrt()
            } else {
                1.0
            };
            layers.push(draw_layer(&mut rng, n_in, n_out, scale));
        }
        Ok(FeatureMap {
            widths,
            layers,
            seed,
            identity: false,
            fan_in_scaling,
        })
    }

    /// `Phi(x) = x`; bypasses all layers.
    pub fn identity(dim: usize) -> Result<FeatureMap> {
        if dim == 0 {
            return Err(Error::InvalidConfig("identity map needs dim >= 1".into()));
        }
        Ok(FeatureMap {
            widths: vec![dim, dim],
            layers: Vec::new(),
            seed: 0,
            identity: true,
            fan_in_scaling: false,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn spec(&self) -> FeatureMapSpec {
        FeatureMapSpec {
            version: FEATURE_MAP_SPEC_VERSION,
            input_dim: self.input_dim(),
            hidden: self.widths[1..self.widths.len() - 1].to_vec(),
            output_dim: self.output_dim(),
            seed: self.seed,
            identity: self.identity,
            fan_in_scaling: self.fan_in_scaling,
        }
    }

    fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: dim,
                context: "feature map input",
            });
        }
        Ok(())
    }

    /// Evaluate the feature vector of a single point.
    pub fn phi(&self, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(x.len())?;
        let batch = x.view().insert_axis(Axis(0)).to_owned();
        Ok(self.phi_batch(&batch.view())?.row(0).to_owned())
    }

    /// Evaluate features for a whole batch (rows are samples).
    pub fn phi_batch(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x, false)?.0)
    }

    /// Features plus the rectifier masks needed by `phi_vjp` / `phi_jvp`.
    pub fn phi_forward_cache(&self, x: &ArrayView2<f64>) -> Result<(Array2<f64>, PhiCache)> {
        let (feats, cache) = self.forward(x, true)?;
        Ok((feats, cache.expect("cache requested")))
    }

    fn forward(
        &self,
        x: &ArrayView2<f64>,
        want_cache: bool,
    ) -> Result<(Array2<f64>, Option<PhiCache>)> {
        self.check_input(x.ncols())?;
        if self.identity {
            let cache = want_cache.then(|| PhiCache { masks: Vec::new() });
            return Ok((x.to_owned(), cache));
        }
        let n = x.nrows();
        let n_layers = self.layers.len();
        let mut masks = Vec::new();
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = Array2::<f64>::zeros((n, layer.w.nrows()));
            par::par_gemm(1.0, &h.view(), &layer.w.t(), 0.0, &mut pre.view_mut());
            pre += &layer.b;
            if l + 1 < n_layers {
                let mask = pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                pre *= &mask;
                if want_cache {
                    masks.push(mask);
                }
            }
            h = pre;
        }
        Ok((h, want_cache.then(|| PhiCache { masks })))
    }

    /// Kernel value `k(x, y) = <Phi(x), Phi(y)>`.
    pub fn kernel(&self, x: &ArrayView1<f64>, y: &ArrayView1<f64>) -> Result<f64> {
        Ok(self.phi(x)?.dot(&self.phi(y)?))
    }

    /// Jacobian of the feature map at `x` as a `d x m` matrix; row `i` is
    /// `dPhi/dx_i`. The rectifier subgradient at exactly zero is zero.
    pub fn phi_jacobian(&self, x: &ArrayView1<f64>) -> Result<Array2<f64>> {
        self.check_input(x.len())?;
        if self.identity {
            return Ok(Array2::eye(self.input_dim()));
        }
        let batch = x.view().insert_axis(Axis(0)).to_owned();
        let (_, jac) = self.phi_with_jacobian_batch(&batch.view())?;
        Ok(jac)
    }

    /// Features and the stacked Jacobians of a batch. The Jacobian of
    /// sample `i` occupies rows `i*d .. (i+1)*d` of the second return.
    pub fn phi_with_jacobian_batch(
        &self,
        x: &ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(x.ncols())?;
        let n = x.nrows();
        let d = self.input_dim();
        if self.identity {
            let mut jac = Array2::<f64>::zeros((n * d, d));
            for i in 0..n {
                for r in 0..d {
                    jac[[i * d + r, r]] = 1.0;
                }
            }
            return Ok((x.to_owned(), jac));
        }
        let (feats, cache) = self.phi_forward_cache(x)?;
        let n_layers = self.layers.len();
        // carrier: stacked d x width blocks per sample, propagated through
        // the layers with the per-sample rectifier masks
        let mut carrier = {
            let w0t = self.layers[0].w.t();
            let mut c = Array2::<f64>::zeros((n * d, self.layers[0].w.nrows()));
            let tasks: Vec<ndarray::ArrayViewMut2<f64>> =
                c.axis_chunks_iter_mut(Axis(0), d).collect();
            par::run_tasks(tasks, |_, mut block| block.assign(&w0t));
            c
        };
        if n_layers > 1 {
            apply_masks(&mut carrier, &cache.masks[0], d);
        }
        for l in 1..n_layers {
            let mut next = Array2::<f64>::zeros((n * d, self.layers[l].w.nrows()));
            par::par_gemm(
                1.0,
                &carrier.view(),
                &self.layers[l].w.t(),
                0.0,
                &mut next.view_mut(),
            );
            if l + 1 < n_layers {
                apply_masks(&mut next, &cache.masks[l], d);
            }
            carrier = next;
        }
        Ok((feats, carrier))
    }

    /// Pull an output cotangent back to input space: row `i` of the result
    /// is `P_i cot_i` where `P_i` is the `d x m` Jacobian at sample `i`.
    pub fn phi_vjp(&self, cache: &PhiCache, cot: &ArrayView2<f64>) -> Array2<f64> {
        if self.identity {
            return cot.to_owned();
        }
        let n = cot.nrows();
        let mut delta = cot.to_owned();
        for l in (0..self.layers.len()).rev() {
            let mut prev = Array2::<f64>::zeros((n, self.layers[l].w.ncols()));
            par::par_gemm(
                1.0,
                &delta.view(),
                &self.layers[l].w.view(),
                0.0,
                &mut prev.view_mut(),
            );
            if l > 0 {
                prev *= &cache.masks[l - 1];
            }
            delta = prev;
        }
        delta
    }

    /// Push an input tangent forward: rows are per-sample `d`-tangents,
    /// result rows are the corresponding feature-space tangents `P_i^T t_i`.
    pub fn phi_jvp(&self, cache: &PhiCache, tangent: &ArrayView2<f64>) -> Array2<f64> {
        if self.identity {
            return tangent.to_owned();
        }
        let n = tangent.nrows();
        let n_layers = self.layers.len();
        let mut t = tangent.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = Array2::<f64>::zeros((n, layer.w.nrows()));
            par::par_gemm(1.0, &t.view(), &layer.w.t(), 0.0, &mut next.view_mut());
            if l + 1 < n_layers {
                next *= &cache.masks[l];
            }
            t = next;
        }
        t
    }

    /// Smallest absolute hidden pre-activation at `x`; large values mean the
    /// point is far from every rectifier kink, where the Jacobian is exact.
    pub fn min_abs_hidden_preactivation(&self, x: &ArrayView1<f64>) -> Result<f64> {
        self.check_input(x.len())?;
        if self.identity || self.layers.len() <= 1 {
            return Ok(f64::INFINITY);
        }
        let mut min_abs = f64::INFINITY;
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = layer.w.dot(&h);
            pre += &layer.b;
            if l + 1 < self.layers.len() {
                for v in pre.iter() {
                    min_abs = min_abs.min(v.abs());
                }
                pre.mapv_inplace(|v| v.max(0.0));
            }
            h = pre;
        }
        Ok(min_abs)
    }

    /// Empirical kernel mean embedding of a sample batch.
    pub fn mean_embedding(&self, samples: &ArrayView2<f64>) -> Result<RkhsFunction> {
        if samples.nrows() == 0 {
            return Err(Error::EmptyBatch("mean_embedding"));
        }
        let feats = self.phi_batch(samples)?;
        Ok(RkhsFunction::new(par::column_mean(&feats.view())))
    }

    /// Plain MMD between two sample batches: the RKHS norm of the mean
    /// embedding difference.
    pub fn mmd(&self, samples_p: &ArrayView2<f64>, samples_q: &ArrayView2<f64>) -> Result<f64> {
        if samples_p.nrows() == 0 || samples_q.nrows() == 0 {
            return Err(Error::EmptyBatch("mmd"));
        }
        let mu_p = self.mean_embedding(samples_p)?;
        let mu_q = self.mean_embedding(samples_q)?;
        Ok((&mu_p.weights - &mu_q.weights).mapv(|v| v * v).sum().sqrt())
    }
}

fn draw_layer(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, scale: f64) -> Layer {
    // fixed draw order: weight matrix row-major, then bias
    let mut wv = Vec::with_capacity(n_out * n_in);
    for _ in 0..n_out * n_in {
        let g: f64 = StandardNormal.sample(rng);
        wv.push(g * scale);
    }
    let mut bv = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        let g: f64 = StandardNormal.sample(rng);
        bv.push(g * scale);
    }
    Layer {
        w: Array2::from_shape_vec((n_out, n_in), wv).expect("shape"),
        b: Array1::from_vec(bv),
    }
}

/// Multiply each sample's `d`-row block of `stacked` by that sample's mask
/// row (columns are units).
fn apply_masks(stacked: &mut Array2<f64>, masks: &Array2<f64>, d: usize) {
    let tasks: Vec<(ndarray::ArrayViewMut2<f64>, ArrayView2<f64>)> = stacked
        .axis_chunks_iter_mut(Axis(0), d * par::SUM_CHUNK)
        .zip(masks.axis_chunks_iter(Axis(0), par::SUM_CHUNK))
        .collect();
    par::run_tasks(tasks, |_, (mut block, mask_rows)| {
        for (i, mask) in mask_rows.outer_iter().enumerate() {
            for r in 0..d {
                let mut row = block.row_mut(i * d + r);
                row *= &mask;
            }
        }
    });
}

/// Rectifier masks recorded during a forward pass; enough to replay
/// input-space VJPs and JVPs since the map itself is frozen.
pub struct PhiCache {
    masks: Vec<Array2<f64>>,
}

/// An RKHS element `f(x) = <weights, Phi(x)>`. Mean embeddings use the same
/// representation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RkhsFunction {
    pub weights: Array1<f64>,
}

impl RkhsFunction {
    pub fn new(weights: Array1<f64>) -> Self {
        RkhsFunction { weights }
    }

    pub fn zeros(dim: usize) -> Self {
        RkhsFunction {
            weights: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// RKHS norm; equals the Euclidean norm of the weights.
    pub fn norm_h(&self) -> f64 {
        self.weights.dot(&self.weights).sqrt()
    }

    /// Inner product in the RKHS.
    pub fn inner(&self, other: &RkhsFunction) -> f64 {
        self.weights.dot(&other.weights)
    }

    /// Evaluate the function at a point.
    pub fn eval(&self, map: &FeatureMap, x: &ArrayView1<f64>) -> Result<f64> {
        Ok(self.weights.dot(&map.phi(x)?))
    }

    /// Evaluate on a batch of points.
    pub fn eval_batch(&self, map: &FeatureMap, x: &ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(map.phi_batch(x)?.dot(&self.weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn random_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_feature_map(2, &[512, 512, 512], 512, 7).unwrap();
        let b = build_feature_map(2, &[512, 512, 512], 512, 7).unwrap();
        assert_eq!(a.layers.len(), 4, "four weight layers");
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.w, lb.w);
            assert_eq!(la.b, lb.b);
        }
        let c = build_feature_map(2, &[512, 512, 512], 512, 8).unwrap();
        assert_ne!(a.layers[0].w, c.layers[0].w);
    }

    #[test]
    fn zero_width_rejected() {
        assert!(build_feature_map(2, &[0], 4, 1).is_err());
        assert!(build_feature_map(0, &[4], 4, 1).is_err());
    }

    #[test]
    fn identity_mode() {
        let map = FeatureMap::identity(2).unwrap();
        let x = array![3.0, -1.0];
        assert_eq!(map.phi(&x.view()).unwrap(), x);
        let jac = map.phi_jacobian(&x.view()).unwrap();
        assert_eq!(jac, Array2::<f64>::eye(2));
    }

    #[test]
    fn phi_is_pure_and_kernel_nonnegative() {
        let map = build_feature_map(3, &[16, 16], 8, 42).unwrap();
        let x = array![0.3, -0.7, 1.1];
        let a = map.phi(&x.view()).unwrap();
        let b = map.phi(&x.view()).unwrap();
        assert_eq!(a, b);
        let k = map.kernel(&x.view(), &x.view()).unwrap();
        assert!((k - a.dot(&a)).abs() < 1e-12);
        assert!(k >= 0.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let map = build_feature_map(3, &[4], 4, 1).unwrap();
        let x = array![1.0, 2.0];
        assert!(map.phi(&x.view()).is_err());
        assert!(map.phi_jacobian(&x.view()).is_err());
    }

    #[test]
    fn dead_unit_contributes_zero_gradient() {
        // single hidden unit; feed a point with negative pre-activation
        let map = build_feature_map(1, &[1], 1, 3).unwrap();
        let w = map.layers[0].w[[0, 0]];
        let b = map.layers[0].b[0];
        let x_dead = array![-(b / w) - w.signum() * 1.0];
        let pre = w * x_dead[0] + b;
        assert!(pre < 0.0, "constructed point must be in the dead region");
        let jac = map.phi_jacobian(&x_dead.view()).unwrap();
        assert_eq!(jac[[0, 0]], 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let map = build_feature_map(3, &[8, 8], 5, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tested = 0;
        while tested < 8 {
            let x = Array1::from_shape_fn(3, |_| rng.gen_range(-2.0..2.0));
            if map.min_abs_hidden_preactivation(&x.view()).unwrap() < 1e-3 {
                continue;
            }
            tested += 1;
            let jac = map.phi_jacobian(&x.view()).unwrap();
            let h = 1e-5;
            for i in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fp = map.phi(&xp.view()).unwrap();
                let fm = map.phi(&xm.view()).unwrap();
                let fd = (&fp - &fm) / (2.0 * h);
                let num = (&fd - &jac.row(i)).mapv(|v| v * v).sum().sqrt();
                let den = fd.mapv(|v| v * v).sum().sqrt().max(1e-12);
                assert!(num / den < 1e-4, "fd mismatch {}", num / den);
            }
        }
    }

    #[test]
    fn batch_jacobian_matches_single() {
        let map = build_feature_map(2, &[8, 8], 6, 5).unwrap();
        let x = random_points(7, 2, 11);
        let (_, stacked) = map.phi_with_jacobian_batch(&x.view()).unwrap();
        for i in 0..7 {
            let ji = map.phi_jacobian(&x.row(i)).unwrap();
            let block = stacked.slice(ndarray::s![i * 2..(i + 1) * 2, ..]);
            let diff = (&block - &ji).mapv(|v| v.abs()).sum();
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn vjp_jvp_consistent_with_jacobian() {
        let map = build_feature_map(2, &[8, 8], 6, 5).unwrap();
        let x = random_points(5, 2, 13);
        let (_, cache) = map.phi_forward_cache(&x.view()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cot = Array2::from_shape_fn((5, 6), |_| rng.gen_range(-1.0..1.0));
        let tan = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        let pulled = map.phi_vjp(&cache, &cot.view());
        let pushed = map.phi_jvp(&cache, &tan.view());
        for i in 0..5 {
            let ji = map.phi_jacobian(&x.row(i)).unwrap(); // d x m
            let want_pull = ji.dot(&cot.row(i));
            let want_push = ji.t().dot(&tan.row(i));
            assert!((&pulled.row(i) - &want_pull).mapv(|v| v.abs()).sum() < 1e-10);
            assert!((&pushed.row(i) - &want_push).mapv(|v| v.abs()).sum() < 1e-10);
        }
    }

    #[test]
    fn mean_embedding_singleton_duplicate_union() {
        let map = build_feature_map(2, &[8], 4, 21).unwrap();
        let x = array![[0.4, -0.2]];
        let mu = map.mean_embedding(&x.view()).unwrap();
        let phix = map.phi(&x.row(0)).unwrap();
        assert_eq!(mu.weights, phix);

        let xx = array![[0.4, -0.2], [0.4, -0.2]];
        let mu2 = map.mean_embedding(&xx.view()).unwrap();
        assert_eq!(mu2.weights, phix);

        let b1 = random_points(16, 2, 1);
        let b2 = random_points(16, 2, 2);
        let mut union = Array2::zeros((32, 2));
        union.slice_mut(ndarray::s![..16, ..]).assign(&b1);
        union.slice_mut(ndarray::s![16.., ..]).assign(&b2);
        let mu_union = map.mean_embedding(&union.view()).unwrap();
        let mu_avg = (&map.mean_embedding(&b1.view()).unwrap().weights
            + &map.mean_embedding(&b2.view()).unwrap().weights)
            / 2.0;
        let err = (&mu_union.weights - &mu_avg).mapv(|v| v.abs()).sum();
        assert!(err < 1e-10, "linearity violated by {err}");
    }

    #[test]
    fn empty_batch_rejected() {
        let map = FeatureMap::identity(2).unwrap();
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(map.mean_embedding(&empty.view()).is_err());
        let x = array![[1.0, 0.0]];
        assert!(map.mmd(&empty.view(), &x.view()).is_err());
    }

    #[test]
    fn mmd_basics() {
        let map = FeatureMap::identity(2).unwrap();
        let p = array![[1.0, 0.0]];
        let q = array![[0.0, 0.0]];
        assert!((map.mmd(&p.view(), &q.view()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(map.mmd(&p.view(), &p.view()).unwrap(), 0.0);

        let map = build_feature_map(2, &[8], 6, 3).unwrap();
        let a = random_points(10, 2, 5);
        let b = random_points(12, 2, 6);
        let ab = map.mmd(&a.view(), &b.view()).unwrap();
        let ba = map.mmd(&b.view(), &a.view()).unwrap();
        assert!((ab - ba).abs() < 1e-14);
    }

    #[test]
    fn gram_matrix_is_psd() {
        let map = build_feature_map(2, &[12, 12], 8, 17).unwrap();
        let pts = random_points(20, 2, 23);
        let feats = map.phi_batch(&pts.view()).unwrap();
        let gram = feats.dot(&feats.t());
        let eig = crate::linalg::symmetric_eigen(&gram.view()).unwrap();
        let max = eig.values[eig.values.len() - 1];
        assert!(
            eig.values[0] >= -1e-8 * max.max(1.0),
            "min eigenvalue {} too negative",
            eig.values[0]
        );
    }

    #[test]
    fn rkhs_norm_and_eval_identities() {
        let map = build_feature_map(2, &[8], 6, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = Array1::from_shape_fn(6, |_| rng.gen_range(-1.0..1.0));
        let f = RkhsFunction::new(w.clone());
        assert!((f.norm_h().powi(2) - w.dot(&w)).abs() < 1e-14);
        let x = array![0.2, 0.9];
        let fx = f.eval(&map, &x.view()).unwrap();
        assert!((fx - w.dot(&map.phi(&x.view()).unwrap())).abs() < 1e-14);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn batch_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
            (3usize..=12, 3usize..=12).prop_flat_map(|(n, m)| {
                (
                    prop::collection::vec(-5.0..5.0f64, 2 * n),
                    prop::collection::vec(-5.0..5.0f64, 2 * m),
                )
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn mmd_is_symmetric_and_zero_on_self((pa, qa) in batch_strategy()) {
                let map = build_feature_map(2, &[6], 5, 3).unwrap();
                let p = Array2::from_shape_vec((pa.len() / 2, 2), pa).unwrap();
                let q = Array2::from_shape_vec((qa.len() / 2, 2), qa).unwrap();
                let ab = map.mmd(&p.view(), &q.view()).unwrap();
                let ba = map.mmd(&q.view(), &p.view()).unwrap();
                prop_assert!(ab >= 0.0);
                prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
                prop_assert_eq!(map.mmd(&p.view(), &p.view()).unwrap(), 0.0);
            }

            #[test]
            fn eval_is_linear_in_weights(
                w1 in prop::collection::vec(-3.0..3.0f64, 5),
                w2 in prop::collection::vec(-3.0..3.0f64, 5),
                x in prop::collection::vec(-5.0..5.0f64, 2),
                c in -4.0..4.0f64,
            ) {
                let map = build_feature_map(2, &[6], 5, 3).unwrap();
                let xv = Array1::from_vec(x);
                let f1 = RkhsFunction::new(Array1::from_vec(w1.clone()));
                let f2 = RkhsFunction::new(Array1::from_vec(w2.clone()));
                let combo = RkhsFunction::new(
                    Array1::from_iter(w1.iter().zip(&w2).map(|(a, b)| a + c * b)),
                );
                let lhs = combo.eval(&map, &xv.view()).unwrap();
                let rhs = f1.eval(&map, &xv.view()).unwrap() + c * f2.eval(&map, &xv.view()).unwrap();
                prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
            }
        }
    }

    #[test]
    fn spec_roundtrip_rebuilds_identical_map() {
        let map = FeatureMap::random(2, &[8, 8], 6, 99, true).unwrap();
        let json = serde_json::to_string(&map.spec()).unwrap();
        let spec: FeatureMapSpec = serde_json::from_str(&json).unwrap();
        let rebuilt = spec.build().unwrap();
        for (la, lb) in map.layers.iter().zip(&rebuilt.layers) {
            assert_eq!(la.w, lb.w);
            assert_eq!(la.b, lb.b);
        }
    }
}
