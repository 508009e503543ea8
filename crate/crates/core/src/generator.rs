//! Parametric generator `G_theta: Z -> Omega` with analytic forward pass and
//! parameter Jacobian.
//!
//! The generator is a rectifier network whose flat parameter vector follows
//! the canonical order "per layer: weight matrix row-major, then bias". A
//! `constant` mode with `G_theta(z) = theta` (so `p = d`) exists for
//! closed-form tests.

use crate::error::{Error, Result};
use crate::par;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Generator architecture. Parameters are passed separately as a flat
/// vector so optimizers can own them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    /// `[latent_dim, hidden..., output_dim]`
    pub widths: Vec<usize>,
    pub constant: bool,
}

impl Generator {
    /// Rectifier MLP `latent_dim -> hidden... -> output_dim`.
    pub fn mlp(latent_dim: usize, hidden: &[usize], output_dim: usize) -> Result<Generator> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(latent_dim);
        widths.extend_from_slice(hidden);
        widths.push(output_dim);
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig(
                "all generator widths must be at least 1".into(),
            ));
        }
        Ok(Generator {
            widths,
            constant: false,
        })
    }

    /// `G_theta(z) = theta` with `p = d`; the parameter Jacobian is the
    /// identity.
    pub fn constant(output_dim: usize) -> Result<Generator> {
        if output_dim == 0 {
            return Err(Error::InvalidConfig("output dim must be >= 1".into()));
        }
        Ok(Generator {
            widths: vec![output_dim, output_dim],
            constant: true,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Total parameter count `p`.
    pub fn param_count(&self) -> usize {
        if self.constant {
            return self.output_dim();
        }
        self.widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    /// Per-layer `(weight_offset, bias_offset, in, out)` into the flat
    /// parameter vector.
    fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut off = 0;
        for w in self.widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            out.push((off, off + n_out * n_in, n_in, n_out));
            off += n_out * n_in + n_out;
        }
        out
    }

    fn check_theta(&self, theta: &ArrayView1<f64>) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: theta.len(),
                context: "generator parameter vector",
            });
        }
        Ok(())
    }

    fn check_latent(&self, dim: usize) -> Result<()> {
        if dim != self.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim(),
                got: dim,
                context: "latent input",
            });
        }
        Ok(())
    }

    /// Parameter initialization: weights i.i.d. normal scaled by
    /// `1/sqrt(fan_in)`, biases zero. Constant mode initializes to zero.
    pub fn init_theta(&self, seed: u64) -> Array1<f64> {
        let p = self.param_count();
        if self.constant {
            return Array1::zeros(p);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Array1::<f64>::zeros(p);
        for (w_off, b_off, n_in, n_out) in self.layout() {
            let scale = 1.0 / (n_in as f64).sqrt();
            for k in 0..n_out * n_in {
                let g: f64 = StandardNormal.sample(&mut rng);
                theta[w_off + k] = g * scale;
            }
            let _ = b_off; // biases stay zero
        }
        theta
    }

    /// Forward pass for a single latent point.
    pub fn forward(&self, theta: &ArrayView1<f64>, z: &ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_theta(theta)?;
        self.check_latent(z.len())?;
        if self.constant {
            return Ok(theta.to_owned());
        }
        let batch = z.view().insert_axis(Axis(0)).to_owned();
        let (out, _) = self.forward_batch(theta, &batch.view())?;
        Ok(out.row(0).to_owned())
    }

    /// Forward pass for a latent batch (rows are samples), returning the
    /// outputs and the activation cache used by `vjp_theta` / `jvp_theta`.
    pub fn forward_batch(
        &self,
        theta: &ArrayView1<f64>,
        z: &ArrayView2<f64>,
    ) -> Result<(Array2<f64>, GenCache)> {
        self.check_theta(theta)?;
        self.check_latent(z.ncols())?;
        let n = z.nrows();
        if self.constant {
            let mut out = Array2::zeros((n, self.output_dim()));
            for mut row in out.outer_iter_mut() {
                row.assign(theta);
            }
            return Ok((
                out,
                GenCache {
                    inputs: Vec::new(),
                    masks: Vec::new(),
                    n,
                },
            ));
        }
        let layout = self.layout();
        let n_layers = layout.len();
        let theta_sl = theta.as_slice().expect("contiguous theta");
        let mut inputs = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut h = z.to_owned();
        for (l, &(w_off, b_off, n_in, n_out)) in layout.iter().enumerate() {
            let w = ArrayView2::from_shape((n_out, n_in), &theta_sl[w_off..w_off + n_out * n_in])
                .expect("weight view");
            let b = ArrayView1::from(&theta_sl[b_off..b_off + n_out]);
            inputs.push(h.clone());
            let mut pre = Array2::<f64>::zeros((n, n_out));
            par::par_gemm(1.0, &h.view(), &w.t(), 0.0, &mut pre.view_mut());
            pre += &b;
            if l + 1 < n_layers {
                let mask = pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                pre *= &mask;
                masks.push(mask);
            }
            h = pre;
        }
        Ok((h, GenCache { inputs, masks, n }))
    }

    /// Gradient of `sum_i <cot_i, G_theta(z_i)>` with respect to `theta`,
    /// replayed from a forward cache. Callers scale by `1/N` for batch
    /// means.
    pub fn vjp_theta(
        &self,
        theta: &ArrayView1<f64>,
        cache: &GenCache,
        cot: &ArrayView2<f64>,
    ) -> Array1<f64> {
        if self.constant {
            return cot.sum_axis(Axis(0));
        }
        let layout = self.layout();
        let theta_sl = theta.as_slice().expect("contiguous theta");
        let p = self.param_count();
        let mut grad = Array1::<f64>::zeros(p);
        let grad_sl = grad.as_slice_mut().expect("contiguous grad");
        let mut delta = cot.to_owned();
        for l in (0..layout.len()).rev() {
            let (w_off, b_off, n_in, n_out) = layout[l];
            let w = ArrayView2::from_shape((n_out, n_in), &theta_sl[w_off..w_off + n_out * n_in])
                .expect("weight view");
            // weight gradient: delta^T . input, row-major into the flat slice
            {
                let mut gw = ndarray::ArrayViewMut2::from_shape(
                    (n_out, n_in),
                    &mut grad_sl[w_off..w_off + n_out * n_in],
                )
                .expect("grad view");
                par::par_gemm(1.0, &delta.t(), &cache.inputs[l].view(), 0.0, &mut gw);
            }
            // bias gradient: column sums in fixed order
            let gb = delta.sum_axis(Axis(0));
            grad_sl[b_off..b_off + n_out].copy_from_slice(gb.as_slice().expect("contiguous"));
            if l > 0 {
                let mut prev = Array2::<f64>::zeros((cache.n, n_in));
                par::par_gemm(1.0, &delta.view(), &w.view(), 0.0, &mut prev.view_mut());
                prev *= &cache.masks[l - 1];
                delta = prev;
            }
        }
        grad
    }

    /// Directional derivative of the batch outputs along a parameter
    /// tangent `v`: returns the `n x d` matrix of `J_theta G(z_i) . v` rows.
    pub fn jvp_theta(
        &self,
        theta: &ArrayView1<f64>,
        cache: &GenCache,
        v: &ArrayView1<f64>,
    ) -> Array2<f64> {
        if self.constant {
            let mut out = Array2::zeros((cache.n, self.output_dim()));
            for mut row in out.outer_iter_mut() {
                row.assign(v);
            }
            return out;
        }
        let layout = self.layout();
        let theta_sl = theta.as_slice().expect("contiguous theta");
        let v_sl = v.as_slice().expect("contiguous tangent");
        let n = cache.n;
        let mut t: Option<Array2<f64>> = None;
        for (l, &(w_off, b_off, n_in, n_out)) in layout.iter().enumerate() {
            let w = ArrayView2::from_shape((n_out, n_in), &theta_sl[w_off..w_off + n_out * n_in])
                .expect("weight view");
            let dw = ArrayView2::from_shape((n_out, n_in), &v_sl[w_off..w_off + n_out * n_in])
                .expect("tangent view");
            let db = ArrayView1::from(&v_sl[b_off..b_off + n_out]);
            let mut dpre = Array2::<f64>::zeros((n, n_out));
            par::par_gemm(
                1.0,
                &cache.inputs[l].view(),
                &dw.t(),
                0.0,
                &mut dpre.view_mut(),
            );
            dpre += &db;
            if let Some(prev) = &t {
                par::par_gemm(1.0, &prev.view(), &w.t(), 1.0, &mut dpre.view_mut());
            }
            if l + 1 < layout.len() {
                dpre *= &cache.masks[l];
            }
            t = Some(dpre);
        }
        t.expect("at least one layer")
    }

    /// Per-sample parameter gradients of `<cot_i, G_theta(z_i)>`: row `i`
    /// of the result is the gradient for sample `i` alone.
    pub fn per_sample_param_grads(
        &self,
        theta: &ArrayView1<f64>,
        cache: &GenCache,
        cot: &ArrayView2<f64>,
    ) -> Array2<f64> {
        let p = self.param_count();
        let n = cache.n;
        if self.constant {
            return cot.to_owned();
        }
        let layout = self.layout();
        let theta_sl = theta.as_slice().expect("contiguous theta");
        // per-layer deltas, batched once
        let mut deltas: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); layout.len()];
        let mut delta = cot.to_owned();
        for l in (0..layout.len()).rev() {
            deltas[l] = delta.clone();
            if l > 0 {
                let (w_off, _, n_in, n_out) = layout[l];
                let w =
                    ArrayView2::from_shape((n_out, n_in), &theta_sl[w_off..w_off + n_out * n_in])
                        .expect("weight view");
                let mut prev = Array2::<f64>::zeros((n, n_in));
                par::par_gemm(1.0, &delta.view(), &w.view(), 0.0, &mut prev.view_mut());
                prev *= &cache.masks[l - 1];
                delta = prev;
            }
        }
        // scatter per-sample outer products into rows
        let mut grads = Array2::<f64>::zeros((n, p));
        let tasks: Vec<(usize, ndarray::ArrayViewMut2<f64>)> = grads
            .axis_chunks_iter_mut(Axis(0), par::SUM_CHUNK)
            .enumerate()
            .collect();
        par::run_tasks(tasks, |_, (chunk_idx, mut rows)| {
            let base = chunk_idx * par::SUM_CHUNK;
            for r in 0..rows.nrows() {
                let i = base + r;
                let mut row = rows.row_mut(r);
                let row_sl = row.as_slice_mut().expect("contiguous row");
                for (l, &(w_off, b_off, n_in, n_out)) in layout.iter().enumerate() {
                    let d_i = deltas[l].row(i);
                    let in_i = cache.inputs[l].row(i);
                    for a in 0..n_out {
                        let da = d_i[a];
                        let dst = &mut row_sl[w_off + a * n_in..w_off + (a + 1) * n_in];
                        if da != 0.0 {
                            for (dv, &iv) in dst.iter_mut().zip(in_i.iter()) {
                                *dv = da * iv;
                            }
                        }
                        row_sl[b_off + a] = da;
                    }
                }
            }
        });
        grads
    }

    /// Parameter Jacobian at a single latent point as a `p x d` matrix;
    /// column `j` is the gradient of output coordinate `j`.
    pub fn jacobian_theta(
        &self,
        theta: &ArrayView1<f64>,
        z: &ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        self.check_theta(theta)?;
        self.check_latent(z.len())?;
        let d = self.output_dim();
        let p = self.param_count();
        if self.constant {
            return Ok(Array2::eye(d));
        }
        let batch = z.view().insert_axis(Axis(0)).to_owned();
        let (_, cache) = self.forward_batch(theta, &batch.view())?;
        let mut jac = Array2::<f64>::zeros((p, d));
        for j in 0..d {
            let mut cot = Array2::<f64>::zeros((1, d));
            cot[[0, j]] = 1.0;
            let col = self.vjp_theta(theta, &cache, &cot.view());
            jac.slice_mut(s![.., j]).assign(&col);
        }
        Ok(jac)
    }

    /// Matrix mass `Gamma_theta(z, z') = J_theta G(z)^T J_theta G(z')`.
    pub fn gamma_kernel(
        &self,
        theta: &ArrayView1<f64>,
        z: &ArrayView1<f64>,
        z2: &ArrayView1<f64>,
    ) -> Result<Array2<f64>> {
        let ja = self.jacobian_theta(theta, z)?;
        let jb = self.jacobian_theta(theta, z2)?;
        Ok(ja.t().dot(&jb))
    }

    /// Smallest absolute hidden pre-activation over the forward pass at `z`.
    pub fn min_abs_hidden_preactivation(
        &self,
        theta: &ArrayView1<f64>,
        z: &ArrayView1<f64>,
    ) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_latent(z.len())?;
        if self.constant || self.widths.len() <= 2 {
            return Ok(f64::INFINITY);
        }
        let layout = self.layout();
        let theta_sl = theta.as_slice().expect("contiguous theta");
        let mut min_abs = f64::INFINITY;
        let mut h = z.to_owned();
        for (l, &(w_off, b_off, n_in, n_out)) in layout.iter().enumerate() {
            let w = ArrayView2::from_shape((n_out, n_in), &theta_sl[w_off..w_off + n_out * n_in])
                .expect("weight view");
            let b = ArrayView1::from(&theta_sl[b_off..b_off + n_out]);
            let mut pre = w.dot(&h);
            pre += &b;
            if l + 1 < layout.len() {
                for v in pre.iter() {
                    min_abs = min_abs.min(v.abs());
                }
                pre.mapv_inplace(|v| v.max(0.0));
            }
            h = pre;
        }
        Ok(min_abs)
    }
}

/// Layer inputs and rectifier masks from a generator forward pass.
pub struct GenCache {
    inputs: Vec<Array2<f64>>,
    masks: Vec<Array2<f64>>,
    n: usize,
}

impl GenCache {
    pub fn batch_size(&self) -> usize {
        self.n
    }

    /// Copy out the cache rows for samples `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> GenCache {
        GenCache {
            inputs: self
                .inputs
                .iter()
                .map(|a| a.slice(s![start..end, ..]).to_owned())
                .collect(),
            masks: self
                .masks
                .iter()
                .map(|a| a.slice(s![start..end, ..]).to_owned())
                .collect(),
            n: end - start,
        }
    }
}

/// Seeded stream of standard-normal latent vectors.
pub struct LatentSampler {
    dim: usize,
    rng: ChaCha8Rng,
}

impl LatentSampler {
    pub fn new(dim: usize, seed: u64) -> Result<LatentSampler> {
        if dim == 0 {
            return Err(Error::InvalidConfig("latent dim must be >= 1".into()));
        }
        Ok(LatentSampler {
            dim,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Draw `n` latent vectors, advancing the stream.
    pub fn sample(&mut self, n: usize) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::EmptyBatch("latent sample"));
        }
        let mut out = Array2::<f64>::zeros((n, self.dim));
        for v in out.iter_mut() {
            *v = StandardNormal.sample(&mut self.rng);
        }
        Ok(out)
    }
}
