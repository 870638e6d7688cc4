//! Volume rendering quadrature and the per-ray Laplacian mixture.

use ndarray::Array2;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::field::{color_head, direction_encoding, trunk_forward, FieldParams};
use crate::field::normal_from_gradient;
use crate::rays::{argmax, sample_distances, Ray, SampleSet, Vec3};

/// Blending weights `w` and transmittances `T` (with `T_1 = 1`).
pub fn blending_weights(sigma: &[f64], delta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if sigma.len() != delta.len() {
        return Err(Error::Contract(format!(
            "{} densities but {} intervals",
            sigma.len(),
            delta.len()
        )));
    }
    if sigma.iter().chain(delta).any(|&v| !(v >= 0.0)) {
        return Err(Error::Contract("densities and intervals must be nonnegative".into()));
    }
    let mut optical = 0.0f64;
    let mut w = Vec::with_capacity(sigma.len());
    let mut trans = Vec::with_capacity(sigma.len());
    for (&s, &d) in sigma.iter().zip(delta) {
        let t = (-optical).exp();
        let sd = s * d;
        trans.push(t);
        w.push(t * -(-sd).exp_m1());
        optical += sd;
    }
    Ok((w, trans))
}

/// Transmittance past the last sample.
pub fn final_transmittance(sigma: &[f64], delta: &[f64]) -> f64 {
    let optical: f64 = sigma.iter().zip(delta).map(|(s, d)| s * d).sum();
    (-optical).exp()
}

pub fn composite(w: &[f64], values: &[f64]) -> f64 {
    w.iter().zip(values).map(|(a, b)| a * b).sum()
}

/// `sum w_i v_i`; normals composited this way are left unnormalized.
pub fn composite3(w: &[f64], values: &[Vec3]) -> Vec3 {
    w.iter().zip(values).fold(Vec3::zeros(), |acc, (a, v)| acc + v * *a)
}

/// `w / sum w`, or `None` when every weight is zero.
pub fn mixture_coefficients(w: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    Some(w.iter().map(|v| v / total).collect())
}

/// Log density of `c` under a product-over-channels Laplacian component.
pub fn laplace_log_density(mu: &Vec3, beta: &Vec3, c: &Vec3) -> f64 {
    (0..3)
        .map(|k| -(2.0 * beta[k]).ln() - (c[k] - mu[k]).abs() / beta[k])
        .sum()
}

/// `log sum_i pi_i prod_ch Laplace(c; mu_i, beta_i)` via log-sum-exp.
pub fn mixture_log_pdf(pi: &[f64], mu: &[Vec3], beta: &[Vec3], c: &Vec3) -> f64 {
    let terms: Vec<f64> = pi
        .iter()
        .zip(mu.iter().zip(beta))
        .filter(|(&p, _)| p > 0.0)
        .map(|(p, (m, b))| p.ln() + laplace_log_density(m, b, c))
        .collect();
    log_sum_exp(&terms)
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// `(1/3) sum_ch sum_i beta_i^ch`.
pub fn ray_uncertainty(beta: &[Vec3]) -> f64 {
    beta.iter().map(|b| b.sum()).sum::<f64>() / 3.0
}

/// Everything rendered along one ray.
#[derive(Clone, Debug)]
pub struct RayRender {
    pub w: Vec<f64>,
    pub trans: Vec<f64>,
    pub c_hat: Vec3,
    pub depth: f64,
    pub n_hat: Vec3,
    /// `None` when the ray has no weight anywhere.
    pub pi: Option<Vec<f64>>,
    pub rho: f64,
    pub acc: f64,
    pub sigma: Vec<f64>,
    pub mu: Vec<Vec3>,
    pub beta: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub bottleneck: Vec<Vec<f64>>,
}

impl RayRender {
    pub fn log_pdf(&self, c: &Vec3) -> Option<f64> {
        self.pi.as_ref().map(|pi| mixture_log_pdf(pi, &self.mu, &self.beta, c))
    }

    /// Composited bottleneck `sum w_i b_i`.
    pub fn composited_bottleneck(&self) -> Vec<f64> {
        let dim = self.bottleneck.first().map_or(0, |b| b.len());
        let mut out = vec![0.0; dim];
        for (w, b) in self.w.iter().zip(&self.bottleneck) {
            for (o, v) in out.iter_mut().zip(b) {
                *o += w * v;
            }
        }
        out
    }
}

/// Per-sample quantities from any field.
pub struct SampleValues {
    pub sigma: Vec<f64>,
    pub mu: Vec<Vec3>,
    pub beta: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub bottleneck: Vec<Vec<f64>>,
}

pub fn assemble(samples: &SampleSet, values: SampleValues) -> Result<RayRender> {
    let (w, trans) = blending_weights(&values.sigma, &samples.delta)?;
    let acc = w.iter().sum();
    Ok(RayRender {
        c_hat: composite3(&w, &values.mu),
        depth: composite(&w, &samples.t),
        n_hat: composite3(&w, &values.normals),
        pi: mixture_coefficients(&w),
        rho: ray_uncertainty(&values.beta),
        acc,
        w,
        trans,
        sigma: values.sigma,
        mu: values.mu,
        beta: values.beta,
        normals: values.normals,
        bottleneck: values.bottleneck,
    })
}

/// Renders an analytic field `f(x) -> (sigma, color)`; scales are fixed at
/// `beta` and normals are zero.
pub fn render_analytic(
    samples: &SampleSet,
    beta: f64,
    f: impl Fn(&Vec3) -> (f64, Vec3),
) -> Result<RayRender> {
    let (sigma, mu): (Vec<f64>, Vec<Vec3>) = samples.x.iter().map(&f).unzip();
    let m = samples.len();
    assemble(
        samples,
        SampleValues {
            sigma,
            mu,
            beta: vec![Vec3::repeat(beta); m],
            normals: vec![Vec3::zeros(); m],
            bottleneck: vec![Vec::new(); m],
        },
    )
}

/// Renders the network field along `ray` at `samples`.
pub fn render_ray(params: &FieldParams, ray: &Ray, samples: &SampleSet) -> Result<RayRender> {
    let cfg = &params.config;
    let m = samples.len();
    let mut tape = Tape::new();
    let vars = params.record_frozen(&mut tape);
    let x = Array2::from_shape_fn((m, 3), |(i, k)| samples.x[i][k]);
    let x = tape.constant(x);
    let trunk = trunk_forward(&mut tape, &vars, cfg, x, true)?;
    let dirs = direction_encoding(&mut tape, &[ray.d_hat.into()], cfg.l_dir);
    let head = color_head(&mut tape, &vars, cfg, trunk.bottleneck, dirs);
    let rows3 = |v: &Array2<f64>| -> Vec<Vec3> {
        v.rows().into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()
    };
    let grad = tape.value(trunk.grad_sigma.expect("requested"));
    let normals = grad
        .rows()
        .into_iter()
        .map(|g| {
            let (n, _) = crate::field::normal_from_gradient([g[0], g[1], g[2]], cfg.normal_eps);
            Vec3::from(n)
        })
        .collect();
    assemble(
        samples,
        SampleValues {
            sigma: tape.value(trunk.sigma).iter().cloned().collect(),
            mu: rows3(tape.value(head.mu)),
            beta: rows3(tape.value(trunk.beta)),
            normals,
            bottleneck: tape
                .value(trunk.bottleneck)
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
        },
    )
}

/// Frozen-network rendering of one ray at bin midpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct RayEval {
    pub c_hat: Vec3,
    /// Expected Euclidean distance from the origin.
    pub depth: f64,
    pub acc: f64,
    /// Weighted normal; zero unless normals were requested.
    pub n_hat: Vec3,
    pub has_peak: bool,
    /// `sum_i w_i * mean(beta_i)`.
    pub spread: f64,
    /// Root mean channel variance of the color mixture.
    pub rgb_std: f64,
    /// Standard deviation of distance under the mixture coefficients.
    pub depth_std: f64,
}

const EVAL_CHUNK: usize = 512;

/// Renders `rays` with `m` midpoint samples over `[near, far]`. Chunks run
/// on the rayon pool and results keep the input order.
pub fn eval_rays(
    params: &FieldParams,
    rays: &[Ray],
    near: f64,
    far: f64,
    m: usize,
    with_normals: bool,
) -> Result<Vec<RayEval>> {
    let (t, delta) = sample_distances(near, far, m, None)?;
    let chunks: Vec<Vec<RayEval>> = rays
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| eval_chunk(params, chunk, &t, &delta, with_normals))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn eval_chunk(
    params: &FieldParams,
    rays: &[Ray],
    t: &[f64],
    delta: &[f64],
    with_normals: bool,
) -> Result<Vec<RayEval>> {
    let cfg = &params.config;
    let (r, m) = (rays.len(), t.len());
    let mut tape = Tape::new();
    let vars = params.record_frozen(&mut tape);
    let x = Array2::from_shape_fn((r * m, 3), |(i, k)| rays[i / m].o[k] + t[i % m] * rays[i / m].d[k]);
    let x = tape.constant(x);
    let trunk = trunk_forward(&mut tape, &vars, cfg, x, with_normals)?;
    let d_hat: Vec<[f64; 3]> = rays.iter().map(|ray| ray.d_hat.into()).collect();
    let dirs = direction_encoding(&mut tape, &d_hat, cfg.l_dir);
    let dirs = tape.gather_rows(dirs, &expand_index(r, m));
    let head = color_head(&mut tape, &vars, cfg, trunk.bottleneck, dirs);
    let sigma = tape.value(trunk.sigma);
    let mu = tape.value(head.mu);
    let beta = tape.value(trunk.beta);
    let grad = trunk.grad_sigma.map(|g| tape.value(g));
    let mut out = Vec::with_capacity(r);
    for (i, ray) in rays.iter().enumerate() {
        let rows = i * m..(i + 1) * m;
        let sig: Vec<f64> = rows.clone().map(|k| sigma[[k, 0]]).collect();
        let (w, _) = blending_weights(&sig, delta)?;
        let scale = ray.d.norm();
        let acc: f64 = w.iter().sum();
        let mut c_hat = Vec3::zeros();
        let mut n_hat = Vec3::zeros();
        let (mut depth, mut spread) = (0.0, 0.0);
        for (j, k) in rows.clone().enumerate() {
            let mu_k = Vec3::new(mu[[k, 0]], mu[[k, 1]], mu[[k, 2]]);
            c_hat += mu_k * w[j];
            depth += w[j] * t[j] * scale;
            spread += w[j] * (beta[[k, 0]] + beta[[k, 1]] + beta[[k, 2]]) / 3.0;
            if let Some(g) = grad {
                let (n, _) = normal_from_gradient([g[[k, 0]], g[[k, 1]], g[[k, 2]]], cfg.normal_eps);
                n_hat += Vec3::from(n) * w[j];
            }
        }
        let (rgb_std, depth_std) = match mixture_coefficients(&w) {
            None => (0.0, 0.0),
            Some(pi) => {
                let mut var = 0.0;
                for c in 0..3 {
                    let mean: f64 = rows.clone().zip(&pi).map(|(k, p)| p * mu[[k, c]]).sum();
                    let second: f64 = rows
                        .clone()
                        .zip(&pi)
                        .map(|(k, p)| p * (2.0 * beta[[k, c]] * beta[[k, c]] + mu[[k, c]] * mu[[k, c]]))
                        .sum();
                    var += (second - mean * mean).max(0.0) / 3.0;
                }
                let dm: f64 = pi.iter().zip(t).map(|(p, tj)| p * tj * scale).sum();
                let dv: f64 = pi.iter().zip(t).map(|(p, tj)| p * (tj * scale - dm).powi(2)).sum();
                (var.sqrt(), dv.sqrt())
            }
        };
        out.push(RayEval {
            c_hat,
            depth,
            acc,
            n_hat,
            has_peak: argmax(&w).is_some(),
            spread,
            rgb_std,
            depth_std,
        });
    }
    Ok(out)
}

/// Blending weights (`R x M`) from optical thicknesses `sigma * delta`
/// (`R x M`). The exclusive running sum is a product with a constant
/// strictly upper-triangular matrix.
pub fn tape_weights(tape: &mut Tape, optical: Var) -> Var {
    let m = tape.shape(optical).1;
    let upper = tape.constant(Array2::from_shape_fn((m, m), |(j, i)| if j < i { 1.0 } else { 0.0 }));
    let before = tape.matmul(optical, upper);
    let neg_before = tape.neg(before);
    let trans = tape.exp(neg_before);
    let neg = tape.neg(optical);
    let keep = tape.exp(neg);
    let keep = tape.neg(keep);
    let alpha = tape.add_scalar(keep, 1.0);
    tape.mul(trans, alpha)
}

/// Sums consecutive groups of `m` rows of `v` (`RM x C`), giving `R x C`.
pub fn segment_sum(tape: &mut Tape, v: Var, m: usize) -> Var {
    let (rows, c) = tape.shape(v);
    let r = rows / m;
    let wide = tape.reshape(v, r, m * c);
    let select = tape.constant(Array2::from_shape_fn((m * c, c), |(i, k)| {
        if i % c == k {
            1.0
        } else {
            0.0
        }
    }));
    tape.matmul(wide, select)
}

/// Row indices repeating each of `r` rows `m` times.
pub fn expand_index(r: usize, m: usize) -> Vec<usize> {
    (0..r).flat_map(|i| std::iter::repeat(i).take(m)).collect()
}
