//! Training objectives: photometric error, mixture likelihood, orientation,
//! (uncertainty-aware) emptiness and bottleneck feature consistency.
//!
//! Scalar versions operate on one ray; the `tape_*` versions operate on a
//! whole batch recorded on a [`Tape`].

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::rays::Vec3;
use crate::render::RayRender;

/// Smallest value fed to a logarithm; only reached through underflow.
pub const LOG_FLOOR: f64 = 1e-300;

/// `sum_r |c_hat - c_gt|^2`.
pub fn mse_loss(c_hat: &[Vec3], c_gt: &[Vec3]) -> f64 {
    c_hat.iter().zip(c_gt).map(|(a, b)| (a - b).norm_squared()).sum()
}

/// Mean negative log-likelihood over rays with nonzero weight. The flag is
/// set when every ray was degenerate (the loss is then zero).
pub fn nll_loss(renders: &[RayRender], c_gt: &[Vec3]) -> (f64, bool) {
    let lps: Vec<f64> = renders
        .iter()
        .zip(c_gt)
        .filter_map(|(r, c)| r.log_pdf(c))
        .collect();
    if lps.is_empty() {
        return (0.0, true);
    }
    (-lps.iter().sum::<f64>() / lps.len() as f64, false)
}

/// `sum_i w_i max(0, n_i . d_hat)^2`.
pub fn orientation_loss(w: &[f64], normals: &[Vec3], d_hat: &Vec3) -> f64 {
    w.iter()
        .zip(normals)
        .map(|(wi, n)| wi * n.dot(d_hat).max(0.0).powi(2))
        .sum()
}

/// `(1/M) sum_i log(1 + eta w_i)`.
pub fn emptiness_loss(w: &[f64], eta: f64) -> f64 {
    w.iter().map(|&wi| (eta * wi).ln_1p()).sum::<f64>() / w.len() as f64
}

/// `(1/M) sum_i log(1 + rho eta w_i)`.
pub fn ue_loss(w: &[f64], rho: f64, eta: f64) -> f64 {
    w.iter().map(|&wi| (rho * eta * wi).ln_1p()).sum::<f64>() / w.len() as f64
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn kl_to_mixture(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .map(|(&pi, &mi)| if pi == 0.0 { 0.0 } else { pi * (pi.ln() - mi.ln()) })
        .sum()
}

/// Jensen-Shannon divergence (natural log) between the softmaxes of two
/// features. Rounding is clamped into `[0, ln 2]`.
pub fn bfc_loss(b: &[f64], b_prime: &[f64]) -> f64 {
    let p: Vec<f64> = log_softmax(b).iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = log_softmax(b_prime).iter().map(|v| v.exp()).collect();
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, c)| (a + c) / 2.0).collect();
    let jsd = 0.5 * kl_to_mixture(&p, &m) + 0.5 * kl_to_mixture(&q, &m);
    jsd.clamp(0.0, std::f64::consts::LN_2)
}

pub const TERM_NAMES: [&str; 7] = [
    "mse",
    "nll",
    "nll_flipped",
    "ue",
    "ue_flipped",
    "bfc",
    "orientation",
];

/// Unweighted loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    /// Batch-mean squared error.
    pub mse: f64,
    pub nll: f64,
    pub nll_flipped: f64,
    pub ue: f64,
    pub ue_flipped: f64,
    pub bfc: f64,
    pub orientation: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.mse,
            self.nll,
            self.nll_flipped,
            self.ue,
            self.ue_flipped,
            self.bfc,
            self.orientation,
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    /// Contributions in [`TERM_NAMES`] order; the first has weight one.
    pub weighted: [f64; 7],
    pub total: f64,
}

/// `mse + sum_k lambda_k term_k`.
pub fn total_loss(terms: LossTerms, lambdas: &[f64; 6]) -> LossBreakdown {
    let raw = terms.as_array();
    let mut weighted = [0.0; 7];
    weighted[0] = raw[0];
    for k in 0..6 {
        weighted[k + 1] = lambdas[k] * raw[k + 1];
    }
    let total = weighted.iter().sum();
    LossBreakdown {
        terms,
        weighted,
        total,
    }
}

/// `sum(|c_hat - gt|^2) / R` for `R x 3` inputs.
pub fn tape_mse(tape: &mut Tape, c_hat: Var, gt: Var) -> Var {
    let r = tape.shape(c_hat).0.max(1);
    let diff = tape.sub(c_hat, gt);
    let sq = tape.square(diff);
    let s = tape.sum(sq);
    tape.scale(s, 1.0 / r as f64)
}

/// Per-sample Laplacian log density `sum_ch -log(2 beta) - |c - mu| / beta`
/// for `N x 3` inputs, giving `N x 1`.
pub fn tape_laplace_log_density(tape: &mut Tape, mu: Var, beta: Var, c: Var) -> Var {
    let two_beta = tape.scale(beta, 2.0);
    let log_norm = tape.ln(two_beta);
    let diff = tape.sub(c, mu);
    let dist = tape.abs(diff);
    let z = tape.div(dist, beta);
    let both = tape.add(log_norm, z);
    let s = tape.sum_cols(both);
    tape.neg(s)
}

/// Mixture log-likelihood per ray (`R x 1`) from weights `w` and component
/// log densities `ell`, both `R x M`. Rows with zero total weight must be
/// removed by the caller.
pub fn tape_mixture_log_pdf(tape: &mut Tape, w: Var, ell: Var) -> Var {
    let floor = tape.scalar(LOG_FLOOR);
    let wf = tape.max(w, floor);
    let log_w = tape.ln(wf);
    let a = tape.add(ell, log_w);
    let shift = row_max(tape, a);
    let centered = tape.sub(a, shift);
    let e = tape.exp(centered);
    let s = tape.sum_cols(e);
    let lse = tape.ln(s);
    let lse = tape.add(lse, shift);
    let total = tape.sum_cols(w);
    let log_total = tape.ln(total);
    tape.sub(lse, log_total)
}

/// Per-row maximum as a constant `R x 1` node.
pub fn row_max(tape: &mut Tape, a: Var) -> Var {
    let v = tape.value(a);
    let m = Array2::from_shape_fn((v.nrows(), 1), |(r, _)| {
        v.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    });
    tape.constant(m)
}

/// Mean negative log-likelihood over the rows listed in `keep`.
pub fn tape_nll(tape: &mut Tape, w: Var, ell: Var, keep: &[usize]) -> Var {
    if keep.is_empty() {
        return tape.scalar(0.0);
    }
    let w = tape.gather_rows(w, keep);
    let ell = tape.gather_rows(ell, keep);
    let lp = tape_mixture_log_pdf(tape, w, ell);
    let m = tape.mean(lp);
    tape.neg(m)
}

/// Batch mean of `(1/M) sum_i log(1 + rho eta w_i)`; `rho` is `R x 1`.
pub fn tape_ue(tape: &mut Tape, w: Var, rho: Var, eta: f64) -> Var {
    let (r, m) = tape.shape(w);
    if r == 0 {
        return tape.scalar(0.0);
    }
    let rw = tape.mul(w, rho);
    let x = tape.scale(rw, eta);
    let l = tape.ln_1p(x);
    let s = tape.sum(l);
    tape.scale(s, 1.0 / (r * m) as f64)
}

/// Batch mean of per-ray `sum_i w_i relu(n_i . d_hat)^2`.
///
/// `w_col` and `cos` are `RM x 1` (ray-major), `rays` is `R`.
pub fn tape_orientation(tape: &mut Tape, w_col: Var, cos: Var, rays: usize) -> Var {
    let pos = tape.relu(cos);
    let sq = tape.square(pos);
    let weighted = tape.mul(w_col, sq);
    let s = tape.sum(weighted);
    tape.scale(s, 1.0 / rays.max(1) as f64)
}

/// Row-wise log-softmax.
pub fn tape_log_softmax(tape: &mut Tape, z: Var) -> Var {
    let shift = row_max(tape, z);
    let c = tape.sub(z, shift);
    let e = tape.exp(c);
    let s = tape.sum_cols(e);
    let ls = tape.ln(s);
    tape.sub(c, ls)
}

/// Mean Jensen-Shannon divergence between row-wise softmaxes of `b` and
/// `b_prime`.
pub fn tape_bfc(tape: &mut Tape, b: Var, b_prime: Var) -> Var {
    if tape.shape(b).0 == 0 {
        return tape.scalar(0.0);
    }
    let lp = tape_log_softmax(tape, b);
    let lq = tape_log_softmax(tape, b_prime);
    let p = tape.exp(lp);
    let q = tape.exp(lq);
    let pq = tape.add(p, q);
    let m = tape.scale(pq, 0.5);
    let floor = tape.scalar(LOG_FLOOR);
    let m = tape.max(m, floor);
    let lm = tape.ln(m);
    let dp = tape.sub(lp, lm);
    let dq = tape.sub(lq, lm);
    let kp = tape.mul(p, dp);
    let kq = tape.mul(q, dq);
    let both = tape.add(kp, kq);
    let s = tape.sum(both);
    let rows = tape.shape(b).0;
    tape.scale(s, 0.5 / rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render_analytic;
    use crate::rays::{stratified_sample, Ray};

    #[test]
    fn mse_examples() {
        let a = Vec3::new(0.3, 0.2, 0.1);
        assert_eq!(mse_loss(&[a], &[a]), 0.0);
        let e = Vec3::new(0.1, 0.0, 0.0);
        let single = mse_loss(&[a + e], &[a]);
        assert!((single - 0.01).abs() < 1e-15);
        assert_eq!(mse_loss(&[a + e, a + e], &[a, a]), 2.0 * single);
    }

    fn point_mass(mu: Vec3, beta: f64) -> RayRender {
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), Vec3::zeros()).unwrap();
        let s = stratified_sample(&ray, 0.0, 1.0, 1, None).unwrap();
        render_analytic(&s, beta, |_| (5.0, mu)).unwrap()
    }

    #[test]
    fn nll_examples() {
        let c = Vec3::new(0.4, 0.5, 0.6);
        assert_eq!(nll_loss(&[point_mass(c, 0.5)], &[c]).0, 0.0);
        let small = nll_loss(&[point_mass(c, 0.3)], &[c]).0;
        let large = nll_loss(&[point_mass(c, 0.6)], &[c]).0;
        assert!(large > small);
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), Vec3::zeros()).unwrap();
        let s = stratified_sample(&ray, 0.0, 1.0, 2, None).unwrap();
        let empty = render_analytic(&s, 0.5, |_| (0.0, c)).unwrap();
        assert_eq!(nll_loss(&[empty], &[c]), (0.0, true));
    }

    #[test]
    fn orientation_examples() {
        let d = Vec3::new(0.0, 0.0, -1.0);
        assert_eq!(orientation_loss(&[0.5, 0.5], &[Vec3::z(), Vec3::z()], &d), 0.0);
        assert_eq!(orientation_loss(&[1.0], &[d], &d), 1.0);
        assert_eq!(orientation_loss(&[1.0], &[Vec3::x()], &d), 0.0);
    }

    #[test]
    fn emptiness_and_ue_examples() {
        assert_eq!(emptiness_loss(&[0.0; 3], 100.0), 0.0);
        let eta = std::f64::consts::E - 1.0;
        assert_eq!(emptiness_loss(&[1.0], eta), eta.ln_1p());
        let w = [0.1, 0.0, 0.4];
        assert!(emptiness_loss(&w, 200.0) > emptiness_loss(&w, 100.0));
        assert_eq!(ue_loss(&w, 0.0, 100.0), 0.0);
        assert_eq!(ue_loss(&w, 1.0, 100.0), emptiness_loss(&w, 100.0));
        assert!(ue_loss(&w, 2.0, 100.0) > ue_loss(&w, 1.5, 100.0));
    }

    #[test]
    fn bfc_examples() {
        let b = [0.3, -1.2, 2.0, 0.0];
        assert_eq!(bfc_loss(&b, &b), 0.0);
        let jsd = bfc_loss(&[40.0, -40.0], &[-40.0, 40.0]);
        assert!((jsd - std::f64::consts::LN_2).abs() < 1e-6);
        let c = [1.0, 0.5, -0.5, 3.0];
        assert_eq!(bfc_loss(&b, &c).to_bits(), bfc_loss(&c, &b).to_bits());
    }

    #[test]
    fn total_examples() {
        let terms = LossTerms {
            mse: 0.25,
            nll: 1.0,
            nll_flipped: 2.0,
            ue: 3.0,
            ue_flipped: 4.0,
            bfc: 0.1,
            orientation: 0.2,
        };
        assert_eq!(total_loss(terms, &[0.0; 6]).total, 0.25);
        let b = total_loss(terms, &[1.0, 0.5, 0.1, 0.01, 2.0, 3.0]);
        let expected = 0.25 + 1.0 + 1.0 + 0.3 + 0.04 + 0.2 + 0.6000000000000001;
        assert!((b.total - expected).abs() < 1e-10);
        assert_eq!(b.weighted.iter().sum::<f64>(), b.total);
    }
}
