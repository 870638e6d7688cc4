//! The full batched loss graph for one optimization step.
//!
//! Original rays are rendered with spatial tangents so per-sample normals
//! stay differentiable. Flipped rays are built on the tape from the weighted
//! normals, resampled, rendered, and scored against their source pixels.
//! The peak index and the mask bits are read off the recorded values and
//! enter the graph as constants.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::field::{color_head, direction_encoding, encode, normals, trunk_forward, FieldConfig, FieldVars};
use crate::losses::{
    tape_bfc, tape_laplace_log_density, tape_mse, tape_nll, tape_orientation, tape_ue, total_loss,
    LossBreakdown, LossTerms,
};
use crate::rays::{argmax, mask_flipped, Ray, Vec3};
use crate::render::{expand_index, segment_sum, tape_weights};

/// Rays with their sample placement for one step.
#[derive(Clone, Debug)]
pub struct StepBatch {
    pub rays: Vec<Ray>,
    /// Sample distances, `R x M`.
    pub t: Array2<f64>,
    /// Sample intervals, `R x M`.
    pub delta: Array2<f64>,
    /// Bin offsets in `[0, 1)` for resampling flipped rays (`R x M`);
    /// midpoints when absent.
    pub flip_jitter: Option<Array2<f64>>,
    pub near: f64,
    pub far: f64,
}

impl StepBatch {
    pub fn samples(&self) -> usize {
        self.t.ncols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub lambdas: [f64; 6],
    pub eta: f64,
    pub tau_deg: f64,
    /// Master switch for flipped rays.
    pub flip: bool,
    /// Let flipped-ray losses reach the density field through the normals.
    pub normal_grad: bool,
    /// Compute normals even when no loss needs them.
    pub want_normals: bool,
}

impl LossSpec {
    pub fn flip_active(&self) -> bool {
        let l = &self.lambdas;
        self.flip && (l[1] > 0.0 || l[3] > 0.0 || l[4] > 0.0)
    }

    pub fn needs_normals(&self) -> bool {
        self.flip_active() || self.lambdas[5] > 0.0 || self.want_normals
    }
}

/// Discrete choices made while flipping; replaying them freezes the graph's
/// combinatorial structure (used for finite-difference checks).
#[derive(Clone, Debug, PartialEq)]
pub struct FlipDecisions {
    /// Source rays that produced a flipped ray.
    pub kept: Vec<usize>,
    /// Peak sample index of each kept source ray.
    pub peak: Vec<usize>,
}

/// Node handles for each loss term, in `TERM_NAMES` order.
#[derive(Clone, Debug)]
pub struct TermVars(pub [Option<Var>; 7]);

#[derive(Clone, Debug)]
pub struct StepStats {
    /// Flipped rays over source rays, when flipping ran.
    pub kept_fraction: Option<f64>,
    pub mean_rho: f64,
    /// Source rays with zero total weight.
    pub degenerate: Vec<usize>,
    /// Weighted normals (`R x 3`) when normals were computed.
    pub n_hat: Option<Array2<f64>>,
    /// Blending weights, `R x M`.
    pub weights: Array2<f64>,
    /// Composited colors, `R x 3`.
    pub c_hat: Array2<f64>,
}

pub struct LossGraph {
    pub total: Var,
    pub terms: TermVars,
    pub breakdown: LossBreakdown,
    pub decisions: Option<FlipDecisions>,
    pub stats: StepStats,
}

fn rows3(vs: impl Iterator<Item = Vec3>, n: usize) -> Array2<f64> {
    let data: Vec<f64> = vs.flat_map(|v| [v[0], v[1], v[2]]).collect();
    Array2::from_shape_vec((n, 3), data).expect("n x 3")
}

/// Rendered quantities of a ray set.
struct Rendered {
    w: Var,
    w_col: Var,
    c_hat: Var,
    ell: Var,
    rho: Var,
    bottleneck: Var,
    keep: Vec<usize>,
}

fn render_rays(
    tape: &mut Tape,
    vars: &FieldVars,
    cfg: &FieldConfig,
    trunk: crate::field::TrunkOutput,
    dir_enc: Var,
    delta: &Array2<f64>,
    gt: Var,
) -> Rendered {
    let (r, m) = delta.dim();
    let head = color_head(tape, vars, cfg, trunk.bottleneck, dir_enc);
    let delta_col = tape.constant(delta.clone().into_shape_with_order((r * m, 1)).expect("col"));
    let optical = tape.mul(trunk.sigma, delta_col);
    let optical = tape.reshape(optical, r, m);
    let w = tape_weights(tape, optical);
    let w_col = tape.reshape(w, r * m, 1);
    let wmu = tape.mul(w_col, head.mu);
    let c_hat = segment_sum(tape, wmu, m);
    let gt_exp = tape.gather_rows(gt, &expand_index(r, m));
    let ell = tape_laplace_log_density(tape, head.mu, trunk.beta, gt_exp);
    let ell = tape.reshape(ell, r, m);
    let beta_sum = segment_sum(tape, trunk.beta, m);
    let rho = tape.sum_cols(beta_sum);
    let rho = tape.scale(rho, 1.0 / 3.0);
    let wb = tape.mul(w_col, trunk.bottleneck);
    let bottleneck = segment_sum(tape, wb, m);
    let wv = tape.value(w);
    let keep = (0..r).filter(|&i| wv.row(i).sum() > 0.0).collect();
    Rendered {
        w,
        w_col,
        c_hat,
        ell,
        rho,
        bottleneck,
        keep,
    }
}

/// Records the complete loss for `batch` on `tape`.
pub fn build_loss(
    tape: &mut Tape,
    vars: &FieldVars,
    cfg: &FieldConfig,
    batch: &StepBatch,
    spec: &LossSpec,
    frozen: Option<&FlipDecisions>,
) -> Result<LossGraph> {
    let rays = &batch.rays;
    let (r, m) = batch.t.dim();
    if rays.len() != r || batch.delta.dim() != (r, m) || r == 0 || m == 0 {
        return Err(Error::Contract(format!(
            "batch of {} rays does not match {r} x {m} samples",
            rays.len()
        )));
    }
    let positions = Array2::from_shape_fn((r * m, 3), |(i, k)| {
        let ray = &rays[i / m];
        ray.o[k] + batch.t[[i / m, i % m]] * ray.d[k]
    });
    let x = tape.constant(positions);
    let with_normals = spec.needs_normals();
    let trunk = trunk_forward(tape, vars, cfg, x, with_normals)?;
    let d_hat: Vec<[f64; 3]> = rays.iter().map(|ray| ray.d_hat.into()).collect();
    let dir_enc = direction_encoding(tape, &d_hat, cfg.l_dir);
    let dir_enc = tape.gather_rows(dir_enc, &expand_index(r, m));
    let gt = tape.constant(rows3(rays.iter().map(|ray| ray.gt_color), r));
    let orig = render_rays(tape, vars, cfg, trunk, dir_enc, &batch.delta, gt);

    let mse = tape_mse(tape, orig.c_hat, gt);
    let nll = tape_nll(tape, orig.w, orig.ell, &orig.keep);
    let ue = tape_ue(tape, orig.w, orig.rho, spec.eta);
    let mut terms: [Option<Var>; 7] = [Some(mse), Some(nll), None, Some(ue), None, None, None];

    let mut n_hat = None;
    let mut n_hat_value = None;
    if let Some(grad) = trunk.grad_sigma {
        let n = normals(tape, grad, cfg.normal_eps);
        let dhat_exp = tape.constant(rows3(
            (0..r * m).map(|i| rays[i / m].d_hat),
            r * m,
        ));
        let nd = tape.mul(n, dhat_exp);
        let cos = tape.sum_cols(nd);
        terms[6] = Some(tape_orientation(tape, orig.w_col, cos, r));
        let wn = tape.mul(orig.w_col, n);
        let nh = segment_sum(tape, wn, m);
        n_hat_value = Some(tape.value(nh).clone());
        n_hat = Some(nh);
    }

    let mut decisions = None;
    let mut kept_fraction = None;
    if spec.flip_active() {
        let nh = n_hat.expect("flipping computes normals");
        let chosen = match frozen {
            Some(f) => f.clone(),
            None => decide(tape, orig.w, nh, rays, spec.tau_deg),
        };
        kept_fraction = Some(chosen.kept.len() as f64 / r as f64);
        let (nll_f, ue_f, bfc) = flipped_terms(tape, vars, cfg, batch, spec, &orig, nh, &chosen)?;
        terms[2] = Some(nll_f);
        terms[4] = Some(ue_f);
        terms[5] = Some(bfc);
        decisions = Some(chosen);
    }

    let value = |v: Option<Var>, tape: &Tape| v.map_or(0.0, |v| tape.scalar_value(v));
    let loss_terms = LossTerms {
        mse: value(terms[0], tape),
        nll: value(terms[1], tape),
        nll_flipped: value(terms[2], tape),
        ue: value(terms[3], tape),
        ue_flipped: value(terms[4], tape),
        bfc: value(terms[5], tape),
        orientation: value(terms[6], tape),
    };
    let breakdown = total_loss(loss_terms, &spec.lambdas);

    let mut total = mse;
    for (k, lambda) in spec.lambdas.iter().enumerate() {
        if *lambda != 0.0 {
            if let Some(term) = terms[k + 1] {
                let weighted = tape.scale(term, *lambda);
                total = tape.add(total, weighted);
            }
        }
    }
    if !tape.scalar_value(total).is_finite() {
        return Err(non_finite_report(tape, &orig, &loss_terms));
    }

    let w_value = tape.value(orig.w).clone();
    let degenerate = (0..r).filter(|i| !orig.keep.contains(i)).collect();
    Ok(LossGraph {
        total,
        terms: TermVars(terms),
        breakdown,
        decisions,
        stats: StepStats {
            kept_fraction,
            mean_rho: tape.value(orig.rho).mean().unwrap_or(0.0),
            degenerate,
            n_hat: n_hat_value,
            weights: w_value,
            c_hat: tape.value(orig.c_hat).clone(),
        },
    })
}

fn decide(tape: &Tape, w: Var, n_hat: Var, rays: &[Ray], tau_deg: f64) -> FlipDecisions {
    let wv = tape.value(w);
    let nv = tape.value(n_hat);
    let mut out = FlipDecisions {
        kept: Vec::new(),
        peak: Vec::new(),
    };
    for (i, ray) in rays.iter().enumerate() {
        let Some(s) = argmax(wv.row(i).as_slice().expect("contiguous")) else {
            continue;
        };
        let n = Vec3::new(nv[[i, 0]], nv[[i, 1]], nv[[i, 2]]);
        if mask_flipped(&ray.d_hat, &n, tau_deg) {
            out.kept.push(i);
            out.peak.push(s);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn flipped_terms(
    tape: &mut Tape,
    vars: &FieldVars,
    cfg: &FieldConfig,
    batch: &StepBatch,
    spec: &LossSpec,
    orig: &Rendered,
    n_hat: Var,
    chosen: &FlipDecisions,
) -> Result<(Var, Var, Var)> {
    let k = chosen.kept.len();
    if k == 0 {
        let z = tape.scalar(0.0);
        return Ok((z, z, z));
    }
    let m = batch.samples();
    let rays = &batch.rays;
    let mut nk = tape.gather_rows(n_hat, &chosen.kept);
    if !spec.normal_grad {
        nk = tape.detach(nk);
    }
    let d = tape.constant(rows3(chosen.kept.iter().map(|&i| rays[i].d), k));
    let dn = tape.mul(d, nk);
    let dot = tape.sum_cols(dn);
    let proj = tape.mul(dot, nk);
    let proj = tape.scale(proj, 2.0);
    let d_prime = tape.sub(proj, d);

    let t_s: Vec<f64> = chosen
        .kept
        .iter()
        .zip(&chosen.peak)
        .map(|(&i, &s)| batch.t[[i, s]])
        .collect();
    let p_s = tape.constant(rows3(
        chosen.kept.iter().zip(&t_s).map(|(&i, &t)| rays[i].at(t)),
        k,
    ));
    let t_s_col = tape.constant(Array2::from_shape_vec((k, 1), t_s).expect("k x 1"));
    let shift = tape.mul(t_s_col, d_prime);
    let o_prime = tape.sub(p_s, shift);

    let width = (batch.far - batch.near) / m as f64;
    let mut t_f = Array2::zeros((k, m));
    for (row, &i) in chosen.kept.iter().enumerate() {
        for j in 0..m {
            let u = batch.flip_jitter.as_ref().map_or(0.5, |jit| jit[[i, j]]);
            t_f[[row, j]] = batch.near + (j as f64 + u) * width;
        }
    }
    let delta_f = Array2::from_shape_fn((k, m), |(row, j)| {
        if j + 1 < m {
            t_f[[row, j + 1]] - t_f[[row, j]]
        } else {
            batch.far - t_f[[row, j]]
        }
    });
    let idx = expand_index(k, m);
    let o_exp = tape.gather_rows(o_prime, &idx);
    let d_exp = tape.gather_rows(d_prime, &idx);
    let t_col = tape.constant(t_f.into_shape_with_order((k * m, 1)).expect("col"));
    let step = tape.mul(t_col, d_exp);
    let x_f = tape.add(o_exp, step);

    let d_hat = tape.normalize_rows(d_prime, cfg.normal_eps);
    let enc = encode(tape, d_hat, cfg.l_dir);
    let enc = tape.gather_rows(enc, &idx);
    let trunk = trunk_forward(tape, vars, cfg, x_f, false)?;
    let gt = tape.constant(rows3(chosen.kept.iter().map(|&i| rays[i].gt_color), k));
    let flipped = render_rays(tape, vars, cfg, trunk, enc, &delta_f, gt);

    let nll = tape_nll(tape, flipped.w, flipped.ell, &flipped.keep);
    let ue = tape_ue(tape, flipped.w, flipped.rho, spec.eta);
    let b = tape.gather_rows(orig.bottleneck, &chosen.kept);
    let bfc = tape_bfc(tape, b, flipped.bottleneck);
    Ok((nll, ue, bfc))
}

fn non_finite_report(tape: &Tape, orig: &Rendered, terms: &LossTerms) -> Error {
    let c = tape.value(orig.c_hat);
    let ell = tape.value(orig.ell);
    let rho = tape.value(orig.rho);
    let bad: Vec<usize> = (0..c.nrows())
        .filter(|&i| {
            !c.row(i).iter().all(|v| v.is_finite())
                || !ell.row(i).iter().all(|v| v.is_finite())
                || !rho[[i, 0]].is_finite()
        })
        .collect();
    Error::NonFinite(format!("loss (terms {:?}); offending rays {bad:?}", terms.as_array()))
}
