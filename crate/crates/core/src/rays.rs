//! Rays, stratified sampling and flipped reflection rays.
//!
//! A flipped ray reflects the viewing direction about the weighted normal of
//! its source ray and is positioned so its `s`-th sample lands on the source
//! ray's peak-weight point. Under diffuse shading both rays see the same
//! surface color, so the flipped ray reuses the source pixel as its target.

use nalgebra::Vector3;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub o: Vec3,
    /// Possibly unnormalized direction.
    pub d: Vec3,
    pub d_hat: Vec3,
    pub is_flipped: bool,
    pub gt_color: Vec3,
}

impl Ray {
    pub fn new(o: Vec3, d: Vec3, gt_color: Vec3) -> Result<Self> {
        let n = d.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Contract(format!("ray direction must be nonzero, got {d:?}")));
        }
        Ok(Self {
            o,
            d,
            d_hat: d / n,
            is_flipped: false,
            gt_color,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.o + self.d * t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub x: Vec<Vec3>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// One distance per equal-width bin of `[near, far]`: uniform within the bin
/// when `rng` is given, else the bin midpoint.
pub fn sample_distances(
    near: f64,
    far: f64,
    m: usize,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(near >= 0.0) || !(near < far) || !far.is_finite() {
        return Err(Error::Contract(format!(
            "sampling bounds need 0 <= near < far, got [{near}, {far}]"
        )));
    }
    if m == 0 {
        return Err(Error::Contract("sample count must be at least 1".into()));
    }
    let width = (far - near) / m as f64;
    let t: Vec<f64> = (0..m)
        .map(|i| {
            let u = match rng.as_deref_mut() {
                Some(r) => r.gen::<f64>(),
                None => 0.5,
            };
            near + (i as f64 + u) * width
        })
        .collect();
    let delta = (0..m)
        .map(|i| if i + 1 < m { t[i + 1] - t[i] } else { far - t[i] })
        .collect();
    Ok((t, delta))
}

pub fn stratified_sample(
    ray: &Ray,
    near: f64,
    far: f64,
    m: usize,
    rng: Option<&mut dyn RngCore>,
) -> Result<SampleSet> {
    let (t, delta) = sample_distances(near, far, m, rng)?;
    let x = t.iter().map(|&ti| ray.at(ti)).collect();
    Ok(SampleSet { t, delta, x })
}

/// `2 (d . n) n - d`, with `n` used as given.
pub fn flip_direction(d: &Vec3, n_hat: &Vec3) -> Vec3 {
    n_hat * (2.0 * d.dot(n_hat)) - d
}

/// Peak-weight sample `(s, t_s, p_s)`; ties go to the smaller index.
/// `None` when every weight is zero.
pub fn surface_sample(weights: &[f64], samples: &SampleSet) -> Option<(usize, f64, Vec3)> {
    let s = argmax(weights)?;
    Some((s, samples.t[s], samples.x[s]))
}

pub fn argmax(weights: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && best.map_or(true, |b| w > weights[b]) {
            best = Some(i);
        }
    }
    best
}

/// `p_s - t_s d'`, so that the flipped ray passes through `p_s` at `t_s`.
pub fn flip_origin(p_s: &Vec3, t_s: f64, d_prime: &Vec3) -> Vec3 {
    p_s - d_prime * t_s
}

/// Angle in degrees between the reversed view direction and `n_hat`, or
/// `None` for a zero normal.
pub fn incidence_degrees(d_hat: &Vec3, n_hat: &Vec3) -> Option<f64> {
    if n_hat.iter().all(|&v| v == 0.0) {
        return None;
    }
    Some((-d_hat.dot(n_hat)).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Keeps a flipped ray when its incidence angle is below `tau_deg`.
/// `tau_deg >= 180` disables masking; zero normals are always dropped.
pub fn mask_flipped(d_hat: &Vec3, n_hat: &Vec3, tau_deg: f64) -> bool {
    match incidence_degrees(d_hat, n_hat) {
        None => false,
        Some(_) if tau_deg >= 180.0 => true,
        Some(angle) => angle < tau_deg,
    }
}

/// What a rendered source ray contributes to flipping.
#[derive(Clone, Debug)]
pub struct RenderState {
    pub weights: Vec<f64>,
    pub samples: SampleSet,
    pub n_hat: Vec3,
}

#[derive(Clone, Debug, Default)]
pub struct FlippedBatch {
    pub rays: Vec<Ray>,
    /// Source ray index for each flipped ray.
    pub source: Vec<usize>,
    /// Peak sample distance on the source ray.
    pub t_s: Vec<f64>,
    pub kept_fraction: f64,
}

/// Flips every source ray that has a peak sample and passes the mask.
pub fn make_flipped_batch(rays: &[Ray], states: &[RenderState], tau_deg: f64) -> Result<FlippedBatch> {
    if rays.len() != states.len() {
        return Err(Error::Contract(format!(
            "{} rays but {} render states",
            rays.len(),
            states.len()
        )));
    }
    let mut out = FlippedBatch::default();
    for (i, (ray, state)) in rays.iter().zip(states).enumerate() {
        let Some((_, t_s, p_s)) = surface_sample(&state.weights, &state.samples) else {
            continue;
        };
        if !mask_flipped(&ray.d_hat, &state.n_hat, tau_deg) {
            continue;
        }
        let d_prime = flip_direction(&ray.d, &state.n_hat);
        let o_prime = flip_origin(&p_s, t_s, &d_prime);
        let Ok(mut flipped) = Ray::new(o_prime, d_prime, ray.gt_color) else {
            continue;
        };
        flipped.is_flipped = true;
        out.rays.push(flipped);
        out.source.push(i);
        out.t_s.push(t_s);
    }
    out.kept_fraction = if rays.is_empty() {
        0.0
    } else {
        out.rays.len() as f64 / rays.len() as f64
    };
    Ok(out)
}

/// Fraction of rays kept at `tau_deg` given per-ray peak existence and
/// weighted normals.
pub fn kept_fraction(d_hat: &[Vec3], n_hat: &[Vec3], has_peak: &[bool], tau_deg: f64) -> f64 {
    if d_hat.is_empty() {
        return 0.0;
    }
    let kept = d_hat
        .iter()
        .zip(n_hat)
        .zip(has_peak)
        .filter(|((d, n), &p)| p && mask_flipped(d, n, tau_deg))
        .count();
    kept as f64 / d_hat.len() as f64
}
