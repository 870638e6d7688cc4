//! Optimisation loop: schedules, Adam with clipping, batching from the
//! training views, and the training log.

use std::f64::consts::FRAC_PI_2;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::{RunConfig, WeightSchedule};
use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::losses::{LossBreakdown, TERM_NAMES};
use crate::rays::{kept_fraction, sample_distances, Ray};
use crate::render::eval_rays;
use crate::scenes::{render_gt, trace, Camera, GtImages, SyntheticScene};
use crate::step::{build_loss, StepBatch};

/// Log-linear interpolation from `start` to `end` over `steps`; constants
/// stay constant.
pub fn anneal(s: &WeightSchedule, step: usize, steps: usize) -> f64 {
    if s.start == s.end {
        return s.start;
    }
    if step >= steps {
        return s.end;
    }
    let t = step as f64 / steps as f64;
    (s.start.ln() * (1.0 - t) + s.end.ln() * t).exp()
}

/// Exponential decay with a sine-shaped warm-up from `delay_mult * lr`.
pub fn lr_at(step: usize, lr: &WeightSchedule, warmup: usize, total: usize, delay_mult: f64) -> f64 {
    let delay = if warmup > 0 {
        let u = (step as f64 / warmup as f64).clamp(0.0, 1.0);
        delay_mult + (1.0 - delay_mult) * (FRAC_PI_2 * u).sin()
    } else {
        1.0
    };
    delay * anneal(lr, step, total)
}

/// Sampling window at `step`: starts at fraction `s_min` of `[near, far]`
/// around its midpoint and widens linearly.
pub fn scene_anneal(step: usize, anneal_steps: usize, near: f64, far: f64, s_min: f64) -> (f64, f64) {
    let s = if anneal_steps == 0 {
        1.0
    } else {
        (step as f64 / anneal_steps as f64).min(1.0).max(s_min)
    };
    let mid = 0.5 * (near + far);
    let half = 0.5 * (far - near) * s;
    (mid - half, mid + half)
}

/// Clips every component to `[-value, value]`, then rescales the whole
/// gradient to global norm at most `norm`. Returns the norm before the
/// second step.
pub fn clip_gradients(grads: &mut [Array2<f64>], value: f64, norm: f64) -> f64 {
    for g in grads.iter_mut() {
        g.mapv_inplace(|x| x.clamp(-value, value));
    }
    let total = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if total > norm {
        let s = norm / total;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    total
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &FieldParams) -> Self {
        let zeros: Vec<_> = params.tensors.iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut FieldParams, grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Training rays with ground-truth colors, plus held-out views.
pub struct TrainData {
    pub scene: SyntheticScene,
    pub train_cameras: Vec<Camera>,
    pub rays: Vec<Ray>,
    pub heldout: Vec<(Camera, GtImages)>,
}

impl TrainData {
    pub fn new(scene: &SyntheticScene, views: usize, heldout: usize) -> Result<Self> {
        let mut scene = scene.clone();
        scene.rig.views = views;
        scene.rig.heldout_views = heldout;
        scene.validate()?;
        let train_cameras = scene.training_cameras();
        let mut rays = Vec::new();
        for cam in &train_cameras {
            for j in 0..cam.height {
                for i in 0..cam.width {
                    let mut ray = cam.pixel_ray(i, j);
                    ray.gt_color = trace(&scene, &ray);
                    rays.push(ray);
                }
            }
        }
        let heldout = scene
            .heldout_cameras()
            .into_iter()
            .map(|cam| {
                let gt = render_gt(&scene, &cam);
                (cam, gt)
            })
            .collect();
        Ok(Self {
            scene,
            train_cameras,
            rays,
            heldout,
        })
    }

    /// Held-out rays with ground-truth colors, view by view.
    pub fn heldout_rays(&self) -> Vec<Ray> {
        self.heldout
            .iter()
            .flat_map(|(cam, gt)| {
                (0..cam.pixels()).map(move |p| {
                    let mut ray = cam.pixel_ray(p % cam.width, p / cam.width);
                    ray.gt_color = gt.rgb[p];
                    ray
                })
            })
            .collect()
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub lambdas: [f64; 6],
    pub breakdown: LossBreakdown,
    pub kept_fraction: Option<f64>,
    pub mean_rho: f64,
    pub grad_norm: f64,
    pub near: f64,
    pub far: f64,
    /// Held-out PSNR when evaluated at this step.
    pub heldout_psnr: Option<f64>,
}

impl LogRow {
    pub fn csv_header() -> String {
        let mut cols = vec!["step".to_string(), "lr".into()];
        cols.extend((1..=6).map(|k| format!("lambda{k}")));
        cols.extend(TERM_NAMES.iter().map(|n| n.to_string()));
        cols.extend(
            ["total", "kept_fraction", "mean_rho", "grad_norm", "near", "far", "heldout_psnr"]
                .map(String::from),
        );
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.9e}"));
        let mut cols = vec![self.step.to_string(), format!("{:.9e}", self.lr)];
        cols.extend(self.lambdas.iter().map(|v| format!("{v:.9e}")));
        cols.extend(self.breakdown.terms.as_array().iter().map(|v| format!("{v:.9e}")));
        cols.push(format!("{:.9e}", self.breakdown.total));
        cols.push(opt(self.kept_fraction));
        cols.push(format!("{:.9e}", self.mean_rho));
        cols.push(format!("{:.9e}", self.grad_norm));
        cols.push(format!("{:.9e}", self.near));
        cols.push(format!("{:.9e}", self.far));
        cols.push(opt(self.heldout_psnr));
        cols.join(",")
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = LogRow::csv_header();
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Mask and normal statistics of the current network.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub step: usize,
    /// `(tau, kept fraction)` over the fixed training probe rays.
    pub kept: Vec<(f64, f64)>,
    /// Median length of the weighted normal over foreground held-out rays.
    pub median_normal_norm: f64,
}

pub const PROBE_TAUS: [f64; 4] = [30.0, 60.0, 90.0, 180.0];

pub struct Trainer {
    pub config: RunConfig,
    pub data: TrainData,
    pub params: FieldParams,
    pub adam: Adam,
    pub step: usize,
    rng: ChaCha8Rng,
    probe_rays: Vec<Ray>,
    foreground_rays: Vec<Ray>,
}

impl Trainer {
    pub fn new(config: RunConfig, scene: &SyntheticScene) -> Result<Self> {
        config.validate()?;
        let data = TrainData::new(scene, config.views.count, config.views.heldout)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.trainer.seed);
        let params = FieldParams::init(&config.model, &mut rng);
        let adam = Adam::new(&params);
        let mut probe_rng = ChaCha8Rng::seed_from_u64(config.trainer.seed ^ 0x70726f6265);
        let probe_rays = (0..config.trainer.probe_rays.min(data.rays.len()))
            .map(|_| data.rays[probe_rng.gen_range(0..data.rays.len())].clone())
            .collect();
        let foreground: Vec<Ray> = data
            .heldout
            .iter()
            .flat_map(|(cam, gt)| {
                (0..cam.pixels())
                    .filter(|&p| gt.mask[p])
                    .map(move |p| cam.pixel_ray(p % cam.width, p / cam.width))
            })
            .collect();
        let stride = foreground.len().div_ceil(config.trainer.probe_rays.max(1)).max(1);
        let foreground_rays = foreground.into_iter().step_by(stride).collect();
        Ok(Self {
            config,
            data,
            params,
            adam,
            step: 0,
            rng,
            probe_rays,
            foreground_rays,
        })
    }

    pub fn lambdas_at(&self, step: usize) -> [f64; 6] {
        let horizon = self.config.lambda_anneal_steps();
        self.config.losses.schedules().map(|s| anneal(&s, step, horizon))
    }

    pub fn lr(&self, step: usize) -> f64 {
        let t = &self.config.trainer;
        lr_at(step, &t.lr, t.warmup, t.steps, t.delay_mult)
    }

    fn next_batch(&mut self) -> Result<StepBatch> {
        let s = &self.config.sampling;
        let (near, far) = scene_anneal(self.step, s.anneal_steps, s.near, s.far, s.anneal_min);
        let (r, m) = (self.config.trainer.batch, s.samples);
        let mut t = Array2::zeros((r, m));
        let mut delta = Array2::zeros((r, m));
        let mut rays = Vec::with_capacity(r);
        for i in 0..r {
            rays.push(self.data.rays[self.rng.gen_range(0..self.data.rays.len())].clone());
            let (ti, di) = sample_distances(near, far, m, Some(&mut self.rng))?;
            for j in 0..m {
                t[[i, j]] = ti[j];
                delta[[i, j]] = di[j];
            }
        }
        let flip_jitter = Some(Array2::from_shape_fn((r, m), |_| self.rng.gen::<f64>()));
        Ok(StepBatch {
            rays,
            t,
            delta,
            flip_jitter,
            near,
            far,
        })
    }

    /// One optimisation step; parameters are untouched if the loss is not
    /// finite.
    pub fn train_step(&mut self) -> Result<LogRow> {
        let batch = self.next_batch()?;
        let lambdas = self.lambdas_at(self.step);
        let lr = self.lr(self.step);
        let spec = self.config.loss_spec(lambdas);
        let mut tape = Tape::new();
        let vars = self.params.record(&mut tape);
        let graph = build_loss(&mut tape, &vars, &self.config.model, &batch, &spec, None)
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {}: {m}", self.step)),
                other => other,
            })?;
        let mut grads = tape.grad(graph.total, &vars.tensors)?;
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("gradient at step {}", self.step)));
        }
        let t = &self.config.trainer;
        let grad_norm = clip_gradients(&mut grads, t.clip_value, t.clip_norm);
        self.adam.update(&mut self.params, &grads, lr);
        let row = LogRow {
            step: self.step,
            lr,
            lambdas,
            breakdown: graph.breakdown,
            kept_fraction: graph.stats.kept_fraction,
            mean_rho: graph.stats.mean_rho,
            grad_norm,
            near: batch.near,
            far: batch.far,
            heldout_psnr: None,
        };
        self.step += 1;
        Ok(row)
    }

    pub fn heldout_psnr(&self) -> Result<f64> {
        let rays = self.data.heldout_rays();
        let s = &self.config.sampling;
        let out = eval_rays(&self.params, &rays, s.near, s.far, s.samples, false)?;
        let mse = rays
            .iter()
            .zip(&out)
            .map(|(ray, e)| (e.c_hat - ray.gt_color).norm_squared() / 3.0)
            .sum::<f64>()
            / rays.len().max(1) as f64;
        Ok(crate::metrics::psnr_from_mse(mse))
    }

    pub fn probe(&self) -> Result<Probe> {
        let s = &self.config.sampling;
        let train = eval_rays(&self.params, &self.probe_rays, s.near, s.far, s.samples, true)?;
        let d_hat: Vec<_> = self.probe_rays.iter().map(|r| r.d_hat).collect();
        let n_hat: Vec<_> = train.iter().map(|e| e.n_hat).collect();
        let peak: Vec<_> = train.iter().map(|e| e.has_peak).collect();
        let kept = PROBE_TAUS
            .iter()
            .map(|&tau| (tau, kept_fraction(&d_hat, &n_hat, &peak, tau)))
            .collect();
        let fg = eval_rays(&self.params, &self.foreground_rays, s.near, s.far, s.samples, true)?;
        let mut norms: Vec<f64> = fg.iter().map(|e| e.n_hat.norm()).collect();
        Ok(Probe {
            step: self.step,
            kept,
            median_normal_norm: crate::metrics::median(&mut norms),
        })
    }
}

pub struct FitResult {
    pub params: FieldParams,
    pub log: Vec<LogRow>,
    pub probes: Vec<Probe>,
}

/// Runs the configured number of steps. `on_row` sees every log row.
pub fn fit(config: RunConfig, scene: &SyntheticScene, mut on_row: impl FnMut(&LogRow)) -> Result<FitResult> {
    let mut trainer = Trainer::new(config, scene)?;
    let steps = trainer.config.trainer.steps;
    let eval_every = trainer.config.trainer.eval_every;
    let probe_steps = trainer.config.trainer.probe_steps.clone();
    let mut log = Vec::with_capacity(steps);
    let mut probes = Vec::new();
    while trainer.step < steps {
        if probe_steps.contains(&trainer.step) {
            probes.push(trainer.probe()?);
        }
        let mut row = trainer.train_step()?;
        if eval_every > 0 && trainer.step % eval_every == 0 {
            row.heldout_psnr = Some(trainer.heldout_psnr()?);
        }
        on_row(&row);
        log.push(row);
    }
    if probes.last().map_or(true, |p| p.step != trainer.step) {
        probes.push(trainer.probe()?);
    }
    Ok(FitResult {
        params: trainer.params,
        log,
        probes,
    })
}
