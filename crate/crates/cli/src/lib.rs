//! Command implementations behind the `reflray` binary.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflray::autodiff::{check_grad, GradCheck, Tape, Var};
use reflray::config::RunConfig;
use reflray::field::{FieldConfig, FieldParams, FieldVars};
use reflray::io::{write_atomic, write_pfm, write_png_gray, write_png_rgb};
use reflray::losses::TERM_NAMES;
use reflray::metrics::{evaluate, render_view};
use reflray::rays::sample_distances;
use reflray::scenes::{render_gt, write_gt, SyntheticScene};
use reflray::step::{build_loss, LossSpec, StepBatch};
use reflray::trainer::{fit, log_csv, Probe, PROBE_TAUS};
use reflray::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "reflray", version, about = "Few-view radiance fields with flipped reflection rays")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a scene description and its ground-truth views.
    GenScene(CommonArgs),
    /// Train a field and write a checkpoint plus CSV logs.
    Train(CommonArgs),
    /// Render held-out views from a checkpoint.
    Render(CheckpointArgs),
    /// Score a checkpoint on held-out views.
    Eval(CheckpointArgs),
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// baseline, flipnerf or row1..row7.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of training views.
    #[arg(long)]
    pub views: Option<usize>,
    /// Masking threshold in degrees.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint written by `train`; its directory's config.toml is used
    /// unless --config is given.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Contract(_) | Error::Config(_) => 1,
        Error::NonFinite(_) => 2,
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => 3,
    }
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(args: &CommonArgs, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match args.config.as_deref().or(fallback) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.preset {
        cfg.apply_preset(p)?;
    }
    if let Some(s) = args.seed {
        cfg.trainer.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(v) = args.views {
        cfg.views.count = v;
    }
    if let Some(t) = args.tau {
        cfg.flipping.tau_deg = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_scene(cfg: &RunConfig) -> Result<SyntheticScene> {
    match &cfg.scene {
        Some(p) => SyntheticScene::load(p),
        None => Ok(SyntheticScene::default()),
    }
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenScene(a) => cmd_gen_scene(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Render(a) => cmd_render(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a).map(|r| r.to_text()),
    }
}

/// Scene description plus RGB, mask, depth and normal maps for every
/// training and held-out camera. Defaults to 8 training views.
pub fn cmd_gen_scene(args: &CommonArgs) -> Result<String> {
    let mut scene = match &args.config {
        Some(p) => load_scene(&RunConfig::load(p)?)?,
        None => SyntheticScene::default(),
    };
    if let Some(v) = args.views {
        scene.rig.views = v;
    }
    scene.validate()?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("scene"));
    scene.save(&out.join("scene.toml"))?;
    let train = scene.training_cameras();
    for (k, cam) in train.iter().enumerate() {
        write_gt(&out, &format!("train_{k:02}"), &render_gt(&scene, cam))?;
    }
    let heldout = scene.heldout_cameras();
    for (k, cam) in heldout.iter().enumerate() {
        write_gt(&out, &format!("heldout_{k:02}"), &render_gt(&scene, cam))?;
    }
    Ok(format!(
        "wrote scene with {} training and {} held-out views to {}\n",
        train.len(),
        heldout.len(),
        out.display()
    ))
}

pub fn probes_csv(probes: &[Probe]) -> String {
    let mut out = String::from("step");
    for tau in PROBE_TAUS {
        out.push_str(&format!(",kept_tau{tau:.0}"));
    }
    out.push_str(",median_normal_norm\n");
    for p in probes {
        out.push_str(&p.step.to_string());
        for (_, f) in &p.kept {
            out.push_str(&format!(",{f:.9e}"));
        }
        out.push_str(&format!(",{:.9e}\n", p.median_normal_norm));
    }
    out
}

/// Writes `config.toml`, `checkpoint.bin`, `train_log.csv` and
/// `probes.csv` into the output directory.
pub fn cmd_train(args: &CommonArgs) -> Result<String> {
    let cfg = resolve_config(args, None)?;
    let scene = load_scene(&cfg)?;
    let out = cfg.out_dir.clone();
    let mut saved = cfg.clone();
    saved.scene = None;
    if cfg.scene.is_some() {
        scene.save(&out.join("scene.toml"))?;
        saved.scene = Some(PathBuf::from("scene.toml"));
    }
    saved.save(&out.join("config.toml"))?;
    let steps = cfg.trainer.steps;
    let result = fit(cfg, &scene, |row| {
        if (row.step + 1) % 100 == 0 {
            eprintln!("step {:5}/{steps}  loss {:.5e}", row.step + 1, row.breakdown.total);
        }
    })?;
    result.params.save(&out.join("checkpoint.bin"))?;
    write_atomic(&out.join("train_log.csv"), log_csv(&result.log).as_bytes())?;
    write_atomic(&out.join("probes.csv"), probes_csv(&result.probes).as_bytes())?;
    let last = result.log.last().map_or(f64::NAN, |r| r.breakdown.total);
    Ok(format!("trained {steps} steps, final loss {last:.6e}; outputs in {}\n", out.display()))
}

fn checkpoint_config(args: &CheckpointArgs) -> Result<(RunConfig, FieldParams)> {
    let sibling = args.checkpoint.parent().map(|d| d.join("config.toml"));
    let fallback = sibling.as_deref().filter(|p| p.exists());
    let cfg = resolve_config(&args.common, fallback)?;
    let params = FieldParams::load(&args.checkpoint)?;
    Ok((cfg, params))
}

fn scene_for(cfg: &RunConfig) -> Result<SyntheticScene> {
    let mut scene = load_scene(cfg)?;
    scene.rig.views = cfg.views.count;
    scene.rig.heldout_views = cfg.views.heldout;
    Ok(scene)
}

/// Maps values linearly to `[0, 1]` by their 99th percentile.
pub fn tonemap(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let hi = sorted
        .get(((sorted.len() as f64 - 1.0) * 0.99).round() as usize)
        .copied()
        .unwrap_or(0.0);
    if hi > 0.0 {
        values.iter().map(|v| (v / hi).min(1.0)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Per held-out view: RGB, RGB-std and depth-std PNGs, depth and unit
/// normal PFMs.
pub fn cmd_render(args: &CheckpointArgs) -> Result<String> {
    let (cfg, params) = checkpoint_config(args)?;
    let scene = scene_for(&cfg)?;
    let out = args.common.out.clone().unwrap_or_else(|| cfg.out_dir.join("render"));
    let s = &cfg.sampling;
    let cams = scene.heldout_cameras();
    for (k, cam) in cams.iter().enumerate() {
        let ev = render_view(&params, cam, s.near, s.far, s.samples, true)?;
        let (w, h) = (cam.width, cam.height);
        let stem = format!("view_{k:02}");
        let rgb: Vec<[f64; 3]> = ev.iter().map(|e| e.c_hat.into()).collect();
        write_png_rgb(&out.join(format!("{stem}_rgb.png")), w, h, &rgb)?;
        let depth: Vec<f64> = ev.iter().map(|e| e.depth).collect();
        write_pfm(&out.join(format!("{stem}_depth.pfm")), w, h, 1, &depth)?;
        let normals: Vec<f64> = ev
            .iter()
            .flat_map(|e| {
                let n = e.n_hat.norm();
                let u = if n > 0.0 { e.n_hat / n } else { e.n_hat };
                [u[0], u[1], u[2]]
            })
            .collect();
        write_pfm(&out.join(format!("{stem}_normal.pfm")), w, h, 3, &normals)?;
        let rgb_std: Vec<f64> = ev.iter().map(|e| e.rgb_std).collect();
        write_png_gray(&out.join(format!("{stem}_rgb_std.png")), w, h, &tonemap(&rgb_std))?;
        let depth_std: Vec<f64> = ev.iter().map(|e| e.depth_std).collect();
        write_png_gray(&out.join(format!("{stem}_depth_std.png")), w, h, &tonemap(&depth_std))?;
    }
    Ok(format!("rendered {} views to {}\n", cams.len(), out.display()))
}

/// Writes `eval.csv` and `eval.txt`; returns the text summary.
pub fn cmd_eval(args: &CheckpointArgs) -> Result<String> {
    let (cfg, params) = checkpoint_config(args)?;
    let scene = scene_for(&cfg)?;
    let heldout: Vec<_> = scene
        .heldout_cameras()
        .into_iter()
        .map(|c| {
            let gt = render_gt(&scene, &c);
            (c, gt)
        })
        .collect();
    let s = &cfg.sampling;
    let report = evaluate(&params, &heldout, s.near, s.far, s.samples)?;
    let out = args.common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    write_atomic(&out.join("eval.csv"), report.to_csv().as_bytes())?;
    let text = report.to_text();
    write_atomic(&out.join("eval.txt"), text.as_bytes())?;
    Ok(text)
}

/// Gradient-check results, one entry per loss term and the total.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// `(name, result)`; `None` when the term is not computed.
    pub terms: Vec<(String, Option<GradCheck>)>,
    pub tolerance: f64,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms
            .iter()
            .all(|(_, r)| r.as_ref().map_or(true, |r| r.passed(self.tolerance)))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, r) in &self.terms {
            match r {
                None => out.push_str(&format!("{name:12} skipped\n")),
                Some(r) => out.push_str(&format!(
                    "{name:12} max rel error {:.3e}  {}\n",
                    r.max_rel_error,
                    if r.passed(self.tolerance) { "ok" } else { "FAIL" }
                )),
            }
        }
        out.push_str(&format!(
            "{} in {:.1} s (tolerance {:.0e})\n",
            if self.passed() { "passed" } else { "failed" },
            self.seconds,
            self.tolerance
        ));
        out
    }
}

pub const GRADCHECK_RAYS: usize = 8;
pub const GRADCHECK_SAMPLES: usize = 8;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_EPS: f64 = 1e-5;

pub fn gradcheck_model() -> FieldConfig {
    FieldConfig {
        width: 16,
        trunk_depth: 3,
        skip_layer: Some(2),
        head_width: 8,
        head_depth: 1,
        l_pos: 2,
        l_dir: 1,
        ..FieldConfig::default()
    }
}

/// Checks every term on 8 training rays with 8 jittered samples through a
/// width-16 network. Loss weights come from the configuration at step 0
/// (with zero weights replaced by 0.1 so the total covers every term).
/// Fails with a numerical error if any term exceeds the tolerance.
pub fn cmd_gradcheck(args: &CommonArgs) -> Result<GradcheckReport> {
    let report = run_gradcheck(args)?;
    if report.passed() {
        Ok(report)
    } else {
        Err(Error::NonFinite(format!("gradient check failed\n{}", report.to_text())))
    }
}

pub fn run_gradcheck(args: &CommonArgs) -> Result<GradcheckReport> {
    let start = std::time::Instant::now();
    let cfg = resolve_config(args, None)?;
    let scene = load_scene(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.trainer.seed);
    let model = gradcheck_model();
    let params = FieldParams::init(&model, &mut rng);
    let data = reflray::trainer::TrainData::new(&scene, cfg.views.count, 0)?;
    let foreground: Vec<_> = data.rays.iter().filter(|r| r.gt_color.norm() > 0.0).collect();
    let pool = if foreground.is_empty() { data.rays.iter().collect() } else { foreground };
    let (r, m) = (GRADCHECK_RAYS, GRADCHECK_SAMPLES);
    let (near, far) = (cfg.sampling.near, cfg.sampling.far);
    let mut t = Array2::zeros((r, m));
    let mut delta = Array2::zeros((r, m));
    let mut rays = Vec::new();
    for i in 0..r {
        rays.push(pool[rng.gen_range(0..pool.len())].clone());
        let (ti, di) = sample_distances(near, far, m, Some(&mut rng))?;
        for j in 0..m {
            t[[i, j]] = ti[j];
            delta[[i, j]] = di[j];
        }
    }
    let batch = StepBatch {
        rays,
        t,
        delta,
        flip_jitter: Some(Array2::from_shape_fn((r, m), |_| rng.gen::<f64>())),
        near,
        far,
    };
    let lambdas = cfg
        .losses
        .schedules()
        .map(|s| if s.start == 0.0 { 0.1 } else { s.start });
    let spec = LossSpec {
        want_normals: true,
        ..cfg.loss_spec(lambdas)
    };

    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let graph = build_loss(&mut tape, &vars, &model, &batch, &spec, None)?;
    let decisions = graph.decisions.clone();
    let present: Vec<bool> = graph.terms.0.iter().map(|v| v.is_some()).collect();

    let mut terms = Vec::new();
    for (k, name) in TERM_NAMES.iter().enumerate().chain([(7, &"total")]) {
        if k < 7 && !present[k] {
            terms.push((name.to_string(), None));
            continue;
        }
        let f = |tape: &mut Tape, p: &[Var]| {
            let vars = FieldVars { tensors: p.to_vec() };
            let g = build_loss(tape, &vars, &model, &batch, &spec, decisions.as_ref())?;
            Ok(if k == 7 { g.total } else { g.terms.0[k].expect("term present") })
        };
        terms.push((name.to_string(), Some(check_grad(f, &params.tensors, GRADCHECK_EPS)?)));
    }
    Ok(GradcheckReport {
        terms,
        tolerance: GRADCHECK_TOLERANCE,
        seconds: start.elapsed().as_secs_f64(),
    })
}
