//! Run configuration: strict TOML with named ablation presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::io::write_atomic;
use crate::step::LossSpec;

/// `[start, end]` interpolated log-linearly, or a single constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct WeightSchedule {
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
enum ScheduleRepr {
    Constant(f64),
    Range([f64; 2]),
}

impl From<ScheduleRepr> for WeightSchedule {
    fn from(r: ScheduleRepr) -> Self {
        match r {
            ScheduleRepr::Constant(v) => Self::constant(v),
            ScheduleRepr::Range([start, end]) => Self { start, end },
        }
    }
}

impl From<WeightSchedule> for ScheduleRepr {
    fn from(s: WeightSchedule) -> Self {
        if s.start == s.end {
            ScheduleRepr::Constant(s.start)
        } else {
            ScheduleRepr::Range([s.start, s.end])
        }
    }
}

impl WeightSchedule {
    pub const fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub const fn constant(v: f64) -> Self {
        Self { start: v, end: v }
    }

    pub fn is_zero(&self) -> bool {
        self.start == 0.0 && self.end == 0.0
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let ok = if self.start == self.end {
            self.start >= 0.0 && self.start.is_finite()
        } else {
            self.start > 0.0 && self.end > 0.0 && self.start.is_finite() && self.end.is_finite()
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{name}: annealed endpoints must be positive (constants may be zero), got [{}, {}]",
                self.start, self.end
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewsConfig {
    pub count: usize,
    pub heldout: usize,
}

impl Default for ViewsConfig {
    fn default() -> Self {
        Self { count: 3, heldout: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub samples: usize,
    pub near: f64,
    pub far: f64,
    /// Steps over which the sampling window grows to `[near, far]`.
    pub anneal_steps: usize,
    /// Initial window fraction.
    pub anneal_min: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            near: 1.0,
            far: 10.0,
            anneal_steps: 256,
            anneal_min: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlipConfig {
    pub enabled: bool,
    pub tau_deg: f64,
    /// Whether flipped-ray losses backpropagate through the weighted normal.
    pub normal_grad: bool,
}

impl Default for FlipConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau_deg: 90.0,
            normal_grad: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: WeightSchedule,
    pub lambda2: WeightSchedule,
    pub lambda3: WeightSchedule,
    pub lambda4: WeightSchedule,
    pub lambda5: WeightSchedule,
    pub lambda6: WeightSchedule,
    pub eta: f64,
    /// Annealing horizon; the full run when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anneal_steps: Option<usize>,
}

/// Few-view defaults for all six weights.
pub const DEFAULT_LAMBDAS: [WeightSchedule; 6] = [
    WeightSchedule::new(4.0, 1e-3),
    WeightSchedule::new(4e-1, 1e-4),
    WeightSchedule::new(1e-4, 1e-1),
    WeightSchedule::constant(1e-3),
    WeightSchedule::constant(1e-1),
    WeightSchedule::constant(1e-1),
];

impl Default for LossConfig {
    fn default() -> Self {
        let [lambda1, lambda2, lambda3, lambda4, lambda5, lambda6] = DEFAULT_LAMBDAS;
        Self {
            lambda1,
            lambda2,
            lambda3,
            lambda4,
            lambda5,
            lambda6,
            eta: 100.0,
            anneal_steps: None,
        }
    }
}

impl LossConfig {
    pub fn schedules(&self) -> [WeightSchedule; 6] {
        [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
        ]
    }

    pub fn set_schedules(&mut self, s: [WeightSchedule; 6]) {
        [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
        ] = s;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: WeightSchedule,
    pub warmup: usize,
    pub delay_mult: f64,
    pub clip_value: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Held-out PSNR every this many steps (0 disables periodic evaluation).
    pub eval_every: usize,
    /// Steps at which mask and normal statistics are recorded, in addition
    /// to the final step.
    pub probe_steps: Vec<usize>,
    /// Fixed training rays used for kept-fraction probes.
    pub probe_rays: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 512,
            lr: WeightSchedule::new(2e-3, 2e-5),
            warmup: 100,
            delay_mult: 1e-2,
            clip_value: 0.1,
            clip_norm: 0.1,
            seed: 0,
            eval_every: 0,
            probe_steps: vec![100],
            probe_rays: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Scene description; the built-in sphere-on-plane scene when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub views: ViewsConfig,
    pub model: FieldConfig,
    pub sampling: SamplingConfig,
    pub flipping: FlipConfig,
    pub losses: LossConfig,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: None,
            out_dir: PathBuf::from("runs/default"),
            views: ViewsConfig::default(),
            model: FieldConfig::default(),
            sampling: SamplingConfig::default(),
            flipping: FlipConfig::default(),
            losses: LossConfig::default(),
            trainer: TrainerConfig::default(),
        }
    }
}

/// Preset names accepted by [`RunConfig::apply_preset`].
pub const PRESETS: [&str; 9] = [
    "baseline", "flipnerf", "row1", "row2", "row3", "row4", "row5", "row6", "row7",
];

/// Which of the six weighted terms each ablation row enables.
fn row_terms(row: usize) -> [bool; 6] {
    match row {
        1 => [true, false, false, false, false, false],
        2 => [true, true, false, false, false, false],
        3 => [true, true, true, true, false, false],
        4 => [true, true, true, true, true, false],
        5 => [true, true, true, true, false, true],
        6 => [true, true, false, false, true, true],
        _ => [true; 6],
    }
}

impl RunConfig {
    /// Single-core scale used by the acceptance suite: every ablation run
    /// finishes in a few minutes.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.out_dir = PathBuf::from("runs/desk");
        cfg.model = FieldConfig {
            width: 32,
            trunk_depth: 4,
            skip_layer: Some(2),
            head_width: 16,
            head_depth: 1,
            l_pos: 4,
            l_dir: 2,
            beta_floor: 0.1,
            ..FieldConfig::default()
        };
        cfg.sampling.samples = 32;
        cfg.sampling.anneal_min = 0.5;
        cfg.trainer.batch = 64;
        cfg
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let row = match name {
            "baseline" => 1,
            "flipnerf" => 7,
            _ => name
                .strip_prefix("row")
                .and_then(|r| r.parse::<usize>().ok())
                .filter(|r| (1..=7).contains(r))
                .ok_or_else(|| {
                    Error::Config(format!("unknown preset {name:?}; expected one of {PRESETS:?}"))
                })?,
        };
        let on = row_terms(row);
        let mut s = DEFAULT_LAMBDAS;
        for (sched, enabled) in s.iter_mut().zip(on) {
            if !enabled {
                *sched = WeightSchedule::constant(0.0);
            }
        }
        self.losses.set_schedules(s);
        self.flipping.enabled = on[1] || on[3] || on[4];
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let s = &self.sampling;
        if s.samples == 0 || !(s.near >= 0.0) || !(s.near < s.far) {
            return bad("sampling: need samples >= 1 and 0 <= near < far");
        }
        if !(s.anneal_min > 0.0 && s.anneal_min <= 1.0) {
            return bad("sampling: anneal_min must lie in (0, 1]");
        }
        if !(self.flipping.tau_deg > 0.0 && self.flipping.tau_deg <= 180.0) {
            return bad("flipping: tau_deg must lie in (0, 180]");
        }
        for (k, sched) in self.losses.schedules().iter().enumerate() {
            sched.validate(&format!("losses.lambda{}", k + 1))?;
        }
        if !(self.losses.eta > 0.0) {
            return bad("losses: eta must be positive");
        }
        let t = &self.trainer;
        t.lr.validate("trainer.lr")?;
        if t.batch == 0 {
            return bad("trainer: batch must be positive");
        }
        if !(t.clip_value > 0.0) || !(t.clip_norm > 0.0) || !(t.delay_mult > 0.0 && t.delay_mult <= 1.0) {
            return bad("trainer: clip values must be positive and delay_mult in (0, 1]");
        }
        if self.views.count == 0 {
            return bad("views: count must be positive");
        }
        if let Some(scene) = &self.scene {
            if !scene.exists() {
                return Err(Error::Config(format!("scene file {} does not exist", scene.display())));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(scene) = &cfg.scene {
            if scene.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.scene = Some(dir.join(scene));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn lambda_anneal_steps(&self) -> usize {
        self.losses.anneal_steps.unwrap_or(self.trainer.steps)
    }

    /// Loss settings with every weight evaluated at `lambdas`.
    pub fn loss_spec(&self, lambdas: [f64; 6]) -> LossSpec {
        LossSpec {
            lambdas,
            eta: self.losses.eta,
            tau_deg: self.flipping.tau_deg,
            flip: self.flipping.enabled,
            normal_grad: self.flipping.normal_grad,
            want_normals: false,
        }
    }
}
