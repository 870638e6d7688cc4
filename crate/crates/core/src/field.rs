//! Radiance field MLP.
//!
//! A spatial trunk maps encoded positions to density, per-channel Laplacian
//! scales and a bottleneck feature; a direction-conditioned head maps the
//! bottleneck plus encoded view direction to RGB locations. Surface normals
//! are the negated, normalized spatial gradient of density.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{spatial_grad, Jet, Tape, Var};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_TAG: &str = "reflray-ckpt-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub width: usize,
    pub trunk_depth: usize,
    /// Trunk layer that re-reads the encoded input; `None` disables the skip.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skip_layer: Option<usize>,
    pub head_width: usize,
    pub head_depth: usize,
    pub l_pos: usize,
    pub l_dir: usize,
    pub beta_floor: f64,
    pub normal_eps: f64,
    /// Positions are multiplied by this before encoding.
    pub pos_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            width: 128,
            trunk_depth: 4,
            skip_layer: Some(2),
            head_width: 64,
            head_depth: 1,
            l_pos: 8,
            l_dir: 4,
            beta_floor: 1e-3,
            normal_eps: 1e-8,
            pos_scale: 0.5,
        }
    }
}

impl FieldConfig {
    pub fn pos_dim(&self) -> usize {
        3 + 6 * self.l_pos
    }

    pub fn dir_dim(&self) -> usize {
        3 + 6 * self.l_dir
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.width == 0 || self.trunk_depth == 0 || self.head_width == 0 {
            return bad("widths and trunk depth must be positive");
        }
        if let Some(s) = self.skip_layer {
            if s == 0 || s >= self.trunk_depth {
                return bad("skip_layer must index a trunk layer after the first");
            }
        }
        if !(self.beta_floor > 0.0) || !(self.normal_eps > 0.0) || !(self.pos_scale > 0.0) {
            return bad("beta_floor, normal_eps and pos_scale must be positive");
        }
        Ok(())
    }

    /// `(name, rows, cols)` for every tensor in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut dense = |name: String, i: usize, o: usize| {
            out.push((format!("{name}.w"), i, o));
            out.push((format!("{name}.b"), 1, o));
        };
        for l in 0..self.trunk_depth {
            let input = if l == 0 {
                self.pos_dim()
            } else if Some(l) == self.skip_layer {
                self.width + self.pos_dim()
            } else {
                self.width
            };
            dense(format!("trunk{l}"), input, self.width);
        }
        dense("density".into(), self.width, 1);
        dense("scale".into(), self.width, 3);
        dense("bottleneck".into(), self.width, self.width);
        for l in 0..self.head_depth {
            let input = if l == 0 {
                self.width + self.dir_dim()
            } else {
                self.head_width
            };
            dense(format!("head{l}"), input, self.head_width);
        }
        let rgb_in = if self.head_depth == 0 {
            self.width + self.dir_dim()
        } else {
            self.head_width
        };
        dense("rgb".into(), rgb_in, 3);
        out
    }
}

/// All weights in storage order: trunk layers, density, scale, bottleneck,
/// head layers, rgb; each as `(weight in x out, bias 1 x out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub tensors: Vec<Array2<f64>>,
}

/// Tape handles mirroring [`FieldParams::tensors`].
#[derive(Clone, Debug)]
pub struct FieldVars {
    pub tensors: Vec<Var>,
}

struct Layout {
    trunk: usize,
    density: usize,
    scale: usize,
    bottleneck: usize,
    head: usize,
    rgb: usize,
}

impl Layout {
    fn of(cfg: &FieldConfig) -> Self {
        let trunk = 0;
        let density = 2 * cfg.trunk_depth;
        Self {
            trunk,
            density,
            scale: density + 2,
            bottleneck: density + 4,
            head: density + 6,
            rgb: density + 6 + 2 * cfg.head_depth,
        }
    }
}

impl FieldParams {
    pub fn zeros(config: &FieldConfig) -> Self {
        let tensors = config
            .tensor_shapes()
            .into_iter()
            .map(|(_, r, c)| Array2::zeros((r, c)))
            .collect();
        Self {
            config: config.clone(),
            tensors,
        }
    }

    /// Uniform fan-in scaled initialization with zero biases.
    pub fn init(config: &FieldConfig, rng: &mut impl Rng) -> Self {
        let mut params = Self::zeros(config);
        let layout = Layout::of(config);
        let relu_layers: Vec<usize> = (0..config.trunk_depth)
            .map(|l| layout.trunk + 2 * l)
            .chain((0..config.head_depth).map(|l| layout.head + 2 * l))
            .collect();
        for (i, w) in params.tensors.iter_mut().enumerate().step_by(2) {
            let fan_in = w.nrows() as f64;
            let gain = if relu_layers.contains(&i) { 6.0 } else { 3.0 };
            let bound = (gain / fan_in).sqrt();
            w.mapv_inplace(|_| rng.gen_range(-bound..bound));
        }
        params
    }

    pub fn from_tensors(config: &FieldConfig, tensors: Vec<Array2<f64>>) -> Result<Self> {
        let shapes = config.tensor_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, r, c), t) in shapes.iter().zip(&tensors) {
            if t.dim() != (*r, *c) {
                return Err(Error::Checkpoint(format!(
                    "{name}: expected {r}x{c}, found {:?}",
                    t.dim()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn record(&self, tape: &mut Tape) -> FieldVars {
        FieldVars {
            tensors: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Records the weights as constants (inference only).
    pub fn record_frozen(&self, tape: &mut Tape) -> FieldVars {
        FieldVars {
            tensors: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Evaluates every field output at one point.
    pub fn query(&self, x: [f64; 3], d_hat: [f64; 3]) -> Result<FieldOutput> {
        check_unit(&d_hat)?;
        let mut tape = Tape::new();
        let vars = self.record_frozen(&mut tape);
        let xs = tape.constant(Array2::from_shape_vec((1, 3), x.to_vec()).expect("1x3"));
        let trunk = trunk_forward(&mut tape, &vars, &self.config, xs, true)?;
        let dirs = direction_encoding(&mut tape, &[d_hat], self.config.l_dir);
        let head = color_head(&mut tape, &vars, &self.config, trunk.bottleneck, dirs);
        let grad = trunk.grad_sigma.expect("requested");
        let (normal, degenerate) = normal_from_gradient(row3(tape.value(grad), 0), self.config.normal_eps);
        Ok(FieldOutput {
            sigma: tape.value(trunk.sigma)[[0, 0]],
            b: tape.value(trunk.bottleneck).row(0).to_vec(),
            b_dir: tape.value(head.b_dir).row(0).to_vec(),
            mu_c: row3(tape.value(head.mu), 0),
            beta: row3(tape.value(trunk.beta), 0),
            normal,
            degenerate,
        })
    }

    /// `-grad sigma / |grad sigma|` at `x`, or zero with the degenerate flag.
    pub fn density_normal(&self, x: [f64; 3]) -> Result<([f64; 3], bool)> {
        let mut tape = Tape::new();
        let vars = self.record_frozen(&mut tape);
        let xs = tape.constant(Array2::from_shape_vec((1, 3), x.to_vec()).expect("1x3"));
        let trunk = trunk_forward(&mut tape, &vars, &self.config, xs, true)?;
        let grad = trunk.grad_sigma.expect("requested");
        Ok(normal_from_gradient(row3(tape.value(grad), 0), self.config.normal_eps))
    }

    /// Header line, then every tensor as little-endian `f64`.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let shapes: Vec<String> = c
            .tensor_shapes()
            .iter()
            .map(|(n, r, k)| format!("{n}:{r}x{k}"))
            .collect();
        let header = format!(
            "{CHECKPOINT_TAG} width={} trunk_depth={} skip_layer={} head_width={} head_depth={} \
             l_pos={} l_dir={} beta_floor={:e} normal_eps={:e} pos_scale={:e} shapes={}\n",
            c.width,
            c.trunk_depth,
            c.skip_layer.map_or("none".to_string(), |s| s.to_string()),
            c.head_width,
            c.head_depth,
            c.l_pos,
            c.l_dir,
            c.beta_floor,
            c.normal_eps,
            c.pos_scale,
            shapes.join(",")
        );
        let mut bytes = header.into_bytes();
        for t in &self.tensors {
            for v in t.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::Checkpoint("header is not utf-8".into()))?;
        let mut fields = header.split_whitespace();
        let tag = fields.next().unwrap_or_default();
        if tag != CHECKPOINT_TAG {
            return Err(Error::Checkpoint(format!(
                "version mismatch: expected {CHECKPOINT_TAG}, found {tag:?}"
            )));
        }
        let mut cfg = FieldConfig::default();
        let mut declared = None;
        for kv in fields {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed header field {kv:?}")))?;
            let bad = || Error::Checkpoint(format!("bad value for {k}: {v:?}"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            let real = || v.parse::<f64>().map_err(|_| bad());
            match k {
                "width" => cfg.width = int()?,
                "trunk_depth" => cfg.trunk_depth = int()?,
                "skip_layer" => cfg.skip_layer = if v == "none" { None } else { Some(int()?) },
                "head_width" => cfg.head_width = int()?,
                "head_depth" => cfg.head_depth = int()?,
                "l_pos" => cfg.l_pos = int()?,
                "l_dir" => cfg.l_dir = int()?,
                "beta_floor" => cfg.beta_floor = real()?,
                "normal_eps" => cfg.normal_eps = real()?,
                "pos_scale" => cfg.pos_scale = real()?,
                "shapes" => declared = Some(v.to_string()),
                _ => return Err(Error::Checkpoint(format!("unknown header field {k}"))),
            }
        }
        let expected: Vec<String> = cfg
            .tensor_shapes()
            .iter()
            .map(|(n, r, k)| format!("{n}:{r}x{k}"))
            .collect();
        if declared.as_deref() != Some(expected.join(",").as_str()) {
            return Err(Error::Checkpoint("layer shapes disagree with header config".into()));
        }
        let body = &bytes[newline + 1..];
        let total: usize = cfg.tensor_shapes().iter().map(|(_, r, c)| r * c).sum();
        if body.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} payload bytes, found {}",
                total * 8,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let tensors = cfg
            .tensor_shapes()
            .iter()
            .map(|(_, r, c)| {
                let data: Vec<f64> = values.by_ref().take(r * c).collect();
                Array2::from_shape_vec((*r, *c), data).expect("sized")
            })
            .collect();
        Self::from_tensors(&cfg, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_checkpoint_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Every field output at a single point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub b: Vec<f64>,
    pub b_dir: Vec<f64>,
    pub mu_c: [f64; 3],
    pub beta: [f64; 3],
    pub normal: [f64; 3],
    pub degenerate: bool,
}

fn row3(m: &Array2<f64>, r: usize) -> [f64; 3] {
    [m[[r, 0]], m[[r, 1]], m[[r, 2]]]
}

fn check_unit(d: &[f64; 3]) -> Result<()> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "view direction must be unit length, |d| = {n}"
        )));
    }
    Ok(())
}

pub fn normal_from_gradient(g: [f64; 3], eps: f64) -> ([f64; 3], bool) {
    let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    if norm < eps {
        ([0.0; 3], true)
    } else {
        ([-g[0] / norm, -g[1] / norm, -g[2] / norm], false)
    }
}

/// `sin(2^l pi v)` block then `cos(2^l pi v)` block for each `l < levels`.
pub fn positional_encode(v: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * levels * v.len());
    for l in 0..levels {
        let f = (1u64 << l) as f64 * std::f64::consts::PI;
        out.extend(v.iter().map(|x| (f * x).sin()));
        out.extend(v.iter().map(|x| (f * x).cos()));
    }
    out
}

/// Values that can flow through the trunk: plain nodes, or nodes carrying
/// spatial tangents.
pub trait Flow: Copy {
    fn primal(self) -> Var;
    fn matmul(self, tape: &mut Tape, w: Var) -> Self;
    fn add_bias(self, tape: &mut Tape, b: Var) -> Self;
    fn relu(self, tape: &mut Tape) -> Self;
    fn softplus(self, tape: &mut Tape) -> Self;
    fn sin(self, tape: &mut Tape) -> Self;
    fn cos(self, tape: &mut Tape) -> Self;
    fn scale(self, tape: &mut Tape, c: f64) -> Self;
    fn concat(tape: &mut Tape, parts: &[Self]) -> Self;
}

impl Flow for Var {
    fn primal(self) -> Var {
        self
    }
    fn matmul(self, tape: &mut Tape, w: Var) -> Self {
        tape.matmul(self, w)
    }
    fn add_bias(self, tape: &mut Tape, b: Var) -> Self {
        tape.add(self, b)
    }
    fn relu(self, tape: &mut Tape) -> Self {
        tape.relu(self)
    }
    fn softplus(self, tape: &mut Tape) -> Self {
        tape.softplus(self)
    }
    fn sin(self, tape: &mut Tape) -> Self {
        tape.sin(self)
    }
    fn cos(self, tape: &mut Tape) -> Self {
        tape.cos(self)
    }
    fn scale(self, tape: &mut Tape, c: f64) -> Self {
        tape.scale(self, c)
    }
    fn concat(tape: &mut Tape, parts: &[Self]) -> Self {
        tape.concat_cols(parts)
    }
}

impl Flow for Jet {
    fn primal(self) -> Var {
        self.val
    }
    fn matmul(self, tape: &mut Tape, w: Var) -> Self {
        Jet::matmul(self, tape, w)
    }
    fn add_bias(self, tape: &mut Tape, b: Var) -> Self {
        Jet::add_bias(self, tape, b)
    }
    fn relu(self, tape: &mut Tape) -> Self {
        Jet::relu(self, tape)
    }
    fn softplus(self, tape: &mut Tape) -> Self {
        Jet::softplus(self, tape)
    }
    fn sin(self, tape: &mut Tape) -> Self {
        Jet::sin(self, tape)
    }
    fn cos(self, tape: &mut Tape) -> Self {
        Jet::cos(self, tape)
    }
    fn scale(self, tape: &mut Tape, c: f64) -> Self {
        Jet::scale(self, tape, c)
    }
    fn concat(tape: &mut Tape, parts: &[Self]) -> Self {
        Jet::concat_cols(tape, parts)
    }
}

/// Tape version of [`positional_encode`] with the raw input appended.
pub fn encode<F: Flow>(tape: &mut Tape, v: F, levels: usize) -> F {
    let mut parts = Vec::with_capacity(2 * levels + 1);
    for l in 0..levels {
        let f = (1u64 << l) as f64 * std::f64::consts::PI;
        let scaled = v.scale(tape, f);
        parts.push(scaled.sin(tape));
        parts.push(scaled.cos(tape));
    }
    parts.push(v);
    F::concat(tape, &parts)
}

/// Encoded unit view directions (`K x dir_dim`), constant on the tape.
pub fn direction_encoding(tape: &mut Tape, d_hat: &[[f64; 3]], levels: usize) -> Var {
    let dim = 3 + 6 * levels;
    let mut data = Vec::with_capacity(d_hat.len() * dim);
    for d in d_hat {
        data.extend(positional_encode(d, levels));
        data.extend_from_slice(d);
    }
    tape.constant(Array2::from_shape_vec((d_hat.len(), dim), data).expect("sized"))
}

fn check_finite(tape: &Tape, v: Var, layer: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("field layer {layer}")))
    }
}

fn trunk_hidden<F: Flow>(
    tape: &mut Tape,
    vars: &FieldVars,
    cfg: &FieldConfig,
    x: F,
) -> Result<(F, F)> {
    let scaled = x.scale(tape, cfg.pos_scale);
    let enc = encode(tape, scaled, cfg.l_pos);
    let mut h = enc;
    for l in 0..cfg.trunk_depth {
        if Some(l) == cfg.skip_layer {
            h = F::concat(tape, &[h, enc]);
        }
        let (w, b) = (vars.tensors[2 * l], vars.tensors[2 * l + 1]);
        h = h.matmul(tape, w).add_bias(tape, b).relu(tape);
        check_finite(tape, h.primal(), &format!("trunk{l}"))?;
    }
    let layout = Layout::of(cfg);
    let raw_sigma = h
        .matmul(tape, vars.tensors[layout.density])
        .add_bias(tape, vars.tensors[layout.density + 1]);
    let sigma = raw_sigma.softplus(tape);
    check_finite(tape, sigma.primal(), "density")?;
    Ok((h, sigma))
}

/// Trunk outputs for `N` positions.
#[derive(Clone, Copy, Debug)]
pub struct TrunkOutput {
    /// `N x 1`, nonnegative.
    pub sigma: Var,
    /// `N x 3` spatial gradient of `sigma`, when requested.
    pub grad_sigma: Option<Var>,
    /// `N x width` pre-conditioning bottleneck feature.
    pub bottleneck: Var,
    /// `N x 3`, at least `beta_floor`.
    pub beta: Var,
}

/// Density, bottleneck and scales at positions `x` (`N x 3`).
///
/// With `with_gradient` the trunk runs with stacked spatial tangents so the
/// returned gradient stays differentiable with respect to the weights.
pub fn trunk_forward(
    tape: &mut Tape,
    vars: &FieldVars,
    cfg: &FieldConfig,
    x: Var,
    with_gradient: bool,
) -> Result<TrunkOutput> {
    let (hidden, sigma, grad_sigma) = if with_gradient {
        let mut hidden = None;
        let mut failure = None;
        let (sigma, grad) = spatial_grad(tape, x, |tape, seed| {
            match trunk_hidden(tape, vars, cfg, seed) {
                Ok((h, s)) => {
                    hidden = Some(h.val);
                    s
                }
                Err(e) => {
                    failure = Some(e);
                    let zero = tape.constant(Array2::zeros((tape.shape(seed.val).0, 1)));
                    Jet::constant(tape, zero)
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        (hidden.expect("trunk evaluated"), sigma, Some(grad))
    } else {
        let (h, s) = trunk_hidden(tape, vars, cfg, x)?;
        (h, s, None)
    };
    let layout = Layout::of(cfg);
    let raw_beta = tape.matmul(hidden, vars.tensors[layout.scale]);
    let raw_beta = tape.add(raw_beta, vars.tensors[layout.scale + 1]);
    let beta = tape.softplus(raw_beta);
    let beta = tape.add_scalar(beta, cfg.beta_floor);
    let bottleneck = tape.matmul(hidden, vars.tensors[layout.bottleneck]);
    let bottleneck = tape.add(bottleneck, vars.tensors[layout.bottleneck + 1]);
    check_finite(tape, beta, "scale")?;
    check_finite(tape, bottleneck, "bottleneck")?;
    Ok(TrunkOutput {
        sigma,
        grad_sigma,
        bottleneck,
        beta,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `N x 3` RGB locations in `(0, 1)`.
    pub mu: Var,
    /// Penultimate direction-conditioned feature.
    pub b_dir: Var,
}

/// RGB locations from bottleneck features and encoded directions.
///
/// `dir_enc` has either one row per bottleneck row or a single row.
pub fn color_head(
    tape: &mut Tape,
    vars: &FieldVars,
    cfg: &FieldConfig,
    bottleneck: Var,
    dir_enc: Var,
) -> HeadOutput {
    let n = tape.shape(bottleneck).0;
    let dir_enc = if tape.shape(dir_enc).0 != n {
        tape.gather_rows(dir_enc, &vec![0; n])
    } else {
        dir_enc
    };
    let layout = Layout::of(cfg);
    let mut h = tape.concat_cols(&[bottleneck, dir_enc]);
    for l in 0..cfg.head_depth {
        let (w, b) = (vars.tensors[layout.head + 2 * l], vars.tensors[layout.head + 2 * l + 1]);
        h = tape.matmul(h, w);
        h = tape.add(h, b);
        h = tape.relu(h);
    }
    let raw = tape.matmul(h, vars.tensors[layout.rgb]);
    let raw = tape.add(raw, vars.tensors[layout.rgb + 1]);
    HeadOutput {
        mu: tape.sigmoid(raw),
        b_dir: h,
    }
}

/// Per-row normals `-g / |g|` (zero rows where `|g| < eps`).
pub fn normals(tape: &mut Tape, grad_sigma: Var, eps: f64) -> Var {
    let n = tape.normalize_rows(grad_sigma, eps);
    tape.neg(n)
}
