//! Query decoder over a conditioned patch-embedded memory.
//!
//! The encoder patch-embeds pooled history features, then adds four
//! gated condition groups (`memory += alpha * sigmoid(gate) * delta`) and
//! learned step/row/column position embeddings. The decoder refines one
//! reference point per query through `L` layers of self-attention,
//! cross-attention and a feed-forward block, moving each reference in
//! logit space by a predicted offset.

pub mod features;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::setloss::{fire_probs, locations, QueryVars};
use crate::targets::TargetError;
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, TensorError, Var};

pub use features::{extract, Features, Planes, CONDITION_GROUPS, REQUIRED_CHANNELS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Manifest(#[from] TargetError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Query budget Q.
    pub queries: usize,
    /// Decoder layers L.
    pub layers: usize,
    /// Embedding width d_e.
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch_stride: usize,
    /// Forecast steps in the memory; the horizon's weather is split evenly.
    pub memory_steps: usize,
    /// Injection coefficients for strides 1, 2, 4, 8.
    pub alpha_schedule: Vec<f64>,
    pub dropout: f64,
    /// Grid size the position tables are built for.
    pub height: usize,
    pub width: usize,
    /// Per-head width of the cross-attention locality prior in normalised
    /// box units; 0 disables it for that head.
    pub locality: Vec<f64>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            queries: 10,
            layers: 2,
            d_model: 32,
            heads: 4,
            ffn_dim: 64,
            patch_stride: 4,
            memory_steps: 2,
            alpha_schedule: vec![0.25, 0.5, 1.0, 1.0],
            dropout: 0.1,
            height: 64,
            width: 64,
            locality: vec![0.1, 0.2, 0.4, 0.0],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.queries < 1 || self.layers < 1 || self.d_model < 4 {
            return bad(format!(
                "need Q >= 1, L >= 1, d_e >= 4 (got {}, {}, {})",
                self.queries, self.layers, self.d_model
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "{} heads do not divide d_e {}",
                self.heads, self.d_model
            ));
        }
        if self.locality.len() != self.heads || self.locality.iter().any(|w| !(*w >= 0.0)) {
            return bad(format!("locality needs {} non-negative widths", self.heads));
        }
        if !self.patch_stride.is_power_of_two()
            || self.height % self.patch_stride != 0
            || self.width % self.patch_stride != 0
        {
            return bad(format!(
                "stride {} must be a power of two dividing {}x{}",
                self.patch_stride, self.height, self.width
            ));
        }
        if self.memory_steps == 0 || self.ffn_dim == 0 {
            return bad("memory_steps and ffn_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.alpha_schedule.is_empty() || self.alpha_schedule.iter().any(|a| !(*a >= 0.0)) {
            return bad("alpha_schedule needs non-negative entries".into());
        }
        Ok(())
    }

    /// Injection coefficient at the built scale.
    pub fn alpha(&self) -> f64 {
        let level = self.patch_stride.trailing_zeros() as usize;
        self.alpha_schedule[level.min(self.alpha_schedule.len() - 1)]
    }

    pub fn tokens_per_step(&self) -> usize {
        (self.height / self.patch_stride) * (self.width / self.patch_stride)
    }
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// Uniform in `(-a, a)`.
    Uniform(f64),
    /// Reference logits with points uniform in `(0.1, 0.9)`.
    RefLogits,
    /// Sine/cosine table over one grid axis written into channel half 0 or 1.
    Sine(usize),
}

/// `(n, d)` table with geometric frequencies from one half-wave over the axis
/// up to the Nyquist rate, occupying channels `[half * d/2, (half + 1) * d/2)`.
fn sine_table(n: usize, d: usize, half: usize) -> Vec<f64> {
    let m = (d / 4).max(1);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..m {
            let span = if m > 1 {
                k as f64 / (m - 1) as f64
            } else {
                0.0
            };
            let omega = std::f64::consts::PI / n as f64 * (n as f64).powf(span);
            let angle = (i as f64 + 0.5) * omega;
            let c = half * (d / 2) + 2 * k;
            if c + 1 < d {
                out[i * d + c] = angle.sin();
                out[i * d + c + 1] = angle.cos();
            }
        }
    }
    out
}

fn linear_shapes(
    out: &mut Vec<(String, Vec<usize>, Init)>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) {
    out.push((
        format!("{name}.w"),
        vec![fan_in, fan_out],
        Init::Uniform(1.0 / (fan_in as f64).sqrt()),
    ));
    out.push((format!("{name}.b"), vec![fan_out], Init::Zeros));
}

fn norm_shapes(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    out.push((format!("{name}.g"), vec![d], Init::Ones));
    out.push((format!("{name}.b"), vec![d], Init::Zeros));
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let s2 = cfg.patch_stride * cfg.patch_stride;
    let mut out = Vec::new();
    linear_shapes(&mut out, "embed.hist", features::HIST_CHANNELS * s2, d);
    for (group, c) in CONDITION_GROUPS {
        linear_shapes(&mut out, &format!("cond.{group}.gate"), c * s2, d);
        linear_shapes(&mut out, &format!("cond.{group}.proj"), c * s2, d);
    }
    out.push((
        "pos.step".into(),
        vec![cfg.memory_steps, d],
        Init::Uniform(0.02),
    ));
    out.push((
        "pos.row".into(),
        vec![cfg.height / cfg.patch_stride, d],
        Init::Sine(0),
    ));
    out.push((
        "pos.col".into(),
        vec![cfg.width / cfg.patch_stride, d],
        Init::Sine(1),
    ));
    out.push((
        "query.content".into(),
        vec![cfg.queries, d],
        Init::Uniform(1.0 / (d as f64).sqrt()),
    ));
    out.push(("query.ref".into(), vec![cfg.queries, 2], Init::RefLogits));
    for l in 0..cfg.layers {
        let p = format!("dec.{l}");
        linear_shapes(&mut out, &format!("{p}.qpos"), 2, d);
        for attn in ["self", "cross"] {
            for proj in ["q", "k", "v", "o"] {
                linear_shapes(&mut out, &format!("{p}.{attn}.{proj}"), d, d);
            }
        }
        norm_shapes(&mut out, &format!("{p}.ln1"), d);
        norm_shapes(&mut out, &format!("{p}.ln2"), d);
        linear_shapes(&mut out, &format!("{p}.ffn1"), d, cfg.ffn_dim);
        linear_shapes(&mut out, &format!("{p}.ffn2"), cfg.ffn_dim, d);
        norm_shapes(&mut out, &format!("{p}.ln3"), d);
        out.push((format!("{p}.offset.w"), vec![d, 2], Init::Zeros));
        out.push((format!("{p}.offset.b"), vec![2], Init::Zeros));
    }
    linear_shapes(&mut out, "head.cls", d, 2);
    out
}

/// Names and shapes of every parameter, in storage order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

pub fn parameter_count(cfg: &ModelConfig) -> usize {
    layout(cfg)
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum()
}

/// Fresh parameters, deterministic in `cfg.seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg) {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(a) => (0..n).map(|_| rng.gen_range(-a..a)).collect(),
            Init::RefLogits => (0..n)
                .map(|_| {
                    let r: f64 = rng.gen_range(0.1..0.9);
                    (r / (1.0 - r)).ln()
                })
                .collect(),
            Init::Sine(half) => sine_table(shape[0], shape[1], half),
        };
        store.insert(&name, Tensor::from_f64(shape, &values)?)?;
    }
    Ok(store)
}

/// Forward mode; training mode applies dropout with the given generator.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Decoder output for one entity.
#[derive(Clone, Debug)]
pub struct QuerySet {
    /// `(Q, 2)` class logits, fire class last.
    pub logits: Var,
    /// `(Q, 2)` final reference points, equal to the last entry of `refs`.
    pub locs: Var,
    /// `r^0 .. r^L`.
    pub refs: Vec<Var>,
}

impl QuerySet {
    pub fn vars(&self) -> QueryVars {
        QueryVars {
            logits: self.logits,
            locs: self.locs,
        }
    }
}

/// Plain-value predictions in normalised box coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub probs: Vec<f64>,
    pub locs: Vec<[f64; 2]>,
}

impl Predictions {
    pub fn from_graph<T: Scalar>(g: &Graph<T>, q: &QuerySet) -> Self {
        Self {
            probs: fire_probs(g, q.logits),
            locs: locations(g, q.locs),
        }
    }
}

/// Memory tokens with the normalised centre of each token.
#[derive(Clone, Debug)]
pub struct Memory {
    pub tokens: Var,
    pub positions: Vec<[f64; 2]>,
}

/// One refinement step in scalar form: `sigmoid(logit(r) + delta)`.
pub fn refine(r: f64, delta: f64) -> f64 {
    let r = r.clamp(
        crate::tensor::INVERSE_SIGMOID_EPS,
        1.0 - crate::tensor::INVERSE_SIGMOID_EPS,
    );
    1.0 / (1.0 + (-((r / (1.0 - r)).ln() + delta)).exp())
}

fn param<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    let id = store
        .id(name)
        .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
    Ok(g.param(store, id))
}

fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
    let w = param(g, store, &format!("{name}.w"))?;
    let b = param(g, store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

fn norm<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, name: &str) -> Result<Var> {
    let gain = param(g, store, &format!("{name}.g"))?;
    let bias = param(g, store, &format!("{name}.b"))?;
    let n = g.layer_norm(x)?;
    let n = g.mul(n, gain)?;
    Ok(g.add(n, bias)?)
}

fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, mode: &mut Mode) -> Result<Var> {
    let rng = match mode {
        Mode::Train(rng) if rate > 0.0 => rng,
        _ => return Ok(x),
    };
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let m = g.constant(Tensor::from_f64(shape, &mask)?);
    Ok(g.mul(x, m)?)
}

#[allow(clippy::too_many_arguments)]
fn attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: usize,
    bias: &[Option<Var>],
) -> Result<Var> {
    let q = linear(g, store, q_in, &format!("{name}.q"))?;
    let k = linear(g, store, k_in, &format!("{name}.k"))?;
    let v = linear(g, store, v_in, &format!("{name}.v"))?;
    let d = g.shape(q)[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols: Vec<usize> = (h * dh..(h + 1) * dh).collect();
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.gather(q, 1, cols.clone())?,
                g.gather(k, 1, cols.clone())?,
                g.gather(v, 1, cols)?,
            )
        };
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let mut logits = g.scale(logits, scale)?;
        if let Some(b) = bias.get(h).copied().flatten() {
            logits = g.add(logits, b)?;
        }
        let a = g.softmax(logits, 1)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    linear(g, store, cat, &format!("{name}.o"))
}

fn check_features(cfg: &ModelConfig, feats: &Features) -> Result<()> {
    let (h, w) = (feats.hist.height, feats.hist.width);
    if h != cfg.height || w != cfg.width {
        return Err(ModelError::Config(format!(
            "features are {h}x{w}, model expects {}x{}",
            cfg.height, cfg.width
        )));
    }
    if feats.weather.len() != cfg.memory_steps {
        return Err(ModelError::Config(format!(
            "features carry {} weather steps, model expects {}",
            feats.weather.len(),
            cfg.memory_steps
        )));
    }
    Ok(())
}

fn patch_input<T: Scalar>(g: &mut Graph<T>, planes: &Planes, stride: usize) -> Result<Var> {
    let rows = (planes.height / stride) * (planes.width / stride);
    let cols = planes.channels * stride * stride;
    Ok(g.constant(Tensor::from_f64(vec![rows, cols], &planes.patches(stride))?))
}

fn gated<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    group: &str,
    x: Var,
    alpha: f64,
) -> Result<Var> {
    let gate = linear(g, store, x, &format!("cond.{group}.gate"))?;
    let gate = g.sigmoid(gate)?;
    let delta = linear(g, store, x, &format!("cond.{group}.proj"))?;
    let m = g.mul(gate, delta)?;
    Ok(g.scale(m, alpha)?)
}

/// Memory tokens `(memory_steps * tokens_per_step, d_e)`, step-major.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    feats: &Features,
) -> Result<Memory> {
    cfg.validate()?;
    check_features(cfg, feats)?;
    let s = cfg.patch_stride;
    let (hs, ws) = (cfg.height / s, cfg.width / s);
    let n = hs * ws;
    let alpha = cfg.alpha();

    let hist = patch_input(g, &feats.hist, s)?;
    let mut shared = linear(g, store, hist, "embed.hist")?;
    if alpha > 0.0 {
        for (group, _) in CONDITION_GROUPS.iter().skip(1) {
            let x = patch_input(g, feats.group(group, 0), s)?;
            let c = gated(g, store, group, x, alpha)?;
            shared = g.add(shared, c)?;
        }
    }
    let rows = param(g, store, "pos.row")?;
    let cols = param(g, store, "pos.col")?;
    let rows = g.gather(rows, 0, (0..n).map(|i| i / ws).collect())?;
    let cols = g.gather(cols, 0, (0..n).map(|i| i % ws).collect())?;
    let grid_pos = g.add(rows, cols)?;
    shared = g.add(shared, grid_pos)?;
    let step_table = param(g, store, "pos.step")?;

    let mut steps = Vec::with_capacity(cfg.memory_steps);
    for step in 0..cfg.memory_steps {
        let mut m = shared;
        if alpha > 0.0 {
            let x = patch_input(g, &feats.weather[step], s)?;
            let c = gated(g, store, CONDITION_GROUPS[0].0, x, alpha)?;
            m = g.add(m, c)?;
        }
        let e = g.gather(step_table, 0, vec![step])?;
        let e = g.reshape(e, vec![cfg.d_model])?;
        steps.push(g.add(m, e)?);
    }
    let tokens = if steps.len() == 1 {
        steps[0]
    } else {
        g.concat(&steps, 0)?
    };

    // token centres from the coordinate planes of the history features
    let plane = feats.hist.height * feats.hist.width;
    let coord = |c: usize, py: usize, px: usize| {
        let base = c * plane;
        let mut acc = 0.0;
        for dy in 0..s {
            for dx in 0..s {
                acc += feats.hist.data[base + (py * s + dy) * feats.hist.width + px * s + dx];
            }
        }
        acc / (s * s) as f64
    };
    let one_step: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            [
                coord(features::HIST_CHANNELS - 2, i / ws, i % ws),
                coord(features::HIST_CHANNELS - 1, i / ws, i % ws),
            ]
        })
        .collect();
    let positions = (0..cfg.memory_steps)
        .flat_map(|_| one_step.iter().copied())
        .collect();
    Ok(Memory { tokens, positions })
}

/// Per-head additive cross-attention bias `-|r_q - p_n|^2 / (2 w^2)`, with
/// the row-constant `|r_q|^2` term dropped since softmax ignores it.
fn locality_bias<T: Scalar>(
    g: &mut Graph<T>,
    refs: Var,
    positions: &[[f64; 2]],
    widths: &[f64],
) -> Result<Vec<Option<Var>>> {
    let n = positions.len();
    let mut pt = vec![0.0; 2 * n];
    for (i, p) in positions.iter().enumerate() {
        pt[i] = p[0];
        pt[n + i] = p[1];
    }
    let pt = g.constant(Tensor::from_f64(vec![2, n], &pt)?);
    let cross = g.matmul(refs, pt)?;
    let mut out = Vec::with_capacity(widths.len());
    for &w in widths {
        if w == 0.0 {
            out.push(None);
            continue;
        }
        let gamma = 1.0 / (2.0 * w * w);
        let sq: Vec<f64> = positions
            .iter()
            .map(|p| -gamma * (p[0] * p[0] + p[1] * p[1]))
            .collect();
        let sq = g.constant(Tensor::from_f64(vec![n], &sq)?);
        let b = g.scale(cross, 2.0 * gamma)?;
        out.push(Some(g.add(b, sq)?));
    }
    Ok(out)
}

pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: &Memory,
    mode: &mut Mode,
) -> Result<QuerySet> {
    let mut h = param(g, store, "query.content")?;
    let r0 = param(g, store, "query.ref")?;
    let mut r = g.sigmoid(r0)?;
    let mut refs = vec![r];
    for l in 0..cfg.layers {
        let p = format!("dec.{l}");
        let qpos = linear(g, store, r, &format!("{p}.qpos"))?;

        let hq = g.add(h, qpos)?;
        let sa = attention(g, store, &format!("{p}.self"), hq, hq, h, cfg.heads, &[])?;
        let sa = dropout(g, sa, cfg.dropout, mode)?;
        let x = g.add(h, sa)?;
        h = norm(g, store, x, &format!("{p}.ln1"))?;

        let hq = g.add(h, qpos)?;
        let bias = locality_bias(g, r, &memory.positions, &cfg.locality)?;
        let ca = attention(
            g,
            store,
            &format!("{p}.cross"),
            hq,
            memory.tokens,
            memory.tokens,
            cfg.heads,
            &bias,
        )?;
        let ca = dropout(g, ca, cfg.dropout, mode)?;
        let x = g.add(h, ca)?;
        h = norm(g, store, x, &format!("{p}.ln2"))?;

        let f = linear(g, store, h, &format!("{p}.ffn1"))?;
        let f = g.relu(f)?;
        let f = dropout(g, f, cfg.dropout, mode)?;
        let f = linear(g, store, f, &format!("{p}.ffn2"))?;
        let f = dropout(g, f, cfg.dropout, mode)?;
        let x = g.add(h, f)?;
        h = norm(g, store, x, &format!("{p}.ln3"))?;

        let delta = linear(g, store, h, &format!("{p}.offset"))?;
        let logit = g.inverse_sigmoid(r)?;
        let moved = g.add(logit, delta)?;
        r = g.sigmoid(moved)?;
        refs.push(r);
    }
    let logits = linear(g, store, h, "head.cls")?;
    Ok(QuerySet {
        logits,
        locs: r,
        refs,
    })
}

pub fn predict<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    feats: &Features,
    mode: &mut Mode,
) -> Result<QuerySet> {
    let memory = encode(g, store, cfg, feats)?;
    decode(g, store, cfg, &memory, mode)
}

/// Evaluation-mode forward returning plain values.
pub fn predict_values<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    feats: &Features,
) -> Result<Predictions> {
    let mut g = Graph::new();
    let q = predict(&mut g, store, cfg, feats, &mut Mode::Eval)?;
    Ok(Predictions::from_graph(&g, &q))
}
