//! The frame encoder and its companions.
//!
//! The encoder is a multi-stage temporal network: each stage projects its
//! input (raw features for stage 1, the previous stage's class probabilities
//! afterwards) and runs blocks of windowed local attention followed by sparse
//! long-range attention over frames gathered at a fixed stride, each with a
//! residual connection and per-frame layer norm. Every stage ends in a linear
//! cluster head with a row softmax; the final stage's pre-head hidden states
//! are the frame embeddings used for alignment, clustering, and decoding.
//!
//! Alongside it live the drop-context network (a 4-layer frame-wise MLP with
//! a learned drop prototype), the per-frame drop probability, the pooled
//! video representation, and k-means initialization of the last cluster head.

use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::dataio::FeatureMatrix;
use crate::kmeans;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Stage count S.
    pub stages: usize,
    /// Embedding width e.
    pub embed_dim: usize,
    /// Local attention window w (non-overlapping).
    pub window: usize,
    /// Stride g for gathered long-range context frames.
    pub context_stride: usize,
    /// Output cluster count K_total (pseudo-activities x actions).
    pub cluster_count: usize,
    pub layers_per_stage: usize,
    /// Input feature dimension d.
    pub input_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            embed_dim: 64,
            window: 16,
            context_stride: 4,
            cluster_count: 50,
            layers_per_stage: 2,
            input_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 {
            return Err(Error::Config("stages must be >= 1".into()));
        }
        if self.window < 2 {
            return Err(Error::Config("window must be >= 2".into()));
        }
        if self.context_stride < 1 {
            return Err(Error::Config("context_stride must be >= 1".into()));
        }
        if self.cluster_count < 2 {
            return Err(Error::Config("cluster_count must be >= 2".into()));
        }
        if self.embed_dim < 1 || self.layers_per_stage < 1 || self.input_dim < 1 {
            return Err(Error::Config("embed_dim, layers_per_stage, input_dim must be >= 1".into()));
        }
        Ok(())
    }

    /// Softmax temperature shared by the drop probability and the alignment
    /// losses; scales with the embedding width.
    pub fn default_temperature(&self) -> f64 {
        0.1 * self.embed_dim as f64
    }
}

// ---- parameter storage ----

/// Ordered, named parameter tensors. Order is the binding contract between
/// initialization, the forward pass, the optimizer, and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Bind every tensor as a parameter leaf; slot = offset + position.
    pub fn bind(&self, tape: &mut Tape, slot_offset: usize) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(t.clone(), slot_offset + i))
            .collect()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Walks bound vars in the canonical order they were initialized.
struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    fn finished(&self) -> bool {
        self.pos == self.vars.len()
    }
}

/// Full trainable state: encoder parameters plus (after stage one of
/// training) the drop-context network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: BackboneConfig,
    pub backbone: ParamSet,
    pub drop: Option<ParamSet>,
}

impl ModelParams {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed).derive(0xB0DE);
        let mut set = ParamSet::new();
        let e = config.embed_dim;
        for s in 1..=config.stages {
            let in_dim = if s == 1 { config.input_dim } else { config.cluster_count };
            set.push(format!("s{s}.proj.w"), Tensor::randn_scaled(in_dim, e, in_dim, &mut rng));
            set.push(format!("s{s}.proj.b"), Tensor::zeros(1, e));
            for l in 1..=config.layers_per_stage {
                for kind in ["local", "long"] {
                    for w in ["wq", "wk", "wv", "wo"] {
                        set.push(
                            format!("s{s}.l{l}.{kind}.{w}"),
                            Tensor::randn_scaled(e, e, e, &mut rng),
                        );
                    }
                    set.push(format!("s{s}.l{l}.{kind}.ln.gain"), Tensor::filled(1, e, 1.0));
                    set.push(format!("s{s}.l{l}.{kind}.ln.shift"), Tensor::zeros(1, e));
                }
            }
            set.push(
                format!("s{s}.head.w"),
                Tensor::randn_scaled(config.cluster_count, e, e, &mut rng),
            );
            set.push(format!("s{s}.head.b"), Tensor::zeros(1, config.cluster_count));
        }
        Ok(Self { config, backbone: set, drop: None })
    }

    /// Create the drop-context parameters if absent (stage-two training).
    pub fn ensure_drop(&mut self, seed: u64) {
        if self.drop.is_none() {
            self.drop = Some(init_drop_context(self.config.embed_dim, seed));
        }
    }
}

/// 4-layer frame-wise MLP plus the learned drop prototype. The final layer
/// starts at zero so the residual path is an exact identity at init.
pub fn init_drop_context(embed_dim: usize, seed: u64) -> ParamSet {
    let mut rng = Rng::new(seed).derive(0xD209);
    let mut set = ParamSet::new();
    for l in 1..=4 {
        let w = if l == 4 {
            Tensor::zeros(embed_dim, embed_dim)
        } else {
            Tensor::randn_scaled(embed_dim, embed_dim, embed_dim, &mut rng)
        };
        set.push(format!("c.l{l}.w"), w);
        set.push(format!("c.l{l}.b"), Tensor::zeros(1, embed_dim));
    }
    set.push("c.proto", Tensor::randn_scaled(1, embed_dim, 1, &mut rng));
    set
}

// ---- forward pass ----

/// Tape handles produced by [`forward_on_tape`].
pub struct ForwardVars {
    /// Per stage, T x K_total logits (pre-softmax).
    pub stage_logits: Vec<Var>,
    /// Per stage, T x K_total row log-probabilities.
    pub stage_logprobs: Vec<Var>,
    /// Final-stage pre-head hidden states, T x e.
    pub embeddings: Var,
}

/// Per-video outputs with plain tensors.
#[derive(Debug, Clone)]
pub struct EmbeddingOutput {
    pub stage_logprobs: Vec<Tensor>,
    pub embeddings: Tensor,
}

/// Run the encoder on a tape so callers can attach losses and backpropagate.
/// `vars` must come from `params.backbone.bind(..)`.
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &BackboneConfig,
    vars: &[Var],
    features: &Tensor,
) -> Result<ForwardVars> {
    if features.cols != config.input_dim {
        return Err(Error::Contract(format!(
            "feature dim {} does not match configured input dim {}",
            features.cols, config.input_dim
        )));
    }
    let t_len = features.rows;
    let mut cursor = Cursor::new(vars);
    let x = tape.constant(features.clone());

    let mut stage_logits = Vec::with_capacity(config.stages);
    let mut stage_logprobs = Vec::with_capacity(config.stages);
    let mut embeddings = None;

    let mut stage_input = x;
    for stage in 1..=config.stages {
        let proj_w = cursor.next();
        let proj_b = cursor.next();
        let projected = tape.matmul(stage_input, proj_w);
        let mut h = tape.add_rowvec(projected, proj_b);

        for _layer in 0..config.layers_per_stage {
            h = attention_block(tape, &mut cursor, h, AttentionKind::Local(config.window));
            h = attention_block(
                tape,
                &mut cursor,
                h,
                AttentionKind::Strided(config.context_stride),
            );
        }

        check_finite(tape, h, stage)?;

        let head_w = cursor.next();
        let head_b = cursor.next();
        let head_wt = tape.transpose(head_w);
        let scores = tape.matmul(h, head_wt);
        let logits = tape.add_rowvec(scores, head_b);
        let logprobs = tape.log_softmax_rows(logits);
        stage_logits.push(logits);
        stage_logprobs.push(logprobs);

        if stage == config.stages {
            embeddings = Some(h);
        } else {
            // next stage consumes this stage's class probabilities
            stage_input = tape.softmax_rows(logits);
        }
    }
    debug_assert!(cursor.finished(), "forward did not consume all parameters");
    debug_assert_eq!(tape.value(stage_logprobs[0]).rows, t_len);

    Ok(ForwardVars { stage_logits, stage_logprobs, embeddings: embeddings.unwrap() })
}

enum AttentionKind {
    Local(usize),
    Strided(usize),
}

fn attention_block(tape: &mut Tape, cursor: &mut Cursor, h: Var, kind: AttentionKind) -> Var {
    let wq = cursor.next();
    let wk = cursor.next();
    let wv = cursor.next();
    let wo = cursor.next();
    let ln_gain = cursor.next();
    let ln_shift = cursor.next();

    let e = tape.value(h).cols;
    let t_len = tape.value(h).rows;
    let scale = 1.0 / (e as f64).sqrt();

    let q = tape.matmul(h, wq);
    let k = tape.matmul(h, wk);
    let v = tape.matmul(h, wv);

    let attended = match kind {
        AttentionKind::Local(window) => {
            let mut parts = Vec::new();
            let mut start = 0;
            while start < t_len {
                let end = (start + window).min(t_len);
                let qw = tape.slice_rows(q, start, end);
                let kw = tape.slice_rows(k, start, end);
                let vw = tape.slice_rows(v, start, end);
                let kt = tape.transpose(kw);
                let raw = tape.matmul(qw, kt);
                let scaled = tape.scale(raw, scale);
                let weights = tape.softmax_rows(scaled);
                parts.push(tape.matmul(weights, vw));
                start = end;
            }
            if parts.len() == 1 {
                parts[0]
            } else {
                tape.concat_rows(&parts)
            }
        }
        AttentionKind::Strided(stride) => {
            let indices: Vec<usize> = (0..t_len).step_by(stride).collect();
            let kc = tape.gather_rows(k, &indices);
            let vc = tape.gather_rows(v, &indices);
            let kt = tape.transpose(kc);
            let raw = tape.matmul(q, kt);
            let scaled = tape.scale(raw, scale);
            let weights = tape.softmax_rows(scaled);
            tape.matmul(weights, vc)
        }
    };

    let out = tape.matmul(attended, wo);
    let res = tape.add(h, out);
    tape.layer_norm(res, ln_gain, ln_shift)
}

fn check_finite(tape: &Tape, h: Var, stage: usize) -> Result<()> {
    if let Some((frame, dim)) = tape.value(h).first_non_finite() {
        return Err(Error::Numeric(format!(
            "non-finite activation in stage {stage} at frame {frame}, dim {dim}"
        )));
    }
    Ok(())
}

/// Inference entry point: encoder outputs as plain tensors.
pub fn forward(params: &ModelParams, features: &FeatureMatrix) -> Result<EmbeddingOutput> {
    let mut tape = Tape::new();
    let vars = params.backbone.bind(&mut tape, 0);
    let fwd = forward_on_tape(&mut tape, &params.config, &vars, features.values())?;
    Ok(EmbeddingOutput {
        stage_logprobs: fwd.stage_logprobs.iter().map(|&v| tape.value(v).clone()).collect(),
        embeddings: tape.value(fwd.embeddings).clone(),
    })
}

/// Output of the first local-attention sublayer of stage 1. Diagnostic
/// surface for the window-isolation property: frames only interact locally
/// until the first strided sublayer runs.
pub fn stage1_local_attention_output(
    params: &ModelParams,
    features: &FeatureMatrix,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.backbone.bind(&mut tape, 0);
    let mut cursor = Cursor::new(&vars);
    let x = tape.constant(features.values().clone());
    let proj_w = cursor.next();
    let proj_b = cursor.next();
    let projected = tape.matmul(x, proj_w);
    let h = tape.add_rowvec(projected, proj_b);
    let out = attention_block(&mut tape, &mut cursor, h, AttentionKind::Local(params.config.window));
    Ok(tape.value(out).clone())
}

// ---- drop context ----

pub struct DropVars {
    /// Context-adjusted embeddings, T x e.
    pub adjusted: Var,
    /// Learned drop prototype, 1 x e.
    pub prototype: Var,
}

#[derive(Debug, Clone)]
pub struct DropContextOutput {
    pub adjusted: Tensor,
    pub drop_prototype: Vec<f64>,
}

/// Apply the drop-context network on a tape. `vars` binds the drop
/// [`ParamSet`] (4 x (w, b) then the prototype).
pub fn drop_context_on_tape(tape: &mut Tape, vars: &[Var], embeddings: Var) -> DropVars {
    let mut cursor = Cursor::new(vars);
    let mut h = embeddings;
    for layer in 1..=4 {
        let w = cursor.next();
        let b = cursor.next();
        let lin = tape.matmul(h, w);
        h = tape.add_rowvec(lin, b);
        if layer < 4 {
            h = tape.tanh(h);
        }
    }
    let adjusted = tape.add(embeddings, h);
    let prototype = cursor.next();
    debug_assert!(cursor.finished());
    DropVars { adjusted, prototype }
}

/// Plain-tensor drop-context application.
pub fn drop_context(drop_params: &ParamSet, embeddings: &Tensor) -> Result<DropContextOutput> {
    if let Some((r, c)) = embeddings.first_non_finite() {
        return Err(Error::Numeric(format!("non-finite embedding at frame {r}, dim {c}")));
    }
    let mut tape = Tape::new();
    let vars = drop_params.bind(&mut tape, 0);
    let e = tape.constant(embeddings.clone());
    let out = drop_context_on_tape(&mut tape, &vars, e);
    Ok(DropContextOutput {
        adjusted: tape.value(out.adjusted).clone(),
        drop_prototype: tape.value(out.prototype).data.clone(),
    })
}

// ---- drop probability and pooling ----

/// Probability of dropping frame `u` given the target video's adjusted
/// embeddings: softmax mass on the prototype slot of the score vector
/// `[-|u - a_1|^2, ..., -|u - a_T|^2, -|u - proto|^2] / temperature`.
pub fn p_drop(u: &[f64], target_adjusted: &Tensor, prototype: &[f64], temperature: f64) -> f64 {
    debug_assert_eq!(u.len(), target_adjusted.cols);
    debug_assert_eq!(u.len(), prototype.len());
    let mut scores = Vec::with_capacity(target_adjusted.rows + 1);
    for r in 0..target_adjusted.rows {
        scores.push(-sq_dist(u, target_adjusted.row(r)) / temperature);
    }
    scores.push(-sq_dist(u, prototype) / temperature);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    (scores[scores.len() - 1] - max).exp() / sum
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Temporal mean of embedding rows, L2-normalized. The all-zero edge case
/// returns zeros with `degenerate = true`.
pub fn pooled_representation(embeddings: &Tensor) -> (Vec<f64>, bool) {
    let mut pooled = vec![0.0; embeddings.cols];
    for r in 0..embeddings.rows {
        for (p, v) in pooled.iter_mut().zip(embeddings.row(r).iter()) {
            *p += v;
        }
    }
    let inv_t = 1.0 / embeddings.rows as f64;
    for p in pooled.iter_mut() {
        *p *= inv_t;
    }
    let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return (pooled, true);
    }
    for p in pooled.iter_mut() {
        *p /= norm;
    }
    (pooled, false)
}

// ---- k-means head init ----

/// Initialize the final-stage cluster head from k-means centroids over the
/// embeddings of all provided videos: head rows become centroids, bias zero.
pub fn init_cluster_head_kmeans(
    params: &mut ModelParams,
    training_features: &[FeatureMatrix],
    seed: u64,
) -> Result<()> {
    let k = params.config.cluster_count;
    let mut all_rows: Vec<Vec<f64>> = Vec::new();
    for features in training_features {
        let out = forward(params, features)?;
        for r in 0..out.embeddings.rows {
            all_rows.push(out.embeddings.row(r).to_vec());
        }
    }
    if all_rows.len() < k {
        return Err(Error::Contract(format!(
            "k-means head init needs at least {k} frames, got {}",
            all_rows.len()
        )));
    }
    let points = Tensor::from_rows(&all_rows);
    let result = kmeans::kmeans(&points, k, seed, kmeans::DEFAULT_MAX_ITER, kmeans::DEFAULT_TOL)?;

    let stage = params.config.stages;
    let w_idx = params
        .backbone
        .index_of(&format!("s{stage}.head.w"))
        .expect("final head weight present");
    let b_idx = params
        .backbone
        .index_of(&format!("s{stage}.head.b"))
        .expect("final head bias present");
    *params.backbone.tensor_mut(w_idx) = result.centroids;
    let bias_shape = params.backbone.tensor(b_idx).shape();
    *params.backbone.tensor_mut(b_idx) = Tensor::zeros(bias_shape.0, bias_shape.1);
    Ok(())
}

// ---- checkpoints ----

const CHECKPOINT_MAGIC: &str = "actionseg-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Write parameters with config header; values are stored as f64 bit
/// patterns so reloads are bit-exact.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let c = &params.config;
    let mut text = String::new();
    let _ = writeln!(text, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}");
    let _ = writeln!(text, "stages {}", c.stages);
    let _ = writeln!(text, "embed_dim {}", c.embed_dim);
    let _ = writeln!(text, "window {}", c.window);
    let _ = writeln!(text, "context_stride {}", c.context_stride);
    let _ = writeln!(text, "cluster_count {}", c.cluster_count);
    let _ = writeln!(text, "layers_per_stage {}", c.layers_per_stage);
    let _ = writeln!(text, "input_dim {}", c.input_dim);
    let _ = writeln!(text, "has_drop {}", params.drop.is_some() as u8);
    let mut dump = |set: &ParamSet| {
        for (name, tensor) in set.iter() {
            let _ = writeln!(text, "tensor {name} {} {}", tensor.rows, tensor.cols);
            for r in 0..tensor.rows {
                let row = tensor.row(r);
                let hex: Vec<String> = row.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
                let _ = writeln!(text, "{}", hex.join(" "));
            }
        }
    };
    dump(&params.backbone);
    if let Some(drop) = &params.drop {
        dump(drop);
    }
    text.push_str("end\n");
    std::fs::write(path, text)
        .map_err(|e| Error::Io { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), message: e.to_string() })?;
    let err = |msg: &str| Error::Format { path: path.to_path_buf(), row: None, message: msg.into() };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err("empty checkpoint"))?;
    if header.trim() != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}") {
        return Err(err(&format!("unsupported checkpoint header `{header}`")));
    }

    let mut fields = std::collections::BTreeMap::new();
    for _ in 0..8 {
        let line = lines.next().ok_or_else(|| err("truncated header"))?;
        let mut parts = line.split_whitespace();
        let key = parts.next().ok_or_else(|| err("bad header line"))?;
        let value: usize =
            parts.next().ok_or_else(|| err("bad header line"))?.parse().map_err(|_| err("bad header value"))?;
        fields.insert(key.to_string(), value);
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| err(&format!("missing header field {k}")));
    let config = BackboneConfig {
        stages: get("stages")?,
        embed_dim: get("embed_dim")?,
        window: get("window")?,
        context_stride: get("context_stride")?,
        cluster_count: get("cluster_count")?,
        layers_per_stage: get("layers_per_stage")?,
        input_dim: get("input_dim")?,
    };
    let has_drop = get("has_drop")? == 1;

    let mut backbone = ParamSet::new();
    let mut drop = ParamSet::new();
    loop {
        let line = match lines.next() {
            Some(l) => l,
            None => return Err(err("missing end marker")),
        };
        if line.trim() == "end" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("tensor") => {}
            _ => return Err(err(&format!("expected tensor line, got `{line}`"))),
        }
        let name = parts.next().ok_or_else(|| err("tensor line missing name"))?.to_string();
        let rows: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err("tensor line missing rows"))?;
        let cols: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err("tensor line missing cols"))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row_line = lines.next().ok_or_else(|| err("truncated tensor data"))?;
            for tok in row_line.split_whitespace() {
                let bits = u64::from_str_radix(tok, 16).map_err(|_| err("bad tensor value"))?;
                data.push(f64::from_bits(bits));
            }
        }
        if data.len() != rows * cols {
            return Err(err(&format!("tensor {name}: expected {} values, got {}", rows * cols, data.len())));
        }
        let tensor = Tensor::from_vec(rows, cols, data);
        if name.starts_with("c.") {
            drop.push(name, tensor);
        } else {
            backbone.push(name, tensor);
        }
    }
    Ok(ModelParams { config, backbone, drop: if has_drop { Some(drop) } else { None } })
}
