//! The triadic training objective.
//!
//! Three levels, combined per video pair:
//!
//! - **video**: per-stage temporal smoothing of frame log-probabilities with
//!   a last-vs-first cyclic term (videos are treated as cyclic sequences);
//! - **activity**: drop-gated multi-cycle cycle-back regression between the
//!   two videos' context-adjusted embeddings, summed over both directions;
//! - **global**: margin contrastive loss on pooled video representations,
//!   driven by the binary same-activity label.
//!
//! Every loss is built on the autodiff tape; thin wrappers evaluate them to
//! plain numbers for inspection and tests.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the global term against the activity term on same-activity
    /// pairs in stage two.
    pub alpha: f64,
    /// Weight of the per-video smoothing terms.
    pub beta: f64,
    /// Contrastive margin for different-activity pairs.
    pub margin: f64,
    /// Weight of the cycle-back variance regularizer.
    pub lambda_var: f64,
    /// Softmax temperature for alignment and the drop probability.
    pub temperature: f64,
    /// Floor protecting the drop-gated division.
    pub cbr_floor: f64,
    /// Cycle depths averaged by the multi-cycle loss.
    pub cycle_depths: Vec<usize>,
    /// Last-vs-first smoothing term switch (ablation: off).
    pub cyclic_term_enabled: bool,
    /// Replace |d| with min(d^2, 16) in the smoothing loss.
    pub use_clamped_mse: bool,
    /// Compute drop probabilities from adjusted rows (true) or raw
    /// embedding rows (false).
    pub pdrop_from_adjusted: bool,
    /// Activity term switch (ablation: off keeps stage-one form throughout).
    pub activity_enabled: bool,
}

impl LossConfig {
    pub fn for_embed_dim(embed_dim: usize) -> Self {
        Self {
            alpha: 0.15,
            beta: 0.5,
            margin: 1.0,
            lambda_var: 1e-3,
            temperature: 0.1 * embed_dim as f64,
            cbr_floor: 1e-6,
            cycle_depths: vec![1, 2],
            cyclic_term_enabled: true,
            use_clamped_mse: false,
            pdrop_from_adjusted: true,
            activity_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0, 1]".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config("margin must be > 0".into()));
        }
        if self.cbr_floor <= 0.0 {
            return Err(Error::Config("cbr_floor must be > 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if self.cycle_depths.is_empty() || self.cycle_depths.iter().any(|&d| d == 0) {
            return Err(Error::Config("cycle_depths must be non-empty positive".into()));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_embed_dim(64)
    }
}

/// Which training stage a pair is evaluated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    One,
    Two,
}

// ---- video-level smoothing loss ----

/// Smoothing loss over one stage's log-probabilities plus the cyclic
/// last-vs-first term, normalized by 1/(S * (T+1)) across stages.
pub fn video_loss_on_tape(tape: &mut Tape, stage_logprobs: &[Var], config: &LossConfig) -> Var {
    let stages = stage_logprobs.len();
    let t_len = tape.value(stage_logprobs[0]).rows;
    let classes = tape.value(stage_logprobs[0]).cols;

    let mut total: Option<Var> = None;
    for &lp in stage_logprobs {
        let mut stage_terms: Vec<Var> = Vec::new();
        if t_len >= 2 {
            let next = tape.slice_rows(lp, 1, t_len);
            let prev = tape.slice_rows(lp, 0, t_len - 1);
            let diff = tape.sub(next, prev);
            stage_terms.push(penalty(tape, diff, config));
        }
        if config.cyclic_term_enabled {
            let last = tape.slice_rows(lp, t_len - 1, t_len);
            let first = tape.slice_rows(lp, 0, 1);
            let diff = tape.sub(last, first);
            stage_terms.push(penalty(tape, diff, config));
        }
        for term in stage_terms {
            // mean over classes, summed over time steps
            let scaled = tape.scale(term, 1.0 / classes as f64);
            total = Some(match total {
                None => scaled,
                Some(acc) => tape.add(acc, scaled),
            });
        }
    }
    let norm = 1.0 / (stages as f64 * (t_len as f64 + 1.0));
    match total {
        Some(acc) => tape.scale(acc, norm),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}

fn penalty(tape: &mut Tape, diff: Var, config: &LossConfig) -> Var {
    if config.use_clamped_mse {
        let sq = tape.mul(diff, diff);
        let clamped = tape.clamp_max(sq, 16.0);
        tape.sum(clamped)
    } else {
        let a = tape.abs(diff);
        tape.sum(a)
    }
}

/// Plain evaluation of the video loss.
pub fn video_loss(stage_logprobs: &[Tensor], config: &LossConfig) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = stage_logprobs.iter().map(|t| tape.constant(t.clone())).collect();
    let v = video_loss_on_tape(&mut tape, &vars, config);
    tape.value(v).item()
}

// ---- cycle-back regression ----

/// Soft attention step: distances, row softmax at the configured
/// temperature, and the attended rows.
fn soft_attend(tape: &mut Tape, queries: Var, keys: Var, config: &LossConfig) -> (Var, Var) {
    let d = tape.cdist_sq(queries, keys);
    let scaled = tape.scale(d, -1.0 / config.temperature);
    let weights = tape.softmax_rows(scaled);
    let attended = tape.matmul(weights, keys);
    (weights, attended)
}

/// Per-frame multi-cycle cycle-back regression, vectorized over all source
/// frames: returns a T_source x 1 column of losses.
///
/// A depth-d cycle alternates soft attention source -> target -> source d
/// times; the final hop back to the source produces a distribution over
/// source frames whose soft position must return to the starting index,
/// penalized by the variance-normalized squared error plus the variance
/// regularizer.
pub fn multi_cbr_on_tape(tape: &mut Tape, source: Var, target: Var, config: &LossConfig) -> Var {
    let t_src = tape.value(source).rows;
    let positions: Vec<f64> = (0..t_src).map(|m| m as f64).collect();
    let pos_col = tape.constant(Tensor::from_vec(t_src, 1, positions.clone()));
    let pos_row = tape.constant(Tensor::from_vec(1, t_src, positions.clone()));
    let ones_row = tape.constant(Tensor::filled(1, t_src, 1.0));
    let ones_col = tape.constant(Tensor::filled(t_src, 1, 1.0));

    let max_depth = *config.cycle_depths.iter().max().unwrap();
    let mut per_depth: Vec<Var> = Vec::new();
    let mut current = source;
    for depth in 1..=max_depth {
        let (_, nu) = soft_attend(tape, current, target, config);
        // distribution over source frames after cycling back
        let d_back = tape.cdist_sq(nu, source);
        let scaled = tape.scale(d_back, -1.0 / config.temperature);
        let beta = tape.softmax_rows(scaled);
        if config.cycle_depths.contains(&depth) {
            per_depth.push(cbr_from_weights(
                tape, beta, pos_col, pos_row, ones_row, ones_col, config,
            ));
        }
        if depth < max_depth {
            current = tape.matmul(beta, source);
        }
    }
    let mut acc = per_depth[0];
    for &d in per_depth.iter().skip(1) {
        acc = tape.add(acc, d);
    }
    tape.scale(acc, 1.0 / per_depth.len() as f64)
}

/// Position statistics of the cycle-back distribution and the per-frame
/// regression loss: (t - mu)^2 / (sigma^2 + eps) + lambda * ln(sigma^2 + eps).
fn cbr_from_weights(
    tape: &mut Tape,
    beta: Var,
    pos_col: Var,
    pos_row: Var,
    ones_row: Var,
    ones_col: Var,
    config: &LossConfig,
) -> Var {
    let mu = tape.matmul(beta, pos_col); // T x 1
    // sigma^2 = sum_m beta_m (m - mu)^2, computed in the non-negative form
    let mu_bcast = tape.matmul(mu, ones_row); // T x T
    let pos_bcast = tape.matmul(ones_col, pos_row); // T x T
    let dev = tape.sub(pos_bcast, mu_bcast);
    let dev_sq = tape.mul(dev, dev);
    let weighted = tape.mul(beta, dev_sq);
    let var = tape.matmul(weighted, ones_col); // T x 1 row sums
    let var_eps = tape.add_scalar(var, config.cbr_floor);

    let err = tape.sub(pos_col, mu);
    let err_sq = tape.mul(err, err);
    let ratio = tape.div(err_sq, var_eps);
    let log_term = tape.ln(var_eps);
    let reg = tape.scale(log_term, config.lambda_var);
    tape.add(ratio, reg)
}

/// Cycle-back regression loss for one source frame (plain evaluation).
pub fn cycle_back_regression(
    frame: usize,
    source: &Tensor,
    target: &Tensor,
    config: &LossConfig,
) -> Result<f64> {
    if source.rows < 2 || target.rows < 2 {
        return Err(Error::Contract("cycle-back regression needs >= 2 frames per video".into()));
    }
    if frame >= source.rows {
        return Err(Error::Contract(format!(
            "frame {frame} out of range for {} frames",
            source.rows
        )));
    }
    let mut tape = Tape::new();
    let s = tape.constant(source.clone());
    let t = tape.constant(target.clone());
    let all = multi_cbr_on_tape(&mut tape, s, t, config);
    Ok(tape.value(all).at(frame, 0))
}

// ---- drop-gated alignment (GTCC) ----

/// Drop probability per source frame, vectorized: softmax over
/// [-d(row, target_1), ..., -d(row, target_T), -d(row, prototype)] / temp,
/// returning the prototype slot's mass as a T x 1 column.
pub fn p_drop_on_tape(
    tape: &mut Tape,
    source_rows: Var,
    target_adjusted: Var,
    prototype: Var,
    config: &LossConfig,
) -> Var {
    let t_tgt = tape.value(target_adjusted).rows;
    let d_frames = tape.cdist_sq(source_rows, target_adjusted);
    let d_proto = tape.cdist_sq(source_rows, prototype);
    let scores = tape.concat_cols(&[d_frames, d_proto]);
    let scaled = tape.scale(scores, -1.0 / config.temperature);
    let weights = tape.softmax_rows(scaled);
    // extract the prototype column
    let wt = tape.transpose(weights);
    let proto_row = tape.slice_rows(wt, t_tgt, t_tgt + 1);
    tape.transpose(proto_row)
}

/// One direction of the drop-gated alignment loss:
/// sum_t [(1 - p_t) * L_t + p_t / max(L_t, floor)].
///
/// `source_embeddings` feeds the drop probability when the config says to
/// use raw rows; alignment always runs on the adjusted embeddings.
pub fn gtcc_loss_on_tape(
    tape: &mut Tape,
    source_embeddings: Var,
    source_adjusted: Var,
    target_adjusted: Var,
    prototype: Var,
    config: &LossConfig,
) -> Var {
    gtcc_gated(
        tape,
        source_embeddings,
        source_adjusted,
        target_adjusted,
        prototype,
        config,
        None,
    )
}

/// Internal form allowing tests to pin every drop probability to a constant.
pub(crate) fn gtcc_gated(
    tape: &mut Tape,
    source_embeddings: Var,
    source_adjusted: Var,
    target_adjusted: Var,
    prototype: Var,
    config: &LossConfig,
    p_override: Option<f64>,
) -> Var {
    let t_src = tape.value(source_adjusted).rows;
    let cbr = multi_cbr_on_tape(tape, source_adjusted, target_adjusted, config);
    let p = match p_override {
        Some(v) => tape.constant(Tensor::filled(t_src, 1, v)),
        None => {
            let rows = if config.pdrop_from_adjusted { source_adjusted } else { source_embeddings };
            p_drop_on_tape(tape, rows, target_adjusted, prototype, config)
        }
    };
    let ones = tape.constant(Tensor::filled(t_src, 1, 1.0));
    let keep = tape.sub(ones, p);
    let kept_term = tape.mul(keep, cbr);
    let floored = tape.clamp_min(cbr, config.cbr_floor);
    let drop_term = tape.div(p, floored);
    let combined = tape.add(kept_term, drop_term);
    tape.sum(combined)
}

/// Plain evaluation of one GTCC direction.
pub fn gtcc_loss(
    source_embeddings: &Tensor,
    source_adjusted: &Tensor,
    target_adjusted: &Tensor,
    prototype: &[f64],
    config: &LossConfig,
) -> f64 {
    let mut tape = Tape::new();
    let se = tape.constant(source_embeddings.clone());
    let sa = tape.constant(source_adjusted.clone());
    let ta = tape.constant(target_adjusted.clone());
    let proto = tape.constant(Tensor::from_vec(1, prototype.len(), prototype.to_vec()));
    let v = gtcc_loss_on_tape(&mut tape, se, sa, ta, proto, config);
    tape.value(v).item()
}

/// Both directions of the alignment loss for a same-activity pair.
#[allow(clippy::too_many_arguments)]
pub fn activity_loss_on_tape(
    tape: &mut Tape,
    embeddings_i: Var,
    adjusted_i: Var,
    embeddings_j: Var,
    adjusted_j: Var,
    prototype: Var,
    config: &LossConfig,
) -> Var {
    let ij = gtcc_loss_on_tape(tape, embeddings_i, adjusted_i, adjusted_j, prototype, config);
    let ji = gtcc_loss_on_tape(tape, embeddings_j, adjusted_j, adjusted_i, prototype, config);
    tape.add(ij, ji)
}

/// Plain evaluation of the bidirectional activity loss.
pub fn activity_loss(
    embeddings_i: &Tensor,
    adjusted_i: &Tensor,
    embeddings_j: &Tensor,
    adjusted_j: &Tensor,
    prototype: &[f64],
    config: &LossConfig,
) -> f64 {
    gtcc_loss(embeddings_i, adjusted_i, adjusted_j, prototype, config)
        + gtcc_loss(embeddings_j, adjusted_j, adjusted_i, prototype, config)
}

// ---- global contrastive loss ----

/// Pooled representation on the tape: temporal mean, L2-normalized.
pub fn pooled_on_tape(tape: &mut Tape, embeddings: Var) -> Var {
    let pooled = tape.mean_rows(embeddings);
    let sq = tape.mul(pooled, pooled);
    let norm_sq = tape.sum(sq);
    let norm = tape.sqrt(norm_sq);
    let safe = tape.clamp_min(norm, 1e-300);
    let one = tape.constant(Tensor::scalar(1.0));
    let inv = tape.div(one, safe);
    tape.scale_by(pooled, inv)
}

/// Margin contrastive loss over pooled representations:
/// (1 - y) d + y max(0, margin - d).
pub fn global_loss_on_tape(
    tape: &mut Tape,
    embeddings_i: Var,
    embeddings_j: Var,
    different_activity: bool,
    config: &LossConfig,
) -> Var {
    let pi = pooled_on_tape(tape, embeddings_i);
    let pj = pooled_on_tape(tape, embeddings_j);
    let diff = tape.sub(pi, pj);
    let sq = tape.mul(diff, diff);
    let dist_sq = tape.sum(sq);
    let dist = tape.sqrt(dist_sq);
    if different_activity {
        let neg = tape.neg(dist);
        let gap = tape.add_scalar(neg, config.margin);
        tape.clamp_min(gap, 0.0)
    } else {
        dist
    }
}

/// Plain evaluation of the global contrastive loss; `label` is 1 for
/// different-activity pairs, 0 for same-activity pairs.
pub fn global_loss(
    embeddings_i: &Tensor,
    embeddings_j: &Tensor,
    label: u8,
    config: &LossConfig,
) -> f64 {
    let mut tape = Tape::new();
    let ei = tape.constant(embeddings_i.clone());
    let ej = tape.constant(embeddings_j.clone());
    let v = global_loss_on_tape(&mut tape, ei, ej, label == 1, config);
    tape.value(v).item()
}

// ---- combination ----

/// The per-pair combination rule. Same-activity pairs in stage two blend the
/// global and activity terms by alpha; every other case trains on the global
/// term alone. The beta-weighted video terms always apply.
pub fn combine_components(
    global: f64,
    activity: f64,
    video_i: f64,
    video_j: f64,
    same_activity: bool,
    stage: TrainStage,
    config: &LossConfig,
) -> f64 {
    let video = config.beta * (video_i + video_j);
    if stage == TrainStage::Two && same_activity && config.activity_enabled {
        config.alpha * global + (1.0 - config.alpha) * activity + video
    } else {
        global + video
    }
}

/// Tape-side combination mirroring [`combine_components`].
pub fn combine_on_tape(
    tape: &mut Tape,
    global: Var,
    activity: Option<Var>,
    video_i: Var,
    video_j: Var,
    same_activity: bool,
    stage: TrainStage,
    config: &LossConfig,
) -> Var {
    let v_sum = tape.add(video_i, video_j);
    let video = tape.scale(v_sum, config.beta);
    let use_activity = stage == TrainStage::Two && same_activity && config.activity_enabled;
    match (use_activity, activity) {
        (true, Some(act)) => {
            let g = tape.scale(global, config.alpha);
            let a = tape.scale(act, 1.0 - config.alpha);
            let ga = tape.add(g, a);
            tape.add(ga, video)
        }
        _ => tape.add(global, video),
    }
}
