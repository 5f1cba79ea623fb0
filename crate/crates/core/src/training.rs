//! Pair construction and the two-stage optimization loop.
//!
//! Stage one trains the encoder with the global contrastive and video
//! smoothing terms; stage two creates the drop-context network and switches
//! same-activity pairs to the full blended objective. One optimizer step per
//! batch of pairs, gradients averaged over the batch.

use std::path::Path;

use crate::autodiff::Tape;
use crate::dataio::{downsample, DatasetManifest};
use crate::losses::{self, LossConfig, TrainStage};
use crate::model::{self, ModelParams};
use crate::tensor::Tensor;
use crate::{Error, Result};
use crate::rng::Rng;

/// One video pair; `same_activity` is the binary supervision signal
/// (y = 0 in the contrastive loss when true).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub i: usize,
    pub j: usize,
    pub same_activity: bool,
}

#[derive(Debug, Clone)]
pub struct PairSet {
    pub same_pairs: Vec<(usize, usize)>,
    pub diff_pairs: Vec<(usize, usize)>,
    /// Non-fatal construction notes (single-video activities etc.).
    pub warnings: Vec<String>,
}

/// Enumerate all same-activity pairs and a stratified, equally sized sample
/// of different-activity pairs, balanced across activity pairs.
pub fn build_pairs(manifest: &DatasetManifest, seed: u64) -> Result<PairSet> {
    let groups = manifest.by_activity();
    if groups.len() < 2 {
        return Err(Error::Validation(
            "need at least two activities: the contrastive branch is unusable with one".into(),
        ));
    }
    let mut warnings = Vec::new();
    let mut same_pairs = Vec::new();
    for (activity, members) in &groups {
        if members.len() < 2 {
            warnings.push(format!(
                "activity {activity} has a single video; it participates in different-activity pairs only"
            ));
            continue;
        }
        for a in 0..members.len() {
            for b in a + 1..members.len() {
                same_pairs.push((members[a], members[b]));
            }
        }
    }
    if same_pairs.is_empty() {
        return Err(Error::Validation(
            "no activity has two or more videos; no same-activity pairs exist".into(),
        ));
    }

    // all cross pairs, bucketed by unordered activity pair
    let activities: Vec<&Vec<usize>> = groups.values().collect();
    let mut rng = Rng::new(seed).derive(0x9A13);
    let mut buckets: Vec<Vec<(usize, usize)>> = Vec::new();
    for a in 0..activities.len() {
        for b in a + 1..activities.len() {
            let mut bucket = Vec::with_capacity(activities[a].len() * activities[b].len());
            for &va in activities[a] {
                for &vb in activities[b] {
                    bucket.push((va, vb));
                }
            }
            rng.shuffle(&mut bucket);
            buckets.push(bucket);
        }
    }
    let available: usize = buckets.iter().map(|b| b.len()).sum();
    let target = same_pairs.len().min(available);
    if target < same_pairs.len() {
        warnings.push(format!(
            "only {available} cross-activity pairs exist; using all of them instead of {}",
            same_pairs.len()
        ));
    }

    // round-robin across buckets keeps activity pairs balanced
    let mut diff_pairs = Vec::with_capacity(target);
    let mut cursors = vec![0usize; buckets.len()];
    while diff_pairs.len() < target {
        let mut progressed = false;
        for (bucket, cursor) in buckets.iter().zip(cursors.iter_mut()) {
            if diff_pairs.len() == target {
                break;
            }
            if *cursor < bucket.len() {
                diff_pairs.push(bucket[*cursor]);
                *cursor += 1;
                progressed = true;
            }
        }
        debug_assert!(progressed, "bucket exhaustion with target not reached");
    }

    // coverage repair: every video should appear in some diff pair when
    // the sample size permits
    let n_videos = manifest.videos();
    let mut coverage = vec![0usize; n_videos];
    for &(a, b) in &diff_pairs {
        coverage[a] += 1;
        coverage[b] += 1;
    }
    for v in 0..n_videos {
        if coverage[v] > 0 {
            continue;
        }
        let my_activity = manifest.records[v].activity_label;
        // partner: least-covered video of another activity
        let partner = (0..n_videos)
            .filter(|&u| manifest.records[u].activity_label != my_activity)
            .min_by_key(|&u| coverage[u]);
        let partner = match partner {
            Some(p) => p,
            None => break,
        };
        // evict a redundant pair (both endpoints covered at least twice)
        let victim = diff_pairs
            .iter()
            .position(|&(a, b)| coverage[a] >= 2 && coverage[b] >= 2);
        if let Some(idx) = victim {
            let (a, b) = diff_pairs[idx];
            coverage[a] -= 1;
            coverage[b] -= 1;
            diff_pairs[idx] = (v, partner);
            coverage[v] += 1;
            coverage[partner] += 1;
        }
    }

    Ok(PairSet { same_pairs, diff_pairs, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Fraction of each pair pool sampled per epoch.
    pub epoch_fraction: f64,
    pub seed: u64,
    /// Initialize the final cluster head from k-means over embeddings.
    pub kmeans_init: bool,
    /// Temporal downsampling target during training.
    pub downsample_len: usize,
    /// Redraw the per-video downsampling each epoch instead of fixing it
    /// once per video.
    pub resample_per_epoch: bool,
    /// Worker threads for batch evaluation; 0 picks a sensible default.
    pub threads: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs_stage1: 30,
            epochs_stage2: 30,
            epoch_fraction: 0.5,
            seed: 0,
            kmeans_init: true,
            downsample_len: 256,
            resample_per_epoch: false,
            threads: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(self.epoch_fraction > 0.0 && self.epoch_fraction <= 1.0) {
            return Err(Error::Config("epoch_fraction must be in (0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.downsample_len < 2 {
            return Err(Error::Config("downsample_len must be >= 2".into()));
        }
        self.loss.validate()
    }
}

/// Sample one epoch's batches: `epoch_fraction` of each pool without
/// replacement, interleaved so every batch stays near a 1:1 label ratio.
pub fn sample_epoch(pairs: &PairSet, config: &TrainConfig, epoch: usize) -> Vec<Vec<PairSample>> {
    let mut rng = Rng::new(config.seed).derive(0xE0C + epoch as u64);
    let n_same = ((pairs.same_pairs.len() as f64 * config.epoch_fraction).round() as usize)
        .clamp(1, pairs.same_pairs.len());
    let n_diff = ((pairs.diff_pairs.len() as f64 * config.epoch_fraction).round() as usize)
        .clamp(usize::from(!pairs.diff_pairs.is_empty()), pairs.diff_pairs.len().max(1))
        .min(pairs.diff_pairs.len());

    let same_idx = rng.sample_indices(pairs.same_pairs.len(), n_same);
    let diff_idx = rng.sample_indices(pairs.diff_pairs.len(), n_diff);

    let mut interleaved = Vec::with_capacity(n_same + n_diff);
    let mut s_iter = same_idx.into_iter();
    let mut d_iter = diff_idx.into_iter();
    loop {
        let s = s_iter.next();
        let d = d_iter.next();
        if let Some(s) = s {
            let (i, j) = pairs.same_pairs[s];
            interleaved.push(PairSample { i, j, same_activity: true });
        }
        if let Some(d) = d {
            let (i, j) = pairs.diff_pairs[d];
            interleaved.push(PairSample { i, j, same_activity: false });
        }
        if s.is_none() && d.is_none() {
            break;
        }
    }

    interleaved
        .chunks(config.batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// Per-pair loss components (plain values, for logging).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossComponents {
    pub total: f64,
    pub global: f64,
    pub activity: f64,
    pub video: f64,
}

/// Evaluate one pair and return gradients by slot (backbone slots first,
/// then drop-context slots) plus the loss components.
pub fn pair_gradients(
    params: &ModelParams,
    features_i: &Tensor,
    features_j: &Tensor,
    same_activity: bool,
    stage: TrainStage,
    loss_cfg: &LossConfig,
) -> Result<(Vec<Option<Tensor>>, LossComponents)> {
    let n_backbone = params.backbone.len();
    let n_drop = params.drop.as_ref().map_or(0, |d| d.len());
    let mut tape = Tape::new();
    let backbone_vars = params.backbone.bind(&mut tape, 0);

    let fwd_i = model::forward_on_tape(&mut tape, &params.config, &backbone_vars, features_i)?;
    let fwd_j = model::forward_on_tape(&mut tape, &params.config, &backbone_vars, features_j)?;

    let video_i = losses::video_loss_on_tape(&mut tape, &fwd_i.stage_logprobs, loss_cfg);
    let video_j = losses::video_loss_on_tape(&mut tape, &fwd_j.stage_logprobs, loss_cfg);
    let global =
        losses::global_loss_on_tape(&mut tape, fwd_i.embeddings, fwd_j.embeddings, !same_activity, loss_cfg);

    let needs_activity =
        stage == TrainStage::Two && same_activity && loss_cfg.activity_enabled;
    let activity = if needs_activity {
        let drop = params
            .drop
            .as_ref()
            .ok_or_else(|| Error::Contract("stage two requires drop-context parameters".into()))?;
        let drop_vars = drop.bind(&mut tape, n_backbone);
        let ctx_i = model::drop_context_on_tape(&mut tape, &drop_vars, fwd_i.embeddings);
        let ctx_j = model::drop_context_on_tape(&mut tape, &drop_vars, fwd_j.embeddings);
        Some(losses::activity_loss_on_tape(
            &mut tape,
            fwd_i.embeddings,
            ctx_i.adjusted,
            fwd_j.embeddings,
            ctx_j.adjusted,
            ctx_i.prototype,
            loss_cfg,
        ))
    } else {
        None
    };

    let total = losses::combine_on_tape(
        &mut tape, global, activity, video_i, video_j, same_activity, stage, loss_cfg,
    );

    let components = LossComponents {
        total: tape.value(total).item(),
        global: tape.value(global).item(),
        activity: activity.map_or(0.0, |a| tape.value(a).item()),
        video: tape.value(video_i).item() + tape.value(video_j).item(),
    };
    if !components.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite pair loss (global {}, activity {}, video {})",
            components.global, components.activity, components.video
        )));
    }

    let grads = tape.backward(total);
    Ok((grads.by_slot(&tape, n_backbone + n_drop), components))
}

// ---- optimizer ----

struct Adam {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure_slots(&mut self, shapes: &[(usize, usize)]) {
        while self.m.len() < shapes.len() {
            let (r, c) = shapes[self.m.len()];
            self.m.push(Tensor::zeros(r, c));
            self.v.push(Tensor::zeros(r, c));
        }
    }

    fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// Update one parameter slot; a missing gradient counts as zero but
    /// weight decay still applies.
    fn update_slot(&mut self, slot: usize, theta: &mut Tensor, grad: Option<&Tensor>) {
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        for idx in 0..theta.data.len() {
            let raw = grad.map_or(0.0, |g| g.data[idx]);
            let g = raw + self.weight_decay * theta.data[idx];
            m.data[idx] = self.beta1 * m.data[idx] + (1.0 - self.beta1) * g;
            v.data[idx] = self.beta2 * v.data[idx] + (1.0 - self.beta2) * g * g;
            let m_hat = m.data[idx] / bc1;
            let v_hat = v.data[idx] / bc2;
            theta.data[idx] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---- the loop ----

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub loss_total: f64,
    pub loss_global: f64,
    pub loss_activity: f64,
    pub loss_video: f64,
}

/// Resumable trainer; the CLI and the browser demo both drive this.
pub struct Trainer {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub pairs: PairSet,
    pub log: Vec<EpochLog>,
    manifest_ids: Vec<String>,
    original: Vec<Tensor>,
    train_features: Vec<Tensor>,
    optimizer: Adam,
    next_epoch: usize,
}

impl Trainer {
    pub fn new(
        manifest: &DatasetManifest,
        model_config: crate::model::BackboneConfig,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if model_config.input_dim != manifest.feature_dim {
            return Err(Error::Contract(format!(
                "model input dim {} does not match dataset dim {}",
                model_config.input_dim, manifest.feature_dim
            )));
        }
        let pairs = build_pairs(manifest, config.seed)?;
        let original: Vec<Tensor> =
            manifest.records.iter().map(|r| r.features.values().clone()).collect();
        let manifest_ids: Vec<String> =
            manifest.records.iter().map(|r| r.video_id.clone()).collect();

        let mut params = ModelParams::init(model_config, config.seed)?;
        let train_features =
            resample_features(manifest, config.downsample_len, config.seed, 0)?;
        if config.kmeans_init {
            let wrapped: Vec<crate::dataio::FeatureMatrix> = train_features
                .iter()
                .map(|t| crate::dataio::FeatureMatrix::new(t.clone()))
                .collect::<Result<_>>()?;
            model::init_cluster_head_kmeans(&mut params, &wrapped, config.seed)?;
        }
        let optimizer = Adam::new(config.lr, config.weight_decay);
        Ok(Self {
            params,
            config,
            pairs,
            log: Vec::new(),
            manifest_ids,
            original,
            train_features,
            optimizer,
            next_epoch: 0,
        })
    }

    pub fn total_epochs(&self) -> usize {
        self.config.epochs_stage1 + self.config.epochs_stage2
    }

    pub fn finished(&self) -> bool {
        self.next_epoch >= self.total_epochs()
    }

    pub fn stage_of(&self, epoch: usize) -> TrainStage {
        if epoch < self.config.epochs_stage1 {
            TrainStage::One
        } else {
            TrainStage::Two
        }
    }

    /// Index of the epoch that starts stage two.
    pub fn stage_boundary(&self) -> usize {
        self.config.epochs_stage1
    }

    pub fn step_epoch(&mut self) -> Result<EpochLog> {
        if self.finished() {
            return Err(Error::Contract("training already finished".into()));
        }
        let epoch = self.next_epoch;
        let stage = self.stage_of(epoch);
        if stage == TrainStage::Two && self.params.drop.is_none() {
            // the objective changes shape here: create the drop-context
            // parameters and start the optimizer moments fresh
            self.params.ensure_drop(self.config.seed ^ 0xD20);
            self.optimizer = Adam::new(self.config.lr, self.config.weight_decay);
        }
        if self.config.resample_per_epoch && epoch > 0 {
            self.train_features = resample_features_from(
                &self.original,
                self.config.downsample_len,
                self.config.seed,
                epoch as u64,
            )?;
        }

        let batches = sample_epoch(&self.pairs, &self.config, epoch);
        let threads = effective_threads(self.config.threads);
        let mut sums = LossComponents::default();
        let mut n_pairs = 0usize;
        let n_backbone = self.params.backbone.len();
        let n_drop = self.params.drop.as_ref().map_or(0, |d| d.len());

        for batch in &batches {
            let params = &self.params;
            let features = &self.train_features;
            let loss_cfg = &self.config.loss;
            let results: Vec<Result<(Vec<Option<Tensor>>, LossComponents)>> =
                parallel_map(batch, threads, |pair| {
                    pair_gradients(
                        params,
                        &features[pair.i],
                        &features[pair.j],
                        pair.same_activity,
                        stage,
                        loss_cfg,
                    )
                    .map_err(|e| self.pair_error(pair, e))
                });

            let mut acc: Vec<Option<Tensor>> = (0..n_backbone + n_drop).map(|_| None).collect();
            for result in results {
                let (grads, comps) = result?;
                for (slot, g) in grads.into_iter().enumerate() {
                    if let Some(g) = g {
                        match &mut acc[slot] {
                            Some(existing) => existing.add_inplace(&g),
                            dest => *dest = Some(g),
                        }
                    }
                }
                sums.total += comps.total;
                sums.global += comps.global;
                sums.activity += comps.activity;
                sums.video += comps.video;
                n_pairs += 1;
            }
            let inv = 1.0 / batch.len() as f64;
            for g in acc.iter_mut().flatten() {
                g.scale_inplace(inv);
            }

            // slot order: backbone tensors then drop tensors
            let mut shapes: Vec<(usize, usize)> = Vec::with_capacity(n_backbone + n_drop);
            for i in 0..n_backbone {
                shapes.push(self.params.backbone.tensor(i).shape());
            }
            if let Some(drop) = &self.params.drop {
                for i in 0..drop.len() {
                    shapes.push(drop.tensor(i).shape());
                }
            }
            self.optimizer.ensure_slots(&shapes);
            self.optimizer.begin_step();
            for slot in 0..n_backbone + n_drop {
                let theta = if slot < n_backbone {
                    self.params.backbone.tensor_mut(slot)
                } else {
                    self.params.drop.as_mut().expect("drop present").tensor_mut(slot - n_backbone)
                };
                self.optimizer.update_slot(slot, theta, acc[slot].as_ref());
            }
        }

        let denom = n_pairs.max(1) as f64;
        let entry = EpochLog {
            epoch,
            stage: if stage == TrainStage::One { 1 } else { 2 },
            loss_total: sums.total / denom,
            loss_global: sums.global / denom,
            loss_activity: sums.activity / denom,
            loss_video: sums.video / denom,
        };
        self.log.push(entry.clone());
        self.next_epoch += 1;
        Ok(entry)
    }

    fn pair_error(&self, pair: &PairSample, err: Error) -> Error {
        Error::Numeric(format!(
            "pair ({}, {}): {}",
            self.manifest_ids[pair.i], self.manifest_ids[pair.j], err
        ))
    }
}

fn resample_features(
    manifest: &DatasetManifest,
    target_len: usize,
    seed: u64,
    epoch_salt: u64,
) -> Result<Vec<Tensor>> {
    let originals: Vec<Tensor> =
        manifest.records.iter().map(|r| r.features.values().clone()).collect();
    resample_features_from(&originals, target_len, seed, epoch_salt)
}

fn resample_features_from(
    originals: &[Tensor],
    target_len: usize,
    seed: u64,
    epoch_salt: u64,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(originals.len());
    for (idx, original) in originals.iter().enumerate() {
        let fm = crate::dataio::FeatureMatrix::new(original.clone())?;
        let video_seed = Rng::new(seed)
            .derive(0xD5 ^ (idx as u64))
            .derive(epoch_salt)
            .next_u64();
        let (ds, _) = downsample(&fm, target_len, video_seed)?;
        out.push(ds.values().clone());
    }
    Ok(out)
}

fn effective_threads(configured: usize) -> usize {
    if configured > 0 {
        return configured;
    }
    std::thread::available_parallelism().map(|n| n.get().min(8)).unwrap_or(1)
}

/// Map `f` over `items` on up to `threads` workers, preserving order.
/// Falls back to a plain map when one worker suffices (or on wasm).
pub(crate) fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let threads = threads.min(items.len()).max(1);
    if threads == 1 || cfg!(target_arch = "wasm32") {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut results: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        let mut handles = Vec::new();
        for (worker, (item_chunk, result_chunk)) in
            items.chunks(chunk).zip(results.chunks_mut(chunk)).enumerate()
        {
            let _ = worker;
            handles.push(scope.spawn(move || {
                for (item, slot) in item_chunk.iter().zip(result_chunk.iter_mut()) {
                    *slot = Some(f(item));
                }
            }));
        }
        for h in handles {
            h.join().expect("worker thread panicked");
        }
    });
    results.into_iter().map(|r| r.expect("all slots filled")).collect()
}

/// Full training result.
pub struct TrainResult {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub warnings: Vec<String>,
}

/// Run the whole two-stage schedule. When `out_dir` is given, checkpoints
/// land there at the stage boundary and at the end.
pub fn train(
    manifest: &DatasetManifest,
    model_config: crate::model::BackboneConfig,
    config: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainResult> {
    let mut trainer = Trainer::new(manifest, model_config, config)?;
    let boundary = trainer.stage_boundary();
    while !trainer.finished() {
        trainer.step_epoch()?;
        if trainer.log.len() == boundary {
            if let Some(dir) = out_dir {
                model::save_checkpoint(&trainer.params, &dir.join("checkpoint_stage1.ckpt"))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        model::save_checkpoint(&trainer.params, &dir.join("checkpoint_final.ckpt"))?;
    }
    Ok(TrainResult { params: trainer.params, log: trainer.log, warnings: trainer.pairs.warnings })
}

/// Serialize the per-epoch log as CSV.
pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,stage,loss_total,loss_global,loss_activity,loss_video\n");
    for entry in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            entry.epoch,
            entry.stage,
            entry.loss_total,
            entry.loss_global,
            entry.loss_activity,
            entry.loss_video
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SynthConfig};
    use crate::model::BackboneConfig;

    fn synth(videos_per_activity: usize, seed: u64) -> DatasetManifest {
        generate_synthetic(&SynthConfig {
            activities: 3,
            actions: 6,
            shared_actions: 2,
            videos_per_activity,
            frames_per_video: 32,
            feature_dim: 6,
            feature_noise_sigma: 0.5,
            video_offset_sigma: 0.0,
            confusable_actions: false,
            shared_length_factor: 1.0,
            background_fraction: 0.0,
            segment_length_range: (4, 10),
            seed,
        })
        .unwrap()
    }

    fn tiny_model() -> BackboneConfig {
        BackboneConfig {
            stages: 2,
            embed_dim: 8,
            window: 8,
            context_stride: 4,
            cluster_count: 6,
            layers_per_stage: 1,
            input_dim: 6,
        }
    }

    fn tiny_train(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            epochs_stage1: 2,
            epochs_stage2: 2,
            epoch_fraction: 1.0,
            seed,
            downsample_len: 32,
            threads: 2,
            loss: LossConfig::for_embed_dim(8),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn build_pairs_two_by_two() {
        let manifest = generate_synthetic(&SynthConfig {
            activities: 2,
            actions: 4,
            shared_actions: 0,
            videos_per_activity: 2,
            frames_per_video: 16,
            feature_dim: 3,
            feature_noise_sigma: 0.3,
            video_offset_sigma: 0.0,
            confusable_actions: false,
            shared_length_factor: 1.0,
            background_fraction: 0.0,
            segment_length_range: (2, 6),
            seed: 5,
        })
        .unwrap();
        let pairs = build_pairs(&manifest, 1).unwrap();
        assert_eq!(pairs.same_pairs, vec![(0, 1), (2, 3)]);
        assert_eq!(pairs.diff_pairs.len(), 2);
        for &(a, b) in &pairs.diff_pairs {
            assert_ne!(
                manifest.records[a].activity_label,
                manifest.records[b].activity_label
            );
        }
    }

    #[test]
    fn build_pairs_single_activity_errors() {
        let manifest = generate_synthetic(&SynthConfig {
            activities: 1,
            actions: 3,
            shared_actions: 0,
            videos_per_activity: 4,
            frames_per_video: 16,
            feature_dim: 3,
            feature_noise_sigma: 0.3,
            video_offset_sigma: 0.0,
            confusable_actions: false,
            shared_length_factor: 1.0,
            background_fraction: 0.0,
            segment_length_range: (2, 6),
            seed: 6,
        })
        .unwrap();
        assert!(build_pairs(&manifest, 1).is_err());
    }

    #[test]
    fn build_pairs_balanced_counts_ten_activities() {
        let manifest = generate_synthetic(&SynthConfig {
            activities: 10,
            actions: 30,
            shared_actions: 4,
            videos_per_activity: 3,
            frames_per_video: 24,
            feature_dim: 4,
            feature_noise_sigma: 0.4,
            video_offset_sigma: 0.0,
            confusable_actions: false,
            shared_length_factor: 1.0,
            background_fraction: 0.0,
            segment_length_range: (2, 8),
            seed: 7,
        })
        .unwrap();
        let pairs = build_pairs(&manifest, 2).unwrap();
        assert_eq!(pairs.diff_pairs.len(), pairs.same_pairs.len());
        // every video appears in at least one same and one diff pair
        let n = manifest.videos();
        for v in 0..n {
            assert!(
                pairs.same_pairs.iter().any(|&(a, b)| a == v || b == v),
                "video {v} missing from same pairs"
            );
            assert!(
                pairs.diff_pairs.iter().any(|&(a, b)| a == v || b == v),
                "video {v} missing from diff pairs"
            );
        }
    }

    #[test]
    fn build_pairs_deterministic() {
        let manifest = synth(4, 8);
        let a = build_pairs(&manifest, 3).unwrap();
        let b = build_pairs(&manifest, 3).unwrap();
        assert_eq!(a.same_pairs, b.same_pairs);
        assert_eq!(a.diff_pairs, b.diff_pairs);
    }

    #[test]
    fn sample_epoch_chunking_matches_expected_sizes() {
        // 100 same + 100 diff pairs, fraction 0.5, batch 32 -> 32,32,32,4
        let pairs = PairSet {
            same_pairs: (0..100).map(|i| (i, i + 1000)).collect(),
            diff_pairs: (0..100).map(|i| (i, i + 2000)).collect(),
            warnings: Vec::new(),
        };
        let config = TrainConfig {
            batch_size: 32,
            epoch_fraction: 0.5,
            seed: 4,
            ..TrainConfig::default()
        };
        let batches = sample_epoch(&pairs, &config, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
        // near 1:1 in every batch
        for batch in &batches {
            let same = batch.iter().filter(|p| p.same_activity).count();
            let diff = batch.len() - same;
            assert!(same.abs_diff(diff) <= 1, "imbalanced batch {same}/{diff}");
        }
        // epoch-level exact balance
        let total_same: usize =
            batches.iter().flatten().filter(|p| p.same_activity).count();
        let total: usize = batches.iter().map(|b| b.len()).sum();
        assert_eq!(total_same * 2, total);
    }

    #[test]
    fn sample_epoch_full_fraction_hits_every_pair_once() {
        let pairs = PairSet {
            same_pairs: (0..7).map(|i| (i, i + 100)).collect(),
            diff_pairs: (0..7).map(|i| (i, i + 200)).collect(),
            warnings: Vec::new(),
        };
        let config =
            TrainConfig { batch_size: 4, epoch_fraction: 1.0, seed: 5, ..TrainConfig::default() };
        let batches = sample_epoch(&pairs, &config, 3);
        let mut seen_same = vec![false; 7];
        let mut seen_diff = vec![false; 7];
        for p in batches.iter().flatten() {
            if p.same_activity {
                assert!(!seen_same[p.i], "same pair repeated");
                seen_same[p.i] = true;
            } else {
                assert!(!seen_diff[p.i], "diff pair repeated");
                seen_diff[p.i] = true;
            }
        }
        assert!(seen_same.iter().all(|&s| s));
        assert!(seen_diff.iter().all(|&s| s));
    }

    #[test]
    fn sample_epoch_deterministic_per_epoch_seed() {
        let pairs = PairSet {
            same_pairs: (0..20).map(|i| (i, i + 100)).collect(),
            diff_pairs: (0..20).map(|i| (i, i + 200)).collect(),
            warnings: Vec::new(),
        };
        let config = TrainConfig { batch_size: 8, seed: 6, ..TrainConfig::default() };
        assert_eq!(sample_epoch(&pairs, &config, 2), sample_epoch(&pairs, &config, 2));
        assert_ne!(sample_epoch(&pairs, &config, 2), sample_epoch(&pairs, &config, 3));
    }

    #[test]
    fn stage_one_drop_gradients_exactly_zero() {
        let manifest = synth(2, 9);
        let mut params = ModelParams::init(tiny_model(), 1).unwrap();
        params.ensure_drop(2); // present but untouched in stage one
        let fi = manifest.records[0].features.values();
        let fj = manifest.records[1].features.values();
        let loss_cfg = LossConfig::for_embed_dim(8);
        let (grads, comps) =
            pair_gradients(&params, fi, fj, true, TrainStage::One, &loss_cfg).unwrap();
        let n_backbone = params.backbone.len();
        for slot in n_backbone..grads.len() {
            assert!(grads[slot].is_none(), "drop slot {slot} received gradient");
        }
        assert_eq!(comps.activity, 0.0);
        // encoder slots do receive gradients
        assert!(grads[..n_backbone].iter().filter(|g| g.is_some()).count() > 0);
    }

    #[test]
    fn stage_two_diff_pairs_skip_activity_gradient() {
        let manifest = synth(2, 10);
        let mut params = ModelParams::init(tiny_model(), 3).unwrap();
        params.ensure_drop(4);
        let fi = manifest.records[0].features.values();
        let fj = manifest.records[2].features.values();
        let loss_cfg = LossConfig::for_embed_dim(8);
        let (grads, comps) =
            pair_gradients(&params, fi, fj, false, TrainStage::Two, &loss_cfg).unwrap();
        let n_backbone = params.backbone.len();
        assert!(grads[n_backbone..].iter().all(|g| g.is_none()));
        assert_eq!(comps.activity, 0.0);
    }

    #[test]
    fn stage_two_same_pairs_reach_drop_params() {
        let manifest = synth(2, 11);
        let mut params = ModelParams::init(tiny_model(), 5).unwrap();
        params.ensure_drop(6);
        let fi = manifest.records[0].features.values();
        let fj = manifest.records[1].features.values();
        let loss_cfg = LossConfig::for_embed_dim(8);
        let (grads, comps) =
            pair_gradients(&params, fi, fj, true, TrainStage::Two, &loss_cfg).unwrap();
        let n_backbone = params.backbone.len();
        assert!(grads[n_backbone..].iter().any(|g| g.is_some()));
        assert!(comps.activity != 0.0);
    }

    #[test]
    fn zero_epochs_returns_initialized_params_and_empty_log() {
        let manifest = synth(2, 12);
        let config = TrainConfig {
            epochs_stage1: 0,
            epochs_stage2: 0,
            ..tiny_train(7)
        };
        let result = train(&manifest, tiny_model(), config.clone(), None).unwrap();
        assert!(result.log.is_empty());
        // matches a fresh init with the same seed + k-means head init
        let trainer = Trainer::new(&manifest, tiny_model(), config).unwrap();
        assert_eq!(result.params, trainer.params);
    }

    #[test]
    fn training_reduces_stage_two_loss() {
        let manifest = synth(4, 13);
        let config = TrainConfig {
            lr: 3e-3,
            epochs_stage1: 3,
            epochs_stage2: 5,
            ..tiny_train(8)
        };
        let result = train(&manifest, tiny_model(), config, None).unwrap();
        assert_eq!(result.log.len(), 8);
        let stage2: Vec<&EpochLog> = result.log.iter().filter(|e| e.stage == 2).collect();
        let first = stage2.first().unwrap().loss_total;
        let last = stage2.last().unwrap().loss_total;
        assert!(
            last < first,
            "stage-2 loss should fall: first {first}, last {last}"
        );
        for entry in &result.log {
            assert!(entry.loss_total.is_finite());
        }
    }

    #[test]
    fn kmeans_toggle_changes_initial_head() {
        let manifest = synth(2, 14);
        let on = Trainer::new(&manifest, tiny_model(), tiny_train(9)).unwrap();
        let off = Trainer::new(
            &manifest,
            tiny_model(),
            TrainConfig { kmeans_init: false, ..tiny_train(9) },
        )
        .unwrap();
        let idx = on.params.backbone.index_of("s2.head.w").unwrap();
        assert_ne!(
            on.params.backbone.tensor(idx).data,
            off.params.backbone.tensor(idx).data
        );
    }

    #[test]
    fn training_reproducible_bitwise() {
        let manifest = synth(2, 15);
        let a = train(&manifest, tiny_model(), tiny_train(10), None).unwrap();
        let b = train(&manifest, tiny_model(), tiny_train(10), None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let manifest = synth(2, 16);
        let single = train(
            &manifest,
            tiny_model(),
            TrainConfig { threads: 1, ..tiny_train(11) },
            None,
        )
        .unwrap();
        let multi = train(
            &manifest,
            tiny_model(),
            TrainConfig { threads: 4, ..tiny_train(11) },
            None,
        )
        .unwrap();
        assert_eq!(single.params, multi.params);
    }

    #[test]
    fn log_csv_shape() {
        let log = vec![EpochLog {
            epoch: 0,
            stage: 1,
            loss_total: 1.5,
            loss_global: 0.5,
            loss_activity: 0.0,
            loss_video: 2.0,
        }];
        let csv = training_log_csv(&log);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,stage,loss_total,loss_global,loss_activity,loss_video"
        );
        assert_eq!(lines.next().unwrap(), "0,1,1.5,0.5,0,2");
    }
}
