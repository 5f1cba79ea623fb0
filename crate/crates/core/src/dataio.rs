//! Dataset ingestion and synthesis.
//!
//! On-disk layout: a manifest CSV (`video_id,activity_label,feature_file,label_file`)
//! plus one plain-text feature file per video (one frame per line, space-
//! separated reals) and optional label files (one integer per line, 0 =
//! background). The synthetic generator builds activity scripts over a shared
//! action pool with Gaussian per-action feature means, so the whole pipeline
//! can be verified at desk scale against known ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-video T x d frame descriptor matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Tensor,
}

impl FeatureMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rows < 2 {
            return Err(Error::Validation(format!(
                "feature matrix needs at least 2 frames, got {}",
                values.rows
            )));
        }
        if values.cols < 1 {
            return Err(Error::Validation("feature dimension must be >= 1".into()));
        }
        if let Some((r, c)) = values.first_non_finite() {
            return Err(Error::Validation(format!(
                "non-finite feature value at frame {r}, dim {c}"
            )));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.rows
    }

    pub fn dim(&self) -> usize {
        self.values.cols
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    /// Complex activity label in [1, C].
    pub activity_label: usize,
    pub features: FeatureMatrix,
    /// Ground-truth action label per frame (0 = background); evaluation only.
    pub gt_frame_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Number of complex activities, C.
    pub activity_count: usize,
    /// Number of ground-truth action classes (excluding background).
    pub class_count: usize,
    pub feature_dim: usize,
    pub records: Vec<VideoRecord>,
}

impl DatasetManifest {
    pub fn from_records(records: Vec<VideoRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("manifest has no videos".into()));
        }
        let feature_dim = records[0].features.dim();
        let mut activity_count = 0;
        let mut class_count = 0;
        for rec in &records {
            if rec.activity_label == 0 {
                return Err(Error::Validation(format!(
                    "video {}: activity label must be >= 1",
                    rec.video_id
                )));
            }
            activity_count = activity_count.max(rec.activity_label);
            if rec.features.dim() != feature_dim {
                return Err(Error::Validation(format!(
                    "video {}: feature dim {} does not match manifest dim {}",
                    rec.video_id,
                    rec.features.dim(),
                    feature_dim
                )));
            }
            if let Some(labels) = &rec.gt_frame_labels {
                if labels.len() != rec.features.frames() {
                    return Err(Error::Validation(format!(
                        "video {}: {} labels for {} frames",
                        rec.video_id,
                        labels.len(),
                        rec.features.frames()
                    )));
                }
                class_count = class_count.max(labels.iter().cloned().max().unwrap_or(0));
            }
        }
        Ok(Self { activity_count, class_count, feature_dim, records })
    }

    pub fn videos(&self) -> usize {
        self.records.len()
    }

    /// Indices of videos grouped by activity label (1-based labels).
    pub fn by_activity(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (idx, rec) in self.records.iter().enumerate() {
            map.entry(rec.activity_label).or_default().push(idx);
        }
        map
    }
}

/// Downsampled-position to original-frame-index bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    pub kept_indices: Vec<usize>,
    pub original_len: usize,
}

impl IndexMap {
    pub fn identity(len: usize) -> Self {
        Self { kept_indices: (0..len).collect(), original_len: len }
    }

    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }
}

// ---- loading and saving ----

/// Parse a dataset from `root_path` given its manifest file.
pub fn load_dataset(root_path: &Path, manifest_file: &Path) -> Result<DatasetManifest> {
    let manifest_path = root_path.join(manifest_file);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Io { path: manifest_path.clone(), message: e.to_string() })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "video_id,activity_label,feature_file,label_file" => {}
        _ => {
            return Err(Error::Format {
                path: manifest_path,
                row: Some(1),
                message: "expected header video_id,activity_label,feature_file,label_file".into(),
            })
        }
    }

    let mut records = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format {
                path: manifest_path.clone(),
                row: Some(lineno + 1),
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let video_id = fields[0].trim().to_string();
        let activity_label: usize = fields[1].trim().parse().map_err(|_| Error::Format {
            path: manifest_path.clone(),
            row: Some(lineno + 1),
            message: format!("activity label `{}` is not an integer", fields[1].trim()),
        })?;
        let features = read_feature_file(&root_path.join(fields[2].trim()))?;
        let gt_frame_labels = match fields[3].trim() {
            "" => None,
            label_file => Some(read_label_file(&root_path.join(label_file))?),
        };
        records.push(VideoRecord { video_id, activity_label, features, gt_frame_labels });
    }
    DatasetManifest::from_records(records)
}

fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), message: e.to_string() })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                row: Some(lineno + 1),
                message: format!("`{tok}` is not a number"),
            })?;
            row.push(v);
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    row: Some(lineno + 1),
                    message: format!("row has {} values, expected {}", row.len(), w),
                })
            }
            _ => {}
        }
        rows.push(row);
    }
    FeatureMatrix::new(Tensor::from_rows(&rows))
        .map_err(|e| Error::Format { path: path.to_path_buf(), row: None, message: e.to_string() })
}

fn read_label_file(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), message: e.to_string() })?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let v: usize = t.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            row: Some(lineno + 1),
            message: format!("`{t}` is not a non-negative integer"),
        })?;
        labels.push(v);
    }
    Ok(labels)
}

/// Write a dataset under `dir`: manifest.csv plus features/ and labels/.
/// Returns the manifest path.
pub fn save_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    let label_dir = dir.join("labels");
    std::fs::create_dir_all(&feat_dir)
        .map_err(|e| Error::Io { path: feat_dir.clone(), message: e.to_string() })?;
    std::fs::create_dir_all(&label_dir)
        .map_err(|e| Error::Io { path: label_dir.clone(), message: e.to_string() })?;

    let mut csv = String::from("video_id,activity_label,feature_file,label_file\n");
    for rec in &manifest.records {
        let feat_rel = format!("features/{}.txt", rec.video_id);
        let mut text = String::new();
        for t in 0..rec.features.frames() {
            let row = rec.features.frame(t);
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    text.push(' ');
                }
                let _ = write!(text, "{v}");
            }
            text.push('\n');
        }
        let feat_path = dir.join(&feat_rel);
        std::fs::write(&feat_path, text)
            .map_err(|e| Error::Io { path: feat_path, message: e.to_string() })?;

        let label_rel = match &rec.gt_frame_labels {
            Some(labels) => {
                let rel = format!("labels/{}.txt", rec.video_id);
                let mut text = String::new();
                for l in labels {
                    let _ = writeln!(text, "{l}");
                }
                let label_path = dir.join(&rel);
                std::fs::write(&label_path, text)
                    .map_err(|e| Error::Io { path: label_path, message: e.to_string() })?;
                rel
            }
            None => String::new(),
        };
        let _ = writeln!(csv, "{},{},{},{}", rec.video_id, rec.activity_label, feat_rel, label_rel);
    }
    let manifest_path = dir.join("manifest.csv");
    std::fs::write(&manifest_path, csv)
        .map_err(|e| Error::Io { path: manifest_path.clone(), message: e.to_string() })?;
    Ok(manifest_path)
}

// ---- temporal downsampling ----

/// Reduce a video to at most `target_len` frames by keeping one uniformly
/// random frame per contiguous bin, so retained frames cover the whole video.
/// Videos already short enough come back unchanged with an identity map.
pub fn downsample(
    features: &FeatureMatrix,
    target_len: usize,
    seed: u64,
) -> Result<(FeatureMatrix, IndexMap)> {
    if target_len < 2 {
        return Err(Error::Contract("downsample target_len must be >= 2".into()));
    }
    let t = features.frames();
    if t <= target_len {
        return Ok((features.clone(), IndexMap::identity(t)));
    }
    let mut rng = Rng::new(seed);
    let mut kept = Vec::with_capacity(target_len);
    for i in 0..target_len {
        let lo = i * t / target_len;
        let hi = (i + 1) * t / target_len; // exclusive; bins are non-empty since t > target_len
        kept.push(lo + rng.next_below(hi - lo));
    }
    let mut rows = Vec::with_capacity(target_len);
    for &idx in &kept {
        rows.push(features.frame(idx).to_vec());
    }
    let ds = FeatureMatrix::new(Tensor::from_rows(&rows))?;
    Ok((ds, IndexMap { kept_indices: kept, original_len: t }))
}

/// Spread labels at downsampled resolution back to the original length:
/// each original frame takes the label of its nearest kept index, ties
/// resolved toward the earlier kept index.
pub fn upsample_labels(frame_labels: &[usize], index_map: &IndexMap) -> Result<Vec<usize>> {
    if frame_labels.len() != index_map.len() {
        return Err(Error::Contract(format!(
            "{} labels for {} kept indices",
            frame_labels.len(),
            index_map.len()
        )));
    }
    let kept = &index_map.kept_indices;
    let mut out = Vec::with_capacity(index_map.original_len);
    let mut cursor = 0usize;
    for t in 0..index_map.original_len {
        while cursor + 1 < kept.len() {
            let d_cur = t.abs_diff(kept[cursor]);
            let d_next = t.abs_diff(kept[cursor + 1]);
            if d_next < d_cur {
                cursor += 1;
            } else {
                break;
            }
        }
        out.push(frame_labels[cursor]);
    }
    Ok(out)
}

// ---- synthetic data ----

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Number of complex activities, C.
    pub activities: usize,
    /// Size of the latent action pool, N.
    pub actions: usize,
    /// How many actions appear in at least two activities.
    pub shared_actions: usize,
    pub videos_per_activity: usize,
    pub frames_per_video: usize,
    pub feature_dim: usize,
    pub feature_noise_sigma: f64,
    /// Per-video constant offset noise: emulates recording conditions that
    /// make raw features incomparable across videos (0 disables).
    pub video_offset_sigma: f64,
    /// Place two actions of every activity's script at the minimum feature
    /// separation, emulating visually similar steps that zero-shot frame
    /// clustering merges and only temporal structure can tell apart.
    pub confusable_actions: bool,
    /// Length multiplier for segments of actions shared across activities
    /// (1.0 keeps them as long as exclusive ones).
    pub shared_length_factor: f64,
    /// Fraction of each video occupied by boundary background, in [0, 1).
    pub background_fraction: f64,
    /// Inclusive range of raw per-segment length draws (relative weights).
    pub segment_length_range: (usize, usize),
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.activities == 0 || self.actions == 0 {
            return Err(Error::Config("need at least one activity and one action".into()));
        }
        if self.shared_actions > self.actions {
            return Err(Error::Config("shared_actions cannot exceed actions".into()));
        }
        if self.shared_actions > 0 && self.activities < 2 {
            return Err(Error::Config("shared actions require at least two activities".into()));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(Error::Config("background_fraction must be in [0, 1)".into()));
        }
        let (lo, hi) = self.segment_length_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config("segment_length_range must be positive and ordered".into()));
        }
        if self.videos_per_activity == 0 {
            return Err(Error::Config("videos_per_activity must be >= 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// The action script of each activity, as built by the generator.
pub fn activity_scripts(config: &SynthConfig) -> Result<Vec<Vec<usize>>> {
    config.validate()?;
    let mut rng = Rng::new(config.seed).derive(0xAC7);
    let c = config.activities;
    let mut pool: Vec<usize> = (1..=config.actions).collect();
    rng.shuffle(&mut pool);
    let shared: Vec<usize> = pool[..config.shared_actions].to_vec();
    let exclusive: Vec<usize> = pool[config.shared_actions..].to_vec();

    let mut scripts: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &a) in exclusive.iter().enumerate() {
        scripts[i % c].push(a);
    }
    for (i, &a) in shared.iter().enumerate() {
        let first = i % c;
        let offset = 1 + (i / c) % (c - 1).max(1);
        let second = (first + offset) % c;
        scripts[first].push(a);
        scripts[second].push(a);
    }
    for (i, script) in scripts.iter_mut().enumerate() {
        if script.is_empty() {
            return Err(Error::Config(format!(
                "activity {} received no actions; increase the action pool",
                i + 1
            )));
        }
        rng.shuffle(script);
    }
    Ok(scripts)
}

/// Actions whose means sit at the minimum separation, two per activity
/// script where possible. Deterministic given the scripts.
fn confusable_pairs(scripts: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let mut paired = vec![false; scripts.iter().flatten().max().cloned().unwrap_or(0) + 1];
    let mut pairs = Vec::new();
    for script in scripts {
        let mut free: Vec<usize> =
            script.iter().cloned().filter(|&a| !paired[a]).collect();
        free.sort_unstable();
        free.dedup();
        if free.len() >= 2 {
            paired[free[0]] = true;
            paired[free[1]] = true;
            pairs.push((free[0], free[1]));
        }
    }
    pairs
}

/// Gaussian mean per action id (row `a` for action `a`, row 0 = background),
/// enforcing pairwise separation >= 4 * feature_noise_sigma. With
/// `confusable_actions`, the partner of each confusable pair is placed just
/// above that floor while everything else stays far apart.
fn action_means(config: &SynthConfig, scripts: &[Vec<usize>], rng: &mut Rng) -> Tensor {
    let n = config.actions + 1; // 0 reserved for background
    let d = config.feature_dim;
    let sigma = config.feature_noise_sigma.max(1e-12);
    let min_sep = 4.0 * sigma;
    let far_sep = if config.confusable_actions { 12.0 * sigma } else { min_sep };
    let pairs = if config.confusable_actions { confusable_pairs(scripts) } else { Vec::new() };
    let partner_of = |a: usize| -> Option<usize> {
        pairs.iter().find(|&&(_, second)| second == a).map(|&(first, _)| first)
    };

    let mut spread = far_sep;
    let mut means = Tensor::zeros(n, d);
    let mut placed = vec![false; n];
    let mut queue: Vec<usize> = (0..n).collect();
    // partners must be placed after their pair base
    queue.sort_by_key(|&a| usize::from(a > 0 && partner_of(a).is_some()));

    for &a in &queue {
        if let Some(base) = (a > 0).then(|| partner_of(a)).flatten() {
            debug_assert!(placed[base]);
            // just above the separation floor, in a random direction
            let dir: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for c in 0..d {
                means.data[a * d + c] = means.at(base, c) + dir[c] / norm * min_sep;
            }
            placed[a] = true;
            continue;
        }
        let mut attempts = 0;
        loop {
            let cand: Vec<f64> = (0..d).map(|_| rng.next_gaussian() * spread).collect();
            let ok = (0..n).filter(|&b| placed[b]).all(|b| {
                let mut dist = 0.0;
                for (x, y) in cand.iter().zip(means.row(b).iter()) {
                    let delta = x - y;
                    dist += delta * delta;
                }
                dist.sqrt() >= far_sep
            });
            if ok {
                means.data[a * d..(a + 1) * d].copy_from_slice(&cand);
                placed[a] = true;
                break;
            }
            attempts += 1;
            if attempts > 200 {
                spread *= 1.5;
                attempts = 0;
            }
        }
    }
    means
}

/// Build a synthetic dataset with known frame-level ground truth.
pub fn generate_synthetic(config: &SynthConfig) -> Result<DatasetManifest> {
    let scripts = activity_scripts(config)?;
    let mut rng = Rng::new(config.seed).derive(0xFEA7);
    let means = action_means(config, &scripts, &mut rng);
    let shared_ids: std::collections::BTreeSet<usize> = {
        let mut counts = std::collections::BTreeMap::new();
        for script in &scripts {
            let mut uniq: Vec<usize> = script.clone();
            uniq.sort_unstable();
            uniq.dedup();
            for a in uniq {
                *counts.entry(a).or_insert(0usize) += 1;
            }
        }
        counts.into_iter().filter(|&(_, c)| c >= 2).map(|(a, _)| a).collect()
    };

    let mut records = Vec::new();
    for (a_idx, script) in scripts.iter().enumerate() {
        for v in 0..config.videos_per_activity {
            let frames = config.frames_per_video;
            let bg_frames = (config.background_fraction * frames as f64).round() as usize;
            let action_frames = frames - bg_frames;
            if action_frames < script.len() {
                return Err(Error::Config(format!(
                    "{} action frames cannot fit {} segments (activity {})",
                    action_frames,
                    script.len(),
                    a_idx + 1
                )));
            }
            let head_bg = if bg_frames > 0 { rng.next_below(bg_frames + 1) } else { 0 };
            let tail_bg = bg_frames - head_bg;
            let offset: Vec<f64> = (0..config.feature_dim)
                .map(|_| config.video_offset_sigma * rng.next_gaussian())
                .collect();

            let (lo, hi) = config.segment_length_range;
            let raw: Vec<usize> = script
                .iter()
                .map(|&action| {
                    let base = rng.next_range(lo, hi) as f64;
                    let factor = if shared_ids.contains(&action) {
                        config.shared_length_factor
                    } else {
                        1.0
                    };
                    (base * factor).round().max(1.0) as usize
                })
                .collect();
            let lengths = scale_lengths(&raw, action_frames);

            let mut labels = Vec::with_capacity(frames);
            labels.extend(std::iter::repeat(0).take(head_bg));
            for (k, &len) in lengths.iter().enumerate() {
                labels.extend(std::iter::repeat(script[k]).take(len));
            }
            labels.extend(std::iter::repeat(0).take(tail_bg));
            debug_assert_eq!(labels.len(), frames);

            let mut rows = Vec::with_capacity(frames);
            for &label in &labels {
                let mu = means.row(label);
                let row: Vec<f64> = mu
                    .iter()
                    .zip(offset.iter())
                    .map(|(m, o)| m + o + config.feature_noise_sigma * rng.next_gaussian())
                    .collect();
                rows.push(row);
            }
            records.push(VideoRecord {
                video_id: format!("a{:02}_v{:03}", a_idx + 1, v + 1),
                activity_label: a_idx + 1,
                features: FeatureMatrix::new(Tensor::from_rows(&rows))?,
                gt_frame_labels: Some(labels),
            });
        }
    }
    let mut manifest = DatasetManifest::from_records(records)?;
    // class count is the pool size even if a high action id never occurs
    manifest.class_count = config.actions;
    manifest.activity_count = config.activities;
    Ok(manifest)
}

/// Scale raw positive weights into integer lengths summing to `total`,
/// keeping every segment at least one frame.
fn scale_lengths(raw: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = raw.iter().sum();
    let mut lengths: Vec<usize> = raw
        .iter()
        .map(|&r| ((r as f64 / sum as f64) * total as f64).floor().max(1.0) as usize)
        .collect();
    let mut have: usize = lengths.iter().sum();
    let n_seg = lengths.len();
    let mut k = 0;
    while have < total {
        lengths[k % n_seg] += 1;
        have += 1;
        k += 1;
    }
    while have > total {
        // shrink the largest shrinkable segment
        let idx = lengths
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 1)
            .max_by_key(|(_, &l)| l)
            .map(|(i, _)| i)
            .expect("total >= segment count guarantees a shrinkable segment");
        lengths[idx] -= 1;
        have -= 1;
    }
    lengths
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SynthConfig {
        SynthConfig {
            activities: 3,
            actions: 6,
            shared_actions: 2,
            videos_per_activity: 2,
            frames_per_video: 48,
            feature_dim: 5,
            feature_noise_sigma: 0.5,
            video_offset_sigma: 0.0,
            confusable_actions: false,
            shared_length_factor: 1.0,
            background_fraction: 0.1,
            segment_length_range: (4, 12),
            seed: 11,
        }
    }

    #[test]
    fn save_load_roundtrip_is_identity() {
        let manifest = generate_synthetic(&small_config()).unwrap();
        let dir = std::env::temp_dir().join(format!("actionseg_dataio_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        save_dataset(&manifest, &dir).unwrap();
        let loaded = load_dataset(&dir, Path::new("manifest.csv")).unwrap();
        assert_eq!(loaded.videos(), manifest.videos());
        assert_eq!(loaded.feature_dim, manifest.feature_dim);
        for (a, b) in loaded.records.iter().zip(manifest.records.iter()) {
            assert_eq!(a.video_id, b.video_id);
            assert_eq!(a.activity_label, b.activity_label);
            assert_eq!(a.gt_frame_labels, b.gt_frame_labels);
            assert_eq!(a.features, b.features, "features differ for {}", a.video_id);
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn ragged_feature_file_reports_row() {
        let dir = std::env::temp_dir().join(format!("actionseg_ragged_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("manifest.csv"),
            "video_id,activity_label,feature_file,label_file\nv1,1,feat.txt,\n",
        )
        .unwrap();
        std::fs::write(dir.join("feat.txt"), "1.0 2.0 3.0\n1.0 2.0\n").unwrap();
        let err = load_dataset(&dir, Path::new("manifest.csv")).unwrap_err();
        match err {
            Error::Format { row, .. } => assert_eq!(row, Some(2)),
            other => panic!("expected format error, got {other}"),
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn missing_feature_file_names_it() {
        let dir = std::env::temp_dir().join(format!("actionseg_missing_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("manifest.csv"),
            "video_id,activity_label,feature_file,label_file\nv1,1,nope.txt,\n",
        )
        .unwrap();
        let err = load_dataset(&dir, Path::new("manifest.csv")).unwrap_err();
        assert!(err.to_string().contains("nope.txt"), "got: {err}");
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn zero_activity_label_rejected() {
        let dir = std::env::temp_dir().join(format!("actionseg_label0_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("manifest.csv"),
            "video_id,activity_label,feature_file,label_file\nv1,0,feat.txt,\n",
        )
        .unwrap();
        std::fs::write(dir.join("feat.txt"), "1.0\n2.0\n").unwrap();
        let err = load_dataset(&dir, Path::new("manifest.csv")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "got: {err}");
        let _ = std::fs::remove_dir_all(&dir);
    }

    fn random_features(t: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = Rng::new(seed);
        let rows: Vec<Vec<f64>> =
            (0..t).map(|_| (0..d).map(|_| rng.next_gaussian()).collect()).collect();
        FeatureMatrix::new(Tensor::from_rows(&rows)).unwrap()
    }

    #[test]
    fn downsample_identity_when_short() {
        let f = random_features(256, 4, 1);
        let (ds, map) = downsample(&f, 256, 0).unwrap();
        assert_eq!(ds, f);
        assert_eq!(map, IndexMap::identity(256));
    }

    #[test]
    fn downsample_one_per_bin() {
        let f = random_features(512, 3, 2);
        let (ds, map) = downsample(&f, 256, 5).unwrap();
        assert_eq!(ds.frames(), 256);
        assert_eq!(map.kept_indices.len(), 256);
        for (i, &k) in map.kept_indices.iter().enumerate() {
            assert!(k >= i * 2 && k < (i + 1) * 2, "index {k} outside bin {i}");
            if i > 0 {
                assert!(map.kept_indices[i - 1] < k, "order violated at {i}");
            }
        }
    }

    #[test]
    fn downsample_deterministic() {
        let f = random_features(1000, 4, 3);
        let (a, ma) = downsample(&f, 256, 7).unwrap();
        let (b, mb) = downsample(&f, 256, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn upsample_identity_map() {
        let labels = vec![3, 1, 4, 1, 5];
        let map = IndexMap::identity(5);
        assert_eq!(upsample_labels(&labels, &map).unwrap(), labels);
    }

    #[test]
    fn upsample_nearest_with_tie_to_earlier() {
        let map = IndexMap { kept_indices: vec![0, 4], original_len: 5 };
        assert_eq!(upsample_labels(&[1, 2], &map).unwrap(), vec![1, 1, 1, 2, 2]);
    }

    #[test]
    fn upsample_matches_brute_force() {
        let mut rng = Rng::new(9);
        let t = 50;
        let (_, map) = downsample(&random_features(t, 2, 4), 13, 21).unwrap();
        let labels: Vec<usize> = (0..13).map(|_| rng.next_below(5)).collect();
        let fast = upsample_labels(&labels, &map).unwrap();
        for frame in 0..t {
            let mut best = 0usize;
            let mut best_d = usize::MAX;
            for (pos, &k) in map.kept_indices.iter().enumerate() {
                let d = frame.abs_diff(k);
                if d < best_d {
                    best_d = d;
                    best = pos;
                }
            }
            assert_eq!(fast[frame], labels[best], "frame {frame}");
        }
    }

    #[test]
    fn upsample_length_mismatch_is_contract_error() {
        let map = IndexMap { kept_indices: vec![0, 4], original_len: 5 };
        assert!(matches!(upsample_labels(&[1], &map), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_labels_survive_down_then_up() {
        let f = random_features(300, 3, 8);
        let (ds, map) = downsample(&f, 64, 3).unwrap();
        let labels = vec![7usize; ds.frames()];
        let up = upsample_labels(&labels, &map).unwrap();
        assert_eq!(up, vec![7usize; 300]);
    }

    #[test]
    fn shared_actions_appear_in_multiple_scripts() {
        let scripts = activity_scripts(&small_config()).unwrap();
        let mut occurrences: BTreeMap<usize, usize> = BTreeMap::new();
        for script in &scripts {
            let mut seen: Vec<usize> = script.clone();
            seen.sort_unstable();
            seen.dedup();
            for a in seen {
                *occurrences.entry(a).or_default() += 1;
            }
        }
        let shared = occurrences.values().filter(|&&c| c >= 2).count();
        assert!(shared >= 2, "only {shared} shared actions: {occurrences:?}");
    }

    #[test]
    fn zero_background_fraction_means_no_zero_labels() {
        let mut cfg = small_config();
        cfg.background_fraction = 0.0;
        let manifest = generate_synthetic(&cfg).unwrap();
        for rec in &manifest.records {
            assert!(rec.gt_frame_labels.as_ref().unwrap().iter().all(|&l| l > 0));
        }
    }

    #[test]
    fn generator_deterministic() {
        let a = generate_synthetic(&small_config()).unwrap();
        let b = generate_synthetic(&small_config()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn background_fraction_near_target() {
        let mut cfg = small_config();
        cfg.videos_per_activity = 8; // 24 videos total
        cfg.background_fraction = 0.2;
        let manifest = generate_synthetic(&cfg).unwrap();
        assert!(manifest.videos() >= 20);
        let mut bg = 0usize;
        let mut total = 0usize;
        for rec in &manifest.records {
            for &l in rec.gt_frame_labels.as_ref().unwrap() {
                total += 1;
                if l == 0 {
                    bg += 1;
                }
            }
        }
        let frac = bg as f64 / total as f64;
        assert!((frac - 0.2).abs() <= 0.05, "background fraction {frac}");
    }

    #[test]
    fn infeasible_segment_budget_is_config_error() {
        let mut cfg = small_config();
        cfg.frames_per_video = 3; // scripts need more segments than frames
        cfg.background_fraction = 0.4;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn action_means_are_separated() {
        let cfg = small_config();
        let scripts = activity_scripts(&cfg).unwrap();
        let mut rng = Rng::new(cfg.seed);
        let means = action_means(&cfg, &scripts, &mut rng);
        let min_sep = 4.0 * cfg.feature_noise_sigma;
        for a in 0..means.rows {
            for b in 0..a {
                let mut d = 0.0;
                for (x, y) in means.row(a).iter().zip(means.row(b).iter()) {
                    let delta = x - y;
                    d += delta * delta;
                }
                assert!(d.sqrt() >= min_sep, "means {a} and {b} too close");
            }
        }
    }
}
