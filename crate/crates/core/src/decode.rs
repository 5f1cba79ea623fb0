//! Post-processing: from trained frame embeddings to a global segmentation.
//!
//! Videos are summarized as bag-of-words histograms over a k-means vocabulary
//! and clustered into pseudo-activity groups. Within each group, frames are
//! clustered into actions, the action centroids are ordered by their mean
//! relative timestamp, and every video is decoded against that ordered list
//! with a strict left-to-right Viterbi pass (every cluster appears at least
//! once). A dataset-level score percentile relabels the worst-fitting frames
//! as background when a background model is enabled.

use std::fmt::Write as _;

use crate::dataio::DatasetManifest;
use crate::kmeans::{self, kmeans_restarts};
use crate::model::{self, ModelParams};
use crate::tensor::Tensor;
use crate::training::parallel_map;
use crate::{Error, Result};

/// Bag-of-words vocabulary in embedding space.
#[derive(Debug, Clone)]
pub struct BoWModel {
    /// W x e centroid matrix.
    pub vocabulary: Tensor,
}

/// One pseudo-activity group: action centroids with their temporal order.
#[derive(Debug, Clone)]
pub struct GroupModel {
    /// K x e centroids as produced by k-means (unordered).
    pub centroids: Tensor,
    /// Permutation of centroid indices sorted by mean relative timestamp.
    pub temporal_order: Vec<usize>,
    /// Video indices belonging to this group.
    pub members: Vec<usize>,
}

impl GroupModel {
    /// Centroids re-arranged into temporal order (row p = p-th action).
    pub fn ordered_centroids(&self) -> Tensor {
        let k = self.centroids.rows;
        let e = self.centroids.cols;
        let mut out = Tensor::zeros(k, e);
        for (pos, &c) in self.temporal_order.iter().enumerate() {
            out.data[pos * e..(pos + 1) * e].copy_from_slice(self.centroids.row(c));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PseudoActivityModel {
    pub group_of_video: Vec<usize>,
    pub groups: Vec<GroupModel>,
}

/// Frame labels for one video: global cluster ids in [1, K' * K], 0 for
/// background, at the video's original length.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub video_id: String,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundConfig {
    pub enabled: bool,
    /// Known or assumed fraction of background frames in the dataset.
    pub fraction: f64,
}

impl BackgroundConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, fraction: 0.0 }
    }
}

// ---- bag of words ----

/// Build the vocabulary over all videos' frame embeddings and summarize each
/// video as a normalized histogram of nearest-centroid counts.
pub fn build_bow(
    embeddings: &[Tensor],
    vocab_size: usize,
    seed: u64,
) -> Result<(BoWModel, Vec<Vec<f64>>)> {
    let total_frames: usize = embeddings.iter().map(|e| e.rows).sum();
    if total_frames < vocab_size {
        return Err(Error::Contract(format!(
            "bag of words needs at least {vocab_size} frames, got {total_frames}"
        )));
    }
    let dim = embeddings[0].cols;
    let mut stacked = Tensor::zeros(total_frames, dim);
    let mut row = 0;
    for e in embeddings {
        stacked.data[row * dim..(row + e.rows) * dim].copy_from_slice(&e.data);
        row += e.rows;
    }
    let result =
        kmeans_restarts(&stacked, vocab_size, seed, 4, kmeans::DEFAULT_MAX_ITER, kmeans::DEFAULT_TOL)?;

    let mut histograms = Vec::with_capacity(embeddings.len());
    let mut offset = 0;
    for e in embeddings {
        let mut hist = vec![0.0; vocab_size];
        for r in 0..e.rows {
            hist[result.assignments[offset + r]] += 1.0;
        }
        offset += e.rows;
        let inv = 1.0 / e.rows as f64;
        for h in hist.iter_mut() {
            *h *= inv;
        }
        histograms.push(hist);
    }
    Ok((BoWModel { vocabulary: result.centroids }, histograms))
}

/// Group videos into pseudo-activities by clustering their histograms.
pub fn cluster_pseudo_activities(
    histograms: &[Vec<f64>],
    group_count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if histograms.len() < group_count {
        return Err(Error::Contract(format!(
            "need at least {group_count} videos to form {group_count} groups, got {}",
            histograms.len()
        )));
    }
    let points = Tensor::from_rows(histograms);
    let result =
        kmeans_restarts(&points, group_count, seed, 8, kmeans::DEFAULT_MAX_ITER, kmeans::DEFAULT_TOL)?;
    Ok(result.assignments)
}

/// Cluster one group's frames into actions and order the centroids by the
/// mean relative timestamp (t / T) of their assigned frames, ascending,
/// ties toward the lower centroid index.
pub fn cluster_actions(
    group_embeddings: &[&Tensor],
    action_count: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let total: usize = group_embeddings.iter().map(|e| e.rows).sum();
    if total < action_count {
        return Err(Error::Contract(format!(
            "group has {total} frames, fewer than {action_count} action clusters"
        )));
    }
    let dim = group_embeddings[0].cols;
    let mut stacked = Tensor::zeros(total, dim);
    let mut rel_time = Vec::with_capacity(total);
    let mut row = 0;
    for e in group_embeddings {
        stacked.data[row * dim..(row + e.rows) * dim].copy_from_slice(&e.data);
        for t in 0..e.rows {
            rel_time.push(t as f64 / e.rows as f64);
        }
        row += e.rows;
    }
    let result =
        kmeans_restarts(&stacked, action_count, seed, 8, kmeans::DEFAULT_MAX_ITER, kmeans::DEFAULT_TOL)?;

    let mut time_sum = vec![0.0; action_count];
    let mut counts = vec![0usize; action_count];
    for (idx, &assignment) in result.assignments.iter().enumerate() {
        time_sum[assignment] += rel_time[idx];
        counts[assignment] += 1;
    }
    let mean_time: Vec<f64> = (0..action_count)
        .map(|c| if counts[c] > 0 { time_sum[c] / counts[c] as f64 } else { f64::MAX })
        .collect();
    let mut order: Vec<usize> = (0..action_count).collect();
    order.sort_by(|&a, &b| {
        mean_time[a].partial_cmp(&mean_time[b]).unwrap().then(a.cmp(&b))
    });
    Ok((result.centroids, order))
}

// ---- Viterbi ----

/// Best monotone path over the T x K lattice with every ordered cluster
/// visited at least once; emission is the negative squared distance to the
/// cluster centroid. Returns per-frame positions in [0, K).
pub fn viterbi_decode(embeddings: &Tensor, ordered_centroids: &Tensor) -> Result<Vec<usize>> {
    let t_len = embeddings.rows;
    let k = ordered_centroids.rows;
    if k == 0 {
        return Err(Error::Contract("viterbi needs at least one cluster".into()));
    }
    if t_len < k {
        return Err(Error::Contract(format!(
            "no feasible path: {t_len} frames cannot visit {k} ordered clusters"
        )));
    }
    let scores = emission_scores(embeddings, ordered_centroids);

    let neg_inf = f64::NEG_INFINITY;
    let mut dp = vec![neg_inf; t_len * k];
    let mut stay = vec![true; t_len * k];
    dp[0] = scores.at(0, 0);
    for t in 1..t_len {
        for c in 0..k {
            let from_stay = dp[(t - 1) * k + c];
            let from_advance = if c > 0 { dp[(t - 1) * k + c - 1] } else { neg_inf };
            // ties stay in the current cluster
            let (best, stayed) =
                if from_stay >= from_advance { (from_stay, true) } else { (from_advance, false) };
            if best == neg_inf {
                continue;
            }
            dp[t * k + c] = best + scores.at(t, c);
            stay[t * k + c] = stayed;
        }
    }

    let mut path = vec![0usize; t_len];
    let mut cluster = k - 1;
    path[t_len - 1] = cluster;
    for t in (1..t_len).rev() {
        if !stay[t * k + cluster] {
            cluster -= 1;
        }
        path[t - 1] = cluster;
    }
    Ok(path)
}

/// Total path score under the viterbi emission model.
pub fn path_score(embeddings: &Tensor, ordered_centroids: &Tensor, path: &[usize]) -> f64 {
    let scores = emission_scores(embeddings, ordered_centroids);
    path.iter().enumerate().map(|(t, &c)| scores.at(t, c)).sum()
}

fn emission_scores(embeddings: &Tensor, centroids: &Tensor) -> Tensor {
    let mut d = embeddings.cdist_sq(centroids);
    d.scale_inplace(-1.0);
    d
}

/// Per-frame best emission score (max over the group's clusters); feeds the
/// background threshold.
pub fn best_logscores(embeddings: &Tensor, ordered_centroids: &Tensor) -> Vec<f64> {
    let scores = emission_scores(embeddings, ordered_centroids);
    (0..embeddings.rows)
        .map(|t| scores.row(t).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// The q-th percentile (by index floor(q * n)) of the pooled best scores.
pub fn background_threshold(all_best_scores: &[f64], fraction: f64) -> f64 {
    let mut sorted = all_best_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((fraction * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    sorted[idx]
}

// ---- the whole protocol ----

#[derive(Debug, Clone)]
pub struct SegmentationSet {
    pub segmentations: Vec<Segmentation>,
    pub model: PseudoActivityModel,
    pub bow: BoWModel,
    /// Actions per group, K (global ids are group * K + position + 1).
    pub actions_per_group: usize,
}

impl SegmentationSet {
    pub fn total_clusters(&self) -> usize {
        self.model.groups.len() * self.actions_per_group
    }
}

/// Run the full protocol over a dataset with trained parameters: embed all
/// videos at full length, build the bag of words, group videos, cluster and
/// order actions per group, Viterbi-decode every video, then apply the
/// background model.
pub fn segment_dataset(
    manifest: &DatasetManifest,
    params: &ModelParams,
    group_count: usize,
    actions_per_group: usize,
    vocab_size: usize,
    bg: BackgroundConfig,
    seed: u64,
    threads: usize,
) -> Result<SegmentationSet> {
    if vocab_size < group_count {
        return Err(Error::Config(format!(
            "vocabulary size {vocab_size} must be at least the group count {group_count}"
        )));
    }
    let records: Vec<&crate::dataio::VideoRecord> = manifest.records.iter().collect();
    let embeddings: Vec<Tensor> = parallel_map(&records, threads.max(1), |rec| {
        model::forward(params, &rec.features).map(|out| out.embeddings)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let (bow, histograms) = build_bow(&embeddings, vocab_size, seed)?;
    let group_of_video = cluster_pseudo_activities(&histograms, group_count, seed ^ 0x61)?;

    let mut groups = Vec::with_capacity(group_count);
    for g in 0..group_count {
        let members: Vec<usize> =
            (0..embeddings.len()).filter(|&v| group_of_video[v] == g).collect();
        let group_embeddings: Vec<&Tensor> = members.iter().map(|&v| &embeddings[v]).collect();
        if group_embeddings.is_empty() {
            return Err(Error::Contract(format!("pseudo-activity group {g} is empty")));
        }
        let (centroids, temporal_order) =
            cluster_actions(&group_embeddings, actions_per_group, seed ^ (0xA0 + g as u64))?;
        groups.push(GroupModel { centroids, temporal_order, members });
    }

    // decode against each video's group
    let ordered: Vec<Tensor> = groups.iter().map(|g| g.ordered_centroids()).collect();
    let mut paths = Vec::with_capacity(embeddings.len());
    let mut best_scores_all = Vec::new();
    let mut best_scores_per_video = Vec::with_capacity(embeddings.len());
    for (v, emb) in embeddings.iter().enumerate() {
        let centroids = &ordered[group_of_video[v]];
        paths.push(viterbi_decode(emb, centroids)?);
        let best = best_logscores(emb, centroids);
        best_scores_all.extend_from_slice(&best);
        best_scores_per_video.push(best);
    }

    let threshold = if bg.enabled {
        Some(background_threshold(&best_scores_all, bg.fraction))
    } else {
        None
    };

    let mut segmentations = Vec::with_capacity(embeddings.len());
    for (v, path) in paths.iter().enumerate() {
        let group = group_of_video[v];
        let labels: Vec<usize> = path
            .iter()
            .enumerate()
            .map(|(t, &pos)| {
                if let Some(th) = threshold {
                    if best_scores_per_video[v][t] < th {
                        return 0;
                    }
                }
                group * actions_per_group + pos + 1
            })
            .collect();
        segmentations.push(Segmentation {
            video_id: manifest.records[v].video_id.clone(),
            labels,
        });
    }

    Ok(SegmentationSet {
        segmentations,
        model: PseudoActivityModel { group_of_video, groups },
        bow,
        actions_per_group,
    })
}

// ---- export ----

/// Per-video CSV: `frame_index,global_cluster_id`.
pub fn segmentation_csv(seg: &Segmentation) -> String {
    let mut out = String::from("frame_index,global_cluster_id\n");
    for (t, &label) in seg.labels.iter().enumerate() {
        let _ = writeln!(out, "{t},{label}");
    }
    out
}

/// Barcode rendering: one colored rect per constant-label run. Label 0 is
/// grey, cluster ids get evenly spaced hues.
pub fn segmentation_svg(labels: &[usize], total_clusters: usize, width: usize, height: usize) -> String {
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">"
    );
    let n = labels.len().max(1);
    let mut start = 0;
    while start < labels.len() {
        let mut end = start + 1;
        while end < labels.len() && labels[end] == labels[start] {
            end += 1;
        }
        let x = start as f64 / n as f64 * width as f64;
        let w = (end - start) as f64 / n as f64 * width as f64;
        let color = cluster_color(labels[start], total_clusters);
        let _ = write!(
            svg,
            "<rect x=\"{x:.2}\" y=\"0\" width=\"{w:.2}\" height=\"{height}\" fill=\"{color}\"/>"
        );
        start = end;
    }
    svg.push_str("</svg>");
    svg
}

pub fn cluster_color(label: usize, total_clusters: usize) -> String {
    if label == 0 {
        return "#bbbbbb".to_string();
    }
    let hue = (label - 1) as f64 / total_clusters.max(1) as f64 * 360.0;
    format!("hsl({hue:.0},70%,50%)")
}
