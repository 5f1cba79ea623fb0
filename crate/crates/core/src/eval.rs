//! Global evaluation: one Hungarian matching between inferred clusters and
//! ground-truth classes across the whole dataset, then frame metrics.
//!
//! MoF discards a seeded tau fraction of ground-truth background frames and
//! scores the rest (kept background frames must be predicted as background);
//! MoF-BG scores every frame. F1 is micro-averaged over action frames by
//! default with a macro variant behind a flag.

use std::fmt::Write as _;

use crate::assignment::max_weight_assignment;
use crate::dataio::DatasetManifest;
use crate::decode::Segmentation;
use crate::rng::Rng;
use crate::{Error, Result};

/// Outcome of the cluster-to-class matching.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// `mapping[cluster - 1]` = ground-truth class id, or 0 for clusters
    /// left unmatched (their frames become background).
    pub mapping: Vec<usize>,
    /// Total co-occurrence weight captured by the assignment.
    pub matched_frames: usize,
    /// clusters x classes co-occurrence counts over action frames.
    pub cost_matrix: Vec<Vec<usize>>,
}

/// Build the co-occurrence matrix (ground-truth background excluded) and
/// solve the rectangular assignment.
pub fn hungarian_match(
    pred: &[Segmentation],
    gt: &[(String, Vec<usize>)],
    n_clusters: usize,
    n_classes: usize,
) -> Result<MatchResult> {
    let mut counts = vec![vec![0usize; n_classes]; n_clusters];
    for (seg, (video_id, gt_labels)) in pred.iter().zip(gt.iter()) {
        if seg.labels.len() != gt_labels.len() {
            return Err(Error::Contract(format!(
                "video {video_id}: {} predictions vs {} ground-truth labels",
                seg.labels.len(),
                gt_labels.len()
            )));
        }
        for (&p, &g) in seg.labels.iter().zip(gt_labels.iter()) {
            if g == 0 || p == 0 {
                continue;
            }
            if p > n_clusters {
                return Err(Error::Contract(format!(
                    "video {video_id}: cluster id {p} exceeds cluster count {n_clusters}"
                )));
            }
            if g > n_classes {
                return Err(Error::Contract(format!(
                    "video {video_id}: class id {g} exceeds class count {n_classes}"
                )));
            }
            counts[p - 1][g - 1] += 1;
        }
    }
    Ok(match_counts(counts))
}

/// Assignment step on a prepared co-occurrence matrix.
pub fn match_counts(counts: Vec<Vec<usize>>) -> MatchResult {
    let weights: Vec<Vec<f64>> =
        counts.iter().map(|row| row.iter().map(|&c| c as f64).collect()).collect();
    let (assignment, total) = max_weight_assignment(&weights);
    let mapping: Vec<usize> = assignment.iter().map(|a| a.map_or(0, |c| c + 1)).collect();
    MatchResult { mapping, matched_frames: total.round() as usize, cost_matrix: counts }
}

/// Replace cluster ids with their matched class ids (0 stays background).
pub fn apply_mapping(match_result: &MatchResult, pred: &[Segmentation]) -> Vec<Vec<usize>> {
    pred.iter()
        .map(|seg| {
            seg.labels
                .iter()
                .map(|&p| if p == 0 { 0 } else { match_result.mapping[p - 1] })
                .collect()
        })
        .collect()
}

/// Mean-over-frames accuracy.
///
/// With `include_background` the score runs over every frame. Without it, a
/// seeded uniformly-random `tau` fraction of ground-truth background frames
/// is discarded first; the surviving background frames still count and must
/// be predicted as background.
pub fn mof(
    mapped_pred: &[Vec<usize>],
    gt: &[Vec<usize>],
    include_background: bool,
    tau: f64,
    seed: u64,
) -> f64 {
    let keep = if include_background {
        None
    } else {
        Some(background_keep_mask(gt, tau, seed))
    };
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut cursor = 0usize;
    for (pv, gv) in mapped_pred.iter().zip(gt.iter()) {
        for (&p, &g) in pv.iter().zip(gv.iter()) {
            let kept = match &keep {
                None => true,
                Some(mask) => {
                    let k = mask[cursor];
                    cursor += 1;
                    k
                }
            };
            if !kept {
                continue;
            }
            total += 1;
            if p == g {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return 0.0;
    }
    correct as f64 / total as f64
}

/// Per-frame keep mask after removing a tau fraction of background frames.
fn background_keep_mask(gt: &[Vec<usize>], tau: f64, seed: u64) -> Vec<bool> {
    let flat: Vec<usize> = gt.iter().flatten().cloned().collect();
    let bg_positions: Vec<usize> =
        flat.iter().enumerate().filter(|(_, &g)| g == 0).map(|(i, _)| i).collect();
    let n_remove = ((bg_positions.len() as f64) * tau).round() as usize;
    let mut rng = Rng::new(seed).derive(0x7A0);
    let mut order = bg_positions;
    rng.shuffle(&mut order);
    let mut keep = vec![true; flat.len()];
    for &pos in order.iter().take(n_remove) {
        keep[pos] = false;
    }
    keep
}

/// Frame-level F1 over action frames. Precision counts predicted action
/// frames, recall counts ground-truth action frames; a correct frame is an
/// action frame predicted with its ground-truth class.
pub fn f1(mapped_pred: &[Vec<usize>], gt: &[Vec<usize>], macro_average: bool) -> f64 {
    if macro_average {
        return f1_macro(mapped_pred, gt);
    }
    let mut correct = 0usize;
    let mut predicted = 0usize;
    let mut actual = 0usize;
    for (pv, gv) in mapped_pred.iter().zip(gt.iter()) {
        for (&p, &g) in pv.iter().zip(gv.iter()) {
            if p > 0 {
                predicted += 1;
            }
            if g > 0 {
                actual += 1;
            }
            if p > 0 && p == g {
                correct += 1;
            }
        }
    }
    let precision = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
    let recall = if actual == 0 { 0.0 } else { correct as f64 / actual as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn f1_macro(mapped_pred: &[Vec<usize>], gt: &[Vec<usize>]) -> f64 {
    let stats = per_class_stats(mapped_pred, gt);
    if stats.is_empty() {
        return 0.0;
    }
    let sum: f64 = stats
        .iter()
        .map(|s| {
            if s.precision + s.recall == 0.0 {
                0.0
            } else {
                2.0 * s.precision * s.recall / (s.precision + s.recall)
            }
        })
        .sum();
    sum / stats.len() as f64
}

#[derive(Debug, Clone)]
pub struct ClassStats {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    /// Ground-truth frame count.
    pub support: usize,
}

/// Precision/recall per ground-truth class that occurs in the data.
pub fn per_class_stats(mapped_pred: &[Vec<usize>], gt: &[Vec<usize>]) -> Vec<ClassStats> {
    let max_class = gt
        .iter()
        .flatten()
        .cloned()
        .max()
        .unwrap_or(0)
        .max(mapped_pred.iter().flatten().cloned().max().unwrap_or(0));
    let mut tp = vec![0usize; max_class + 1];
    let mut fp = vec![0usize; max_class + 1];
    let mut support = vec![0usize; max_class + 1];
    for (pv, gv) in mapped_pred.iter().zip(gt.iter()) {
        for (&p, &g) in pv.iter().zip(gv.iter()) {
            if g > 0 {
                support[g] += 1;
            }
            if p > 0 {
                if p == g {
                    tp[p] += 1;
                } else {
                    fp[p] += 1;
                }
            }
        }
    }
    (1..=max_class)
        .filter(|&c| support[c] > 0 || tp[c] + fp[c] > 0)
        .map(|c| ClassStats {
            class: c,
            precision: if tp[c] + fp[c] == 0 { 0.0 } else { tp[c] as f64 / (tp[c] + fp[c]) as f64 },
            recall: if support[c] == 0 { 0.0 } else { tp[c] as f64 / support[c] as f64 },
            support: support[c],
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    /// Fraction of ground-truth background frames removed before MoF.
    pub tau: f64,
    pub seed: u64,
    pub macro_f1: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { tau: 0.75, seed: 0, macro_f1: false }
    }
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub mof: f64,
    pub f1: f64,
    pub mof_bg: f64,
    pub per_class: Vec<ClassStats>,
    pub tau: f64,
    pub seed: u64,
    pub macro_f1: bool,
    pub match_result: MatchResult,
    pub n_clusters: usize,
    pub n_classes: usize,
}

/// Match clusters to classes, apply the mapping, and compute every metric.
/// `segmentations` must be ordered like the manifest records.
pub fn evaluate(
    manifest: &DatasetManifest,
    segmentations: &[Segmentation],
    n_clusters: usize,
    settings: &EvalSettings,
) -> Result<MetricReport> {
    let mut gt = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        match &rec.gt_frame_labels {
            Some(labels) => gt.push((rec.video_id.clone(), labels.clone())),
            None => {
                return Err(Error::Validation(format!(
                    "video {} has no ground-truth labels; evaluation impossible",
                    rec.video_id
                )))
            }
        }
    }
    if segmentations.len() != manifest.records.len() {
        return Err(Error::Contract(format!(
            "{} segmentations for {} videos",
            segmentations.len(),
            manifest.records.len()
        )));
    }
    let n_classes = manifest.class_count;
    let match_result = hungarian_match(segmentations, &gt, n_clusters, n_classes)?;
    let mapped = apply_mapping(&match_result, segmentations);
    let gt_only: Vec<Vec<usize>> = gt.into_iter().map(|(_, l)| l).collect();

    Ok(MetricReport {
        mof: mof(&mapped, &gt_only, false, settings.tau, settings.seed),
        f1: f1(&mapped, &gt_only, settings.macro_f1),
        mof_bg: mof(&mapped, &gt_only, true, settings.tau, settings.seed),
        per_class: per_class_stats(&mapped, &gt_only),
        tau: settings.tau,
        seed: settings.seed,
        macro_f1: settings.macro_f1,
        match_result,
        n_clusters,
        n_classes,
    })
}

/// Published reference results for this evaluation protocol, echoed into
/// every report footer for context.
pub const REFERENCE_RESULTS: &[(&str, &[(&str, f64)])] = &[
    ("breakfast_idt", &[("mof", 24.6), ("f1", 20.6)]),
    ("breakfast_i3d", &[("mof", 20.7), ("f1", 17.5)]),
    ("youtube_instructions", &[("mof", 23.6), ("f1", 16.53), ("mof_bg", 11.4)]),
];

/// Render the report as JSON text.
pub fn report_json(report: &MetricReport) -> String {
    let mut out = String::from("{\n");
    let _ = writeln!(out, "  \"mof\": {:.6},", report.mof);
    let _ = writeln!(out, "  \"f1\": {:.6},", report.f1);
    let _ = writeln!(out, "  \"mof_bg\": {:.6},", report.mof_bg);
    let _ = writeln!(out, "  \"n_clusters\": {},", report.n_clusters);
    let _ = writeln!(out, "  \"n_classes\": {},", report.n_classes);
    let _ = writeln!(out, "  \"matched_frames\": {},", report.match_result.matched_frames);
    let _ = writeln!(out, "  \"settings\": {{");
    let _ = writeln!(out, "    \"tau\": {},", report.tau);
    let _ = writeln!(out, "    \"seed\": {},", report.seed);
    let _ = writeln!(out, "    \"macro_f1\": {}", report.macro_f1);
    let _ = writeln!(out, "  }},");
    let _ = writeln!(out, "  \"cluster_to_class\": [");
    for (c, &class) in report.match_result.mapping.iter().enumerate() {
        let sep = if c + 1 == report.match_result.mapping.len() { "" } else { "," };
        let _ = writeln!(out, "    {{\"cluster\": {}, \"class\": {}}}{}", c + 1, class, sep);
    }
    let _ = writeln!(out, "  ],");
    let _ = writeln!(out, "  \"per_class\": [");
    for (i, s) in report.per_class.iter().enumerate() {
        let sep = if i + 1 == report.per_class.len() { "" } else { "," };
        let _ = writeln!(
            out,
            "    {{\"class\": {}, \"precision\": {:.6}, \"recall\": {:.6}, \"support\": {}}}{}",
            s.class, s.precision, s.recall, s.support, sep
        );
    }
    let _ = writeln!(out, "  ],");
    let _ = writeln!(out, "  \"reference_results\": {{");
    for (i, (name, metrics)) in REFERENCE_RESULTS.iter().enumerate() {
        let body: Vec<String> =
            metrics.iter().map(|(k, v)| format!("\"{k}\": {v}")).collect();
        let sep = if i + 1 == REFERENCE_RESULTS.len() { "" } else { "," };
        let _ = writeln!(out, "    \"{name}\": {{{}}}{}", body.join(", "), sep);
    }
    let _ = writeln!(out, "  }}");
    out.push('}');
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn seg(labels: Vec<usize>) -> Segmentation {
        Segmentation { video_id: "v".into(), labels }
    }

    #[test]
    fn diagonal_counts_give_identity_mapping() {
        let counts = vec![
            vec![10, 0, 0],
            vec![0, 7, 0],
            vec![0, 0, 4],
        ];
        let result = match_counts(counts);
        assert_eq!(result.mapping, vec![1, 2, 3]);
        assert_eq!(result.matched_frames, 21);
    }

    #[test]
    fn matching_equals_brute_force_on_random_matrices() {
        let mut rng = Rng::new(99);
        for trial in 0..100 {
            let clusters = rng.next_range(1, 6);
            let classes = rng.next_range(1, 6);
            let counts: Vec<Vec<usize>> = (0..clusters)
                .map(|_| (0..classes).map(|_| rng.next_below(50)).collect())
                .collect();
            let result = match_counts(counts.clone());

            // brute force over injective cluster -> class maps
            let mut best = 0usize;
            let mut perm: Vec<usize> = (0..classes).collect();
            permute(&mut perm, 0, &mut |p| {
                let total: usize =
                    (0..clusters.min(classes)).map(|r| counts[r][p[r]]).sum();
                best = best.max(total);
            });
            if clusters > classes {
                let mut rows: Vec<usize> = (0..clusters).collect();
                best = 0;
                permute(&mut rows, 0, &mut |p| {
                    let total: usize = (0..classes).map(|c| counts[p[c]][c]).sum();
                    best = best.max(total);
                });
            }
            assert_eq!(result.matched_frames, best, "trial {trial}");
        }
    }

    fn permute<F: FnMut(&[usize])>(items: &mut Vec<usize>, k: usize, f: &mut F) {
        if k == items.len() {
            f(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, f);
            items.swap(k, i);
        }
    }

    #[test]
    fn fifty_clusters_against_48_classes_leaves_two_unmatched() {
        let mut rng = Rng::new(100);
        let counts: Vec<Vec<usize>> =
            (0..50).map(|_| (0..48).map(|_| rng.next_below(30)).collect()).collect();
        let result = match_counts(counts);
        let unmatched = result.mapping.iter().filter(|&&m| m == 0).count();
        assert_eq!(unmatched, 2);
        // injective on matched classes
        let mut seen = std::collections::HashSet::new();
        for &m in result.mapping.iter().filter(|&&m| m > 0) {
            assert!(seen.insert(m), "class {m} matched twice");
        }
    }

    #[test]
    fn mapping_invariant_to_cluster_permutation() {
        let mut rng = Rng::new(101);
        let gt: Vec<Vec<usize>> = vec![(0..200).map(|_| 1 + rng.next_below(3)).collect()];
        let pred_labels: Vec<usize> = (0..200).map(|_| 1 + rng.next_below(5)).collect();
        // permute cluster ids with a fixed permutation
        let perm = [3usize, 5, 1, 2, 4];
        let permuted: Vec<usize> = pred_labels.iter().map(|&p| perm[p - 1]).collect();

        let gt_named = vec![("v".to_string(), gt[0].clone())];
        let base =
            hungarian_match(&[seg(pred_labels.clone())], &gt_named, 5, 3).unwrap();
        let permd = hungarian_match(&[seg(permuted.clone())], &gt_named, 5, 3).unwrap();
        assert_eq!(base.matched_frames, permd.matched_frames);

        let base_mapped = apply_mapping(&base, &[seg(pred_labels)]);
        let perm_mapped = apply_mapping(&permd, &[seg(permuted)]);
        let acc_base = mof(&base_mapped, &gt, true, 0.75, 1);
        let acc_perm = mof(&perm_mapped, &gt, true, 0.75, 1);
        assert!((acc_base - acc_perm).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_names_video() {
        let gt = vec![("clip_7".to_string(), vec![1, 1, 2])];
        let err = hungarian_match(&[seg(vec![1, 1])], &gt, 2, 2).unwrap_err();
        assert!(err.to_string().contains("clip_7"), "err: {err}");
    }

    #[test]
    fn mof_perfect_and_zero_cases() {
        let gt = vec![vec![1, 1, 2, 2]];
        assert_eq!(mof(&[vec![1, 1, 2, 2]], &gt, false, 0.75, 0), 1.0);
        // all-background predictions against action-only ground truth
        assert_eq!(mof(&[vec![0, 0, 0, 0]], &gt, false, 0.75, 0), 0.0);
    }

    #[test]
    fn mof_matches_hand_count() {
        let mut rng = Rng::new(102);
        let gt: Vec<usize> = (0..200).map(|_| rng.next_below(4)).collect();
        let pred: Vec<usize> = (0..200).map(|_| rng.next_below(4)).collect();
        let got = mof(&[pred.clone()], &[gt.clone()], true, 0.75, 3);
        let correct = gt.iter().zip(pred.iter()).filter(|(g, p)| g == p).count();
        assert!((got - correct as f64 / 200.0).abs() < 1e-12);
    }

    #[test]
    fn tau_removal_reduces_background_weight() {
        // 100 background frames predicted wrong, 100 action frames right
        let gt: Vec<usize> = std::iter::repeat(0)
            .take(100)
            .chain(std::iter::repeat(1).take(100))
            .collect();
        let pred: Vec<usize> = std::iter::repeat(9)
            .take(100)
            .chain(std::iter::repeat(1).take(100))
            .collect();
        let with_bg = mof(&[pred.clone()], &[gt.clone()], true, 0.75, 5);
        assert!((with_bg - 0.5).abs() < 1e-12);
        // tau = 0.75 keeps 25 background frames: accuracy 100/125
        let without = mof(&[pred], &[gt], false, 0.75, 5);
        assert!((without - 100.0 / 125.0).abs() < 1e-12);
    }

    #[test]
    fn zero_background_makes_mof_equal_mof_bg() {
        let mut rng = Rng::new(103);
        let gt: Vec<usize> = (0..150).map(|_| 1 + rng.next_below(5)).collect();
        let pred: Vec<usize> = (0..150).map(|_| 1 + rng.next_below(6)).collect();
        let a = mof(&[pred.clone()], &[gt.clone()], false, 0.75, 7);
        let b = mof(&[pred], &[gt], true, 0.75, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn f1_perfect_and_degenerate() {
        let gt = vec![vec![1, 2, 0, 2]];
        assert_eq!(f1(&[vec![1, 2, 0, 2]], &gt, false), 1.0);
        // everything predicted background: precision undefined -> 0
        assert_eq!(f1(&[vec![0, 0, 0, 0]], &gt, false), 0.0);
    }

    #[test]
    fn f1_matches_hand_computation() {
        // pred: 3 action frames, 2 correct; gt: 4 action frames
        let gt = vec![vec![1, 1, 2, 2, 0]];
        let pred = vec![vec![1, 0, 2, 1, 2]];
        let got = f1(&pred, &gt, false);
        let p = 2.0 / 4.0; // predicted action frames: 4 (frames 0,2,3,4)
        let r = 2.0 / 4.0;
        let expected = 2.0 * p * r / (p + r);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn macro_f1_averages_class_scores() {
        // class 1 perfect, class 2 fully missed
        let gt = vec![vec![1, 1, 2, 2]];
        let pred = vec![vec![1, 1, 0, 0]];
        let micro = f1(&pred, &gt, false);
        let mac = f1(&pred, &gt, true);
        assert!((mac - 0.5).abs() < 1e-12, "macro {mac}");
        assert!(micro > 0.0 && micro < 1.0);
    }

    #[test]
    fn per_class_table_counts_support() {
        let gt = vec![vec![1, 1, 2, 0]];
        let pred = vec![vec![1, 2, 2, 0]];
        let stats = per_class_stats(&pred, &gt);
        let c1 = stats.iter().find(|s| s.class == 1).unwrap();
        assert_eq!(c1.support, 2);
        assert_eq!(c1.precision, 1.0);
        assert_eq!(c1.recall, 0.5);
        let c2 = stats.iter().find(|s| s.class == 2).unwrap();
        assert_eq!(c2.support, 1);
        assert!((c2.precision - 0.5).abs() < 1e-12);
        assert_eq!(c2.recall, 1.0);
    }

    #[test]
    fn shuffled_predictions_land_near_uniform_floor() {
        let k_total = 50;
        let n_classes = 48;
        let mut rng = Rng::new(104);
        let mut accs = Vec::new();
        for _ in 0..20 {
            let frames = 12_000;
            let gt: Vec<usize> = (0..frames).map(|_| 1 + rng.next_below(n_classes)).collect();
            let pred: Vec<usize> = (0..frames).map(|_| 1 + rng.next_below(k_total)).collect();
            let gt_named = vec![("v".to_string(), gt.clone())];
            let m = hungarian_match(&[seg(pred.clone())], &gt_named, k_total, n_classes).unwrap();
            let mapped = apply_mapping(&m, &[seg(pred)]);
            accs.push(mof(&mapped, &[gt], false, 0.75, 9));
        }
        let mean: f64 = accs.iter().sum::<f64>() / accs.len() as f64;
        let floor = 1.0 / k_total as f64;
        assert!((mean - floor).abs() < 0.05, "mean accuracy {mean}, floor {floor}");
    }

    #[test]
    fn report_json_carries_reference_results_and_mapping() {
        let report = MetricReport {
            mof: 0.5,
            f1: 0.25,
            mof_bg: 0.4,
            per_class: vec![ClassStats { class: 1, precision: 0.5, recall: 1.0, support: 3 }],
            tau: 0.75,
            seed: 11,
            macro_f1: false,
            match_result: MatchResult {
                mapping: vec![1, 0],
                matched_frames: 3,
                cost_matrix: vec![vec![3], vec![0]],
            },
            n_clusters: 2,
            n_classes: 1,
        };
        let json = report_json(&report);
        assert!(json.contains("\"mof\": 0.500000"));
        assert!(json.contains("\"tau\": 0.75"));
        assert!(json.contains("\"breakfast_idt\": {\"mof\": 24.6, \"f1\": 20.6}"));
        assert!(json.contains("\"youtube_instructions\""));
        assert!(json.contains("\"mof_bg\": 11.4"));
        assert!(json.contains("{\"cluster\": 2, \"class\": 0}"));
    }
}
