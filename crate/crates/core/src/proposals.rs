//! Correction proposals: cluster the candidate masks, summarize each cluster
//! by majority vote, express it as a signed change to the aggregated
//! prediction, and turn a chosen proposal into a point-and-label feedback
//! signal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::kmeans;
use crate::mask::{BinaryMask, Rle, SignedDiff, SoftMask};
use crate::phantom::PhantomImage;
use crate::rng::rng_from_seed;
use crate::segmenter::binarize;

/// Fraction of non-zero divergence scores left out of `P_diff`.
pub const DEFAULT_DIFF_QUANTILE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Foreground,
    Background,
}

impl Label {
    pub fn from_bool(fg: bool) -> Self {
        if fg {
            Label::Foreground
        } else {
            Label::Background
        }
    }

    pub fn is_foreground(self) -> bool {
        self == Label::Foreground
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSignal {
    /// `(row, col)`.
    pub point: (usize, usize),
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRepresentative {
    pub soft: SoftMask,
    pub binary: BinaryMask,
    pub member_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionProposal {
    pub cluster_id: usize,
    pub representative_soft: SoftMask,
    pub representative_binary: BinaryMask,
    /// `representative_binary - y_app`.
    pub diff: SignedDiff,
    pub member_count: usize,
}

/// Wire form of a proposal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalDoc {
    pub cluster_id: usize,
    pub member_count: usize,
    pub representative: Rle,
    pub diff_add: Rle,
    pub diff_remove: Rle,
}

impl From<&CorrectionProposal> for ProposalDoc {
    fn from(p: &CorrectionProposal) -> Self {
        Self {
            cluster_id: p.cluster_id,
            member_count: p.member_count,
            representative: p.representative_binary.to_rle(),
            diff_add: p.diff.additions().to_rle(),
            diff_remove: p.diff.removals().to_rle(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffPointSet {
    pub points: Vec<(usize, usize)>,
    pub scores: Vec<f64>,
}

impl DiffPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn contains(&self, point: (usize, usize)) -> bool {
        self.points.contains(&point)
    }
}

/// Clusters flattened soft masks; returns member indices per cluster.
pub fn kmeans_masks(masks: &[SoftMask], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some(first) = masks.first() {
        if masks.iter().any(|m| m.shape() != first.shape()) {
            return Err(shape("clustered masks differ in shape"));
        }
    }
    let points: Vec<&[f64]> = masks.iter().map(SoftMask::data).collect();
    Ok(kmeans::kmeans(&points, k, seed)?.clusters)
}

/// Mean soft mask of the cluster and strict-majority vote of its
/// binarized members.
pub fn representative(cluster: &[&SoftMask]) -> Result<(SoftMask, BinaryMask)> {
    let first = cluster.first().ok_or_else(|| invalid("empty cluster has no representative"))?;
    let (h, w) = first.shape();
    if cluster.iter().any(|m| m.shape() != (h, w)) {
        return Err(shape("cluster members differ in shape"));
    }
    let n = cluster.len();
    let mut mean = vec![0.0; h * w];
    let mut votes = vec![0usize; h * w];
    for m in cluster {
        for ((acc, v), &p) in mean.iter_mut().zip(votes.iter_mut()).zip(m.data()) {
            *acc += p;
            *v += (p >= 0.5) as usize;
        }
    }
    let inv = 1.0 / n as f64;
    let soft = SoftMask::from_raw(h, w, mean.into_iter().map(|v| (v * inv).clamp(0.0, 1.0)).collect());
    let binary = BinaryMask::new(h, w, votes.into_iter().map(|v| 2 * v > n).collect())?;
    Ok((soft, binary))
}

pub fn make_proposals(reps: &[ClusterRepresentative], y_app: &BinaryMask) -> Result<Vec<CorrectionProposal>> {
    reps.iter()
        .enumerate()
        .map(|(cluster_id, r)| {
            if r.soft.shape() != y_app.shape() {
                return Err(shape("representative and aggregate differ in shape"));
            }
            Ok(CorrectionProposal {
                cluster_id,
                representative_soft: r.soft.clone(),
                representative_binary: r.binary.clone(),
                diff: SignedDiff::between(&r.binary, y_app)?,
                member_count: r.member_count,
            })
        })
        .collect()
}

/// Full proposal pipeline for one set of candidates.
pub fn build_proposals(candidates: &[SoftMask], y_app: &BinaryMask, k: usize, seed: u64) -> Result<Vec<CorrectionProposal>> {
    let clusters = kmeans_masks(candidates, k, seed)?;
    let reps = clusters
        .iter()
        .map(|members| {
            let refs: Vec<&SoftMask> = members.iter().map(|&i| &candidates[i]).collect();
            let (soft, binary) = representative(&refs)?;
            Ok(ClusterRepresentative { soft, binary, member_count: members.len() })
        })
        .collect::<Result<Vec<_>>>()?;
    make_proposals(&reps, y_app)
}

/// Pixels where `|rep_soft - app_soft|` reaches the `q`-quantile of the
/// non-zero scores (linear interpolation between order statistics); ties at
/// the cut are kept. If the masks agree everywhere every pixel is returned
/// with score 0.
pub fn diff_points(rep_soft: &SoftMask, app_soft: &SoftMask, q: f64) -> Result<DiffPointSet> {
    if rep_soft.shape() != app_soft.shape() {
        return Err(shape("divergence between masks of different shape"));
    }
    if !(0.0..1.0).contains(&q) {
        return Err(invalid(format!("quantile {q} outside [0, 1)")));
    }
    let width = rep_soft.width();
    let scores: Vec<f64> = rep_soft.data().iter().zip(app_soft.data()).map(|(a, b)| (a - b).abs()).collect();
    let mut nonzero: Vec<f64> = scores.iter().copied().filter(|&s| s > 0.0).collect();
    if nonzero.is_empty() {
        return Ok(DiffPointSet {
            points: (0..scores.len()).map(|i| (i / width, i % width)).collect(),
            scores,
        });
    }
    nonzero.sort_by(f64::total_cmp);
    let cut = quantile_sorted(&nonzero, q);
    let (points, kept) = scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0 && s >= cut)
        .map(|(i, &s)| ((i / width, i % width), s))
        .unzip();
    Ok(DiffPointSet { points, scores: kept })
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    // never exceeds sorted[hi], so the order statistic at `hi` is always kept
    (sorted[lo] + frac * (sorted[hi] - sorted[lo])).min(sorted[hi])
}

/// A uniformly drawn point of `P_diff`, labelled with the representative's
/// binarized value there.
pub fn sample_feedback(pdiff: &DiffPointSet, rep_binary: &BinaryMask, seed: u64) -> Result<FeedbackSignal> {
    if pdiff.is_empty() {
        return Err(invalid("cannot sample feedback from an empty point set"));
    }
    let mut rng = rng_from_seed(seed);
    let point = pdiff.points[rng.random_range(0..pdiff.len())];
    if point.0 >= rep_binary.height() || point.1 >= rep_binary.width() {
        return Err(shape("feedback point outside the representative mask"));
    }
    Ok(FeedbackSignal { point, label: Label::from_bool(rep_binary.get(point.0, point.1)) })
}

/// Cold-start signal: a uniform random pixel, labelled from `reference` when
/// one is given and background otherwise.
pub fn initial_feedback(image: &PhantomImage, seed: u64, reference: Option<&BinaryMask>) -> FeedbackSignal {
    let mut rng = rng_from_seed(seed);
    let point = (rng.random_range(0..image.height), rng.random_range(0..image.width));
    let label = match reference {
        Some(r) if r.shape() == (image.height, image.width) => Label::from_bool(r.get(point.0, point.1)),
        _ => Label::Background,
    };
    FeedbackSignal { point, label }
}

/// Binarizes a soft representative at 0.5 (helper for callers that only
/// keep the soft form).
pub fn binarize_representative(soft: &SoftMask) -> BinaryMask {
    binarize(soft, 0.5)
}
