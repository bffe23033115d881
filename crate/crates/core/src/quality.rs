//! Neighborhood-preservation metrics, within-set outlier scores and the
//! round-based evaluation protocol.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{seq::index, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, Modality};
use crate::error::{Error, Result};
use crate::fusion::{cosine_distance, euclidean_matrix, pairwise_cosine};
use crate::layout::ProjectionLayout;
use crate::mfm::MfmConfig;
use crate::projectors::{project, ProjectorKind};

pub const DEFAULT_K: usize = 30;

/// Which points count as neighbor candidates of a row.
#[derive(Debug, Clone, Copy)]
pub enum NeighborhoodFilter<'a> {
    All,
    /// Only points of the other modality.
    CrossModal(&'a [Modality]),
    /// Only points of the same modality (excluding the row itself).
    SameModal(&'a [Modality]),
}

impl NeighborhoodFilter<'_> {
    fn admits(&self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        match self {
            Self::All => true,
            Self::CrossModal(m) => m[i] != m[j],
            Self::SameModal(m) => m[i] == m[j],
        }
    }
}

/// Indices of `candidates` ordered by distance from row `i`, ties by index.
fn ranked(d: &DMatrix<f64>, i: usize, candidates: &[usize]) -> Vec<usize> {
    let mut out = candidates.to_vec();
    out.sort_by(|&a, &b| d[(i, a)].total_cmp(&d[(i, b)]).then(a.cmp(&b)));
    out
}

/// Trustworthiness of `low` with respect to `high`.
///
/// Each row contributes `sum_{j in U_k(i)} (r(i,j) - k)` normalized by
/// `k (2m - 3k - 1) / 2`, where `m - 1` is the row's candidate count; the result is
/// one minus the mean over rows. Without a filter every row has `m = N` and this
/// is the usual `1 - 2/(N k (2N - 3k - 1)) * sum`. With a filter, rows whose
/// candidate pool is too small for `k` are left out; if no row remains the call
/// fails with `KTooLarge`.
pub fn trustworthiness(high: &DMatrix<f64>, low: &DMatrix<f64>, k: usize, filter: NeighborhoodFilter<'_>) -> Result<f64> {
    let n = high.nrows();
    if high.ncols() != n || low.nrows() != n || low.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: low.nrows(),
            context: "distance matrices must be square and of equal order".into(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let unfiltered = matches!(filter, NeighborhoodFilter::All);
    if unfiltered {
        if k >= n.saturating_sub(1) {
            return Err(Error::KTooLarge { k, available: n.saturating_sub(1) });
        }
        if 2 * n as i64 - 3 * k as i64 - 1 <= 0 {
            return Err(Error::NormalizerNonpositive { n, k });
        }
    }

    let mut total = 0.0;
    let mut rows = 0usize;
    let mut best_pool = 0usize;
    for i in 0..n {
        let candidates: Vec<usize> = (0..n).filter(|&j| filter.admits(i, j)).collect();
        let m = candidates.len() + 1;
        best_pool = best_pool.max(candidates.len());
        if k >= candidates.len() || 2 * m as i64 - 3 * k as i64 - 1 <= 0 {
            continue;
        }
        let by_high = ranked(high, i, &candidates);
        let by_low = ranked(low, i, &candidates);
        let mut rank = vec![0usize; n];
        for (r, &j) in by_high.iter().enumerate() {
            rank[j] = r + 1;
        }
        let penalty: usize = by_low[..k].iter().map(|&j| rank[j]).filter(|&r| r > k).map(|r| r - k).sum();
        total += 2.0 * penalty as f64 / (k * (2 * m - 3 * k - 1)) as f64;
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::KTooLarge { k, available: best_pool });
    }
    Ok(1.0 - total / rows as f64)
}

/// Continuity: trustworthiness with the two spaces exchanged.
pub fn continuity(high: &DMatrix<f64>, low: &DMatrix<f64>, k: usize, filter: NeighborhoodFilter<'_>) -> Result<f64> {
    trustworthiness(low, high, k, filter)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RoundMetrics {
    pub inter_trust: f64,
    pub inter_cont: f64,
    pub intra_trust: f64,
    pub intra_cont: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QualityReport {
    pub projector: ProjectorKind,
    pub k: usize,
    pub inter_trust: f64,
    pub inter_cont: f64,
    pub intra_trust: f64,
    pub intra_cont: f64,
    pub rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_round: Option<Vec<RoundMetrics>>,
}

/// All four metrics for one layout. Points are taken in id order so that
/// distance ties resolve by id; high-dimensional distances are cosine.
pub fn evaluate_layout(dataset: &EmbeddingDataset, layout: &ProjectionLayout, k: usize) -> Result<RoundMetrics> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let pts = dataset.points();
    order.sort_by(|&a, &b| pts[a].id.cmp(&pts[b].id));
    let ids: Vec<String> = order.iter().map(|&i| pts[i].id.clone()).collect();
    let vecs: Vec<&[f64]> = order.iter().map(|&i| pts[i].vector.as_slice()).collect();
    let modalities: Vec<Modality> = order.iter().map(|&i| pts[i].modality).collect();
    let high = pairwise_cosine(&vecs);
    let low = euclidean_matrix(&layout.coords_in(&ids)?);
    let cross = NeighborhoodFilter::CrossModal(&modalities);
    let same = NeighborhoodFilter::SameModal(&modalities);
    Ok(RoundMetrics {
        inter_trust: trustworthiness(&high, &low, k, cross)?,
        inter_cont: continuity(&high, &low, k, cross)?,
        intra_trust: trustworthiness(&high, &low, k, same)?,
        intra_cont: continuity(&high, &low, k, same)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProtocolOptions {
    pub rounds: usize,
    pub sample_size: usize,
    pub k: usize,
    pub seed: u64,
    /// Keep every round's metrics in the report.
    pub keep_rounds: bool,
    pub mfm: MfmConfig,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            rounds: 20,
            sample_size: 300,
            k: DEFAULT_K,
            seed: 0,
            keep_rounds: false,
            mfm: MfmConfig::default(),
        }
    }
}

/// Points of one protocol round: the sampled images (ascending index) followed
/// by every concept text point, or every text point when no concepts exist.
pub fn protocol_round_indices(dataset: &EmbeddingDataset, sample_size: usize, round_seed: u64) -> Result<Vec<usize>> {
    let images = dataset.indices_of(Modality::Image);
    if sample_size > images.len() || sample_size == 0 {
        return Err(Error::InsufficientImages {
            concept: "*".into(),
            requested: sample_size,
            available: images.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(round_seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, images.len(), sample_size)
        .into_iter()
        .map(|i| images[i])
        .collect();
    picked.sort_unstable();
    if dataset.concepts().is_empty() {
        picked.extend(dataset.indices_of(Modality::Text));
    } else {
        for c in dataset.concepts() {
            let idx = dataset.index_of(&c.text_point_id)?;
            if !picked.contains(&idx) {
                picked.push(idx);
            }
        }
    }
    Ok(picked)
}

/// Seeds of the protocol rounds, drawn in order from the protocol seed.
pub fn round_seeds(seed: u64, rounds: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rounds).map(|_| rng.next_u64()).collect()
}

/// Sample, project and score `rounds` times; the report holds per-metric means.
/// Rounds run in parallel and each is fully determined by its own seed.
pub fn evaluate_protocol(dataset: &EmbeddingDataset, projector: ProjectorKind, opts: &ProtocolOptions) -> Result<QualityReport> {
    if opts.rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be at least 1".into()));
    }
    let seeds = round_seeds(opts.seed, opts.rounds);
    tracing::info!(%projector, rounds = opts.rounds, sample = opts.sample_size, k = opts.k, "evaluation protocol");
    let per_round: Vec<RoundMetrics> = seeds
        .par_iter()
        .map(|&s| {
            let sub = dataset.subset(&protocol_round_indices(dataset, opts.sample_size, s)?)?;
            let layout = project(&sub, projector, &opts.mfm, s)?;
            evaluate_layout(&sub, &layout, opts.k)
        })
        .collect::<Result<_>>()?;
    let mean = |f: fn(&RoundMetrics) -> f64| per_round.iter().map(f).sum::<f64>() / per_round.len() as f64;
    Ok(QualityReport {
        projector,
        k: opts.k,
        inter_trust: mean(|r| r.inter_trust),
        inter_cont: mean(|r| r.inter_cont),
        intra_trust: mean(|r| r.intra_trust),
        intra_cont: mean(|r| r.intra_cont),
        rounds: opts.rounds,
        per_round: opts.keep_rounds.then_some(per_round),
    })
}

/// Plain-text table with one row per projector and the inter-/intra-modal
/// T and C columns.
pub fn format_table(reports: &[QualityReport]) -> String {
    let k = reports.first().map_or(DEFAULT_K, |r| r.k);
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>12} {:>12} {:>12} {:>12}", "", "Inter-modal", "", "Intra-modal", "");
    let _ = writeln!(
        out,
        "{:<10} {:>12} {:>12} {:>12} {:>12}",
        "Method",
        format!("T({k})"),
        format!("C({k})"),
        format!("T({k})"),
        format!("C({k})")
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<10} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
            r.projector.as_str().to_uppercase(),
            r.inter_trust,
            r.inter_cont,
            r.intra_trust,
            r.intra_cont
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ZScores {
    /// `(point id, z)` in dataset order.
    pub scores: Vec<(String, f64)>,
    /// Every member had the same mean distance; all scores are zero.
    pub zero_std: bool,
}

/// Standardized mean cosine distance of every set member to the other
/// members, using the population standard deviation.
pub fn zscore_outliers(dataset: &EmbeddingDataset, set_id: &str) -> Result<ZScores> {
    let members = dataset.set_members(set_id);
    if members.is_empty() && !dataset.set_ids().iter().any(|s| s == set_id) {
        return Err(Error::UnknownSet(set_id.to_string()));
    }
    if members.len() < 3 {
        return Err(Error::SetTooSmall {
            set: set_id.to_string(),
            size: members.len(),
            required: 3,
        });
    }
    let pts = dataset.points();
    let means: Vec<f64> = members
        .iter()
        .map(|&a| {
            let sum: f64 = members
                .iter()
                .filter(|&&b| b != a)
                .map(|&b| cosine_distance(&pts[a].vector, &pts[b].vector))
                .sum();
            sum / (members.len() - 1) as f64
        })
        .collect();
    let n = means.len() as f64;
    let mu = means.iter().sum::<f64>() / n;
    let sd = (means.iter().map(|m| (m - mu) * (m - mu)).sum::<f64>() / n).sqrt();
    let zero_std = sd <= 1e-12 * mu.abs().max(1.0);
    let scores = members
        .iter()
        .zip(&means)
        .map(|(&i, &m)| (pts[i].id.clone(), if zero_std { 0.0 } else { (m - mu) / sd }))
        .collect();
    Ok(ZScores { scores, zero_std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::EmbeddingPoint;
    use crate::synth::{self, Gap3Params};
    use rand::Rng;

    fn random_matrix(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        DMatrix::from_fn(n, n, |a, b| {
            (0..3).map(|c| (pts[a][c] - pts[b][c]).powi(2)).sum::<f64>().sqrt()
        })
    }

    #[test]
    fn identical_spaces_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = random_matrix(10, &mut rng);
        for k in 1..4 {
            assert_eq!(trustworthiness(&d, &d, k, NeighborhoodFilter::All).unwrap(), 1.0);
            assert_eq!(continuity(&d, &d, k, NeighborhoodFilter::All).unwrap(), 1.0);
        }
    }

    #[test]
    fn four_points_one_swap() {
        // Line 0-1-2-3 at positions 0, 1, 3, 6; the projection moves 3 next to 0.
        let high = euclidean_matrix(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [6.0, 0.0]]);
        let low = euclidean_matrix(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [-0.5, 0.0]]);
        // k=1: low NN of 0 is 3 (high rank 3 -> penalty 2); low NN of 3 is 0
        // (high rank of 0 from 3 is 3 -> penalty 2); rows 1 and 2 keep theirs.
        // T = 1 - 2/(4*1*(8-3-1)) * 4 = 0.5.
        let t = trustworthiness(&high, &low, 1, NeighborhoodFilter::All).unwrap();
        assert!((t - 0.5).abs() < 1e-15, "{t}");
    }

    #[test]
    fn rejects_bad_k() {
        let d = DMatrix::from_fn(4, 4, |a, b| (a as f64 - b as f64).abs());
        assert_eq!(trustworthiness(&d, &d, 3, NeighborhoodFilter::All).unwrap_err().kind(), "KTooLarge");
        let d5 = DMatrix::from_fn(5, 5, |a, b| (a as f64 - b as f64).abs());
        assert_eq!(trustworthiness(&d5, &d5, 3, NeighborhoodFilter::All).unwrap_err().kind(), "NormalizerNonpositive");
        assert!(trustworthiness(&d, &d, 0, NeighborhoodFilter::All).is_err());
        let m = [Modality::Image, Modality::Image, Modality::Image, Modality::Text];
        assert_eq!(
            trustworthiness(&d, &d, 3, NeighborhoodFilter::CrossModal(&m)).unwrap_err().kind(),
            "KTooLarge"
        );
    }

    #[test]
    fn filtered_rows_use_own_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let high = random_matrix(12, &mut rng);
        let low = random_matrix(12, &mut rng);
        let m: Vec<Modality> = (0..12).map(|i| if i % 2 == 0 { Modality::Image } else { Modality::Text }).collect();
        let t = trustworthiness(&high, &low, 2, NeighborhoodFilter::CrossModal(&m)).unwrap();
        // Oracle: each row restricted to the 6 opposite-modality points is an
        // unfiltered 7-point problem with the row itself included.
        let mut sum = 0.0;
        for i in 0..12 {
            let mut idx = vec![i];
            idx.extend((0..12).filter(|&j| m[j] != m[i]));
            let sub = |d: &DMatrix<f64>| DMatrix::from_fn(7, 7, |a, b| d[(idx[a], idx[b])]);
            let (h, l) = (sub(&high), sub(&low));
            let mut order_h: Vec<usize> = (1..7).collect();
            order_h.sort_by(|&a, &b| h[(0, a)].total_cmp(&h[(0, b)]).then(idx[a].cmp(&idx[b])));
            let mut order_l: Vec<usize> = (1..7).collect();
            order_l.sort_by(|&a, &b| l[(0, a)].total_cmp(&l[(0, b)]).then(idx[a].cmp(&idx[b])));
            let pen: usize = order_l[..2]
                .iter()
                .map(|j| order_h.iter().position(|x| x == j).unwrap() + 1)
                .filter(|&r| r > 2)
                .map(|r| r - 2)
                .sum();
            sum += 2.0 * pen as f64 / (2.0 * (14.0 - 6.0 - 1.0));
        }
        assert!((t - (1.0 - sum / 12.0)).abs() < 1e-12);
    }

    #[test]
    fn zscores_symmetric_and_outlier() {
        // Regular simplex: the standard basis vectors.
        let pts = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                EmbeddingPoint::new(format!("p{i}"), Modality::Image, v).with_set("s")
            })
            .collect();
        let ds = EmbeddingDataset::new(4, pts, vec![]).unwrap();
        let z = zscore_outliers(&ds, "s").unwrap();
        assert!(z.zero_std);
        assert!(z.scores.iter().all(|(_, v)| *v == 0.0));

        let mut pts: Vec<EmbeddingPoint> = (0..6)
            .map(|i| EmbeddingPoint::new(format!("c{i}"), Modality::Image, vec![1.0, 0.01 * i as f64, 0.02]).with_set("s"))
            .collect();
        pts.push(EmbeddingPoint::new("far", Modality::Image, vec![0.2, 1.0, 0.0]).with_set("s"));
        let ds = EmbeddingDataset::new(3, pts, vec![]).unwrap();
        let z = zscore_outliers(&ds, "s").unwrap();
        let (best, _) = z.scores.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert_eq!(best, "far");
        assert!(z.scores.iter().map(|(_, v)| v).sum::<f64>().abs() < 1e-9);
        assert_eq!(zscore_outliers(&ds, "nope").unwrap_err().kind(), "UnknownSet");
    }

    #[test]
    fn zscore_small_set() {
        let pts = (0..2)
            .map(|i| EmbeddingPoint::new(format!("p{i}"), Modality::Image, vec![1.0, i as f64]).with_set("s"))
            .collect();
        let ds = EmbeddingDataset::new(2, pts, vec![]).unwrap();
        assert_eq!(zscore_outliers(&ds, "s").unwrap_err().kind(), "SetTooSmall");
    }

    #[test]
    fn protocol_single_round_matches_direct_evaluation() {
        let ds = synth::gap3(&Gap3Params::small(), 2);
        let n_img = ds.count(Modality::Image);
        let opts = ProtocolOptions {
            rounds: 1,
            sample_size: n_img,
            k: 3,
            seed: 9,
            ..Default::default()
        };
        let report = evaluate_protocol(&ds, ProjectorKind::Dcm, &opts).unwrap();
        let s = round_seeds(9, 1)[0];
        let sub = ds.subset(&protocol_round_indices(&ds, n_img, s).unwrap()).unwrap();
        let direct = evaluate_layout(&sub, &project(&sub, ProjectorKind::Dcm, &opts.mfm, s).unwrap(), 3).unwrap();
        assert_eq!(report.inter_trust, direct.inter_trust);
        assert_eq!(report.intra_cont, direct.intra_cont);
        let again = evaluate_protocol(&ds, ProjectorKind::Dcm, &opts).unwrap();
        assert_eq!(report, again);
        let table = format_table(&[report]);
        assert!(table.contains("DCM") && table.contains("T(3)"));
    }

    #[test]
    fn protocol_rejects_oversized_sample() {
        let ds = synth::gap3(&Gap3Params::small(), 2);
        let opts = ProtocolOptions {
            rounds: 1,
            sample_size: 10_000,
            ..Default::default()
        };
        assert_eq!(evaluate_protocol(&ds, ProjectorKind::Pca, &opts).unwrap_err().kind(), "InsufficientImages");
    }
}
