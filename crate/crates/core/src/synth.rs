//! Seeded synthetic datasets that exercise the engine without any encoder:
//!
//! * `gap3` — three concept clusters per modality with a constant modality-gap
//!   offset separating images from texts.
//! * `entangle2` — a retrieval query whose nearest results are dominated by a
//!   confusable pool that shares an unrequested direction with the query.
//! * `planted` — two clusters and one image that sits nearer the wrong cluster.
//! * `zero_gap` — text points that duplicate image points exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::alignment::assign_nearest_concept;
use crate::dataset::{ConceptEntry, EmbeddingDataset, EmbeddingPoint, Modality};

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gram-Schmidt on gaussian draws: `count` orthonormal directions.
fn orthonormal(rng: &mut impl Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    assert!(count <= dim);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(y, v)| *y += a * v);
}

fn concept(name: &str, text_id: &str) -> ConceptEntry {
    ConceptEntry {
        name: name.into(),
        text_point_id: text_id.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gap3Params {
    pub clusters: usize,
    pub images_per_cluster: usize,
    pub dim: usize,
    /// Magnitude of the constant offset separating the modalities.
    pub gap: f64,
    /// Magnitude of the within-cluster sub-structure.
    pub spread: f64,
    pub noise: f64,
}

impl Default for Gap3Params {
    fn default() -> Self {
        Gap3Params {
            clusters: 3,
            images_per_cluster: 150,
            dim: 32,
            gap: 1.5,
            spread: 0.6,
            noise: 0.25,
        }
    }
}

impl Gap3Params {
    /// A 21-point instance for quick tests.
    pub fn small() -> Self {
        Gap3Params {
            images_per_cluster: 6,
            dim: 12,
            ..Gap3Params::default()
        }
    }
}

/// Concept clusters with a modality gap. Images carry their cluster as both
/// label and set id; concept `concept-k` is backed by text point `text-k`.
pub fn gap3(params: &Gap3Params, seed: u64) -> EmbeddingDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = params.clusters;
    // Concept directions, one gap direction and two sub-structure axes per cluster.
    let basis = orthonormal(&mut rng, params.dim, k + 1 + 2 * k);
    let concepts = &basis[..k];
    let gap_dir = &basis[k];
    let mut points = Vec::new();
    let mut entries = Vec::new();
    for (c, cdir) in concepts.iter().enumerate() {
        let name = format!("concept-{c}");
        let sub = [&basis[k + 1 + 2 * c], &basis[k + 2 + 2 * c]];
        for i in 0..params.images_per_cluster {
            // Relevance to the concept varies per image, so every text has a
            // graded cross-modal order over its cluster.
            let relevance = rng.random_range(0.35..1.0);
            let mut v = vec![0.0; params.dim];
            axpy(&mut v, relevance, cdir);
            axpy(&mut v, params.gap, gap_dir);
            for s in sub {
                axpy(&mut v, params.spread * rng.sample::<f64, _>(StandardNormal), s);
            }
            let noise = gaussian(&mut rng, params.dim);
            axpy(&mut v, params.noise / (params.dim as f64).sqrt(), &noise);
            points.push(
                EmbeddingPoint::new(format!("img-{c}-{i:03}"), Modality::Image, v)
                    .with_label(name.clone())
                    .with_set(name.clone()),
            );
        }
        let mut t = cdir.clone();
        axpy(&mut t, -params.gap, gap_dir);
        let text_id = format!("text-{c}");
        points.push(
            EmbeddingPoint::new(text_id.clone(), Modality::Text, t)
                .with_label(name.clone())
                .with_set(name.clone()),
        );
        entries.push(concept(&name, &text_id));
    }
    EmbeddingDataset::new(params.dim, points, entries).expect("gap3 fixture is valid")
}

/// `gap3` without the gap, plus one text point duplicating each of the first
/// `duplicates_per_cluster` images of every cluster.
pub fn zero_gap(params: &Gap3Params, duplicates_per_cluster: usize, seed: u64) -> EmbeddingDataset {
    let base = gap3(
        &Gap3Params {
            gap: 0.0,
            ..params.clone()
        },
        seed,
    );
    let mut points: Vec<EmbeddingPoint> = base
        .points()
        .iter()
        .filter(|p| p.modality == Modality::Image)
        .cloned()
        .collect();
    let mut dups = Vec::new();
    for c in 0..params.clusters {
        for i in 0..duplicates_per_cluster.min(params.images_per_cluster) {
            let src = &points[c * params.images_per_cluster + i];
            let mut t = src.clone();
            t.id = format!("dup-{}", src.id);
            t.modality = Modality::Text;
            dups.push(t);
        }
    }
    points.extend(dups);
    EmbeddingDataset::new(params.dim, points, vec![]).expect("zero-gap fixture is valid")
}

/// Identifiers of the planted-misassignment fixture.
pub mod planted_ids {
    pub const POINT: &str = "img-planted";
    pub const CORRECT: &str = "A";
    pub const WRONG: &str = "B";
}

/// Two image clusters `A` and `B` with concept texts, set ids assigned by
/// nearest concept (zero-shot). One image labeled `A` carries an individual
/// feature and lies nearer `B`, so it is assigned to `B`.
pub fn planted(seed: u64) -> EmbeddingDataset {
    let dim = 16;
    let per_cluster = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = orthonormal(&mut rng, dim, dim);
    let (a_dir, b_dir, gap_dir, own_dir) = (&basis[0], &basis[1], &basis[2], &basis[dim - 1]);
    let noise_axes = &basis[3..dim - 1];

    let mut raw: Vec<(String, Modality, Vec<f64>, &str)> = Vec::new();
    for (name, dir) in [("A", a_dir), ("B", b_dir)] {
        for i in 0..per_cluster {
            let mut v = vec![0.0; dim];
            axpy(&mut v, 1.0, dir);
            axpy(&mut v, 0.8, gap_dir);
            for ax in noise_axes {
                axpy(&mut v, 0.15 * rng.sample::<f64, _>(StandardNormal), ax);
            }
            raw.push((format!("img-{name}-{i:02}"), Modality::Image, v, name));
        }
        let mut t = dir.clone();
        axpy(&mut t, -0.8, gap_dir);
        raw.push((format!("text-{name}"), Modality::Text, t, name));
    }
    let mut p = vec![0.0; dim];
    axpy(&mut p, 0.45, a_dir);
    axpy(&mut p, 0.62, b_dir);
    axpy(&mut p, 0.8, gap_dir);
    axpy(&mut p, 0.5, own_dir);
    raw.push((planted_ids::POINT.into(), Modality::Image, p, "A"));

    let points: Vec<EmbeddingPoint> = raw
        .into_iter()
        .map(|(id, m, v, label)| EmbeddingPoint::new(id, m, v).with_label(label))
        .collect();
    let ds = EmbeddingDataset::new(dim, points, vec![concept("A", "text-A"), concept("B", "text-B")])
        .expect("planted fixture is valid");
    assign_nearest_concept(&ds)
}

/// Identifiers of the entangled-retrieval fixture.
pub mod entangle_ids {
    pub const QUERY: &str = "text-query";
    pub const QUERY_SET: &str = "query";
    pub const ENTANGLED_SET: &str = "entangled";
    pub const TARGET: &str = "target";
    pub const CONFUSER: &str = "confuser";
    pub const OTHER: &str = "other";
    /// Number of top results a user inspects when selecting the entangled subset.
    pub const INSPECTED: usize = 20;
    /// Size of the candidate pool handed to re-ranking.
    pub const CANDIDATES: usize = 80;
}

/// A query text whose nearest images are mostly "confusers" (they share an
/// unrequested direction with the query) rather than the labeled targets.
///
/// Labels: `target`, `confuser`, `other` on images. The query point has set id
/// `query`; the confusers among its top `INSPECTED` results have set id
/// `entangled`, simulating the user's selection. Three more concept texts
/// (`target-concept`, `confuser-concept`, `other-concept`) are included.
pub fn entangle2(seed: u64) -> EmbeddingDataset {
    use entangle_ids::*;
    let dim = 24;
    let per_pool = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = orthonormal(&mut rng, dim, dim);
    let (main, wanted, unwanted, other, gap) = (&basis[0], &basis[1], &basis[2], &basis[3], &basis[4]);
    let noise_axes = &basis[5..];

    let mut points = Vec::new();
    let image = |id: String, comps: &[(f64, &Vec<f64>)], label: &str, rng: &mut ChaCha8Rng| {
        let mut v = vec![0.0; dim];
        for &(a, d) in comps {
            axpy(&mut v, a, d);
        }
        axpy(&mut v, 0.9, gap);
        for ax in noise_axes {
            axpy(&mut v, 0.12 * rng.sample::<f64, _>(StandardNormal), ax);
        }
        EmbeddingPoint::new(id, Modality::Image, v).with_label(label)
    };
    for i in 0..per_pool {
        let w = rng.random_range(0.6..1.0);
        points.push(image(format!("img-t-{i:02}"), &[(1.0, main), (w, wanted)], TARGET, &mut rng));
        let u = rng.random_range(0.7..1.1);
        points.push(image(format!("img-c-{i:02}"), &[(1.0, main), (u, unwanted)], CONFUSER, &mut rng));
        points.push(image(format!("img-o-{i:02}"), &[(0.4, main), (1.0, other)], OTHER, &mut rng));
    }
    let text = |id: &str, comps: &[(f64, &Vec<f64>)]| {
        let mut v = vec![0.0; dim];
        for &(a, d) in comps {
            axpy(&mut v, a, d);
        }
        axpy(&mut v, -0.9, gap);
        EmbeddingPoint::new(id, Modality::Text, v)
    };
    points.push(text(QUERY, &[(1.0, main), (0.45, wanted), (0.75, unwanted)]).with_set(QUERY_SET));
    points.push(text("text-target", &[(1.0, main), (1.0, wanted)]));
    points.push(text("text-confuser", &[(1.0, main), (1.0, unwanted)]));
    points.push(text("text-other", &[(0.4, main), (1.0, other)]));
    let concepts = vec![
        concept("query", QUERY),
        concept("target-concept", "text-target"),
        concept("confuser-concept", "text-confuser"),
        concept("other-concept", "text-other"),
    ];
    let ds = EmbeddingDataset::new(dim, points, concepts).expect("entangle2 fixture is valid");

    // The user inspects the top results and marks the confusers among them.
    let top = crate::dataset::knn_query(&ds, QUERY, INSPECTED, Some(Modality::Image)).unwrap();
    let assign = top
        .iter()
        .filter(|n| ds.point(n.id).unwrap().label.as_deref() == Some(CONFUSER))
        .map(|n| (n.id.to_string(), ENTANGLED_SET.to_string()))
        .collect();
    ds.with_set_ids(&assign)
}

/// The query's `CANDIDATES` nearest images: the pool that re-ranking reorders.
pub fn entangle2_candidates(ds: &EmbeddingDataset) -> Vec<String> {
    crate::dataset::knn_query(ds, entangle_ids::QUERY, entangle_ids::CANDIDATES, Some(Modality::Image))
        .unwrap()
        .into_iter()
        .map(|n| n.id.to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::cosine_distance;

    #[test]
    fn gap3_shape() {
        let ds = gap3(&Gap3Params::default(), 1);
        assert_eq!(ds.count(Modality::Image), 450);
        assert_eq!(ds.count(Modality::Text), 3);
        assert_eq!(ds.concepts().len(), 3);
    }

    #[test]
    fn gap3_has_a_modality_gap() {
        let ds = gap3(&Gap3Params::default(), 2);
        let img = ds.indices_of(Modality::Image);
        let txt = ds.indices_of(Modality::Text);
        let p = ds.points();
        let cross_min = img
            .iter()
            .flat_map(|&i| txt.iter().map(move |&t| (i, t)))
            .map(|(i, t)| cosine_distance(&p[i].vector, &p[t].vector))
            .fold(f64::INFINITY, f64::min);
        let intra_mean = img
            .iter()
            .take(150)
            .zip(img.iter().skip(1))
            .map(|(&a, &b)| cosine_distance(&p[a].vector, &p[b].vector))
            .sum::<f64>()
            / 150.0;
        assert!(cross_min > intra_mean, "{cross_min} vs {intra_mean}");
    }

    #[test]
    fn planted_point_is_misassigned() {
        let ds = planted(7);
        let p = ds.point(planted_ids::POINT).unwrap();
        assert_eq!(p.label.as_deref(), Some("A"));
        assert_eq!(p.set_id.as_deref(), Some("B"));
        for q in ds.points().iter().filter(|q| q.modality == Modality::Image && q.id != p.id) {
            assert_eq!(q.label, q.set_id, "{}", q.id);
        }
    }

    #[test]
    fn entangle2_top_results_are_confused() {
        let ds = entangle2(3);
        let cands = entangle2_candidates(&ds);
        let top10 = cands.iter().take(10).filter(|id| {
            ds.point(id).unwrap().label.as_deref() == Some(entangle_ids::TARGET)
        });
        assert!(top10.count() <= 3);
        assert!(!ds.set_members(entangle_ids::ENTANGLED_SET).is_empty());
    }

    #[test]
    fn fixtures_are_seed_deterministic() {
        let a = gap3(&Gap3Params::small(), 5);
        let b = gap3(&Gap3Params::small(), 5);
        assert_eq!(a.points(), b.points());
        assert_ne!(gap3(&Gap3Params::small(), 6).points(), a.points());
    }
}
