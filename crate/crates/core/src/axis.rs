//! Linear concept axes: image positions from min-max normalized similarity to
//! one concept, or the balance between two opposing concepts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, Modality};
use crate::error::{Error, Result};
use crate::fusion::dot;

pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum AxisKind {
    OneEnd {
        concept: String,
    },
    TwoEnd {
        #[serde(rename = "conceptA")]
        concept_a: String,
        #[serde(rename = "conceptB")]
        concept_b: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAxisSpec {
    #[serde(flatten)]
    pub kind: AxisKind,
    pub length: f64,
}

impl ConceptAxisSpec {
    pub fn one_end(concept: impl Into<String>, length: f64) -> Self {
        Self {
            kind: AxisKind::OneEnd { concept: concept.into() },
            length,
        }
    }

    pub fn two_end(a: impl Into<String>, b: impl Into<String>, length: f64) -> Self {
        Self {
            kind: AxisKind::TwoEnd {
                concept_a: a.into(),
                concept_b: b.into(),
            },
            length,
        }
    }

    fn validate(&self, dataset: &EmbeddingDataset) -> Result<()> {
        if !(self.length.is_finite() && self.length > 0.0) {
            return Err(Error::InvalidArgument(format!("axis length must be positive, got {}", self.length)));
        }
        match &self.kind {
            AxisKind::OneEnd { concept } => dataset.concept(concept).map(|_| ()),
            AxisKind::TwoEnd { concept_a, concept_b } => {
                dataset.concept(concept_a)?;
                dataset.concept(concept_b)?;
                if concept_a == concept_b {
                    return Err(Error::InvalidArgument(format!("two-end axis needs distinct concepts, got `{concept_a}` twice")));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisPosition {
    pub value: f64,
    /// The cohort gave no spread (or both ends vanished); the point sits mid-axis.
    pub degenerate: bool,
}

/// `l * (s - min) / (max - min)`, or `l/2` flagged when `max == min`.
pub fn min_max_position(sim: f64, min: f64, max: f64, length: f64) -> AxisPosition {
    if max > min {
        AxisPosition {
            value: length * (sim - min) / (max - min),
            degenerate: false,
        }
    } else {
        AxisPosition {
            value: length / 2.0,
            degenerate: true,
        }
    }
}

/// `l * (0.5 + 0.5 (mu_a - mu_b) / (mu_a + mu_b))`, mid-axis when both are zero.
pub fn two_end_from_ends(mu_a: f64, mu_b: f64, length: f64) -> AxisPosition {
    let sum = mu_a + mu_b;
    if sum > 0.0 {
        AxisPosition {
            value: length * (0.5 + 0.5 * (mu_a - mu_b) / sum),
            degenerate: false,
        }
    } else {
        AxisPosition {
            value: length / 2.0,
            degenerate: true,
        }
    }
}

fn extent(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Position of `x` on a one-end axis for `concept`, normalized over `cohort`.
pub fn one_end_position(x: &[f64], concept: &[f64], cohort: &[&[f64]], length: f64) -> AxisPosition {
    let (min, max) = extent(cohort.iter().map(|c| dot(c, concept)));
    min_max_position(dot(x, concept), min, max, length)
}

/// Position of `x` on a two-end axis from `a` (at `l`) to `b` (at 0).
pub fn two_end_position(x: &[f64], a: &[f64], b: &[f64], cohort: &[&[f64]], length: f64) -> AxisPosition {
    let mu_a = one_end_position(x, a, cohort, length);
    let mu_b = one_end_position(x, b, cohort, length);
    let mut out = two_end_from_ends(mu_a.value, mu_b.value, length);
    out.degenerate |= mu_a.degenerate || mu_b.degenerate;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLink {
    pub id: String,
    pub pos1: f64,
    pub pos2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConceptAxisLayout {
    pub spec: ConceptAxisSpec,
    pub positions: BTreeMap<String, f64>,
    pub degenerate: bool,
    /// Mean position of each set's members on this axis.
    pub set_boxes: BTreeMap<String, f64>,
    pub histogram: Vec<usize>,
    /// Links to the next axis in the request, one per shared image; empty on the last axis.
    pub pair_links: Vec<PairLink>,
}

/// Fixed-width histogram over `[0, length]`: bins are left-closed and the last
/// one is also right-closed.
pub fn histogram(values: impl IntoIterator<Item = f64>, length: f64, bins: usize) -> Vec<usize> {
    let mut out = vec![0; bins];
    if bins == 0 {
        return out;
    }
    for v in values {
        let b = ((v / length) * bins as f64).floor();
        let b = if b < 0.0 { 0 } else { (b as usize).min(bins - 1) };
        out[b] += 1;
    }
    out
}

/// Lay out the image points `cohort` (every image when `None`) on each axis.
pub fn axis_layout(
    dataset: &EmbeddingDataset,
    cohort: Option<&[String]>,
    specs: &[ConceptAxisSpec],
    bins: usize,
) -> Result<Vec<ConceptAxisLayout>> {
    if specs.is_empty() {
        return Err(Error::InvalidArgument("at least one axis is required".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be at least 1".into()));
    }
    let members: Vec<usize> = match cohort {
        None => dataset.indices_of(Modality::Image),
        Some(ids) => ids.iter().map(|id| dataset.index_of(id)).collect::<Result<_>>()?,
    };
    if members.is_empty() {
        return Err(Error::EmptyInput);
    }
    let pts = dataset.points();
    let vecs: Vec<&[f64]> = members.iter().map(|&i| pts[i].vector.as_slice()).collect();

    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate(dataset)?;
        let (positions, degenerate): (Vec<f64>, bool) = match &spec.kind {
            AxisKind::OneEnd { concept } => {
                let c = dataset.concept_vector(concept)?;
                let ps: Vec<AxisPosition> = vecs.iter().map(|x| one_end_position(x, c, &vecs, spec.length)).collect();
                (ps.iter().map(|p| p.value).collect(), ps.iter().any(|p| p.degenerate))
            }
            AxisKind::TwoEnd { concept_a, concept_b } => {
                let a = dataset.concept_vector(concept_a)?;
                let b = dataset.concept_vector(concept_b)?;
                let ps: Vec<AxisPosition> = vecs
                    .iter()
                    .map(|x| two_end_position(x, a, b, &vecs, spec.length))
                    .collect();
                (ps.iter().map(|p| p.value).collect(), ps.iter().any(|p| p.degenerate))
            }
        };
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (&i, &p) in members.iter().zip(&positions) {
            if let Some(set) = &pts[i].set_id {
                let e = sums.entry(set.clone()).or_default();
                e.0 += p;
                e.1 += 1;
            }
        }
        out.push(ConceptAxisLayout {
            spec: spec.clone(),
            positions: members.iter().map(|&i| pts[i].id.clone()).zip(positions.iter().copied()).collect(),
            degenerate,
            set_boxes: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            histogram: histogram(positions.iter().copied(), spec.length, bins),
            pair_links: Vec::new(),
        });
    }
    for a in 0..out.len().saturating_sub(1) {
        let links = out[a]
            .positions
            .iter()
            .filter_map(|(id, &p1)| {
                out[a + 1].positions.get(id).map(|&p2| PairLink {
                    id: id.clone(),
                    pos1: p1,
                    pos2: p2,
                })
            })
            .collect();
        out[a].pair_links = links;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ConceptEntry, EmbeddingPoint};

    #[test]
    fn one_end_hand_values() {
        assert_eq!(min_max_position(0.8, 0.2, 0.8, 100.0).value, 100.0);
        assert_eq!(min_max_position(0.2, 0.2, 0.8, 100.0).value, 0.0);
        assert!((min_max_position(0.5, 0.2, 0.8, 100.0).value - 50.0).abs() < 1e-12);
        let d = min_max_position(0.5, 0.5, 0.5, 10.0);
        assert!(d.degenerate);
        assert_eq!(d.value, 5.0);
    }

    #[test]
    fn two_end_hand_values() {
        assert_eq!(two_end_from_ends(30.0, 10.0, 100.0).value, 75.0);
        assert_eq!(two_end_from_ends(7.0, 7.0, 100.0).value, 50.0);
        assert_eq!(two_end_from_ends(7.0, 0.0, 100.0).value, 100.0);
        assert_eq!(two_end_from_ends(0.0, 7.0, 100.0).value, 0.0);
        assert!(two_end_from_ends(0.0, 0.0, 100.0).degenerate);
    }

    #[test]
    fn histogram_edges() {
        assert_eq!(histogram([0.0, 50.0, 100.0], 100.0, 4), vec![1, 0, 1, 1]);
        assert_eq!(histogram([25.0], 100.0, 4), vec![0, 1, 0, 0]);
    }

    fn fixture() -> EmbeddingDataset {
        // Images in the plane of e0/e1 at different angles; concepts along e0 and e1.
        let mut pts: Vec<EmbeddingPoint> = [0.1f64, 0.4, 0.7, 1.0, 1.3]
            .iter()
            .enumerate()
            .map(|(i, t)| {
                EmbeddingPoint::new(format!("i{i}"), Modality::Image, vec![t.cos(), t.sin(), 0.2])
                    .with_set(if i < 2 { "low" } else { "high" })
            })
            .collect();
        pts.push(EmbeddingPoint::new("ta", Modality::Text, vec![1.0, 0.0, 0.0]));
        pts.push(EmbeddingPoint::new("tb", Modality::Text, vec![0.0, 1.0, 0.0]));
        let concepts = vec![
            ConceptEntry {
                name: "a".into(),
                text_point_id: "ta".into(),
            },
            ConceptEntry {
                name: "b".into(),
                text_point_id: "tb".into(),
            },
        ];
        EmbeddingDataset::new(3, pts, concepts).unwrap()
    }

    #[test]
    fn layout_boxes_extremes_and_links() {
        let ds = fixture();
        let specs = [ConceptAxisSpec::one_end("a", 10.0), ConceptAxisSpec::two_end("a", "b", 10.0)];
        let out = axis_layout(&ds, None, &specs, 5).unwrap();
        let first = &out[0];
        assert_eq!(first.positions["i0"], 10.0);
        assert_eq!(first.positions["i4"], 0.0);
        let low = (first.positions["i0"] + first.positions["i1"]) / 2.0;
        assert!((first.set_boxes["low"] - low).abs() < 1e-9);
        assert_eq!(first.histogram.iter().sum::<usize>(), 5);
        assert_eq!(first.pair_links.len(), 5);
        assert!(out[1].pair_links.is_empty());
        assert!(out[1].positions.values().all(|&p| (0.0..=10.0).contains(&p)));
    }

    #[test]
    fn equal_similarity_axes_link_identically() {
        // Concepts c and d have the same similarity to every image.
        let mut pts: Vec<EmbeddingPoint> = (0..4)
            .map(|i| EmbeddingPoint::new(format!("i{i}"), Modality::Image, vec![1.0, 1.0, i as f64, 0.5]))
            .collect();
        pts.push(EmbeddingPoint::new("tc", Modality::Text, vec![1.0, 0.0, 0.3, 0.0]));
        pts.push(EmbeddingPoint::new("td", Modality::Text, vec![0.0, 1.0, 0.3, 0.0]));
        let concepts = vec![
            ConceptEntry {
                name: "c".into(),
                text_point_id: "tc".into(),
            },
            ConceptEntry {
                name: "d".into(),
                text_point_id: "td".into(),
            },
        ];
        let ds = EmbeddingDataset::new(4, pts, concepts).unwrap();
        let out = axis_layout(&ds, None, &[ConceptAxisSpec::one_end("c", 1.0), ConceptAxisSpec::one_end("d", 1.0)], 4).unwrap();
        for l in &out[0].pair_links {
            assert!((l.pos1 - l.pos2).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs() {
        let ds = fixture();
        assert_eq!(
            axis_layout(&ds, None, &[ConceptAxisSpec::one_end("zzz", 1.0)], 4).unwrap_err().kind(),
            "UnknownConcept"
        );
        assert!(axis_layout(&ds, None, &[ConceptAxisSpec::two_end("a", "a", 1.0)], 4).is_err());
        assert!(axis_layout(&ds, None, &[ConceptAxisSpec::one_end("a", 0.0)], 4).is_err());
        let cohort = vec!["i0".to_string()];
        let out = axis_layout(&ds, Some(&cohort), &[ConceptAxisSpec::one_end("a", 4.0)], 4).unwrap();
        assert!(out[0].degenerate);
        assert_eq!(out[0].positions["i0"], 2.0);
    }

    #[test]
    fn spec_json_shape() {
        let s = ConceptAxisSpec::two_end("a", "b", 100.0);
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["kind"], "TwoEnd");
        assert_eq!(v["conceptA"], "a");
        assert_eq!(serde_json::from_value::<ConceptAxisSpec>(v).unwrap(), s);
    }
}
