//! Alignment directives realized as triplet-loss training of an embedding
//! adapter, plus verification, re-ranking, zero-shot set assignment and
//! weighted text embeddings.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, Modality};
use crate::error::{Error, Result};
use crate::fusion::{cosine_distance, dot};
use crate::model_io::{read_model, write_model};
use crate::nn::{Activation, Adam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Closer,
    Farther,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OriginView {
    #[default]
    Projection,
    ConceptAxis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all_fields = "camelCase")]
pub enum DirectiveKind {
    /// Move one point toward a set (and away from the others).
    PointSet {
        point_id: String,
        target_set_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        repelled_set_ids: Option<Vec<String>>,
    },
    /// Move a set toward or away from another set.
    SetSet {
        source_set_id: String,
        reference_set_id: String,
        direction: Direction,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AlignmentDirective {
    #[serde(flatten)]
    pub kind: DirectiveKind,
    #[serde(default)]
    pub origin_view: OriginView,
}

impl AlignmentDirective {
    pub fn point_set(point: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            kind: DirectiveKind::PointSet {
                point_id: point.into(),
                target_set_id: target.into(),
                repelled_set_ids: None,
            },
            origin_view: OriginView::Projection,
        }
    }

    pub fn set_set(source: impl Into<String>, reference: impl Into<String>, direction: Direction) -> Self {
        Self {
            kind: DirectiveKind::SetSet {
                source_set_id: source.into(),
                reference_set_id: reference.into(),
                direction,
            },
            origin_view: OriginView::Projection,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct AdapterConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub seed: u64,
    pub max_triplets: usize,
    /// Width of the optional residual `V tanh(U x + c)` branch.
    pub hidden: Option<usize>,
    /// Neighborhood size used by set-set directives.
    pub neighborhood: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            margin: 0.2,
            seed: 0,
            max_triplets: 256,
            hidden: None,
            neighborhood: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
    pub margin: f64,
}

// ---------------------------------------------------------------------------
// Directive resolution

fn set_indices(dataset: &EmbeddingDataset, set: &str) -> Result<Vec<usize>> {
    let members = dataset.set_members(set);
    if !members.is_empty() {
        return Ok(members);
    }
    if dataset.set_ids().iter().any(|s| s == set) {
        Err(Error::EmptySet(set.to_string()))
    } else {
        Err(Error::UnknownSet(set.to_string()))
    }
}

/// The `m` nearest points to `anchor` with `modality`, outside `exclude`.
fn neighborhood(dataset: &EmbeddingDataset, anchor: usize, modality: Modality, exclude: &BTreeSet<usize>, m: usize) -> Vec<usize> {
    let pts = dataset.points();
    let mut cand: Vec<(f64, usize)> = pts
        .iter()
        .enumerate()
        .filter(|&(i, p)| i != anchor && p.modality == modality && !exclude.contains(&i))
        .map(|(i, p)| (cosine_distance(&pts[anchor].vector, &p.vector), i))
        .collect();
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| pts[a.1].id.cmp(&pts[b.1].id)));
    cand.into_iter().take(m).map(|(_, i)| i).collect()
}

/// Index sets a directive compares, resolved on `dataset`'s own vectors.
#[derive(Debug, Clone)]
enum Resolved {
    PointSet {
        point: usize,
        target: Vec<usize>,
        others: Vec<Vec<usize>>,
    },
    SetSet {
        source: Vec<usize>,
        reference: Vec<usize>,
        /// Per source member, its neighborhood outside both sets.
        neighbors: Vec<Vec<usize>>,
        direction: Direction,
    },
}

fn resolve(directive: &AlignmentDirective, dataset: &EmbeddingDataset, neighborhood_size: usize) -> Result<Resolved> {
    match &directive.kind {
        DirectiveKind::PointSet {
            point_id,
            target_set_id,
            repelled_set_ids,
        } => {
            let point = dataset.index_of(point_id)?;
            let strip = |v: Vec<usize>| -> Vec<usize> { v.into_iter().filter(|&i| i != point).collect() };
            let target = strip(set_indices(dataset, target_set_id)?);
            if target.is_empty() {
                return Err(Error::EmptySet(target_set_id.clone()));
            }
            let other_ids: Vec<String> = match repelled_set_ids {
                Some(ids) => ids.clone(),
                None => dataset.set_ids().into_iter().filter(|s| s != target_set_id).collect(),
            };
            let mut others = Vec::new();
            for id in &other_ids {
                if id == target_set_id {
                    return Err(Error::DegenerateDirective(format!("set `{id}` is both target and repelled")));
                }
                let members = strip(set_indices(dataset, id)?);
                if !members.is_empty() {
                    others.push(members);
                }
            }
            if others.is_empty() {
                return Err(Error::DegenerateDirective("no competing set to move away from".into()));
            }
            Ok(Resolved::PointSet { point, target, others })
        }
        DirectiveKind::SetSet {
            source_set_id,
            reference_set_id,
            direction,
        } => {
            let source = set_indices(dataset, source_set_id)?;
            let reference = set_indices(dataset, reference_set_id)?;
            let rset: BTreeSet<usize> = reference.iter().copied().collect();
            if source_set_id == reference_set_id || source.iter().all(|i| rset.contains(i)) {
                return Err(Error::DegenerateDirective(format!(
                    "source `{source_set_id}` lies inside reference `{reference_set_id}`"
                )));
            }
            let source: Vec<usize> = source.into_iter().filter(|i| !rset.contains(i)).collect();
            let mut exclude = rset;
            exclude.extend(source.iter().copied());
            let modality = dataset.points()[reference[0]].modality;
            let neighbors: Vec<Vec<usize>> = source
                .iter()
                .map(|&a| neighborhood(dataset, a, modality, &exclude, neighborhood_size))
                .collect();
            if neighbors.iter().all(Vec::is_empty) {
                return Err(Error::DegenerateDirective("source set has no neighborhood outside the reference set".into()));
            }
            Ok(Resolved::SetSet {
                source,
                reference,
                neighbors,
                direction: *direction,
            })
        }
    }
}

/// Triplets for a directive, sampled without replacement when the full
/// product exceeds `max_triplets`.
///
/// Point-set: anchor is the point, positives the target set, negatives every
/// competing set. Set-set closer: anchors from the source set, positives from
/// the reference, negatives from the anchor's neighborhood (nearest points of
/// the reference's modality outside both sets). Farther swaps the two roles.
pub fn build_triplets(directive: &AlignmentDirective, dataset: &EmbeddingDataset, config: &AdapterConfig) -> Result<TripletBatch> {
    if config.max_triplets == 0 {
        return Err(Error::InvalidArgument("max_triplets must be positive".into()));
    }
    let resolved = resolve(directive, dataset, config.neighborhood)?;
    let mut all: Vec<(usize, usize, usize)> = Vec::new();
    match &resolved {
        Resolved::PointSet { point, target, others } => {
            for &p in target {
                for set in others {
                    for &n in set {
                        all.push((*point, p, n));
                    }
                }
            }
        }
        Resolved::SetSet {
            source,
            reference,
            neighbors,
            direction,
        } => {
            for (&a, nbr) in source.iter().zip(neighbors) {
                for &r in reference {
                    for &m in nbr {
                        all.push(match direction {
                            Direction::Closer => (a, r, m),
                            Direction::Farther => (a, m, r),
                        });
                    }
                }
            }
        }
    }
    if all.is_empty() {
        return Err(Error::DegenerateDirective("directive yields no triplets".into()));
    }
    let chosen: Vec<(usize, usize, usize)> = if all.len() <= config.max_triplets {
        all
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut picks = index::sample(&mut rng, all.len(), config.max_triplets).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| all[i]).collect()
    };
    let pts = dataset.points();
    Ok(TripletBatch {
        triplets: chosen
            .into_iter()
            .map(|(a, p, n)| Triplet {
                anchor: pts[a].id.clone(),
                positive: pts[p].id.clone(),
                negative: pts[n].id.clone(),
            })
            .collect(),
        margin: config.margin,
    })
}

// ---------------------------------------------------------------------------
// Adapter

/// `x -> normalize(W x + b + V tanh(U x + c))`, with the residual branch only
/// when `hidden` is set. Starts as the identity (`W = I`, `b = 0`, `V = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterModel {
    pub dim: usize,
    pub hidden: Option<usize>,
    pub seed: u64,
    /// `W` (column-major), `b`, then `U` (column-major), `c`, `V` (column-major).
    pub params: Vec<f64>,
}

pub const ADAPTER_KIND: &str = "adapter";

fn adapter_param_len(dim: usize, hidden: Option<usize>) -> usize {
    dim * dim + dim + hidden.map_or(0, |h| h * dim + h + dim * h)
}

struct AdapterCache {
    x: DVector<f64>,
    t: Option<DVector<f64>>,
    y_norm: f64,
    z: DVector<f64>,
}

impl AdapterModel {
    pub fn identity(dim: usize, hidden: Option<usize>, seed: u64) -> Self {
        let mut params = vec![0.0; adapter_param_len(dim, hidden)];
        for i in 0..dim {
            params[i * dim + i] = 1.0;
        }
        if let Some(h) = hidden {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bound = 1.0 / (dim as f64).sqrt();
            let start = dim * dim + dim;
            for p in &mut params[start..start + h * dim] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Self { dim, hidden, seed, params }
    }

    fn w(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim, self.dim, &self.params[..self.dim * self.dim])
    }

    fn b(&self) -> DVector<f64> {
        let s = self.dim * self.dim;
        DVector::from_column_slice(&self.params[s..s + self.dim])
    }

    /// Offsets of `U`, `c`, `V` when the residual branch exists.
    fn branch(&self) -> Option<(usize, usize, usize, usize)> {
        self.hidden.map(|h| {
            let u = self.dim * self.dim + self.dim;
            let c = u + h * self.dim;
            let v = c + h;
            (h, u, c, v)
        })
    }

    fn forward_cached(&self, x: &[f64], w: &DMatrix<f64>, b: &DVector<f64>) -> Result<AdapterCache> {
        let x = DVector::from_column_slice(x);
        let mut y = w * &x + b;
        let mut t = None;
        if let Some((h, u, c, v)) = self.branch() {
            let um = DMatrix::from_column_slice(h, self.dim, &self.params[u..c]);
            let cv = DVector::from_column_slice(&self.params[c..v]);
            let vm = DMatrix::from_column_slice(self.dim, h, &self.params[v..]);
            let th = (um * &x + cv).map(f64::tanh);
            y += vm * &th;
            t = Some(th);
        }
        let y_norm = y.norm();
        if !(y_norm.is_finite() && y_norm > 0.0) {
            return Err(Error::ZeroProjectedNorm);
        }
        Ok(AdapterCache { z: y / y_norm, x, t, y_norm })
    }

    /// Adapted, unit-norm embedding of `x`.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
                context: "adapter input".into(),
            });
        }
        Ok(self.forward_cached(x, &self.w(), &self.b())?.z.as_slice().to_vec())
    }

    /// Accumulate the parameter gradient for upstream gradient `gz` on the output.
    fn backward(&self, cache: &AdapterCache, gz: &DVector<f64>, grads: &mut [f64]) {
        let d = self.dim;
        let gy = (gz - &cache.z * cache.z.dot(gz)) / cache.y_norm;
        // W: gy x^T, column-major.
        for j in 0..d {
            let xj = cache.x[j];
            if xj != 0.0 {
                for i in 0..d {
                    grads[j * d + i] += gy[i] * xj;
                }
            }
        }
        for i in 0..d {
            grads[d * d + i] += gy[i];
        }
        if let (Some((h, u, c, v)), Some(t)) = (self.branch(), &cache.t) {
            let vm = DMatrix::from_column_slice(d, h, &self.params[v..]);
            for j in 0..h {
                for i in 0..d {
                    grads[v + j * d + i] += gy[i] * t[j];
                }
            }
            let gh = (vm.transpose() * &gy).component_mul(&t.map(|x| 1.0 - x * x));
            for j in 0..d {
                for i in 0..h {
                    grads[u + j * h + i] += gh[i] * cache.x[j];
                }
            }
            for i in 0..h {
                grads[c + i] += gh[i];
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let sizes: Vec<usize> = std::iter::once(self.dim).chain(self.hidden).collect();
        write_model(path, ADAPTER_KIND, &sizes, Activation::Tanh, self.seed, serde_json::Value::Null, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = read_model(path, ADAPTER_KIND, |sizes| {
            adapter_param_len(sizes.first().copied().unwrap_or(0), sizes.get(1).copied())
        })?;
        let dim = header.sizes.first().copied().unwrap_or(0);
        Ok(Self {
            dim,
            hidden: header.sizes.get(1).copied(),
            seed: header.seed,
            params,
        })
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub epoch: usize,
    pub hinge: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lhs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rhs: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdapterRun {
    pub adapter: AdapterModel,
    pub initial_hinge: f64,
    pub final_hinge: f64,
    pub log: Vec<AlignmentRecord>,
}

/// Mean hinge `max(0, d(a,p) - d(a,n) + margin)` over the batch and, when
/// `grads` is given, its gradient with respect to the adapter parameters.
fn hinge(
    adapter: &AdapterModel,
    dataset: &EmbeddingDataset,
    batch: &[(usize, usize, usize)],
    margin: f64,
    grads: Option<&mut [f64]>,
) -> Result<f64> {
    let (w, b) = (adapter.w(), adapter.b());
    let mut caches: HashMap<usize, AdapterCache> = HashMap::new();
    for &(a, p, n) in batch {
        for i in [a, p, n] {
            if let std::collections::hash_map::Entry::Vacant(e) = caches.entry(i) {
                e.insert(adapter.forward_cached(&dataset.points()[i].vector, &w, &b)?);
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut gz: HashMap<usize, DVector<f64>> = HashMap::new();
    for &(a, p, n) in batch {
        let (za, zp, zn) = (&caches[&a].z, &caches[&p].z, &caches[&n].z);
        let v = za.dot(zn) - za.dot(zp) + margin;
        if v > 0.0 {
            total += v;
            if grads.is_some() {
                let zero = || DVector::zeros(adapter.dim);
                *gz.entry(a).or_insert_with(zero) += (zn - zp) * scale;
                *gz.entry(p).or_insert_with(zero) -= za * scale;
                *gz.entry(n).or_insert_with(zero) += za * scale;
            }
        }
    }
    if let Some(g) = grads {
        g.iter_mut().for_each(|v| *v = 0.0);
        let mut keys: Vec<usize> = gz.keys().copied().collect();
        keys.sort_unstable();
        for i in keys {
            adapter.backward(&caches[&i], &gz[&i], g);
        }
    }
    Ok(total * scale)
}

fn batch_indices(dataset: &EmbeddingDataset, batch: &TripletBatch) -> Result<Vec<(usize, usize, usize)>> {
    batch
        .triplets
        .iter()
        .map(|t| Ok((dataset.index_of(&t.anchor)?, dataset.index_of(&t.positive)?, dataset.index_of(&t.negative)?)))
        .collect()
}

/// Hinge loss of `batch` under `adapter`.
pub fn batch_hinge(adapter: &AdapterModel, dataset: &EmbeddingDataset, batch: &TripletBatch) -> Result<f64> {
    let idx = batch_indices(dataset, batch)?;
    if idx.is_empty() {
        return Err(Error::EmptyInput);
    }
    hinge(adapter, dataset, &idx, batch.margin, None)
}

pub fn train_adapter(dataset: &EmbeddingDataset, batch: &TripletBatch, config: &AdapterConfig) -> Result<AdapterModel> {
    Ok(train_adapter_with(dataset, batch, config, None, |_| true)?.adapter)
}

/// Full-batch Adam on the triplet hinge from an identity adapter. Returns the
/// lowest-loss parameters seen, so the final hinge never exceeds the initial
/// one. With a directive, every log record also carries its two sides.
/// `on_epoch` returning `false` cancels the run.
pub fn train_adapter_with(
    dataset: &EmbeddingDataset,
    batch: &TripletBatch,
    config: &AdapterConfig,
    directive: Option<&AlignmentDirective>,
    mut on_epoch: impl FnMut(&AlignmentRecord) -> bool,
) -> Result<AdapterRun> {
    let idx = batch_indices(dataset, batch)?;
    if idx.is_empty() {
        return Err(Error::EmptyInput);
    }
    let resolved = directive.map(|d| resolve(d, dataset, config.neighborhood)).transpose()?;
    let mut adapter = AdapterModel::identity(dataset.dimension(), config.hidden, config.seed);
    let mut adam = Adam::new(adapter.params.len(), config.learning_rate);
    let mut grads = vec![0.0; adapter.params.len()];
    let mut log = Vec::with_capacity(config.epochs + 1);

    let mut record = |epoch: usize, loss: f64, adapter: &AdapterModel, log: &mut Vec<AlignmentRecord>| -> Result<bool> {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let sides = match &resolved {
            Some(r) => Some(sides_of(r, dataset, Some(adapter))?),
            None => None,
        };
        let rec = AlignmentRecord {
            epoch,
            hinge: loss,
            lhs: sides.map(|s| s.0),
            rhs: sides.map(|s| s.1),
        };
        log.push(rec);
        Ok(on_epoch(&rec))
    };

    let initial = hinge(&adapter, dataset, &idx, batch.margin, Some(&mut grads))?;
    if !record(0, initial, &adapter, &mut log)? {
        return Err(Error::Cancelled);
    }
    let mut best = (initial, adapter.params.clone());
    for epoch in 1..=config.epochs {
        adam.step(&mut adapter.params, &grads);
        let loss = hinge(&adapter, dataset, &idx, batch.margin, Some(&mut grads))?;
        if !record(epoch, loss, &adapter, &mut log)? {
            return Err(Error::Cancelled);
        }
        if loss < best.0 {
            best = (loss, adapter.params.clone());
        }
    }
    adapter.params = best.1;
    tracing::info!(triplets = idx.len(), initial, best = best.0, "adapter trained");
    Ok(AdapterRun {
        adapter,
        initial_hinge: initial,
        final_hinge: best.0,
        log,
    })
}

// ---------------------------------------------------------------------------
// Verification and use

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

fn mean_distance(vectors: &[Vec<f64>], from: &[usize], to: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &a in from {
        for &b in to {
            sum += cosine_distance(&vectors[a], &vectors[b]);
            n += 1;
        }
    }
    sum / n as f64
}

fn sides_of(resolved: &Resolved, dataset: &EmbeddingDataset, adapter: Option<&AdapterModel>) -> Result<(f64, f64)> {
    // Only the points the directive touches are mapped.
    let mut needed = BTreeSet::new();
    match resolved {
        Resolved::PointSet { point, target, others } => {
            needed.insert(*point);
            needed.extend(target.iter().copied());
            others.iter().for_each(|o| needed.extend(o.iter().copied()));
        }
        Resolved::SetSet {
            source,
            reference,
            neighbors,
            ..
        } => {
            needed.extend(source.iter().chain(reference).copied());
            neighbors.iter().for_each(|n| needed.extend(n.iter().copied()));
        }
    }
    let mut vectors = vec![Vec::new(); dataset.len()];
    for i in needed {
        let v = &dataset.points()[i].vector;
        vectors[i] = match adapter {
            Some(a) => a.apply(v)?,
            None => v.clone(),
        };
    }
    Ok(match resolved {
        Resolved::PointSet { point, target, others } => {
            let lhs = mean_distance(&vectors, &[*point], target);
            let rhs = others
                .iter()
                .map(|o| mean_distance(&vectors, &[*point], o))
                .fold(f64::INFINITY, f64::min);
            (lhs, rhs)
        }
        Resolved::SetSet {
            source,
            reference,
            neighbors,
            direction,
        } => {
            let to_ref = mean_distance(&vectors, source, reference);
            let nbr: Vec<usize> = neighbors.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
            let to_nbr = mean_distance(&vectors, source, &nbr);
            match direction {
                Direction::Closer => (to_ref, to_nbr),
                Direction::Farther => (to_nbr, to_ref),
            }
        }
    })
}

/// The directive's mean-distance inequality `lhs < rhs` on adapted embeddings.
///
/// Point-set: lhs is the mean distance from the point to the target set, rhs
/// the smallest mean distance to a competing set. Set-set: the mean distance
/// between source and reference versus between source and the source's
/// neighborhood (fixed on the unadapted vectors); closer puts the reference on
/// the left, farther on the right. The point itself never counts as a member.
pub fn verify_alignment(
    directive: &AlignmentDirective,
    dataset: &EmbeddingDataset,
    adapter: Option<&AdapterModel>,
    neighborhood_size: usize,
) -> Result<Verification> {
    let resolved = resolve(directive, dataset, neighborhood_size)?;
    let (lhs, rhs) = sides_of(&resolved, dataset, adapter)?;
    Ok(Verification {
        lhs,
        rhs,
        satisfied: lhs < rhs,
    })
}

/// A new dataset version with every vector mapped through `adapter`.
pub fn apply_adapter(dataset: &EmbeddingDataset, adapter: &AdapterModel) -> Result<EmbeddingDataset> {
    if dataset.dimension() != adapter.dim {
        return Err(Error::DimensionMismatch {
            expected: adapter.dim,
            found: dataset.dimension(),
            context: "adapter vs dataset".into(),
        });
    }
    let vectors = dataset
        .points()
        .iter()
        .map(|p| adapter.apply(&p.vector))
        .collect::<Result<Vec<_>>>()?;
    dataset.with_vectors(vectors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub distance: f64,
}

/// Candidates ordered by adapted cosine distance to the adapted query, ties by id.
pub fn rerank(query_id: &str, candidates: &[String], dataset: &EmbeddingDataset, adapter: Option<&AdapterModel>) -> Result<Vec<Ranked>> {
    let map = |v: &[f64]| -> Result<Vec<f64>> {
        match adapter {
            Some(a) => a.apply(v),
            None => Ok(v.to_vec()),
        }
    };
    let q = map(&dataset.point(query_id)?.vector)?;
    let mut out = candidates
        .iter()
        .map(|id| {
            Ok(Ranked {
                id: id.clone(),
                distance: cosine_distance(&q, &map(&dataset.point(id)?.vector)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(&b.id)));
    Ok(out)
}

/// `normalize(sum_i w_i v_i)` over concept text embeddings.
pub fn weighted_embedding(dataset: &EmbeddingDataset, concepts: &[String], weights: &[f64]) -> Result<Vec<f64>> {
    if concepts.len() != weights.len() || concepts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} concepts but {} weights",
            concepts.len(),
            weights.len()
        )));
    }
    if let Some(index) = weights.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFiniteWeight { index });
    }
    let mut sum = vec![0.0; dataset.dimension()];
    for (c, &w) in concepts.iter().zip(weights) {
        for (s, v) in sum.iter_mut().zip(dataset.concept_vector(c)?) {
            *s += w * v;
        }
    }
    let norm = dot(&sum, &sum).sqrt();
    if norm <= 1e-12 {
        return Err(Error::ZeroResultant);
    }
    Ok(sum.into_iter().map(|v| v / norm).collect())
}

/// The concept whose text embedding is closest to `v` (ties by name).
pub fn nearest_concept(dataset: &EmbeddingDataset, v: &[f64]) -> Option<String> {
    dataset
        .concepts()
        .iter()
        .filter_map(|c| dataset.concept_vector(&c.name).ok().map(|cv| (cosine_distance(v, cv), &c.name)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, n)| n.clone())
}

/// Zero-shot assignment: every image's set id becomes its nearest concept.
pub fn assign_nearest_concept(dataset: &EmbeddingDataset) -> EmbeddingDataset {
    let assign = dataset
        .points()
        .iter()
        .filter(|p| p.modality == Modality::Image)
        .filter_map(|p| nearest_concept(dataset, &p.vector).map(|c| (p.id.clone(), c)))
        .collect();
    dataset.with_set_ids(&assign)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ConceptEntry, EmbeddingPoint};
    use crate::synth::{self, planted_ids};

    fn two_sets() -> EmbeddingDataset {
        let mut pts = vec![EmbeddingPoint::new("p", Modality::Image, vec![1.0, 1.0, 0.0, 0.2])];
        for i in 0..3 {
            let j = i as f64 * 0.1;
            pts.push(EmbeddingPoint::new(format!("a{i}"), Modality::Image, vec![1.0, 0.0, j, 0.0]).with_set("A"));
            pts.push(EmbeddingPoint::new(format!("b{i}"), Modality::Image, vec![0.0, 1.0, j, 0.0]).with_set("B"));
        }
        EmbeddingDataset::new(4, pts, vec![]).unwrap()
    }

    #[test]
    fn point_set_triplets() {
        let ds = two_sets();
        let cfg = AdapterConfig {
            max_triplets: 9,
            ..Default::default()
        };
        let batch = build_triplets(&AlignmentDirective::point_set("p", "A"), &ds, &cfg).unwrap();
        assert_eq!(batch.triplets.len(), 9);
        assert!(batch.triplets.iter().all(|t| t.anchor == "p" && t.positive.starts_with('a') && t.negative.starts_with('b')));
        let cfg4 = AdapterConfig {
            max_triplets: 4,
            seed: 5,
            ..Default::default()
        };
        let d = AlignmentDirective::point_set("p", "A");
        assert_eq!(build_triplets(&d, &ds, &cfg4).unwrap(), build_triplets(&d, &ds, &cfg4).unwrap());
        assert_eq!(build_triplets(&d, &ds, &cfg4).unwrap().triplets.len(), 4);
    }

    #[test]
    fn set_set_farther_swaps_roles() {
        let ds = two_sets();
        let d = AlignmentDirective::set_set("A", "B", Direction::Farther);
        let batch = build_triplets(&d, &ds, &AdapterConfig::default()).unwrap();
        assert!(!batch.triplets.is_empty());
        for t in &batch.triplets {
            assert!(t.anchor.starts_with('a'));
            assert!(!t.positive.starts_with('b'), "{t:?}");
            assert!(t.negative.starts_with('b'));
        }
        let closer = build_triplets(&AlignmentDirective::set_set("A", "B", Direction::Closer), &ds, &AdapterConfig::default()).unwrap();
        assert!(closer.triplets.iter().all(|t| t.positive.starts_with('b')));
    }

    #[test]
    fn directive_errors() {
        let ds = two_sets();
        let cfg = AdapterConfig::default();
        let same = AlignmentDirective::set_set("A", "A", Direction::Closer);
        assert_eq!(build_triplets(&same, &ds, &cfg).unwrap_err().kind(), "DegenerateDirective");
        let missing = AlignmentDirective::point_set("p", "Z");
        assert_eq!(build_triplets(&missing, &ds, &cfg).unwrap_err().kind(), "UnknownSet");
        let unknown = AlignmentDirective::point_set("zz", "A");
        assert_eq!(build_triplets(&unknown, &ds, &cfg).unwrap_err().kind(), "UnknownId");
    }

    #[test]
    fn directive_json_shape() {
        let d: AlignmentDirective = serde_json::from_str(
            r#"{"type":"SetSet","sourceSetId":"q","referenceSetId":"e","direction":"Farther","originView":"ConceptAxis"}"#,
        )
        .unwrap();
        assert_eq!(d.origin_view, OriginView::ConceptAxis);
        assert!(matches!(d.kind, DirectiveKind::SetSet { direction: Direction::Farther, .. }));
        let p = AlignmentDirective::point_set("x", "A");
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["type"], "PointSet");
        assert_eq!(v["pointId"], "x");
        assert_eq!(serde_json::from_value::<AlignmentDirective>(v).unwrap(), p);
    }

    #[test]
    fn identity_adapter_is_a_no_op() {
        let ds = two_sets();
        for hidden in [None, Some(5)] {
            let a = AdapterModel::identity(4, hidden, 3);
            let out = apply_adapter(&ds, &a).unwrap();
            for (p, q) in ds.points().iter().zip(out.points()) {
                assert_eq!(p.id, q.id);
                assert!(p.vector.iter().zip(&q.vector).all(|(x, y)| (x - y).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn rotation_adapter_is_an_isometry() {
        let ds = two_sets();
        let mut a = AdapterModel::identity(4, None, 0);
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        // Rotate in the (0, 2) plane; W is column-major.
        a.params[0] = c;
        a.params[2] = s;
        a.params[2 * 4] = -s;
        a.params[2 * 4 + 2] = c;
        let out = apply_adapter(&ds, &a).unwrap();
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                let before = cosine_distance(&ds.points()[i].vector, &ds.points()[j].vector);
                let after = cosine_distance(&out.points()[i].vector, &out.points()[j].vector);
                assert!((before - after).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let ds = two_sets();
        let batch = build_triplets(&AlignmentDirective::point_set("p", "A"), &ds, &AdapterConfig::default()).unwrap();
        let idx = batch_indices(&ds, &batch).unwrap();
        let mut a = AdapterModel::identity(4, Some(3), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        a.params.iter_mut().for_each(|p| *p += rng.random_range(-0.2..0.2));
        let mut g = vec![0.0; a.params.len()];
        hinge(&a, &ds, &idx, 0.5, Some(&mut g)).unwrap();
        for k in 0..a.params.len() {
            let mut up = a.clone();
            up.params[k] += 1e-6;
            let mut down = a.clone();
            down.params[k] -= 1e-6;
            let fd = (hinge(&up, &ds, &idx, 0.5, None).unwrap() - hinge(&down, &ds, &idx, 0.5, None).unwrap()) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-5 * fd.abs().max(1.0), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn satisfied_batch_keeps_identity() {
        let ds = two_sets();
        let batch = TripletBatch {
            triplets: vec![Triplet {
                anchor: "a0".into(),
                positive: "a1".into(),
                negative: "b0".into(),
            }],
            margin: 0.2,
        };
        let run = train_adapter_with(&ds, &batch, &AdapterConfig::default(), None, |_| true).unwrap();
        assert_eq!(run.initial_hinge, 0.0);
        let id = AdapterModel::identity(4, None, 0);
        assert!(run.adapter.params.iter().zip(&id.params).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn violated_triplet_improves() {
        let pts = vec![
            EmbeddingPoint::new("x", Modality::Image, vec![1.0, 0.0, 0.0]),
            EmbeddingPoint::new("near", Modality::Image, vec![0.9, 0.3, 0.0]),
            EmbeddingPoint::new("far", Modality::Image, vec![0.2, 0.0, 1.0]),
        ];
        let ds = EmbeddingDataset::new(3, pts, vec![]).unwrap();
        let batch = TripletBatch {
            triplets: vec![Triplet {
                anchor: "x".into(),
                positive: "far".into(),
                negative: "near".into(),
            }],
            margin: 0.2,
        };
        let run = train_adapter_with(&ds, &batch, &AdapterConfig::default(), None, |_| true).unwrap();
        assert!(run.final_hinge < run.initial_hinge);
        assert!(run.log.iter().all(|r| r.hinge >= run.final_hinge));
        let mut n = 0;
        let cancelled = train_adapter_with(&ds, &batch, &AdapterConfig::default(), None, |_| {
            n += 1;
            n < 3
        });
        assert_eq!(cancelled.unwrap_err().kind(), "Cancelled");
    }

    #[test]
    fn planted_point_flips() {
        let ds = synth::planted(0);
        let d = AlignmentDirective::point_set(planted_ids::POINT, planted_ids::CORRECT);
        let cfg = AdapterConfig::default();
        let before = verify_alignment(&d, &ds, None, cfg.neighborhood).unwrap();
        assert!(!before.satisfied);
        let batch = build_triplets(&d, &ds, &cfg).unwrap();
        let run = train_adapter_with(&ds, &batch, &cfg, Some(&d), |_| true).unwrap();
        let after = verify_alignment(&d, &ds, Some(&run.adapter), cfg.neighborhood).unwrap();
        assert!(after.satisfied, "{after:?}");
        let last = run.log.last().unwrap();
        assert!(last.lhs.is_some() && last.rhs.is_some());
    }

    #[test]
    fn verify_identity_matches_direct_means() {
        let ds = two_sets();
        let v = verify_alignment(&AlignmentDirective::point_set("p", "A"), &ds, None, 8).unwrap();
        let pv = &ds.point("p").unwrap().vector;
        let mean = |s: &str| {
            let m = ds.set_members(s);
            m.iter().map(|&i| cosine_distance(pv, &ds.points()[i].vector)).sum::<f64>() / m.len() as f64
        };
        assert!((v.lhs - mean("A")).abs() < 1e-12);
        assert!((v.rhs - mean("B")).abs() < 1e-12);
    }

    #[test]
    fn rerank_identity_matches_knn() {
        let ds = two_sets();
        let cands: Vec<String> = ["b2", "a0", "a2", "b0"].iter().map(|s| s.to_string()).collect();
        let ranked = rerank("p", &cands, &ds, None).unwrap();
        let knn = crate::dataset::knn_query(&ds, "p", 6, None).unwrap();
        let expect: Vec<&str> = knn.iter().map(|n| n.id).filter(|id| cands.iter().any(|c| c == id)).collect();
        assert_eq!(ranked.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), expect);
        assert_eq!(rerank("p", &["nope".to_string()], &ds, None).unwrap_err().kind(), "UnknownId");
    }

    fn concept_ds() -> EmbeddingDataset {
        let pts = vec![
            EmbeddingPoint::new("t1", Modality::Text, vec![1.0, 0.0, 0.0]),
            EmbeddingPoint::new("t2", Modality::Text, vec![0.0, 1.0, 0.0]),
            EmbeddingPoint::new("t3", Modality::Text, vec![1.0, 0.0, 0.0]),
        ];
        let c = |n: &str, t: &str| ConceptEntry {
            name: n.into(),
            text_point_id: t.into(),
        };
        EmbeddingDataset::new(3, pts, vec![c("x", "t1"), c("y", "t2"), c("x2", "t3")]).unwrap()
    }

    #[test]
    fn weighted_embeddings() {
        let ds = concept_ds();
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(weighted_embedding(&ds, &s(&["x", "y"]), &[1.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(weighted_embedding(&ds, &s(&["x", "x2"]), &[0.5, 0.5]).unwrap(), vec![1.0, 0.0, 0.0]);
        let diag = weighted_embedding(&ds, &s(&["x", "y"]), &[1.0, 1.0]).unwrap();
        assert!((dot(&diag, &[1.0, 0.0, 0.0]) - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(weighted_embedding(&ds, &s(&["x", "x2"]), &[1.0, -1.0]).unwrap_err().kind(), "ZeroResultant");
        assert!(weighted_embedding(&ds, &s(&["x"]), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adapter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = AdapterModel::identity(4, Some(2), 9);
        a.params[3] = 0.25;
        let path = dir.path().join("adapter.json");
        a.save(&path).unwrap();
        let b = AdapterModel::load(&path).unwrap();
        assert_eq!(b.dim, 4);
        assert_eq!(b.hidden, Some(2));
        assert!(a.params.iter().zip(&b.params).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}
