//! Multi-modal embedding datasets: manifest ingestion, persistence and queries.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binfmt::F32Matrix;
use crate::error::{Error, Result};
use crate::fusion::cosine_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(alias = "text", alias = "TEXT")]
    Text,
    #[serde(alias = "image", alias = "IMAGE")]
    Image,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Text => Modality::Image,
            Modality::Image => Modality::Text,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Text => f.write_str("Text"),
            Modality::Image => f.write_str("Image"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPoint {
    pub id: String,
    pub modality: Modality,
    /// Unit L2 norm after ingestion.
    pub vector: Vec<f64>,
    pub label: Option<String>,
    pub set_id: Option<String>,
    pub asset_uri: Option<String>,
}

impl EmbeddingPoint {
    pub fn new(id: impl Into<String>, modality: Modality, vector: Vec<f64>) -> Self {
        EmbeddingPoint {
            id: id.into(),
            modality,
            vector,
            label: None,
            set_id: None,
            asset_uri: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn with_set(mut self, set_id: impl Into<String>) -> Self {
        self.set_id = Some(set_id.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub name: String,
    #[serde(rename = "textPointId")]
    pub text_point_id: String,
}

/// An immutable, validated dataset. Mutating operations return a new dataset.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    dimension: usize,
    points: Vec<EmbeddingPoint>,
    concepts: Vec<ConceptEntry>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Neighbor<'a> {
    pub id: &'a str,
    pub distance: f64,
}

impl EmbeddingDataset {
    /// Validates the points, L2-normalizes every vector and indexes ids.
    pub fn new(
        dimension: usize,
        mut points: Vec<EmbeddingPoint>,
        concepts: Vec<ConceptEntry>,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::MalformedManifest("dimension must be positive".into()));
        }
        let mut index = HashMap::with_capacity(points.len());
        for (i, p) in points.iter_mut().enumerate() {
            if p.vector.len() != dimension {
                return Err(Error::DimensionMismatch {
                    expected: dimension,
                    found: p.vector.len(),
                    context: format!("point `{}`", p.id),
                });
            }
            if p.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::MalformedManifest(format!(
                    "point `{}` has a non-finite component",
                    p.id
                )));
            }
            let norm = p.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroVector(p.id.clone()));
            }
            p.vector.iter_mut().for_each(|v| *v /= norm);
            if index.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        let mut names = HashSet::new();
        for c in &concepts {
            if !names.insert(c.name.as_str()) {
                return Err(Error::MalformedManifest(format!(
                    "concept `{}` declared twice",
                    c.name
                )));
            }
            match index.get(&c.text_point_id) {
                Some(&i) if points[i].modality == Modality::Text => {}
                Some(_) => {
                    return Err(Error::MalformedManifest(format!(
                        "concept `{}` points at non-text point `{}`",
                        c.name, c.text_point_id
                    )))
                }
                None => {
                    return Err(Error::MalformedManifest(format!(
                        "concept `{}` points at unknown id `{}`",
                        c.name, c.text_point_id
                    )))
                }
            }
        }
        Ok(EmbeddingDataset {
            dimension,
            points,
            concepts,
            index,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn points(&self) -> &[EmbeddingPoint] {
        &self.points
    }

    pub fn concepts(&self) -> &[ConceptEntry] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn point(&self, id: &str) -> Result<&EmbeddingPoint> {
        Ok(&self.points[self.index_of(id)?])
    }

    pub fn concept(&self, name: &str) -> Result<&ConceptEntry> {
        self.concepts
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    /// The text embedding backing a concept.
    pub fn concept_vector(&self, name: &str) -> Result<&[f64]> {
        let c = self.concept(name)?;
        Ok(&self.point(&c.text_point_id)?.vector)
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.points.iter().filter(|p| p.modality == modality).count()
    }

    pub fn indices_of(&self, modality: Modality) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&i| self.points[i].modality == modality)
            .collect()
    }

    /// Indices of points whose `set_id` equals `set_id`, in dataset order.
    pub fn set_members(&self, set_id: &str) -> Vec<usize> {
        (0..self.points.len())
            .filter(|&i| self.points[i].set_id.as_deref() == Some(set_id))
            .collect()
    }

    /// Distinct set ids in sorted order.
    pub fn set_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .points
            .iter()
            .filter_map(|p| p.set_id.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        ids.sort();
        ids
    }

    /// A new dataset keeping only the given indices (in the given order) and the
    /// concepts whose text points survive.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let points: Vec<EmbeddingPoint> = indices.iter().map(|&i| self.points[i].clone()).collect();
        let kept: HashSet<&str> = points.iter().map(|p| p.id.as_str()).collect();
        let concepts = self
            .concepts
            .iter()
            .filter(|c| kept.contains(c.text_point_id.as_str()))
            .cloned()
            .collect();
        EmbeddingDataset::new(self.dimension, points, concepts)
    }

    /// Same ids and metadata, new vectors (re-normalized).
    pub fn with_vectors(&self, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.len() != self.points.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} vectors, got {}",
                self.points.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map_or(self.dimension, Vec::len);
        let points = self
            .points
            .iter()
            .zip(vectors)
            .map(|(p, v)| EmbeddingPoint {
                vector: v,
                ..p.clone()
            })
            .collect();
        EmbeddingDataset::new(dim, points, self.concepts.clone())
    }

    /// Same vectors, points with set ids replaced according to `assign`.
    pub fn with_set_ids(&self, assign: &HashMap<String, String>) -> Self {
        let mut out = self.clone();
        for p in &mut out.points {
            if let Some(s) = assign.get(&p.id) {
                p.set_id = Some(s.clone());
            }
        }
        out
    }

    /// Appends points (validated against this dataset's dimension and ids).
    pub fn extend(&self, extra: Vec<EmbeddingPoint>) -> Result<Self> {
        let mut points = self.points.clone();
        points.extend(extra);
        EmbeddingDataset::new(self.dimension, points, self.concepts.clone())
    }
}

// ---------------------------------------------------------------------------
// Manifest format

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dimension: usize,
    pub points: Vec<ManifestPoint>,
    #[serde(default)]
    pub concepts: Vec<ConceptEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPoint {
    pub id: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_ref: Option<VectorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(rename = "setId", default, skip_serializing_if = "Option::is_none")]
    pub set_id: Option<String>,
    #[serde(rename = "assetUri", default, skip_serializing_if = "Option::is_none")]
    pub asset_uri: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorRef {
    pub file: String,
    pub row: usize,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::MalformedManifest(e.to_string()))
    }

    /// Resolves inline vectors and `vector_ref`s (relative to `base_dir`) into points.
    pub fn resolve_points(&self, base_dir: &Path) -> Result<Vec<EmbeddingPoint>> {
        let mut files: HashMap<&str, F32Matrix> = HashMap::new();
        let mut points = Vec::with_capacity(self.points.len());
        for mp in &self.points {
            let vector = match (&mp.vector, &mp.vector_ref) {
                (Some(v), None) => v.clone(),
                (None, Some(r)) => {
                    if !files.contains_key(r.file.as_str()) {
                        let m = F32Matrix::read(&base_dir.join(&r.file))?;
                        files.insert(r.file.as_str(), m);
                    }
                    let m = &files[r.file.as_str()];
                    if r.row >= m.rows {
                        return Err(Error::MalformedManifest(format!(
                            "point `{}` references row {} of `{}` which has {} rows",
                            mp.id, r.row, r.file, m.rows
                        )));
                    }
                    m.row_f64(r.row)
                }
                _ => {
                    return Err(Error::MalformedManifest(format!(
                        "point `{}` needs exactly one of `vector` or `vector_ref`",
                        mp.id
                    )))
                }
            };
            points.push(EmbeddingPoint {
                id: mp.id.clone(),
                modality: mp.modality,
                vector,
                label: mp.label.clone(),
                set_id: mp.set_id.clone(),
                asset_uri: mp.asset_uri.clone(),
            });
        }
        Ok(points)
    }

    pub fn into_dataset(self, base_dir: &Path) -> Result<EmbeddingDataset> {
        let points = self.resolve_points(base_dir)?;
        EmbeddingDataset::new(self.dimension, points, self.concepts)
    }
}

/// Loads a manifest file; `vector_ref` files resolve relative to the manifest's directory.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Manifest::parse(&text)?.into_dataset(base)
}

/// Binary vector file written next to a persisted manifest.
pub fn vectors_path_for(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `manifest_path` plus a sibling `.bin` vector file referenced by `vector_ref`.
pub fn save_dataset(dataset: &EmbeddingDataset, manifest_path: impl AsRef<Path>) -> Result<()> {
    let path = manifest_path.as_ref();
    let bin_path = vectors_path_for(path);
    let file_name = bin_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad output path {}", path.display())))?
        .to_string();
    let matrix = F32Matrix::from_rows(
        dataset.points.iter().map(|p| p.vector.as_slice()),
        dataset.dimension,
    );
    matrix.write(&bin_path)?;
    let manifest = Manifest {
        dimension: dataset.dimension,
        points: dataset
            .points
            .iter()
            .enumerate()
            .map(|(row, p)| ManifestPoint {
                id: p.id.clone(),
                modality: p.modality,
                vector: None,
                vector_ref: Some(VectorRef {
                    file: file_name.clone(),
                    row,
                }),
                label: p.label.clone(),
                set_id: p.set_id.clone(),
                asset_uri: p.asset_uri.clone(),
            })
            .collect(),
        concepts: dataset.concepts.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Queries

/// Ascending cosine distance, ties by id; the query itself is excluded.
pub fn knn_query<'a>(
    dataset: &'a EmbeddingDataset,
    query_id: &str,
    k: usize,
    modality_filter: Option<Modality>,
) -> Result<Vec<Neighbor<'a>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let q = dataset.index_of(query_id)?;
    let query = &dataset.points[q].vector;
    let mut hits: Vec<Neighbor<'a>> = dataset
        .points
        .iter()
        .enumerate()
        .filter(|&(i, p)| i != q && modality_filter.is_none_or(|m| p.modality == m))
        .map(|(_, p)| Neighbor {
            id: p.id.as_str(),
            distance: cosine_distance(query, &p.vector),
        })
        .collect();
    if k > hits.len() {
        return Err(Error::KTooLarge {
            k,
            available: hits.len(),
        });
    }
    hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.id.cmp(b.id)));
    hits.truncate(k);
    Ok(hits)
}

/// Probe sampling: the `n` images nearest each concept, each assigned to its
/// nearest selected concept (zero-shot). The selected concepts' text points are
/// kept so the subset remains self-describing.
pub fn sample_per_concept(
    dataset: &EmbeddingDataset,
    concepts: &[String],
    n: usize,
) -> Result<EmbeddingDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let concept_vecs: Vec<(&str, &[f64])> = concepts
        .iter()
        .map(|c| Ok((c.as_str(), dataset.concept_vector(c)?)))
        .collect::<Result<_>>()?;
    let images = dataset.indices_of(Modality::Image);
    let mut chosen: Vec<usize> = Vec::new();
    let mut seen = HashSet::new();
    for &(name, cv) in &concept_vecs {
        if n > images.len() {
            return Err(Error::InsufficientImages {
                concept: name.to_string(),
                requested: n,
                available: images.len(),
            });
        }
        let mut ranked: Vec<(f64, usize)> = images
            .iter()
            .map(|&i| (cosine_distance(cv, &dataset.points[i].vector), i))
            .collect();
        ranked.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| dataset.points[a.1].id.cmp(&dataset.points[b.1].id))
        });
        for &(_, i) in ranked.iter().take(n) {
            if seen.insert(i) {
                chosen.push(i);
            }
        }
    }
    chosen.sort_unstable();

    let mut assign = HashMap::new();
    for &i in &chosen {
        let v = &dataset.points[i].vector;
        let best = concept_vecs
            .iter()
            .map(|&(name, cv)| (cosine_distance(v, cv), name))
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
            .map(|(_, name)| name.to_string())
            .expect("at least one concept");
        assign.insert(dataset.points[i].id.clone(), best);
    }

    let mut keep = chosen;
    let text_ids: BTreeMap<usize, &str> = concepts
        .iter()
        .map(|c| {
            let tid = &dataset.concept(c).unwrap().text_point_id;
            (dataset.index_of(tid).unwrap(), c.as_str())
        })
        .collect();
    for (&ti, &name) in &text_ids {
        assign.entry(dataset.points[ti].id.clone()).or_insert_with(|| name.to_string());
        keep.push(ti);
    }
    keep.sort_unstable();
    keep.dedup();
    Ok(dataset.subset(&keep)?.with_set_ids(&assign))
}
