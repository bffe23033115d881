//! Cosine distances and the block-normalized merged distance matrix
//! `M = [[II, IT], [TI, TT]]` that fuses both modalities.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::dataset::{EmbeddingDataset, Modality};
use crate::error::{Error, Result};
use crate::layout::{euclid, ProjectionLayout};

/// Below this a block mean is treated as degenerate and the block is left as is.
pub const DEGENERATE_MEAN: f64 = 1e-9;

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// `1 - <u, v>` for unit vectors; in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    (1.0 - dot(u, v)).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockMeans {
    pub ii: f64,
    pub tt: f64,
    pub it: f64,
}

#[derive(Debug, Clone)]
pub struct MergedDistanceMatrix {
    pub n_image: usize,
    pub n_text: usize,
    /// `n_image x n_image`, normalized.
    pub ii: DMatrix<f64>,
    /// `n_text x n_text`, normalized.
    pub tt: DMatrix<f64>,
    /// `n_image x n_text`, normalized. `TI` is its transpose.
    pub it: DMatrix<f64>,
    /// Pre-normalization divisors (1 where the degenerate rule fired).
    pub means: BlockMeans,
    /// Point ids in row order: all images, then all texts, each in dataset order.
    pub order: Vec<String>,
    /// Dataset index of every row.
    pub source_index: Vec<usize>,
}

impl MergedDistanceMatrix {
    pub fn len(&self) -> usize {
        self.n_image + self.n_text
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modality(&self, row: usize) -> Modality {
        if row < self.n_image {
            Modality::Image
        } else {
            Modality::Text
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        (0..self.len()).map(|r| self.modality(r)).collect()
    }

    /// Entry `M[a, b]` in merged row order.
    pub fn get(&self, a: usize, b: usize) -> f64 {
        let ni = self.n_image;
        match (a < ni, b < ni) {
            (true, true) => self.ii[(a, b)],
            (false, false) => self.tt[(a - ni, b - ni)],
            (true, false) => self.it[(a, b - ni)],
            (false, true) => self.it[(b, a - ni)],
        }
    }

    pub fn ti(&self) -> DMatrix<f64> {
        self.it.transpose()
    }

    /// The dense `N x N` block matrix.
    pub fn full(&self) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |a, b| self.get(a, b))
    }
}

/// Mean used to normalize a block. Square intra-modal blocks exclude their
/// structurally-zero diagonal; the rectangular cross block uses every entry.
fn block_mean(block: &DMatrix<f64>, square: bool) -> f64 {
    if square {
        let n = block.nrows();
        if n < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    sum += block[(a, b)];
                }
            }
        }
        sum / (n * (n - 1)) as f64
    } else if block.is_empty() {
        0.0
    } else {
        block.sum() / block.len() as f64
    }
}

fn normalize_block(block: &mut DMatrix<f64>, square: bool) -> f64 {
    let mean = block_mean(block, square);
    if mean < DEGENERATE_MEAN {
        1.0
    } else {
        *block /= mean;
        mean
    }
}

/// Cosine distance between every pair of vectors, as a symmetric matrix.
pub fn pairwise_cosine(vectors: &[&[f64]]) -> DMatrix<f64> {
    let n = vectors.len();
    let mut m = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a + 1..n {
            let d = cosine_distance(vectors[a], vectors[b]);
            m[(a, b)] = d;
            m[(b, a)] = d;
        }
    }
    m
}

pub fn build_merged_matrix(dataset: &EmbeddingDataset) -> Result<MergedDistanceMatrix> {
    let images = dataset.indices_of(Modality::Image);
    let texts = dataset.indices_of(Modality::Text);
    for (m, idx) in [(Modality::Image, &images), (Modality::Text, &texts)] {
        if idx.len() < 2 {
            return Err(Error::TooFewPoints {
                required: 2,
                found: idx.len(),
                modality: m.to_string(),
            });
        }
    }
    let pts = dataset.points();
    let img_vecs: Vec<&[f64]> = images.iter().map(|&i| pts[i].vector.as_slice()).collect();
    let txt_vecs: Vec<&[f64]> = texts.iter().map(|&i| pts[i].vector.as_slice()).collect();

    let mut ii = pairwise_cosine(&img_vecs);
    let mut tt = pairwise_cosine(&txt_vecs);
    let mut it = DMatrix::from_fn(images.len(), texts.len(), |a, b| {
        cosine_distance(img_vecs[a], txt_vecs[b])
    });
    let means = BlockMeans {
        ii: normalize_block(&mut ii, true),
        tt: normalize_block(&mut tt, true),
        it: normalize_block(&mut it, false),
    };

    let source_index: Vec<usize> = images.iter().chain(&texts).copied().collect();
    Ok(MergedDistanceMatrix {
        n_image: images.len(),
        n_text: texts.len(),
        ii,
        tt,
        it,
        means,
        order: source_index.iter().map(|&i| pts[i].id.clone()).collect(),
        source_index,
    })
}

/// Euclidean distances between layout coordinates, rows following `order`.
pub fn pairwise_projected_distances(
    layout: &ProjectionLayout,
    order: &[String],
) -> Result<DMatrix<f64>> {
    let coords = layout.coords_in(order)?;
    Ok(euclidean_matrix(&coords))
}

pub fn euclidean_matrix(coords: &[[f64; 2]]) -> DMatrix<f64> {
    let n = coords.len();
    let mut m = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a + 1..n {
            let d = euclid(coords[a], coords[b]);
            m[(a, b)] = d;
            m[(b, a)] = d;
        }
    }
    m
}
