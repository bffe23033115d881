//! Reference projectors: PCA, metric MDS (SMACOF), Data Context Map (metric MDS
//! on the merged matrix) and its non-metric variant.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::fusion::{build_merged_matrix, euclidean_matrix, pairwise_cosine};
use crate::layout::ProjectionLayout;

pub const SMACOF_MAX_ITER: usize = 512;
pub const SMACOF_REL_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct PcaOutcome {
    pub layout: ProjectionLayout,
    /// Fewer than two non-zero singular values; missing coordinates are zero.
    pub rank_deficient: bool,
}

/// Projection onto the top two principal components of the centered vectors.
/// Each component's sign makes its largest-magnitude loading positive.
pub fn pca_project(dataset: &EmbeddingDataset) -> Result<PcaOutcome> {
    let n = dataset.len();
    if n < 3 {
        return Err(Error::TooFewPoints {
            required: 3,
            found: n,
            modality: "any".into(),
        });
    }
    let d = dataset.dimension();
    let pts = dataset.points();
    let mut x = DMatrix::from_fn(n, d, |i, j| pts[i].vector[j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    // Eigen-decomposition of the d x d scatter matrix; d is at most a few thousand.
    let scatter = x.transpose() * &x;
    let eig = nalgebra::SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = 1e-12 * top.max(1.0);
    let mut rank_deficient = false;
    let mut coords = vec![[0.0f64; 2]; n];
    for (c, &e) in order.iter().take(2).enumerate() {
        if eig.eigenvalues[e] <= tol {
            rank_deficient = true;
            continue;
        }
        let mut axis = eig.eigenvectors.column(e).into_owned();
        let (imax, _) = axis
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |best, (i, v)| if v.abs() > best.1 { (i, v.abs()) } else { best });
        if axis[imax] < 0.0 {
            axis = -axis;
        }
        let proj = &x * axis;
        for (i, v) in proj.iter().enumerate() {
            coords[i][c] = *v;
        }
    }
    if d < 2 {
        rank_deficient = true;
    }
    Ok(PcaOutcome {
        layout: ProjectionLayout::new(pts.iter().map(|p| p.id.clone()).collect(), coords)?,
        rank_deficient,
    })
}

#[derive(Debug, Clone)]
pub struct MdsOutcome {
    /// Coordinates in the distance matrix's row order.
    pub coords: Vec<[f64; 2]>,
    /// Raw stress of the final configuration.
    pub stress: f64,
    pub iterations: usize,
    /// Stress of the starting configuration followed by every iteration.
    pub stress_trace: Vec<f64>,
}

pub fn validate_distance_matrix(d: &DMatrix<f64>) -> Result<()> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(Error::InvalidDistanceMatrix(format!("not square: {:?}", d.shape())));
    }
    for a in 0..n {
        if d[(a, a)] != 0.0 {
            return Err(Error::InvalidDistanceMatrix(format!("non-zero diagonal at {a}")));
        }
        for b in 0..n {
            let v = d[(a, b)];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidDistanceMatrix(format!("entry ({a},{b}) = {v}")));
            }
            if (v - d[(b, a)]).abs() > 1e-9 {
                return Err(Error::InvalidDistanceMatrix(format!("asymmetric at ({a},{b})")));
            }
        }
    }
    Ok(())
}

/// Raw stress `sum_{i<j} (target_ij - dist_ij)^2` over the upper triangle.
pub fn raw_stress(targets: &[f64], coords: &[[f64; 2]]) -> f64 {
    let p = euclidean_matrix(coords);
    upper(&p)
        .iter()
        .zip(targets)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

fn upper(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for b in 1..n {
        for a in 0..b {
            out.push(m[(a, b)]);
        }
    }
    out
}

fn random_start(n: usize, scale: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.random_range(-scale..scale), rng.random_range(-scale..scale)])
        .collect()
}

/// One Guttman transform `X <- B(X) X / n` for unit weights.
fn guttman(targets: &[f64], coords: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = coords.len();
    let mut out = vec![[0.0; 2]; n];
    let mut e = 0;
    for b in 1..n {
        for a in 0..b {
            let t = targets[e];
            e += 1;
            let dx = coords[a][0] - coords[b][0];
            let dy = coords[a][1] - coords[b][1];
            let dist = dx.hypot(dy);
            if dist <= 0.0 || t == 0.0 {
                continue;
            }
            let ratio = t / dist;
            // B_ab = -t/dist off the diagonal and B_aa = sum of the ratios, so
            // (B X)_a = sum_b ratio_ab (x_a - x_b).
            out[a][0] += ratio * dx;
            out[a][1] += ratio * dy;
            out[b][0] -= ratio * dx;
            out[b][1] -= ratio * dy;
        }
    }
    let inv = 1.0 / n as f64;
    out.iter_mut().for_each(|c| {
        c[0] *= inv;
        c[1] *= inv;
    });
    out
}

/// SMACOF driver. `fit` maps the current configuration's upper-triangle
/// distances to the targets used for that iteration (identity on the input
/// dissimilarities for metric MDS, a monotone regression for non-metric MDS).
fn smacof_with(mut coords: Vec<[f64; 2]>, mut fit: impl FnMut(&[f64]) -> Vec<f64>) -> MdsOutcome {
    let mut targets = fit(&upper(&euclidean_matrix(&coords)));
    let mut stress = raw_stress(&targets, &coords);
    let mut trace = vec![stress];
    let mut iterations = 0;
    while iterations < SMACOF_MAX_ITER {
        coords = guttman(&targets, &coords);
        iterations += 1;
        let new_stress = raw_stress(&targets, &coords);
        targets = fit(&upper(&euclidean_matrix(&coords)));
        let refit = raw_stress(&targets, &coords);
        trace.push(new_stress);
        let converged = stress <= 0.0 || (stress - new_stress) / stress < SMACOF_REL_TOL;
        stress = refit;
        if converged {
            break;
        }
    }
    MdsOutcome {
        coords,
        stress,
        iterations,
        stress_trace: trace,
    }
}

/// Metric MDS minimizing raw stress by iterative majorization from a seeded
/// random start; stops at relative stress change `< 1e-7` or 512 iterations.
pub fn mds_project(distances: &DMatrix<f64>, seed: u64) -> Result<MdsOutcome> {
    validate_distance_matrix(distances)?;
    let targets = upper(distances);
    let scale = mean(&targets);
    let start = random_start(distances.nrows(), scale.max(1e-12), seed);
    Ok(smacof_with(start, |_| targets.clone()))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Pool-adjacent-violators: the non-decreasing sequence closest to `y` in
/// least squares.
pub fn isotonic_increasing(y: &[f64]) -> Vec<f64> {
    // Blocks of (sum, count).
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s2, c2) = blocks[blocks.len() - 1];
            let (s1, c1) = blocks[blocks.len() - 2];
            if s1 / c1 as f64 > s2 / c2 as f64 {
                blocks.pop();
                let last = blocks.last_mut().unwrap();
                *last = (s1 + s2, c1 + c2);
            } else {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (s, c) in blocks {
        out.extend(std::iter::repeat_n(s / c as f64, c));
    }
    out
}

/// Non-metric MDS: each iteration replaces the targets with the monotone
/// regression of the current distances on the rank order of `distances`,
/// rescaled to the sum of squares of the original dissimilarities. Same
/// random start and stopping rule as [`mds_project`].
pub fn nonmetric_mds_project(distances: &DMatrix<f64>, seed: u64) -> Result<MdsOutcome> {
    validate_distance_matrix(distances)?;
    let start = random_start(distances.nrows(), mean(&upper(distances)).max(1e-12), seed);
    let dissim = upper(distances);
    let mut order: Vec<usize> = (0..dissim.len()).collect();
    order.sort_by(|&a, &b| dissim[a].total_cmp(&dissim[b]).then(a.cmp(&b)));
    let target_ss: f64 = dissim.iter().map(|v| v * v).sum();
    Ok(smacof_with(start, |current| {
        let sorted: Vec<f64> = order.iter().map(|&e| current[e]).collect();
        let fitted = isotonic_increasing(&sorted);
        let mut out = vec![0.0; current.len()];
        for (&e, v) in order.iter().zip(fitted) {
            out[e] = v;
        }
        let ss: f64 = out.iter().map(|v| v * v).sum();
        if ss > 0.0 {
            let k = (target_ss / ss).sqrt();
            out.iter_mut().for_each(|v| *v *= k);
        }
        out
    }))
}

/// Metric MDS on the raw cosine distances of every point (no fusion).
pub fn cosine_mds_project(dataset: &EmbeddingDataset, seed: u64) -> Result<ProjectionLayout> {
    let vecs: Vec<&[f64]> = dataset.points().iter().map(|p| p.vector.as_slice()).collect();
    let out = mds_project(&pairwise_cosine(&vecs), seed)?;
    ProjectionLayout::new(dataset.points().iter().map(|p| p.id.clone()).collect(), out.coords)
}

/// Data Context Map: metric MDS on the full merged distance matrix.
pub fn dcm_project(dataset: &EmbeddingDataset, seed: u64) -> Result<ProjectionLayout> {
    let merged = build_merged_matrix(dataset)?;
    let out = mds_project(&merged.full(), seed)?;
    ProjectionLayout::new(merged.order, out.coords)
}

/// Non-metric Data Context Map: non-metric MDS on the merged distance matrix.
pub fn ndcm_project(dataset: &EmbeddingDataset, seed: u64) -> Result<ProjectionLayout> {
    let merged = build_merged_matrix(dataset)?;
    let out = nonmetric_mds_project(&merged.full(), seed)?;
    ProjectionLayout::new(merged.order, out.coords)
}
