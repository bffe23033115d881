//! Modal Fusion Map: a parametric projector (one shared feed-forward network for
//! both modalities) trained to fuse image and text embeddings in 2D.
//!
//! The objective combines two Pearson terms on the merged distance matrix (all
//! off-diagonal entries, and the cross-modal block alone) with a penalty on
//! inversions of each text's cross-modal distance order:
//! `L = w1 * L_M + w2 * L_IT + alpha * L2`.

mod loss;

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    ordinal_loss, ordinal_term, pearson_loss, pearson_term, total_loss, LossParts, Mask, OrdinalPairs,
    PearsonTerm,
};

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::fusion::{build_merged_matrix, euclidean_matrix, MergedDistanceMatrix};
use crate::layout::ProjectionLayout;
use crate::model_io::{mlp_param_len, read_model, write_model};
use crate::nn::{Activation, Adam, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "camelCase")]
pub struct MfmConfig {
    pub w1: f64,
    pub w2: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Sampled image pairs per text row per step for the ordinal term.
    pub ordinal_pair_budget: usize,
    /// Up to this many images every pair is enumerated instead of sampled.
    pub full_pairs_max_images: usize,
    pub hidden: [usize; 2],
    pub activation: Activation,
    pub seed: u64,
}

impl Default for MfmConfig {
    fn default() -> Self {
        MfmConfig {
            w1: 10.0,
            w2: 2.0,
            alpha: 0.05,
            epochs: 1000,
            learning_rate: 1e-3,
            ordinal_pair_budget: 64,
            full_pairs_max_images: 50,
            hidden: [128, 32],
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl MfmConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.w1, self.w2, self.alpha];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("w1, w2, alpha must be finite and non-negative".into()));
        }
        if self.learning_rate <= 0.0 || self.ordinal_pair_budget == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(
                "learning rate, pair budget and hidden sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    fn pairs_for(&self, m: &MergedDistanceMatrix, rng: &mut impl Rng) -> OrdinalPairs {
        if m.n_image <= self.full_pairs_max_images {
            OrdinalPairs::All
        } else {
            OrdinalPairs::sample(m.n_text, m.n_image, self.ordinal_pair_budget, rng)
        }
    }
}

/// The trained projector: `d -> h1 -> h2 -> 2`, shared by both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    pub net: Mlp,
    pub seed: u64,
    pub config: MfmConfig,
}

impl ProjectionModel {
    pub fn init(dimension: usize, config: &MfmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sizes = vec![dimension, config.hidden[0], config.hidden[1], 2];
        ProjectionModel {
            net: Mlp::init_uniform(sizes, config.activation, &mut rng),
            seed: config.seed,
            config: config.clone(),
        }
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.output_dim() != 2 {
            return Err(Error::InvalidArgument(format!(
                "projector output must be 2-dimensional, got {}",
                net.output_dim()
            )));
        }
        Ok(ProjectionModel {
            net,
            seed: 0,
            config: MfmConfig::default(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_model(
            path,
            "projection",
            &self.net.sizes,
            self.net.activation,
            self.seed,
            serde_json::to_value(&self.config)?,
            &self.net.params,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = read_model(path, "projection", mlp_param_len)?;
        let config: MfmConfig = serde_json::from_value(header.config)?;
        let mut net = Mlp::zeros(header.sizes, header.activation);
        net.params = params;
        Ok(ProjectionModel {
            seed: header.seed,
            config,
            ..ProjectionModel::from_net(net)?
        })
    }
}

fn vectors_matrix(dataset: &EmbeddingDataset, rows: impl Iterator<Item = usize>) -> DMatrix<f64> {
    let rows: Vec<usize> = rows.collect();
    let d = dataset.dimension();
    let pts = dataset.points();
    DMatrix::from_fn(rows.len(), d, |r, c| pts[rows[r]].vector[c])
}

fn to_coords(out: &DMatrix<f64>) -> Vec<[f64; 2]> {
    out.row_iter().map(|r| [r[0], r[1]]).collect()
}

/// Applies the network to every point, in dataset order.
pub fn forward(model: &ProjectionModel, dataset: &EmbeddingDataset) -> Result<ProjectionLayout> {
    if model.input_dim() != dataset.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: dataset.dimension(),
            context: "projection model input".into(),
        });
    }
    let x = vectors_matrix(dataset, 0..dataset.len());
    let coords = to_coords(&model.net.forward(&x));
    ProjectionLayout::new(dataset.points().iter().map(|p| p.id.clone()).collect(), coords)
}

/// Loss and parameter gradient of `net` on inputs `x` (rows in merged order).
fn evaluate(
    net: &Mlp,
    x: &DMatrix<f64>,
    merged: &MergedDistanceMatrix,
    config: &MfmConfig,
    pairs: &OrdinalPairs,
    want_grad: bool,
) -> Result<(LossParts, Option<Vec<f64>>)> {
    let cache = net.forward_cached(x);
    let y = cache.output();
    let coords = to_coords(y);
    let p = euclidean_matrix(&coords);
    let (parts, g) = loss::loss_and_grad(merged, &p, config, pairs, want_grad)?;
    let Some(g) = g else {
        return Ok((parts, None));
    };
    let n = coords.len();
    let mut dy = DMatrix::<f64>::zeros(n, 2);
    for b in 1..n {
        for a in 0..b {
            let gab = g[(a, b)];
            let dist = p[(a, b)];
            if gab == 0.0 || dist <= 0.0 {
                continue;
            }
            let ux = (coords[a][0] - coords[b][0]) / dist;
            let uy = (coords[a][1] - coords[b][1]) / dist;
            dy[(a, 0)] += gab * ux;
            dy[(a, 1)] += gab * uy;
            dy[(b, 0)] -= gab * ux;
            dy[(b, 1)] -= gab * uy;
        }
    }
    let (grads, _) = net.backward(&cache, dy);
    Ok((parts, Some(grads)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub parts: LossParts,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ProjectionModel,
    pub layout: ProjectionLayout,
    /// Loss parts before each epoch's update.
    pub trace: Vec<EpochRecord>,
    /// Loss of the returned model with every ordinal pair enumerated.
    pub final_parts: LossParts,
}

pub fn train_mfm(dataset: &EmbeddingDataset, config: &MfmConfig) -> Result<TrainOutcome> {
    train_mfm_with(dataset, config, |_| true)
}

/// Trains from a seeded initialization. `on_epoch` sees every record and may
/// return `false` to cancel the run.
pub fn train_mfm_with(
    dataset: &EmbeddingDataset,
    config: &MfmConfig,
    on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = ProjectionModel::init(dataset.dimension(), config);
    train_from(model, dataset, config, on_epoch)
}

/// Continues training an existing model.
pub fn train_from(
    mut model: ProjectionModel,
    dataset: &EmbeddingDataset,
    config: &MfmConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<TrainOutcome> {
    let merged = build_merged_matrix(dataset)?;
    if model.input_dim() != dataset.dimension() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            found: dataset.dimension(),
            context: "projection model input".into(),
        });
    }
    let x = vectors_matrix(dataset, merged.source_index.iter().copied());
    // Pair sampling uses its own stream so initialization and sampling stay independent.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(model.net.params.len(), config.learning_rate);
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let pairs = config.pairs_for(&merged, &mut rng);
        let (parts, grads) = evaluate(&model.net, &x, &merged, config, &pairs, true)?;
        let grads = grads.unwrap();
        if !parts.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        if epoch % 100 == 0 {
            tracing::debug!(epoch, total = parts.total, l_m = parts.l_m, l_it = parts.l_it, l2 = parts.l2, "mfm epoch");
        }
        let record = EpochRecord { epoch, parts };
        let keep_going = on_epoch(&record);
        trace.push(record);
        if !keep_going {
            return Err(Error::Cancelled);
        }
        adam.step(&mut model.net.params, &grads);
    }

    let (final_parts, _) = evaluate(&model.net, &x, &merged, config, &OrdinalPairs::All, false)?;
    tracing::info!(points = dataset.len(), epochs = config.epochs, total = final_parts.total, "mfm trained");
    if !final_parts.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: config.epochs,
        });
    }
    model.config = config.clone();
    model.seed = config.seed;
    let layout = forward(&model, dataset)?;
    Ok(TrainOutcome {
        model,
        layout,
        trace,
        final_parts,
    })
}

/// Largest relative disagreement between the analytic gradient and central
/// finite differences (step `1e-4`) over `probe_count` random parameters.
/// Every ordinal pair is enumerated so the loss is deterministic.
pub fn gradient_check(
    model: &ProjectionModel,
    dataset: &EmbeddingDataset,
    config: &MfmConfig,
    probe_count: usize,
) -> Result<f64> {
    const STEP: f64 = 1e-4;
    // Gradient magnitudes below this are compared in absolute terms.
    const FLOOR: f64 = 1e-4;
    let merged = build_merged_matrix(dataset)?;
    let x = vectors_matrix(dataset, merged.source_index.iter().copied());
    let (_, grads) = evaluate(&model.net, &x, &merged, config, &OrdinalPairs::All, true)?;
    let grads = grads.unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17));
    let mut net = model.net.clone();
    let mut worst = 0.0f64;
    for _ in 0..probe_count.max(1) {
        let i = rng.random_range(0..net.params.len());
        let orig = net.params[i];
        net.params[i] = orig + STEP;
        let up = evaluate(&net, &x, &merged, config, &OrdinalPairs::All, false)?.0.total;
        net.params[i] = orig - STEP;
        let down = evaluate(&net, &x, &merged, config, &OrdinalPairs::All, false)?.0.total;
        net.params[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let rel = (numeric - grads[i]).abs() / numeric.abs().max(grads[i].abs()).max(FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
