//! Uniform entry point over every projector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{cosine_mds_project, dcm_project, ndcm_project, pca_project};
use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::layout::ProjectionLayout;
use crate::mfm::{train_mfm, MfmConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectorKind {
    Mfm,
    Pca,
    Mds,
    Dcm,
    Ndcm,
}

impl ProjectorKind {
    pub const ALL: [ProjectorKind; 5] = [Self::Mfm, Self::Pca, Self::Mds, Self::Dcm, Self::Ndcm];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mfm => "mfm",
            Self::Pca => "pca",
            Self::Mds => "mds",
            Self::Dcm => "dcm",
            Self::Ndcm => "ndcm",
        }
    }
}

impl fmt::Display for ProjectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProjectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown projector `{s}`")))
    }
}

/// Project `dataset` with `kind`. `seed` overrides `mfm.seed` and seeds the
/// MDS-family random starts; PCA ignores it.
pub fn project(dataset: &EmbeddingDataset, kind: ProjectorKind, mfm: &MfmConfig, seed: u64) -> Result<ProjectionLayout> {
    match kind {
        ProjectorKind::Mfm => {
            let cfg = MfmConfig { seed, ..mfm.clone() };
            Ok(train_mfm(dataset, &cfg)?.layout)
        }
        ProjectorKind::Pca => Ok(pca_project(dataset)?.layout),
        ProjectorKind::Mds => cosine_mds_project(dataset, seed),
        ProjectorKind::Dcm => dcm_project(dataset, seed),
        ProjectorKind::Ndcm => ndcm_project(dataset, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_names() {
        for k in ProjectorKind::ALL {
            assert_eq!(k.as_str().parse::<ProjectorKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert_eq!("NDCM".parse::<ProjectorKind>().unwrap(), ProjectorKind::Ndcm);
        assert!("tsne".parse::<ProjectorKind>().is_err());
    }
}
