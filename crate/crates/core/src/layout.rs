use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2D coordinates keyed by point id, stored in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionLayout {
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
}

impl ProjectionLayout {
    pub fn new(ids: Vec<String>, coords: Vec<[f64; 2]>) -> Result<Self> {
        if ids.len() != coords.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids but {} coordinates",
                ids.len(),
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite coordinate for `{}`",
                ids[i]
            )));
        }
        Ok(ProjectionLayout { ids, coords })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<[f64; 2]> {
        self.ids.iter().position(|x| x == id).map(|i| self.coords[i])
    }

    /// Coordinates re-ordered to follow `order`.
    pub fn coords_in(&self, order: &[String]) -> Result<Vec<[f64; 2]>> {
        let lookup: HashMap<&str, usize> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        order
            .iter()
            .map(|id| {
                lookup
                    .get(id.as_str())
                    .map(|&i| self.coords[i])
                    .ok_or_else(|| Error::MissingPoint(id.clone()))
            })
            .collect()
    }

    /// Largest pairwise distance between any two points.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.coords.iter().enumerate() {
            for b in &self.coords[i + 1..] {
                best = best.max(euclid(*a, *b));
            }
        }
        best
    }
}

pub fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}
