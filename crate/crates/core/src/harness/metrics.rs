use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};
use crate::geometry::Point;

fn check_lengths(predicted: &[Point], target: &[Point]) -> Result<()> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(GtpError::contract(format!(
            "displacement error over {} and {} points",
            predicted.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Average displacement error: mean per-step Euclidean distance.
pub fn ade(predicted: &[Point], target: &[Point]) -> Result<f64> {
    check_lengths(predicted, target)?;
    Ok(predicted.iter().zip(target).map(|(a, b)| a.dist(*b)).sum::<f64>() / predicted.len() as f64)
}

/// Final displacement error: distance between the last points.
pub fn fde(predicted: &[Point], target: &[Point]) -> Result<f64> {
    check_lengths(predicted, target)?;
    Ok(predicted[predicted.len() - 1].dist(target[target.len() - 1]))
}

/// Errors pooled over the samples of one (variant, scene, horizon).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsCell {
    pub variant: String,
    pub scene: String,
    pub horizon: usize,
    pub ade: f64,
    pub fde: f64,
    pub count: usize,
}

impl MetricsCell {
    /// Pools per-sample `(ade, fde)` pairs.
    pub fn from_samples(variant: &str, scene: &str, horizon: usize, errors: &[(f64, f64)]) -> Result<Self> {
        if errors.is_empty() {
            return Err(GtpError::contract(format!("no test samples for scene {scene}, horizon {horizon}")));
        }
        let n = errors.len() as f64;
        Ok(MetricsCell {
            variant: variant.to_string(),
            scene: scene.to_string(),
            horizon,
            ade: errors.iter().map(|e| e.0).sum::<f64>() / n,
            fde: errors.iter().map(|e| e.1).sum::<f64>() / n,
            count: errors.len(),
        })
    }
}

/// Aggregate over the scenes of one (variant, horizon).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub variant: String,
    pub horizon: usize,
    /// Unweighted mean of per-scene values (the headline number).
    pub scene_mean_ade: f64,
    pub scene_mean_fde: f64,
    /// Mean over all samples, i.e. weighted by per-scene counts.
    pub pooled_ade: f64,
    pub pooled_fde: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cells: Vec<MetricsCell>,
}

impl MetricsReport {
    pub fn push(&mut self, cell: MetricsCell) {
        self.cells.push(cell);
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.cells.extend(other.cells);
    }

    /// Distinct `(variant, horizon)` keys in first-seen order.
    pub fn keys(&self) -> Vec<(String, usize)> {
        let mut keys: Vec<(String, usize)> = Vec::new();
        for c in &self.cells {
            let k = (c.variant.clone(), c.horizon);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys
    }

    pub fn aggregate(&self, variant: &str, horizon: usize) -> Option<Aggregate> {
        let cells: Vec<&MetricsCell> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant && c.horizon == horizon)
            .collect();
        if cells.is_empty() {
            return None;
        }
        let k = cells.len() as f64;
        let count: usize = cells.iter().map(|c| c.count).sum();
        let weighted = |f: fn(&MetricsCell) -> f64| {
            cells.iter().map(|c| f(c) * c.count as f64).sum::<f64>() / count as f64
        };
        Some(Aggregate {
            variant: variant.to_string(),
            horizon,
            scene_mean_ade: cells.iter().map(|c| c.ade).sum::<f64>() / k,
            scene_mean_fde: cells.iter().map(|c| c.fde).sum::<f64>() / k,
            pooled_ade: weighted(|c| c.ade),
            pooled_fde: weighted(|c| c.fde),
            count,
        })
    }

    pub fn aggregates(&self) -> Vec<Aggregate> {
        self.keys()
            .into_iter()
            .filter_map(|(v, h)| self.aggregate(&v, h))
            .collect()
    }
}
