//! Persistence of trained posterior models between runs.
//!
//! A model bundle carries the drift GPs (one per configuration dimension)
//! and the input-gain log-normal grid ([row][channel]). Serialisation keeps
//! every double bit-exact through the shortest-round-trip decimal encoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::lognormal::LogNormalModel;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub a_models: Vec<GpModel>,
    pub b_models: Vec<Vec<LogNormalModel>>,
}

impl ModelBundle {
    pub fn new(a_models: Vec<GpModel>, b_models: Vec<Vec<LogNormalModel>>) -> Self {
        ModelBundle { a_models, b_models }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn dataset_sizes(&self) -> (usize, usize) {
        let a = self.a_models.iter().map(|m| m.len()).sum();
        let b = self.b_models.iter().flatten().map(|m| m.log_gp.len()).sum();
        (a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::TrainingPoint;
    use crate::kernels::KernelSpec;
    use crate::lognormal::LogNoiseMode;

    #[test]
    fn bundle_round_trip_preserves_bits() {
        let a = GpModel::new(
            KernelSpec::rational_quadratic(vec![2.0, 2.0], 5.0, 2.0).unwrap(),
            0.01,
        )
        .unwrap()
        .condition(TrainingPoint::new(vec![0.1 + 0.2, -2.0 / 3.0], 1.0 / 7.0, 0.0))
        .unwrap();
        let b_gp = GpModel::new(
            KernelSpec::squared_exponential(vec![3.0, 3.0], 1.0).unwrap(),
            0.0,
        )
        .unwrap();
        let b = LogNormalModel::new(b_gp, LogNoiseMode::Fixed { value: 0.1 })
            .observe(&[0.5, 0.5], 2.0, 0.1)
            .unwrap();
        let bundle = ModelBundle::new(vec![a], vec![vec![b]]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models.json");
        bundle.save(&path).unwrap();
        let back = ModelBundle::load(&path).unwrap();

        assert_eq!(back.dataset_sizes(), (1, 1));
        let orig = &bundle.a_models[0].data()[0];
        let rest = &back.a_models[0].data()[0];
        assert_eq!(orig.input[0].to_bits(), rest.input[0].to_bits());
        assert_eq!(orig.target.to_bits(), rest.target.to_bits());
        let ob = &bundle.b_models[0][0].log_gp.data()[0];
        let rb = &back.b_models[0][0].log_gp.data()[0];
        assert_eq!(ob.target.to_bits(), rb.target.to_bits());
        assert_eq!(back.b_models[0][0].noise, LogNoiseMode::Fixed { value: 0.1 });
    }
}
