use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a task vector is combined with the last-token hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    /// `h + alpha * theta`
    Add,
    /// `theta`
    Replace,
}

impl InterventionMode {
    pub fn code(self) -> u8 {
        match self {
            InterventionMode::Add => 0,
            InterventionMode::Replace => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(InterventionMode::Add),
            1 => Some(InterventionMode::Replace),
            _ => None,
        }
    }
}

/// Strength used when none is configured.
pub const DEFAULT_ALPHA: f32 = 2.0;

/// Edit of the last token's residual state right after block `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub layer: usize,
    pub mode: InterventionMode,
    pub alpha: f32,
    pub vector: Vec<f32>,
}

impl InterventionSpec {
    pub fn add(layer: usize, alpha: f32, vector: Vec<f32>) -> Self {
        InterventionSpec {
            layer,
            mode: InterventionMode::Add,
            alpha,
            vector,
        }
    }

    pub fn replace(layer: usize, vector: Vec<f32>) -> Self {
        InterventionSpec {
            layer,
            mode: InterventionMode::Replace,
            alpha: 1.0,
            vector,
        }
    }

    pub fn validate(&self, n_layers: usize, d_model: usize) -> Result<()> {
        if self.layer >= n_layers {
            return Err(Error::Argument(format!(
                "intervention layer {} out of range for {} layers",
                self.layer, n_layers
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Argument("intervention strength must be finite".into()));
        }
        if self.vector.len() != d_model {
            return Err(Error::Argument(format!(
                "intervention vector has dimension {}, model width is {}",
                self.vector.len(),
                d_model
            )));
        }
        Ok(())
    }
}

/// Combines a hidden state with a task-vector row.
///
/// `Add` yields `h + alpha * theta`; `Replace` yields `theta` unchanged.
pub fn apply_intervention(h: &[f32], theta: &[f32], mode: InterventionMode, alpha: f32) -> Result<Vec<f32>> {
    if h.len() != theta.len() {
        return Err(Error::Argument(format!(
            "dimension mismatch: state {} vs vector {}",
            h.len(),
            theta.len()
        )));
    }
    Ok(match mode {
        InterventionMode::Add => h.iter().zip(theta).map(|(x, t)| x + alpha * t).collect(),
        InterventionMode::Replace => theta.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_replace_arithmetic() {
        let out = apply_intervention(&[1.0, 2.0], &[3.0, 4.0], InterventionMode::Add, 2.0).unwrap();
        assert_eq!(out, vec![7.0, 10.0]);
        let out = apply_intervention(&[9.0, -1.0], &[3.0, 4.0], InterventionMode::Replace, 2.0).unwrap();
        assert_eq!(out, vec![3.0, 4.0]);
    }

    #[test]
    fn zero_strength_is_identity() {
        let h = [0.1f32, -3.5, 7.25];
        let out = apply_intervention(&h, &[100.0, 1e9, -4.0], InterventionMode::Add, 0.0).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let err = apply_intervention(&[1.0], &[1.0, 2.0], InterventionMode::Add, 1.0).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn default_strength_is_two() {
        assert_eq!(DEFAULT_ALPHA, 2.0);
    }

    #[test]
    fn spec_validation() {
        assert!(InterventionSpec::add(3, 2.0, vec![0.0; 4]).validate(4, 4).is_ok());
        assert!(InterventionSpec::add(4, 2.0, vec![0.0; 4]).validate(4, 4).is_err());
        assert!(InterventionSpec::add(0, f32::NAN, vec![0.0; 4]).validate(4, 4).is_err());
        assert!(InterventionSpec::add(0, 1.0, vec![0.0; 3]).validate(4, 4).is_err());
    }
}
