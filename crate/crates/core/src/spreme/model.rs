use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::loss::effective_weights;
use super::mask::{quantize_mask, BinaryMask, CoefficientSet, RelaxedMask};
use super::train::TrainReport;
use super::Hyperparams;
use crate::error::{Error, Result};
use crate::library::FeatureLibrary;

/// Which procedure produced a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Spreme,
    Sindy,
    SindyIntersection,
    SindyUnion,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Spreme,
        Method::Sindy,
        Method::SindyIntersection,
        Method::SindyUnion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Spreme => "spreme",
            Method::Sindy => "sindy",
            Method::SindyIntersection => "sindy-intersection",
            Method::SindyUnion => "sindy-union",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown method '{s}' (expected spreme, sindy, sindy-intersection or sindy-union)"
                ))
            })
    }
}

/// A trained multi-environment model.
///
/// For the SINDy methods `relaxed` is 0 on the mask support and −∞
/// elsewhere, so `mask == quantize(relaxed)` holds for every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpremeModel {
    pub method: Method,
    pub library: FeatureLibrary,
    pub relaxed: RelaxedMask,
    pub mask: BinaryMask,
    pub coefficients: CoefficientSet,
    pub hyper: Hyperparams,
    pub report: Option<TrainReport>,
}

impl SpremeModel {
    /// Model whose relaxed mask encodes a fixed binary mask.
    pub fn from_binary(
        method: Method,
        library: FeatureLibrary,
        mask: BinaryMask,
        coefficients: CoefficientSet,
        hyper: Hyperparams,
    ) -> Result<Self> {
        let (n, p) = (library.n(), library.p());
        if mask.shape() != (n, p) {
            return Err(Error::invalid("mask shape does not match library"));
        }
        coefficients.check_shape(n, p)?;
        let relaxed = RelaxedMask(DMatrix::from_fn(n, p, |r, c| {
            if mask.get(r, c) {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }));
        Ok(Self {
            method,
            library,
            relaxed,
            mask,
            coefficients,
            hyper,
            report: None,
        })
    }

    pub fn envs(&self) -> usize {
        self.coefficients.envs()
    }

    /// Effective weights `M ∘ Ξ^(e)` (row-major n×p).
    pub fn weights(&self, env: usize) -> Result<Vec<f64>> {
        let xi = self.coefficients.0.get(env).ok_or_else(|| {
            Error::invalid(format!("model has {} environments, asked for {env}", self.envs()))
        })?;
        Ok(effective_weights(&self.mask, xi))
    }

    /// Effective weights of the mask with external coefficients.
    pub fn weights_with(&self, xi: &DMatrix<f64>) -> Result<Vec<f64>> {
        if xi.shape() != self.mask.shape() {
            return Err(Error::invalid("coefficient shape does not match the mask"));
        }
        Ok(effective_weights(&self.mask, xi))
    }

    /// Checks the structural invariants of a loaded model.
    pub fn validate(&self) -> Result<()> {
        let shape = (self.library.n(), self.library.p());
        if self.mask.shape() != shape || self.relaxed.shape() != shape {
            return Err(Error::invalid("mask shape does not match library"));
        }
        self.coefficients.check_shape(shape.0, shape.1)?;
        if quantize_mask(&self.relaxed) != self.mask {
            return Err(Error::invalid("binary mask is not the quantized relaxed mask"));
        }
        self.hyper.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("cannot serialize model: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: SpremeModel =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("bad model: {e}")))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spreme::mask::init_relaxed_mask;

    fn sample() -> SpremeModel {
        let library = FeatureLibrary::new(2, 2, false).unwrap();
        let a = DMatrix::from_fn(2, 6, |r, c| if (r + c) % 3 == 0 { 0.1 + r as f64 / 3.0 } else { 0.0 });
        let b = DMatrix::from_fn(2, 6, |r, c| if c == 1 { -1.0 / 7.0 + r as f64 } else { 0.0 });
        let coefficients = CoefficientSet(vec![a, b]);
        let relaxed = init_relaxed_mask(&coefficients, 0.7).unwrap();
        SpremeModel {
            method: Method::Spreme,
            library,
            mask: quantize_mask(&relaxed),
            relaxed,
            coefficients,
            hyper: Hyperparams::default(),
            report: None,
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let m = sample();
        let text = m.to_json().unwrap();
        assert!(text.contains("null"));
        let back = SpremeModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn rejects_inconsistent_mask() {
        let mut m = sample();
        m.mask = BinaryMask::ones(2, 6);
        assert!(SpremeModel::from_json(&m.to_json().unwrap()).is_err());
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("lasso".parse::<Method>().is_err());
    }

    #[test]
    fn masked_out_entries_do_not_reach_weights() {
        let m = sample();
        let mut xi = m.coefficients.0[0].clone();
        let w0 = m.weights_with(&xi).unwrap();
        for (r, c) in BinaryMask::from_fn(2, 6, |r, c| !m.mask.get(r, c)).ones_positions() {
            xi[(r, c)] += 1e3;
        }
        assert_eq!(m.weights_with(&xi).unwrap(), w0);
    }
}
