//! Multi-environment masks built from per-environment sparse regression.

use serde::{Deserialize, Serialize};

use crate::dataset::Environment;
use crate::error::{Error, Result};
use crate::library::FeatureLibrary;
use crate::spreme::{train::init_coefficients, BinaryMask, CoefficientSet, Hyperparams, Method, SpremeModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAggregationRule {
    Intersection,
    Union,
}

impl MaskAggregationRule {
    pub fn method(self) -> Method {
        match self {
            MaskAggregationRule::Intersection => Method::SindyIntersection,
            MaskAggregationRule::Union => Method::SindyUnion,
        }
    }
}

fn aggregate(coeffs: &CoefficientSet, all: bool) -> Result<BinaryMask> {
    let (n, p) = coeffs
        .shape()
        .ok_or_else(|| Error::invalid("need at least one environment"))?;
    coeffs.check_shape(n, p)?;
    Ok(BinaryMask::from_fn(n, p, |r, c| {
        let mut nonzero = coeffs.0.iter().map(|m| m[(r, c)] != 0.0);
        if all {
            nonzero.all(|b| b)
        } else {
            nonzero.any(|b| b)
        }
    }))
}

/// Mᵢⱼ = 1 iff Ξ^(e)ᵢⱼ ≠ 0 in every environment.
pub fn intersection_mask(coeffs: &CoefficientSet) -> Result<BinaryMask> {
    aggregate(coeffs, true)
}

/// Mᵢⱼ = 1 iff Ξ^(e)ᵢⱼ ≠ 0 in some environment.
pub fn union_mask(coeffs: &CoefficientSet) -> Result<BinaryMask> {
    aggregate(coeffs, false)
}

pub fn aggregate_mask(rule: MaskAggregationRule, coeffs: &CoefficientSet) -> Result<BinaryMask> {
    match rule {
        MaskAggregationRule::Intersection => intersection_mask(coeffs),
        MaskAggregationRule::Union => union_mask(coeffs),
    }
}

/// Per-environment SINDy fits with an aggregated shared mask. The fitted
/// coefficients are kept for in-domain use; out-of-domain use adapts fresh
/// coefficients under the mask.
pub fn baseline_model(
    rule: MaskAggregationRule,
    envs: &[Environment],
    lib: &FeatureLibrary,
    hyper: &Hyperparams,
) -> Result<SpremeModel> {
    let coeffs = init_coefficients(envs, lib, hyper)?;
    let mask = aggregate_mask(rule, &coeffs)?;
    SpremeModel::from_binary(rule.method(), lib.clone(), mask, coeffs, hyper.clone())
}

/// Independent SINDy models per environment. The stored mask is the union
/// of the supports, so every environment's own fit passes through unchanged.
pub fn sindy_model(
    envs: &[Environment],
    lib: &FeatureLibrary,
    hyper: &Hyperparams,
) -> Result<SpremeModel> {
    let coeffs = init_coefficients(envs, lib, hyper)?;
    let mask = union_mask(&coeffs)?;
    SpremeModel::from_binary(Method::Sindy, lib.clone(), mask, coeffs, hyper.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn set(supports: &[&[(usize, usize)]]) -> CoefficientSet {
        CoefficientSet(
            supports
                .iter()
                .map(|s| DMatrix::from_fn(1, 3, |r, c| if s.contains(&(r, c)) { 1.0 } else { 0.0 }))
                .collect(),
        )
    }

    #[test]
    fn two_environment_examples() {
        let cs = set(&[&[(0, 0), (0, 1)], &[(0, 1), (0, 2)]]);
        let inter = intersection_mask(&cs).unwrap();
        assert_eq!(inter.ones_positions(), vec![(0, 1)]);
        let uni = union_mask(&cs).unwrap();
        assert_eq!(uni.ones_positions(), vec![(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn single_and_empty_environments() {
        let one = set(&[&[(0, 2)]]);
        assert_eq!(intersection_mask(&one).unwrap(), union_mask(&one).unwrap());
        let with_empty = set(&[&[(0, 0), (0, 2)], &[]]);
        assert_eq!(intersection_mask(&with_empty).unwrap().count_ones(), 0);
        let all_empty = set(&[&[], &[]]);
        assert_eq!(union_mask(&all_empty).unwrap().count_ones(), 0);
        assert!(intersection_mask(&CoefficientSet(vec![])).is_err());
    }
}
