use serde::{Deserialize, Serialize};

use super::{FeatureSelection, HeteroGraph};
use crate::error::{FlowKanError, Result};

/// Per-feature min-max scaling fitted on training data and reused unchanged
/// at inference. Constant features map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min_feat: Vec<f64>,
    /// `1 / (max - min)`, or 0 where the feature is constant.
    pub inv_range: Vec<f64>,
    range: Vec<f64>,
}

impl Normalizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut iter = rows.into_iter();
        let first = iter
            .next()
            .ok_or_else(|| FlowKanError::config("cannot fit a normalizer on an empty training set"))?;
        let mut lo = first.to_vec();
        let mut hi = first.to_vec();
        for row in iter {
            if row.len() != lo.len() {
                return Err(FlowKanError::contract(format!(
                    "normalizer rows of width {} and {}",
                    lo.len(),
                    row.len()
                )));
            }
            for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(row) {
                *l = l.min(v);
                *h = h.max(v);
            }
        }
        let range: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| h - l).collect();
        let inv_range = range
            .iter()
            .map(|&r| if r > 0.0 && r.is_finite() { 1.0 / r } else { 0.0 })
            .collect();
        Ok(Self {
            min_feat: lo,
            inv_range,
            range,
        })
    }

    pub fn width(&self) -> usize {
        self.min_feat.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.min_feat)
            .zip(self.inv_range.iter().zip(&self.range))
            .map(|((&v, &m), (&inv, &r))| if inv == 0.0 { 0.0 } else { (v - m) / r })
            .collect()
    }
}

pub fn fit_flow_normalizer(graphs: &[HeteroGraph], selection: &FeatureSelection) -> Result<Normalizer> {
    let rows: Vec<Vec<f64>> = graphs
        .iter()
        .flat_map(|g| g.flows.iter().map(|f| selection.extract(f)))
        .collect();
    Normalizer::fit(rows.iter().map(Vec::as_slice))
}

pub fn fit_link_normalizer(graphs: &[HeteroGraph]) -> Result<Normalizer> {
    let rows: Vec<[f64; 2]> = graphs
        .iter()
        .flat_map(|g| g.links.iter().map(|l| l.features()))
        .collect();
    Normalizer::fit(rows.iter().map(|r| r.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_example() {
        let rows = [[2.0], [4.0], [6.0]];
        let n = Normalizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        let out: Vec<f64> = rows.iter().map(|r| n.apply(r)[0]).collect();
        assert_eq!(out, vec![0.0, 0.5, 1.0]);
        assert!(n.apply(&[1.0])[0] < 0.0);
    }

    #[test]
    fn constant_feature_maps_to_zero() {
        let rows = [[3.0, 1.0], [3.0, 2.0]];
        let n = Normalizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(n.inv_range[0], 0.0);
        assert_eq!(n.apply(&[100.0, 1.5])[0], 0.0);
    }

    #[test]
    fn empty_training_set() {
        let rows: Vec<&[f64]> = vec![];
        assert!(matches!(Normalizer::fit(rows), Err(FlowKanError::Config(_))));
    }

    proptest! {
        #[test]
        fn extremes_map_exactly(values in prop::collection::vec(-1e9f64..1e9, 2..40)) {
            let rows: Vec<[f64; 1]> = values.iter().map(|&v| [v]).collect();
            let n = Normalizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(n.apply(&[lo])[0], 0.0);
            if hi > lo {
                prop_assert_eq!(n.apply(&[hi])[0], 1.0);
            }
        }
    }
}
