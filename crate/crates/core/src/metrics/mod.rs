//! Camouflaged-object-detection metrics: S-measure, adaptive E-measure,
//! weighted F-measure and MAE, plus per-group aggregation.

mod enhanced;
mod structure;
mod weighted_f;

pub use enhanced::{adaptive_threshold, e_measure_adaptive, enhanced_alignment};
pub use structure::s_measure;
pub use weighted_f::{nearest_foreground, weighted_f_beta};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::bilinear_matrix;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    Shape { pred: (usize, usize), gt: (usize, usize) },
    #[error("weighted F-measure is undefined for an empty ground truth")]
    EmptyGroundTruth,
    #[error("missing predictions for: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("missing group for: {}", .0.join(", "))]
    MissingGroups(Vec<String>),
    #[error("no samples to evaluate")]
    Empty,
}

pub(crate) fn check_shapes(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<(), MetricError> {
    if pred.dim() != gt.dim() {
        return Err(MetricError::Shape {
            pred: pred.dim(),
            gt: gt.dim(),
        });
    }
    Ok(())
}

pub fn mae(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<f64, MetricError> {
    check_shapes(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(&p, &g)| (p - f64::from(u8::from(g))).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Overall,
    SingleObj,
    MultiObj,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Overall => "overall",
            Group::SingleObj => "single_obj",
            Group::MultiObj => "multi_obj",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overall" => Ok(Group::Overall),
            "single_obj" => Ok(Group::SingleObj),
            "multi_obj" => Ok(Group::MultiObj),
            other => Err(format!("unknown group `{other}`")),
        }
    }
}

/// Metrics of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub s_measure: f64,
    pub e_measure_adaptive: f64,
    /// `None` when the ground truth is empty.
    pub weighted_f_beta: Option<f64>,
    pub mae: f64,
}

pub fn score_sample(pred: ArrayView2<f64>, gt: ArrayView2<bool>) -> Result<SampleScores, MetricError> {
    let weighted_f_beta = match weighted_f_beta(pred, gt) {
        Ok(v) => Some(v),
        Err(MetricError::EmptyGroundTruth) => None,
        Err(e) => return Err(e),
    };
    Ok(SampleScores {
        s_measure: s_measure(pred, gt)?,
        e_measure_adaptive: e_measure_adaptive(pred, gt)?,
        weighted_f_beta,
        mae: mae(pred, gt)?,
    })
}

/// Per-group means. `weighted_f_beta` averages only samples where it is
/// defined and is `None` if there are none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub group: Group,
    pub n_samples: usize,
    pub s_measure: f64,
    pub e_measure_adaptive: f64,
    pub weighted_f_beta: Option<f64>,
    pub mae: f64,
    /// Samples left out of the weighted F-measure mean.
    pub weighted_f_excluded: Vec<String>,
}

fn aggregate(group: Group, samples: &[(&String, SampleScores)]) -> MetricsReport {
    let n = samples.len() as f64;
    let mean = |f: fn(&SampleScores) -> f64| samples.iter().map(|(_, s)| f(s)).sum::<f64>() / n;
    let wf: Vec<f64> = samples.iter().filter_map(|(_, s)| s.weighted_f_beta).collect();
    MetricsReport {
        group,
        n_samples: samples.len(),
        s_measure: mean(|s| s.s_measure),
        e_measure_adaptive: mean(|s| s.e_measure_adaptive),
        weighted_f_beta: (!wf.is_empty()).then(|| wf.iter().sum::<f64>() / wf.len() as f64),
        mae: mean(|s| s.mae),
        weighted_f_excluded: samples
            .iter()
            .filter(|(_, s)| s.weighted_f_beta.is_none())
            .map(|(id, _)| (*id).clone())
            .collect(),
    }
}

/// Scores every ground truth against its prediction (resized to the ground
/// truth's resolution) and reports `overall` plus each non-empty sub-group.
pub fn evaluate_dataset(
    predictions: &BTreeMap<String, Array2<f64>>,
    gts: &BTreeMap<String, Array2<bool>>,
    groups: &BTreeMap<String, Group>,
) -> Result<Vec<MetricsReport>, MetricError> {
    if gts.is_empty() {
        return Err(MetricError::Empty);
    }
    let missing: Vec<String> = gts.keys().filter(|k| !predictions.contains_key(*k)).cloned().collect();
    if !missing.is_empty() {
        return Err(MetricError::MissingPredictions(missing));
    }
    let ungrouped: Vec<String> = gts.keys().filter(|k| !groups.contains_key(*k)).cloned().collect();
    if !ungrouped.is_empty() {
        return Err(MetricError::MissingGroups(ungrouped));
    }

    let mut scored = Vec::with_capacity(gts.len());
    for (id, gt) in gts {
        let pred = &predictions[id];
        let (h, w) = gt.dim();
        let scores = if pred.dim() == (h, w) {
            score_sample(pred.view(), gt.view())?
        } else {
            score_sample(resize_bilinear(pred.view(), h, w).view(), gt.view())?
        };
        scored.push((id, scores, groups[id]));
    }

    let mut reports = Vec::new();
    for group in [Group::Overall, Group::SingleObj, Group::MultiObj] {
        let members: Vec<(&String, SampleScores)> = scored
            .iter()
            .filter(|(_, _, g)| group == Group::Overall || *g == group)
            .map(|(id, s, _)| (*id, *s))
            .collect();
        if !members.is_empty() {
            reports.push(aggregate(group, &members));
        }
    }
    Ok(reports)
}

/// Bilinear resampling with half-pixel centres, clamped to [0, 1].
pub fn resize_bilinear(x: ArrayView2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let ry = Array2::from_shape_vec((height, h), bilinear_matrix(height, h)).expect("shape");
    let rx = Array2::from_shape_vec((width, w), bilinear_matrix(width, w)).expect("shape");
    ry.dot(&x).dot(&rx.t()).mapv(|v| v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn blob() -> Array2<bool> {
        Array2::from_shape_fn((16, 16), |(r, c)| (4..11).contains(&r) && (5..12).contains(&c))
    }

    #[test]
    fn mae_examples() {
        let gt = blob();
        let same = gt.mapv(|g| f64::from(u8::from(g)));
        assert_eq!(mae(same.view(), gt.view()).unwrap(), 0.0);
        let zeros = Array2::from_elem((16, 16), false);
        let ones = Array2::from_elem((16, 16), 1.0);
        assert_eq!(mae(ones.view(), zeros.view()).unwrap(), 1.0);
        let half = Array2::from_elem((16, 16), 0.5);
        assert_eq!(mae(half.view(), gt.view()).unwrap(), 0.5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let gt = blob();
        let pred = Array2::zeros((15, 16));
        assert!(matches!(mae(pred.view(), gt.view()), Err(MetricError::Shape { .. })));
        assert!(s_measure(pred.view(), gt.view()).is_err());
        assert!(e_measure_adaptive(pred.view(), gt.view()).is_err());
        assert!(weighted_f_beta(pred.view(), gt.view()).is_err());
    }

    #[test]
    fn one_perfect_prediction_reports_ones() {
        let gt = blob();
        let pred = gt.mapv(|g| f64::from(u8::from(g)));
        let id = "a".to_string();
        let reports = evaluate_dataset(
            &BTreeMap::from([(id.clone(), pred)]),
            &BTreeMap::from([(id.clone(), gt)]),
            &BTreeMap::from([(id, Group::SingleObj)]),
        )
        .unwrap();
        assert_eq!(reports.len(), 2);
        let r = &reports[0];
        assert_eq!(r.group, Group::Overall);
        assert!((r.s_measure - 1.0).abs() < 1e-9);
        assert!((r.e_measure_adaptive - 1.0).abs() < 1e-12);
        assert!((r.weighted_f_beta.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(r.mae, 0.0);
    }

    #[test]
    fn means_and_group_membership() {
        let gt = Array2::from_elem((10, 10), false);
        let a = Array2::from_elem((10, 10), 0.2);
        let b = Array2::from_elem((10, 10), 0.4);
        let preds = BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]);
        let gts = BTreeMap::from([("a".to_string(), gt.clone()), ("b".to_string(), gt)]);
        let groups = BTreeMap::from([
            ("a".to_string(), Group::MultiObj),
            ("b".to_string(), Group::SingleObj),
        ]);
        let reports = evaluate_dataset(&preds, &gts, &groups).unwrap();
        let by: BTreeMap<Group, &MetricsReport> = reports.iter().map(|r| (r.group, r)).collect();
        assert!((by[&Group::Overall].mae - 0.3).abs() < 1e-12);
        assert_eq!(by[&Group::Overall].n_samples, 2);
        assert_eq!(by[&Group::MultiObj].n_samples, 1);
        assert!((by[&Group::MultiObj].mae - 0.2).abs() < 1e-12);
        assert_eq!(by[&Group::Overall].weighted_f_beta, None);
        assert_eq!(by[&Group::Overall].weighted_f_excluded, vec!["a", "b"]);
    }

    #[test]
    fn missing_prediction_lists_ids() {
        let gts = BTreeMap::from([("x".to_string(), blob()), ("y".to_string(), blob())]);
        let groups = BTreeMap::from([("x".to_string(), Group::SingleObj), ("y".to_string(), Group::SingleObj)]);
        let err = evaluate_dataset(&BTreeMap::new(), &gts, &groups).unwrap_err();
        assert_eq!(err.to_string(), "missing predictions for: x, y");
    }

    #[test]
    fn predictions_are_resized_to_ground_truth() {
        let gt = blob();
        let pred = Array2::from_shape_fn((32, 32), |(r, c)| f64::from(u8::from(gt[(r / 2, c / 2)])));
        let id = "a".to_string();
        let reports = evaluate_dataset(
            &BTreeMap::from([(id.clone(), pred)]),
            &BTreeMap::from([(id.clone(), gt)]),
            &BTreeMap::from([(id, Group::SingleObj)]),
        )
        .unwrap();
        assert!(reports[0].mae < 1e-12);
    }

    fn pair() -> impl Strategy<Value = (Array2<f64>, Array2<bool>)> {
        (2usize..12, 2usize..12).prop_flat_map(|(h, w)| {
            (
                proptest::collection::vec(0.0f64..=1.0, h * w),
                proptest::collection::vec(any::<bool>(), h * w),
            )
                .prop_map(move |(p, g)| {
                    (
                        Array2::from_shape_vec((h, w), p).unwrap(),
                        Array2::from_shape_vec((h, w), g).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval((pred, gt) in pair()) {
            let s = score_sample(pred.view(), gt.view()).unwrap();
            for v in [s.s_measure, s.e_measure_adaptive, s.mae] {
                prop_assert!((0.0..=1.0).contains(&v), "{s:?}");
            }
            if let Some(f) = s.weighted_f_beta {
                prop_assert!((0.0..=1.0).contains(&f), "{s:?}");
            }
        }

        #[test]
        fn moving_toward_gt_never_increases_mae((pred, gt) in pair(), t in 0.0f64..=1.0) {
            let target = gt.mapv(|g| f64::from(u8::from(g)));
            let closer = &pred + &((&target - &pred) * t);
            let before = mae(pred.view(), gt.view()).unwrap();
            let after = mae(closer.view(), gt.view()).unwrap();
            prop_assert!(after <= before + 1e-12);
        }
    }
}
