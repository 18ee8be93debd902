//! Per-operator cost models: least-squares fits of a full degree-2 polynomial in
//! the operator's features, summed over a sub-plan to rank alternatives.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gram condition estimate above which the fit switches to ridge.
pub const CONDITION_LIMIT: f64 = 1e12;
/// Ridge penalty used on ill-conditioned designs (on unit-scaled columns).
pub const RIDGE_LAMBDA: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("no samples")]
    NoSamples,
    #[error("samples mix operators {0:?} and {1:?}")]
    MixedOperators(String, String),
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {needed} distinct feature vectors, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("non-finite value in sample {0}")]
    NonFinite(usize),
    #[error("normal equations could not be solved")]
    Singular,
    #[error("no model for operator {0:?}")]
    MissingModel(String),
    #[error("no candidate plans")]
    NoCandidates,
    #[error("model for {operator:?} has {got} weights; {n} features need {expected}")]
    WeightCount {
        operator: String,
        n: usize,
        expected: usize,
        got: usize,
    },
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub operator: String,
    pub features: Vec<f64>,
    /// Measured seconds.
    pub time: f64,
}

/// `1 + n + n + n(n−1)/2`.
pub fn weight_count(n: usize) -> usize {
    1 + 2 * n + n * n.saturating_sub(1) / 2
}

/// Canonical expansion: intercept, linear terms, squares, then pairs `(i, j)`
/// with `i < j` in lexicographic order.
pub fn expand_features(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut row = Vec::with_capacity(weight_count(n));
    row.push(1.0);
    row.extend_from_slice(f);
    row.extend(f.iter().map(|x| x * x));
    for i in 0..n {
        for j in i + 1..n {
            row.push(f[i] * f[j]);
        }
    }
    row
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr")]
pub struct OperatorCostModel {
    pub operator: String,
    pub n: usize,
    pub weights: Vec<f64>,
    /// Set when the ridge fallback was used. Not persisted.
    #[serde(skip)]
    pub regularized: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRepr {
    operator: String,
    n: usize,
    weights: Vec<f64>,
}

impl TryFrom<ModelRepr> for OperatorCostModel {
    type Error = CostError;

    fn try_from(r: ModelRepr) -> Result<Self, CostError> {
        OperatorCostModel::new(r.operator, r.n, r.weights)
    }
}

impl OperatorCostModel {
    pub fn new(operator: String, n: usize, weights: Vec<f64>) -> Result<Self, CostError> {
        let expected = weight_count(n);
        if weights.len() != expected {
            return Err(CostError::WeightCount {
                operator,
                n,
                expected,
                got: weights.len(),
            });
        }
        Ok(OperatorCostModel {
            operator,
            n,
            weights,
            regularized: false,
        })
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64, CostError> {
        if features.len() != self.n {
            return Err(CostError::DimensionMismatch {
                expected: self.n,
                got: features.len(),
            });
        }
        Ok(expand_features(features).iter().zip(&self.weights).map(|(x, w)| x * w).sum())
    }
}

/// Least-squares fit for one operator.
///
/// Columns are scaled to unit max-magnitude before forming the normal equations;
/// if the scaled Gram matrix is too ill-conditioned, a small ridge term is
/// added and the model is flagged as regularized.
pub fn fit(samples: &[CalibrationSample]) -> Result<OperatorCostModel, CostError> {
    let first = samples.first().ok_or(CostError::NoSamples)?;
    let n = first.features.len();
    for (k, s) in samples.iter().enumerate() {
        if s.operator != first.operator {
            return Err(CostError::MixedOperators(first.operator.clone(), s.operator.clone()));
        }
        if s.features.len() != n {
            return Err(CostError::DimensionMismatch {
                expected: n,
                got: s.features.len(),
            });
        }
        if !s.time.is_finite() || s.features.iter().any(|x| !x.is_finite()) {
            return Err(CostError::NonFinite(k));
        }
    }
    let k = weight_count(n);
    let distinct: BTreeSet<Vec<u64>> = samples
        .iter()
        .map(|s| s.features.iter().map(|x| (x + 0.0).to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(CostError::InsufficientSamples {
            needed: k,
            got: distinct.len(),
        });
    }

    let rows: Vec<Vec<f64>> = samples.iter().map(|s| expand_features(&s.features)).collect();
    let scale: Vec<f64> = (0..k)
        .map(|c| {
            let m = rows.iter().map(|r| r[c].abs()).fold(0.0, f64::max);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect();
    let x = DMatrix::from_fn(samples.len(), k, |i, j| rows[i][j] / scale[j]);
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.time));
    let gram = x.transpose() * &x;
    let rhs = x.transpose() * y;

    let condition = condition_estimate(&gram);
    let regularized = condition.is_nan() || condition > CONDITION_LIMIT;
    let system = if regularized {
        &gram + DMatrix::identity(k, k) * RIDGE_LAMBDA
    } else {
        gram
    };
    let w = match system.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => system.lu().solve(&rhs).ok_or(CostError::Singular)?,
    };
    let weights = w.iter().zip(&scale).map(|(w, s)| w / s).collect();
    Ok(OperatorCostModel {
        operator: first.operator.clone(),
        n,
        weights,
        regularized,
    })
}

/// Ratio of extreme eigenvalues of a symmetric positive semi-definite matrix;
/// infinite when the smallest is not positive.
fn condition_estimate(gram: &DMatrix<f64>) -> f64 {
    let eig = gram.clone().symmetric_eigenvalues();
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Fits one model per operator name found in `samples`.
pub fn fit_all(samples: &[CalibrationSample]) -> Result<BTreeMap<String, OperatorCostModel>, CostError> {
    let mut groups: BTreeMap<&str, Vec<CalibrationSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(&s.operator).or_default().push(s.clone());
    }
    groups.into_iter().map(|(name, group)| Ok((name.to_string(), fit(&group)?))).collect()
}

/// Mean squared prediction error over `samples`.
pub fn holdout_mse(model: &OperatorCostModel, samples: &[CalibrationSample]) -> Result<f64, CostError> {
    if samples.is_empty() {
        return Err(CostError::NoSamples);
    }
    let mut total = 0.0;
    for s in samples {
        let e = model.predict(&s.features)? - s.time;
        total += e * e;
    }
    Ok(total / samples.len() as f64)
}

/// One operator occurrence in a sub-plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannedOp {
    pub operator: String,
    pub features: Vec<f64>,
}

/// Sum of per-operator predictions; operators of a sub-plan run one after another.
pub fn subplan_cost(models: &BTreeMap<String, OperatorCostModel>, subplan: &[PlannedOp]) -> Result<f64, CostError> {
    subplan.iter().try_fold(0.0, |acc, op| {
        let model = models
            .get(&op.operator)
            .ok_or_else(|| CostError::MissingModel(op.operator.clone()))?;
        Ok(acc + model.predict(&op.features)?)
    })
}

/// Index of the cheapest candidate; the first one wins ties.
pub fn select_plan(models: &BTreeMap<String, OperatorCostModel>, candidates: &[Vec<PlannedOp>]) -> Result<usize, CostError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let cost = subplan_cost(models, c)?;
        if best.is_none_or(|(_, b)| cost < b) {
            best = Some((i, cost));
        }
    }
    best.map(|(i, _)| i).ok_or(CostError::NoCandidates)
}

/// Reads samples from CSV with header `operator,f1,...,fn,time_s`.
pub fn read_calibration_csv<R: Read>(reader: R) -> Result<Vec<CalibrationSample>, CostError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| CostError::Csv(e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let n = cols.len().checked_sub(2).ok_or_else(|| CostError::Csv("header too short".into()))?;
    let expected: Vec<String> = std::iter::once("operator".to_string())
        .chain((1..=n).map(|i| format!("f{i}")))
        .chain(std::iter::once("time_s".to_string()))
        .collect();
    if cols != expected {
        return Err(CostError::Csv(format!("header must be {}", expected.join(","))));
    }

    let mut samples = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| CostError::Csv(e.to_string()))?;
        let num = |k: usize| -> Result<f64, CostError> {
            record[k]
                .parse::<f64>()
                .map_err(|e| CostError::Csv(format!("row {}: column {}: {e}", line + 1, cols[k])))
        };
        samples.push(CalibrationSample {
            operator: record[0].to_string(),
            features: (1..=n).map(num).collect::<Result<_, _>>()?,
            time: num(n + 1)?,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(f: &[f64], t: f64) -> CalibrationSample {
        CalibrationSample {
            operator: "op".into(),
            features: f.to_vec(),
            time: t,
        }
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn expansion_order() {
        assert_eq!(weight_count(0), 1);
        assert_eq!(weight_count(1), 3);
        assert_eq!(weight_count(2), 6);
        assert_eq!(weight_count(3), 10);
        assert_eq!(expand_features(&[2.0, 3.0, 5.0]), vec![1.0, 2.0, 3.0, 5.0, 4.0, 9.0, 25.0, 6.0, 10.0, 15.0]);
    }

    #[test]
    fn plane_is_recovered() {
        let s: Vec<_> = (0..5).map(|i| sample(&[i as f64], 2.0 + 3.0 * i as f64)).collect();
        let m = fit(&s).unwrap();
        assert_close(&m.weights, &[2.0, 3.0, 0.0], 1e-9);
        assert!(!m.regularized);
        assert!((m.predict(&[4.0]).unwrap() - 14.0).abs() < 1e-9);
    }

    #[test]
    fn constant_on_collinear_design_uses_ridge() {
        let s: Vec<_> = (1..=8).map(|i| sample(&[i as f64, 2.0 * i as f64], 7.5)).collect();
        let m = fit(&s).unwrap();
        assert!(m.regularized);
        assert_close(&m.weights, &[7.5, 0.0, 0.0, 0.0, 0.0, 0.0], 1e-6);
    }

    #[test]
    fn interaction_is_recovered() {
        let pts = [(0.0, 1.0), (1.0, 3.0), (2.0, -1.0), (-1.5, 2.0), (3.0, 0.5), (0.5, -2.0), (2.5, 2.5), (-1.0, -1.0)];
        let s: Vec<_> = pts.iter().map(|&(a, b)| sample(&[a, b], a * b)).collect();
        let m = fit(&s).unwrap();
        assert_close(&m.weights, &[0.0, 0.0, 0.0, 0.0, 0.0, 1.0], 1e-9);
        assert!((m.predict(&[2.0, 5.0]).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(fit(&[]), Err(CostError::NoSamples)));
        let dup: Vec<_> = (0..5).map(|_| sample(&[1.0], 1.0)).collect();
        assert!(matches!(fit(&dup), Err(CostError::InsufficientSamples { needed: 3, got: 1 })));
        let mut mixed: Vec<_> = (0..3).map(|i| sample(&[i as f64], 1.0)).collect();
        mixed[1].operator = "other".into();
        assert!(matches!(fit(&mixed), Err(CostError::MixedOperators(..))));
        let ragged = vec![sample(&[1.0], 1.0), sample(&[1.0, 2.0], 1.0)];
        assert!(matches!(fit(&ragged), Err(CostError::DimensionMismatch { expected: 1, got: 2 })));
        let nan = vec![sample(&[1.0], f64::NAN), sample(&[2.0], 1.0), sample(&[3.0], 1.0)];
        assert!(matches!(fit(&nan), Err(CostError::NonFinite(0))));
    }

    fn model(name: &str, weights: &[f64]) -> OperatorCostModel {
        let n = match weights.len() {
            1 => 0,
            3 => 1,
            6 => 2,
            _ => unreachable!(),
        };
        OperatorCostModel::new(name.into(), n, weights.to_vec()).unwrap()
    }

    fn op(name: &str, f: &[f64]) -> PlannedOp {
        PlannedOp {
            operator: name.into(),
            features: f.to_vec(),
        }
    }

    #[test]
    fn predict_examples() {
        let m = model("a", &[2.0, 3.0, 0.0]);
        assert_eq!(m.predict(&[0.0]).unwrap(), 2.0);
        assert_eq!(m.predict(&[4.0]).unwrap(), 14.0);
        assert!(matches!(m.predict(&[1.0, 2.0]), Err(CostError::DimensionMismatch { expected: 1, got: 2 })));
        let negative = model("b", &[-1.0, 0.0, 0.0]);
        assert_eq!(negative.predict(&[3.0]).unwrap(), -1.0);
    }

    #[test]
    fn subplan_and_selection() {
        let models: BTreeMap<_, _> = [model("three", &[3.0]), model("four", &[4.0]), model("lin", &[0.0, 1.0, 0.0])]
            .into_iter()
            .map(|m| (m.operator.clone(), m))
            .collect();
        assert_eq!(subplan_cost(&models, &[]).unwrap(), 0.0);
        assert_eq!(subplan_cost(&models, &[op("three", &[]), op("four", &[])]).unwrap(), 7.0);
        assert_eq!(subplan_cost(&models, &[op("lin", &[5.0])]).unwrap(), 5.0);
        assert!(matches!(subplan_cost(&models, &[op("nope", &[])]), Err(CostError::MissingModel(_))));

        let c = |x: f64| vec![op("lin", &[x])];
        assert_eq!(select_plan(&models, &[c(5.0), c(3.0), c(9.0)]).unwrap(), 1);
        assert_eq!(select_plan(&models, &[c(5.0)]).unwrap(), 0);
        assert_eq!(select_plan(&models, &[c(4.0), c(4.0)]).unwrap(), 0);
        assert!(matches!(select_plan(&models, &[]), Err(CostError::NoCandidates)));
    }

    #[test]
    fn json_round_trip() {
        let m = model("join", &[1.0, 2.0, 3.0]);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, r#"{"operator":"join","n":1,"weights":[1.0,2.0,3.0]}"#);
        let back: OperatorCostModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        assert!(serde_json::from_str::<OperatorCostModel>(r#"{"operator":"x","n":2,"weights":[1.0]}"#).is_err());
    }

    #[test]
    fn csv_ingest() {
        let text = "operator,f1,f2,time_s\njoin,1,2,0.5\nscan, 3 ,4,1.25\n";
        let s = read_calibration_csv(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].operator, "scan");
        assert_eq!(s[1].features, vec![3.0, 4.0]);
        assert_eq!(s[1].time, 1.25);
        assert!(read_calibration_csv("op,f1,time_s\n".as_bytes()).is_err());
        assert!(read_calibration_csv("operator,f1,time_s\njoin,x,1\n".as_bytes()).is_err());
        let groups = fit_all(&read_calibration_csv("operator,f1,time_s\na,0,1\na,1,1\na,2,1\n".as_bytes()).unwrap()).unwrap();
        assert_eq!(groups.len(), 1);
    }
}
