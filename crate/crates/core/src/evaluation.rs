//! Scoring extractions as predictions against reference labels.
//!
//! Values are compared with [`same_value`]: strings case-folded, numbers
//! numerically, everything else structurally. Metrics whose denominator is
//! zero carry no value and a reason instead.

use crate::schema::ValidatedRecord;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("predictions and references disagree on ids: missing predictions for {missing_predictions:?}, unexpected predictions for {unexpected:?}")]
    Alignment {
        missing_predictions: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("value for `{id}` is not a number: {value}")]
    NotNumeric { id: String, value: String },
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("labels line {line}: {message}")]
    Labels { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub support: usize,
}

impl Metric {
    fn ratio(num: f64, den: f64, support: usize, what: &str) -> Self {
        if den == 0.0 {
            Metric::undefined(support, format!("{what} is zero"))
        } else {
            Metric { value: Some(num / den), reason: None, support }
        }
    }

    fn defined(value: f64, support: usize) -> Self {
        Metric { value: Some(value), reason: None, support }
    }

    pub fn undefined(support: usize, reason: impl Into<String>) -> Self {
        Metric { value: None, reason: Some(reason.into()), support }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.value, &self.reason) {
            (Some(v), _) => write!(f, "{v:.6}"),
            (None, Some(r)) => write!(f, "undefined ({r})"),
            (None, None) => f.write_str("undefined"),
        }
    }
}

/// Case-folded string equality, numeric equality for numbers.
pub fn same_value(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::String(x), Value::String(y)) => x.to_lowercase() == y.to_lowercase(),
        (Value::Number(x), Value::Number(y)) => x.as_f64() == y.as_f64(),
        _ => a == b,
    }
}

fn check_alignment<A, B>(preds: &BTreeMap<String, A>, refs: &BTreeMap<String, B>) -> Result<(), EvalError> {
    let missing: Vec<String> = refs.keys().filter(|k| !preds.contains_key(*k)).cloned().collect();
    let unexpected: Vec<String> = preds.keys().filter(|k| !refs.contains_key(*k)).cloned().collect();
    if missing.is_empty() && unexpected.is_empty() {
        Ok(())
    } else {
        Err(EvalError::Alignment { missing_predictions: missing, unexpected })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: Metric,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

/// Confusion-matrix metrics for the `positive` class. Predictions and
/// references must cover the same ids.
pub fn classification_metrics(
    preds: &BTreeMap<String, Value>,
    refs: &BTreeMap<String, Value>,
    positive: &Value,
) -> Result<ClassificationReport, EvalError> {
    check_alignment(preds, refs)?;
    let (mut tp, mut fp, mut fn_, mut tn, mut correct) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (id, y) in refs {
        let p = &preds[id];
        if same_value(p, y) {
            correct += 1;
        }
        match (same_value(p, positive), same_value(y, positive)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let n = refs.len();
    Ok(ClassificationReport {
        accuracy: Metric::ratio(correct as f64, n as f64, n, "item count"),
        precision: Metric::ratio(tp as f64, (tp + fp) as f64, tp + fp, "positive prediction count"),
        recall: Metric::ratio(tp as f64, (tp + fn_) as f64, tp + fn_, "positive reference count"),
        f1: Metric::ratio(2.0 * tp as f64, (2 * tp + fp + fn_) as f64, n, "2TP + FP + FN"),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        true_negatives: tn,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub mae: Metric,
    pub r2: Metric,
}

fn as_number(id: &str, v: &Value) -> Result<f64, EvalError> {
    match v {
        Value::Number(n) => Ok(n.as_f64().unwrap_or(f64::NAN)),
        other => Err(EvalError::NotNumeric { id: id.to_string(), value: other.to_string() }),
    }
}

/// Mean absolute error and coefficient of determination.
pub fn regression_metrics(
    preds: &BTreeMap<String, Value>,
    refs: &BTreeMap<String, Value>,
) -> Result<RegressionReport, EvalError> {
    check_alignment(preds, refs)?;
    let pairs: Vec<(f64, f64)> = refs
        .iter()
        .map(|(id, y)| Ok((as_number(id, &preds[id])?, as_number(id, y)?)))
        .collect::<Result<_, EvalError>>()?;
    let n = pairs.len();
    if n == 0 {
        return Ok(RegressionReport {
            mae: Metric::undefined(0, "no items"),
            r2: Metric::undefined(0, "no items"),
        });
    }
    let mae = pairs.iter().map(|(p, y)| (p - y).abs()).sum::<f64>() / n as f64;
    let r2 = if n < 2 {
        Metric::undefined(n, "needs at least two items")
    } else {
        let mean = pairs.iter().map(|(_, y)| y).sum::<f64>() / n as f64;
        let ss_tot: f64 = pairs.iter().map(|(_, y)| (y - mean).powi(2)).sum();
        let ss_res: f64 = pairs.iter().map(|(p, y)| (y - p).powi(2)).sum();
        if ss_tot == 0.0 {
            Metric::undefined(n, "reference values are constant")
        } else {
            Metric::defined(1.0 - ss_res / ss_tot, n)
        }
    };
    Ok(RegressionReport { mae: Metric::defined(mae, n), r2 })
}

/// Share of reference ids whose correct value appears among that id's
/// extracted values at least once. Ids without references are ignored; ids
/// without records count as not credited.
pub fn presence_metric(records: &BTreeMap<String, Vec<Value>>, refs: &BTreeMap<String, Value>) -> Metric {
    let credited = refs
        .iter()
        .filter(|(id, y)| records.get(*id).is_some_and(|vs| vs.iter().any(|v| same_value(v, y))))
        .count();
    Metric::ratio(credited as f64, refs.len() as f64, refs.len(), "evaluated id count")
}

/// Distinct true mentions recovered over total distinct true mentions.
/// A reference value may be a single value or an array of mentions.
pub fn recall_on_field(records: &BTreeMap<String, Vec<Value>>, refs: &BTreeMap<String, Value>) -> Metric {
    let (mut total, mut found) = (0usize, 0usize);
    for (id, y) in refs {
        let mentions = distinct_mentions(y);
        total += mentions.len();
        if let Some(extracted) = records.get(id) {
            found += mentions.iter().filter(|m| extracted.iter().any(|v| same_value(v, m))).count();
        }
    }
    Metric::ratio(found as f64, total as f64, total, "mention count")
}

fn distinct_mentions(y: &Value) -> Vec<Value> {
    let items: Vec<&Value> = match y {
        Value::Array(xs) => xs.iter().collect(),
        Value::Null => Vec::new(),
        other => vec![other],
    };
    let mut out: Vec<Value> = Vec::new();
    for item in items {
        if !out.iter().any(|o| same_value(o, item)) {
            out.push(item.clone());
        }
    }
    out
}

/// Seeded shuffle, then the first `floor(n * fraction)` go to train. Both
/// halves keep input order.
pub fn split_dataset<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), EvalError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(EvalError::BadFraction(train_fraction));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (items.len() as f64 * train_fraction).floor() as usize;
    let train_idx: BTreeSet<usize> = order[..n_train].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, item) in items.iter().enumerate() {
        if train_idx.contains(&i) {
            train.push(item.clone());
        } else {
            test.push(item.clone());
        }
    }
    Ok((train, test))
}

/// One reference label: `{"id": ..., "field": ..., "value": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRow {
    pub id: String,
    pub field: String,
    pub value: Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    pub rows: Vec<LabelRow>,
}

impl LabeledDataset {
    /// Parses JSON lines; blank lines are skipped. At most one row per
    /// `(id, field)`.
    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut rows = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: LabelRow = serde_json::from_str(line).map_err(|e| EvalError::Labels {
                line: i + 1,
                message: e.to_string(),
            })?;
            if !seen.insert((row.id.clone(), row.field.clone())) {
                return Err(EvalError::Labels {
                    line: i + 1,
                    message: format!("second reference for ({}, {})", row.id, row.field),
                });
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Labels {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    /// `id -> reference value` for one field.
    pub fn for_field(&self, field: &str) -> BTreeMap<String, Value> {
        self.rows
            .iter()
            .filter(|r| r.field == field)
            .map(|r| (r.id.clone(), r.value.clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdKey {
    #[default]
    Doc,
    Chunk,
}

/// Extracted values of `field`, grouped by document or chunk id. Records
/// without the field contribute nothing.
pub fn group_values<'a>(
    records: impl IntoIterator<Item = &'a ValidatedRecord>,
    field: &str,
    key: IdKey,
) -> BTreeMap<String, Vec<Value>> {
    let mut out: BTreeMap<String, Vec<Value>> = BTreeMap::new();
    for r in records {
        if let Some(v) = r.values.get(field) {
            let id = match key {
                IdKey::Doc => &r.doc_id,
                IdKey::Chunk => &r.chunk_id,
            };
            out.entry(id.clone()).or_default().push(v.clone());
        }
    }
    out
}

/// One prediction per reference id: the first extracted value, or null.
pub fn first_predictions(grouped: &BTreeMap<String, Vec<Value>>, refs: &BTreeMap<String, Value>) -> BTreeMap<String, Value> {
    refs.keys()
        .map(|id| {
            let v = grouped.get(id).and_then(|vs| vs.first()).cloned().unwrap_or(Value::Null);
            (id.clone(), v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn map(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn bools(xs: &[bool]) -> BTreeMap<String, Value> {
        xs.iter().enumerate().map(|(i, b)| (format!("{i:02}"), json!(b))).collect()
    }

    #[test]
    fn perfect_classifier() {
        let refs = bools(&[true, false, true, true, false, false, true, false, true, false]);
        let r = classification_metrics(&refs, &refs, &json!(true)).unwrap();
        for m in [&r.accuracy, &r.precision, &r.recall, &r.f1] {
            assert_eq!(m.value, Some(1.0));
        }
    }

    #[test]
    fn hand_confusion_matrix() {
        // TP=2, FP=1, FN=1, TN=6
        let refs = bools(&[true, true, false, true, false, false, false, false, false, false]);
        let preds = bools(&[true, true, true, false, false, false, false, false, false, false]);
        let r = classification_metrics(&preds, &refs, &json!(true)).unwrap();
        assert_eq!((r.true_positives, r.false_positives, r.false_negatives, r.true_negatives), (2, 1, 1, 6));
        assert!((r.precision.value.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall.value.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.accuracy.value.unwrap() - 0.8).abs() < 1e-12);
        assert!((r.f1.value.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn no_positive_predictions() {
        let refs = bools(&[true, false]);
        let preds = bools(&[false, false]);
        let r = classification_metrics(&preds, &refs, &json!(true)).unwrap();
        assert_eq!(r.precision.value, None);
        assert_eq!(r.precision.support, 0);
        assert!(r.precision.reason.is_some());
        assert_eq!(r.recall.value, Some(0.0));
    }

    #[test]
    fn misaligned_ids() {
        let refs = bools(&[true, false]);
        let preds = map(&[("00", json!(true)), ("zz", json!(true))]);
        assert!(matches!(
            classification_metrics(&preds, &refs, &json!(true)),
            Err(EvalError::Alignment { .. })
        ));
    }

    #[test]
    fn regression_examples() {
        let refs = map(&[("a", json!(1)), ("b", json!(2)), ("c", json!(3))]);
        let same = regression_metrics(&refs, &refs).unwrap();
        assert_eq!((same.mae.value, same.r2.value), (Some(0.0), Some(1.0)));
        let mean = map(&[("a", json!(2)), ("b", json!(2)), ("c", json!(2))]);
        assert_eq!(regression_metrics(&mean, &refs).unwrap().r2.value, Some(0.0));
        let preds = map(&[("a", json!(1)), ("b", json!(2)), ("c", json!(5))]);
        let r = regression_metrics(&preds, &refs).unwrap();
        assert!((r.mae.value.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.r2.value.unwrap() + 1.0).abs() < 1e-12);
        let flat = regression_metrics(&refs, &mean).unwrap();
        assert_eq!(flat.r2.value, None);
    }

    #[test]
    fn presence_examples() {
        let refs = map(&[("a", json!(true)), ("b", json!(true)), ("c", json!(false)), ("d", json!(true))]);
        let mut recs: BTreeMap<String, Vec<Value>> = BTreeMap::new();
        recs.insert("a".into(), vec![json!(true), json!(true), json!(true)]);
        recs.insert("b".into(), vec![json!(false)]);
        recs.insert("c".into(), vec![json!(true), json!(false)]);
        recs.insert("d".into(), vec![json!(true)]);
        assert_eq!(presence_metric(&recs, &refs).value, Some(0.75));
    }

    #[test]
    fn recall_examples() {
        let refs = map(&[("d1", json!(["oil", "gas"])), ("d2", json!(["Copper", "wheat"]))]);
        let mut recs: BTreeMap<String, Vec<Value>> = BTreeMap::new();
        recs.insert("d1".into(), vec![json!("oil"), json!("OIL"), json!("gas")]);
        recs.insert("d2".into(), vec![json!("copper"), json!("tin")]);
        assert_eq!(recall_on_field(&recs, &refs).value, Some(0.75));
        assert_eq!(recall_on_field(&BTreeMap::new(), &refs).value, Some(0.0));
    }

    #[test]
    fn split_examples() {
        let items: Vec<u32> = (0..10).collect();
        let (tr, te) = split_dataset(&items, 0.8, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (8, 2));
        assert_eq!(split_dataset(&items, 0.8, 3).unwrap(), (tr, te));
        let (tr, te) = split_dataset(&items[..5], 0.5, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (2, 3));
        assert!(split_dataset(&items, 1.0, 3).is_err());
    }

    #[test]
    fn labels_reject_duplicates() {
        let ok = "{\"id\":\"a\",\"field\":\"f\",\"value\":1}\n\n{\"id\":\"a\",\"field\":\"g\",\"value\":2}\n";
        assert_eq!(LabeledDataset::parse(ok).unwrap().for_field("g")["a"], json!(2));
        let dup = "{\"id\":\"a\",\"field\":\"f\",\"value\":1}\n{\"id\":\"a\",\"field\":\"f\",\"value\":2}\n";
        assert!(matches!(LabeledDataset::parse(dup), Err(EvalError::Labels { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn split_partitions(n in 0usize..60, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let (tr, te) = split_dataset(&items, frac, seed).unwrap();
            prop_assert_eq!(tr.len(), (n as f64 * frac).floor() as usize);
            let mut all: Vec<usize> = tr.iter().chain(te.iter()).copied().collect();
            all.sort();
            prop_assert_eq!(all, items);
        }

        #[test]
        fn recall_monotone_in_records(extra in proptest::collection::vec(0u8..6, 0..10)) {
            let names = ["oil", "gas", "tin", "zinc", "lead", "gold"];
            let refs = map(&[("d", json!(["oil", "tin", "gold"]))]);
            let mut recs: BTreeMap<String, Vec<Value>> = BTreeMap::new();
            let mut last = 0.0;
            for i in extra {
                recs.entry("d".into()).or_default().push(json!(names[i as usize]));
                let r = recall_on_field(&recs, &refs).value.unwrap();
                prop_assert!(r >= last);
                last = r;
            }
        }
    }
}
