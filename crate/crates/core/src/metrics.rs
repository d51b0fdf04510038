//! Precision, recall and F1 for symptom classification and token-wise
//! attribute extraction.
//!
//! All averaged scores are micro averages: true/false positive and false
//! negative counts are summed over classes before the ratios are taken.
//! Degenerate ratios (0/0) are 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AttributeType;
use crate::ontology::SymptomId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction and gold key sets differ (e.g. `{0}`)")]
    KeyMismatch(String),
    #[error("overlapping predicted spans in instance `{0}`")]
    OverlappingSpans(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn from_sets<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Counts {
        let tp = pred.intersection(gold).count();
        Counts {
            tp,
            fp: pred.len() - tp,
            fn_: gold.len() - tp,
        }
    }

    pub fn prf(self) -> Prf {
        Prf::from_counts(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    pub fn from_counts(c: Counts) -> Prf {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
            counts: c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, Prf>,
    pub micro: Prf,
    /// Gold spans lost to truncation during encoding.
    #[serde(default)]
    pub dropped_spans: usize,
}

impl EvalReport {
    fn from_class_counts(per_class: BTreeMap<String, Counts>) -> Self {
        let mut total = Counts::default();
        for c in per_class.values() {
            total.add(*c);
        }
        EvalReport {
            per_class: per_class.into_iter().map(|(k, c)| (k, c.prf())).collect(),
            micro: total.prf(),
            dropped_spans: 0,
        }
    }

    /// Unweighted mean of per-class F1 (for contrast with the micro score).
    pub fn macro_f1(&self) -> f64 {
        if self.per_class.is_empty() {
            return 0.0;
        }
        self.per_class.values().map(|p| p.f1).sum::<f64>() / self.per_class.len() as f64
    }
}

/// Symptom classification scores over (post, symptom) pairs.
///
/// Gold sets are expected to be closure-completed by the caller.
pub fn classification_metrics(
    pred: &BTreeMap<String, BTreeSet<SymptomId>>,
    gold: &BTreeMap<String, BTreeSet<SymptomId>>,
) -> Result<EvalReport, MetricsError> {
    if let Some(k) = pred.keys().find(|k| !gold.contains_key(*k)) {
        return Err(MetricsError::KeyMismatch(k.clone()));
    }
    if let Some(k) = gold.keys().find(|k| !pred.contains_key(*k)) {
        return Err(MetricsError::KeyMismatch(k.clone()));
    }
    let mut per_class: BTreeMap<String, Counts> = BTreeMap::new();
    for (post, g) in gold {
        let p = &pred[post];
        for s in p.union(g) {
            let c = per_class.entry(s.to_string()).or_default();
            match (p.contains(s), g.contains(s)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => unreachable!("element of the union"),
            }
        }
    }
    Ok(EvalReport::from_class_counts(per_class))
}

/// Predicted and gold token ranges (inclusive) of one query instance,
/// keyed by attribute type.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InstanceSpans {
    pub pred: BTreeMap<AttributeType, Vec<(usize, usize)>>,
    pub gold: BTreeMap<AttributeType, Vec<(usize, usize)>>,
}

fn token_set(spans: &[(usize, usize)]) -> BTreeSet<usize> {
    spans.iter().flat_map(|&(i, j)| i..=j).collect()
}

fn has_overlap(spans: &[(usize, usize)]) -> bool {
    let mut sorted = spans.to_vec();
    sorted.sort();
    sorted.windows(2).any(|w| w[1].0 <= w[0].1)
}

/// Token-wise scores per attribute type, summed over (post, symptom) instances.
pub fn token_extraction_metrics(
    instances: &BTreeMap<String, InstanceSpans>,
    types: &[AttributeType],
) -> Result<EvalReport, MetricsError> {
    let mut per_class: BTreeMap<String, Counts> = types
        .iter()
        .map(|t| (t.title().to_string(), Counts::default()))
        .collect();
    for (key, inst) in instances {
        for &t in types {
            let pred = inst.pred.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            let gold = inst.gold.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            if has_overlap(pred) {
                return Err(MetricsError::OverlappingSpans(key.clone()));
            }
            let c = Counts::from_sets(&token_set(pred), &token_set(gold));
            per_class.get_mut(t.title()).expect("initialized").add(c);
        }
    }
    Ok(EvalReport::from_class_counts(per_class))
}

/// One row of the per-symptom comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomRow {
    pub symptom: SymptomId,
    pub train_frequency: usize,
    pub f1_a: f64,
    pub f1_b: f64,
    pub difference: f64,
}

/// Per-symptom F1 of two models side by side, sorted by difference
/// (`a - b`), then symptom id. With `only_differing`, rows with equal F1 are
/// omitted.
pub fn per_symptom_report(
    report_a: &EvalReport,
    report_b: &EvalReport,
    train_frequencies: &BTreeMap<SymptomId, usize>,
    only_differing: bool,
) -> Vec<SymptomRow> {
    let keys: BTreeSet<&String> = report_a.per_class.keys().chain(report_b.per_class.keys()).collect();
    let mut rows: Vec<SymptomRow> = keys
        .into_iter()
        .map(|k| {
            let f1 = |r: &EvalReport| r.per_class.get(k).map_or(0.0, |p| p.f1);
            let id = SymptomId::new(k.as_str());
            let (a, b) = (f1(report_a), f1(report_b));
            SymptomRow {
                train_frequency: train_frequencies.get(&id).copied().unwrap_or(0),
                symptom: id,
                f1_a: a,
                f1_b: b,
                difference: a - b,
            }
        })
        .filter(|r| !only_differing || r.difference.abs() > 1e-12)
        .collect();
    rows.sort_by(|x, y| x.difference.total_cmp(&y.difference).then(x.symptom.cmp(&y.symptom)));
    rows
}

pub fn render_symptom_rows(rows: &[SymptomRow], name_a: &str, name_b: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<30}{:>12}{:>14}{:>14}{:>12}",
        "Symptom", "Train freq.", name_a, name_b, "Difference"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<30}{:>12}{:>14.2}{:>14.2}{:>12.2}",
            r.symptom.as_str(),
            r.train_frequency,
            r.f1_a,
            r.f1_b,
            r.difference
        );
    }
    out
}

/// Row with F1, precision and recall columns, one line per metric.
pub fn render_classification_row(method: &str, report: &EvalReport) -> String {
    format!(
        "{:<28}{:>8}{:>8}{:>8}\n{:<28}{:>8.3}{:>8.3}{:>8.3}\n",
        "Method", "F1", "Prec.", "Rec.", method, report.micro.f1, report.micro.precision, report.micro.recall
    )
}

/// Attribute table: header with the five types, then F1, recall and precision rows.
pub fn render_extraction_table(method: &str, report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<28}", "Method");
    for t in AttributeType::ALL {
        let _ = write!(out, "{:>13}", t.title());
    }
    out.push('\n');
    for (label, get) in [
        ("F1", (|p: &Prf| p.f1) as fn(&Prf) -> f64),
        ("recall", |p: &Prf| p.recall),
        ("precision", |p: &Prf| p.precision),
    ] {
        let _ = write!(out, "{:<28}", format!("{method} ({label})"));
        for t in AttributeType::ALL {
            match report.per_class.get(t.title()) {
                Some(p) => {
                    let _ = write!(out, "{:>13.2}", get(p));
                }
                None => {
                    let _ = write!(out, "{:>13}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[&str]) -> BTreeSet<SymptomId> {
        ids.iter().map(|s| SymptomId::new(*s)).collect()
    }

    fn one(pred: &[&str], gold: &[&str]) -> EvalReport {
        let p = BTreeMap::from([("p".to_string(), set(pred))]);
        let g = BTreeMap::from([("p".to_string(), set(gold))]);
        classification_metrics(&p, &g).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let r = one(&["a", "b"], &["a", "b"]);
        assert_eq!((r.micro.precision, r.micro.recall, r.micro.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn half_right() {
        let r = one(&["A", "B"], &["A", "C"]);
        assert_eq!(r.micro.counts, Counts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!((r.micro.precision, r.micro.recall, r.micro.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_prediction_degenerates_to_zero() {
        let r = one(&[], &["A"]);
        assert_eq!((r.micro.precision, r.micro.recall, r.micro.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn key_mismatch() {
        let p = BTreeMap::from([("p".to_string(), set(&[]))]);
        let g = BTreeMap::from([("q".to_string(), set(&[]))]);
        assert!(matches!(
            classification_metrics(&p, &g),
            Err(MetricsError::KeyMismatch(_))
        ));
    }

    #[test]
    fn micro_differs_from_macro() {
        // Class A: tp=9 fp=1; class B: tp=0 fn=1 fp=0.
        let mut pred = BTreeMap::new();
        let mut gold = BTreeMap::new();
        for i in 0..9 {
            pred.insert(format!("p{i}"), set(&["A"]));
            gold.insert(format!("p{i}"), set(&["A"]));
        }
        pred.insert("p9".into(), set(&["A"]));
        gold.insert("p9".into(), set(&["B"]));
        let r = classification_metrics(&pred, &gold).unwrap();
        // micro: tp=9 fp=1 fn=1 -> P=R=F1=0.9
        assert!((r.micro.f1 - 0.9).abs() < 1e-12);
        // macro: A has P=0.9 R=1 F1=18/19; B has F1=0.
        assert!((r.macro_f1() - 9.0 / 19.0).abs() < 1e-12);
    }

    #[test]
    fn token_metrics_partial() {
        let inst = InstanceSpans {
            pred: BTreeMap::from([(AttributeType::Location, vec![(5, 5)])]),
            gold: BTreeMap::from([(AttributeType::Location, vec![(5, 6)])]),
        };
        let r = token_extraction_metrics(&BTreeMap::from([("p/s".into(), inst)]), &AttributeType::ALL).unwrap();
        let loc = r.per_class["Location"];
        assert_eq!(loc.precision, 1.0);
        assert_eq!(loc.recall, 0.5);
        assert!((loc.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn token_metrics_reject_overlaps() {
        let inst = InstanceSpans {
            pred: BTreeMap::from([(AttributeType::Time, vec![(1, 3), (3, 4)])]),
            gold: BTreeMap::new(),
        };
        assert!(matches!(
            token_extraction_metrics(&BTreeMap::from([("k".into(), inst)]), &AttributeType::ALL),
            Err(MetricsError::OverlappingSpans(_))
        ));
    }

    #[test]
    fn extraction_table_layout() {
        let inst = InstanceSpans {
            pred: BTreeMap::from([(AttributeType::Action, vec![(2, 4)])]),
            gold: BTreeMap::from([(AttributeType::Action, vec![(2, 4)])]),
        };
        let r = token_extraction_metrics(&BTreeMap::from([("k".into(), inst)]), &AttributeType::ALL).unwrap();
        let table = render_extraction_table("contiguous general", &r);
        let header = table.lines().next().unwrap();
        let cols: Vec<&str> = header.split_whitespace().skip(1).collect();
        assert_eq!(cols, ["Location", "Description", "Time", "Frequency", "Action"]);
        assert_eq!(r.per_class["Action"].f1, 1.0);
    }

    #[test]
    fn per_symptom_rows() {
        let a = one(&["resp"], &["resp"]);
        let b = one(&[], &["resp"]);
        let freq = BTreeMap::from([(SymptomId::new("resp"), 0)]);
        let rows = per_symptom_report(&a, &b, &freq, true);
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].f1_a, rows[0].f1_b, rows[0].difference), (1.0, 0.0, 1.0));
        assert_eq!(rows[0].train_frequency, 0);
        assert!(per_symptom_report(&a, &a, &freq, true).is_empty());
        assert!(per_symptom_report(&a, &a, &freq, false)
            .iter()
            .all(|r| r.difference == 0.0));
    }
}
