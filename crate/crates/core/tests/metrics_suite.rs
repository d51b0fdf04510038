use std::collections::{BTreeMap, BTreeSet};

use anamnesis_core::corpus::AttributeType;
use anamnesis_core::metrics::{
    classification_metrics, per_symptom_report, render_extraction_table, token_extraction_metrics, InstanceSpans,
};
use anamnesis_core::ontology::SymptomId;

fn set(ids: &[&str]) -> BTreeSet<SymptomId> {
    ids.iter().map(|s| SymptomId::new(*s)).collect()
}

fn one(
    pred: &[&str],
    gold: &[&str],
) -> (
    BTreeMap<String, BTreeSet<SymptomId>>,
    BTreeMap<String, BTreeSet<SymptomId>>,
) {
    (
        BTreeMap::from([("p".to_string(), set(pred))]),
        BTreeMap::from([("p".to_string(), set(gold))]),
    )
}

#[test]
fn identical_sets_score_one() {
    let (p, g) = one(&["a", "b"], &["a", "b"]);
    let r = classification_metrics(&p, &g).unwrap();
    assert_eq!((r.micro.precision, r.micro.recall, r.micro.f1), (1.0, 1.0, 1.0));
}

#[test]
fn one_each_of_tp_fp_fn_gives_one_half() {
    let (p, g) = one(&["a", "b"], &["a", "c"]);
    let r = classification_metrics(&p, &g).unwrap();
    assert_eq!((r.micro.counts.tp, r.micro.counts.fp, r.micro.counts.fn_), (1, 1, 1));
    assert_eq!((r.micro.precision, r.micro.recall, r.micro.f1), (0.5, 0.5, 0.5));
}

#[test]
fn empty_prediction_scores_zero() {
    let (p, g) = one(&[], &["a"]);
    let r = classification_metrics(&p, &g).unwrap();
    assert_eq!((r.micro.precision, r.micro.recall, r.micro.f1), (0.0, 0.0, 0.0));
}

#[test]
fn micro_and_macro_differ() {
    // Class a: 9 tp over nine posts; class b: one fp on a tenth post.
    let mut pred = BTreeMap::new();
    let mut gold = BTreeMap::new();
    for i in 0..9 {
        pred.insert(format!("p{i}"), set(&["a"]));
        gold.insert(format!("p{i}"), set(&["a"]));
    }
    pred.insert("p9".into(), set(&["b"]));
    gold.insert("p9".into(), set(&[]));
    let r = classification_metrics(&pred, &gold).unwrap();
    // micro: tp=9, fp=1, fn=0 -> P=0.9, R=1, F1=18/19.
    assert!((r.micro.f1 - 18.0 / 19.0).abs() < 1e-12);
    // macro: mean of F1(a)=1 and F1(b)=0.
    assert!((r.macro_f1() - 0.5).abs() < 1e-12);
}

#[test]
fn token_metrics_hand_count() {
    let mut inst = InstanceSpans::default();
    inst.gold.insert(AttributeType::Location, vec![(5, 6)]);
    inst.pred.insert(AttributeType::Location, vec![(5, 5)]);
    inst.gold.insert(AttributeType::Time, vec![(1, 2)]);
    inst.pred.insert(AttributeType::Time, vec![(1, 2)]);
    let map = BTreeMap::from([("x".to_string(), inst)]);
    let r = token_extraction_metrics(&map, &AttributeType::ALL).unwrap();
    let loc = &r.per_class["Location"];
    assert_eq!((loc.precision, loc.recall), (1.0, 0.5));
    assert!((loc.f1 - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(r.per_class["Time"].f1, 1.0);
}

#[test]
fn extraction_table_has_the_five_columns_in_order() {
    let map = BTreeMap::from([("x".to_string(), InstanceSpans::default())]);
    let r = token_extraction_metrics(&map, &AttributeType::ALL).unwrap();
    let table = render_extraction_table("Contiguous (general)", &r);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(
        header,
        ["Method", "Location", "Description", "Time", "Frequency", "Action"]
    );
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn per_symptom_rows_reflect_unseen_symptom_win() {
    let (pa, g) = one(&["respiratory_complaints"], &["respiratory_complaints"]);
    let (pb, _) = one(&[], &["respiratory_complaints"]);
    let a = classification_metrics(&pa, &g).unwrap();
    let b = classification_metrics(&pb, &g).unwrap();
    let freqs = BTreeMap::from([(SymptomId::new("respiratory_complaints"), 0)]);
    let rows = per_symptom_report(&a, &b, &freqs, true);
    assert_eq!(rows.len(), 1);
    assert_eq!(
        (rows[0].train_frequency, rows[0].f1_a, rows[0].f1_b, rows[0].difference),
        (0, 1.0, 0.0, 1.0)
    );
    assert!(per_symptom_report(&a, &a, &freqs, true).is_empty());
    assert!(per_symptom_report(&a, &a, &freqs, false)
        .iter()
        .all(|r| r.difference == 0.0));
}
