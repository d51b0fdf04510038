use std::collections::{BTreeSet, HashMap};

use anamnesis_core::fixtures;
use anamnesis_core::ontology::{OntologyError, SymptomId, SymptomNode, SymptomOntology};
use proptest::prelude::*;

fn id(s: &str) -> SymptomId {
    SymptomId::new(s)
}

/// Random tree: node `i > 0` hangs below a uniformly chosen earlier node.
fn random_tree(parents: &[usize]) -> (SymptomOntology, Vec<Option<usize>>) {
    let n = parents.len() + 1;
    let mut links = vec![None];
    let mut nodes = vec![SymptomNode {
        id: id("n0"),
        name: "n0".into(),
        description: "Wurzel".into(),
        parent: None,
    }];
    for i in 1..n {
        let p = parents[i - 1] % i;
        links.push(Some(p));
        nodes.push(SymptomNode {
            id: id(&format!("n{i}")),
            name: format!("n{i}"),
            description: format!("Beschwerde {i}"),
            parent: Some(id(&format!("n{p}"))),
        });
    }
    (SymptomOntology::from_nodes(nodes).unwrap(), links)
}

fn walk_up(links: &[Option<usize>], mut i: usize) -> Vec<usize> {
    let mut path = vec![i];
    while let Some(p) = links[i] {
        path.push(p);
        i = p;
    }
    path
}

fn oracle_distance(links: &[Option<usize>], a: usize, b: usize) -> usize {
    let pa = walk_up(links, a);
    let pb = walk_up(links, b);
    let depth_in_a: HashMap<usize, usize> = pa.iter().enumerate().map(|(d, &n)| (n, d)).collect();
    let (db, lca) = pb.iter().enumerate().find(|(_, n)| depth_in_a.contains_key(n)).unwrap();
    depth_in_a[lca] + db
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closure_matches_ancestor_walk(parents in prop::collection::vec(0usize..1000, 49), picks in prop::collection::vec(0usize..50, 0..8)) {
        let (onto, links) = random_tree(&parents);
        let set: Vec<SymptomId> = picks.iter().map(|&i| id(&format!("n{i}"))).collect();
        let closure = onto.label_closure(&set).unwrap();
        let expected: BTreeSet<SymptomId> = picks
            .iter()
            .flat_map(|&i| walk_up(&links, i))
            .map(|i| id(&format!("n{i}")))
            .collect();
        prop_assert_eq!(&closure, &expected);
        prop_assert_eq!(onto.label_closure(&closure).unwrap(), closure);
    }

    #[test]
    fn distance_matches_lca_oracle(parents in prop::collection::vec(0usize..1000, 49), a in 0usize..50, b in 0usize..50) {
        let (onto, links) = random_tree(&parents);
        let (ia, ib) = (id(&format!("n{a}")), id(&format!("n{b}")));
        let d = onto.hierarchy_distance(&ia, &ib).unwrap();
        prop_assert_eq!(d, oracle_distance(&links, a, b));
        prop_assert_eq!(d, onto.hierarchy_distance(&ib, &ia).unwrap());
    }

    #[test]
    fn ancestors_are_the_closure_minus_self(parents in prop::collection::vec(0usize..1000, 49), a in 0usize..50) {
        let (onto, links) = random_tree(&parents);
        let ancestors = onto.ancestors(&id(&format!("n{a}"))).unwrap();
        let expected: Vec<SymptomId> = walk_up(&links, a).into_iter().skip(1).map(|i| id(&format!("n{i}"))).collect();
        prop_assert_eq!(ancestors, expected);
    }
}

#[test]
fn fixture_hierarchy_chain() {
    let onto = fixtures::ontology();
    assert_eq!(
        onto.ancestors(&id("upper_abdominal_pain")).unwrap(),
        vec![id("abdominal_pain"), id("pain"), id("general_symptom")]
    );
    assert!(onto.ancestors(onto.root()).unwrap().is_empty());
    assert_eq!(onto.ancestors(&id("pain")).unwrap(), vec![id("general_symptom")]);
    let closure = onto.label_closure([&id("upper_abdominal_pain")]).unwrap();
    assert_eq!(closure.len(), 4);
    assert!(onto.label_closure(std::iter::empty::<&SymptomId>()).unwrap().is_empty());
}

#[test]
fn fixture_distances() {
    let onto = fixtures::ontology();
    let d = |a: &str, b: &str| onto.hierarchy_distance(&id(a), &id(b)).unwrap();
    assert_eq!(d("headache", "headache"), 0);
    assert_eq!(d("upper_abdominal_pain", "lower_abdominal_pain"), 2);
    assert_eq!(d("upper_abdominal_pain", "headache"), 3);
}

#[test]
fn cyclic_fixture_is_rejected() {
    let err = SymptomOntology::from_toml_str(fixtures::CYCLIC_ONTOLOGY_TOML).unwrap_err();
    assert!(matches!(err, OntologyError::Cycle(_)), "{err:?}");
}

#[test]
fn toml_round_trip_preserves_hash() {
    let onto = fixtures::ontology();
    let back = SymptomOntology::from_toml_str(&onto.to_toml_string()).unwrap();
    assert_eq!(back.content_hash(), onto.content_hash());
    assert_eq!(back.len(), onto.len());
}
