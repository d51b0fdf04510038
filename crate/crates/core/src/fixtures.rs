//! Ontology documents bundled with the crate.

use crate::ontology::SymptomOntology;

/// Gastrointestinal-focused symptom hierarchy used as the default ontology.
pub const ONTOLOGY_TOML: &str = include_str!("../fixtures/ontology.toml");

/// A document with a parent cycle; fails validation.
pub const CYCLIC_ONTOLOGY_TOML: &str = include_str!("../fixtures/cyclic_ontology.toml");

pub fn ontology() -> SymptomOntology {
    SymptomOntology::from_toml_str(ONTOLOGY_TOML).expect("bundled ontology is valid")
}
