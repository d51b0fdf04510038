//! Positive and negative (description, post) examples for the symptom-query
//! classifier, and the curriculum that makes negatives harder over time.
//!
//! Hardness is measured as the smallest tree distance between a negative
//! symptom and any gold symptom of the post: siblings of a gold symptom are
//! harder to reject than symptoms in a distant branch.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AnnotatedPost;
use crate::ontology::{OntologyError, SymptomId, SymptomOntology};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplingError {
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error("post `{0}` has no positive examples")]
    NoPositives(String),
    #[error("no symptom outside the label closure of post `{0}` can serve as a negative")]
    NoNegatives(String),
    #[error("curriculum has no stages")]
    NoStages,
    #[error("curriculum distances must decrease strictly and end at 1, got {0:?}")]
    BadDistances(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationExample {
    pub post_id: String,
    pub symptom_id: SymptomId,
    pub description: String,
    pub label: u8,
    /// Minimum tree distance to a gold symptom; 0 for positives.
    pub difficulty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub index: usize,
    /// Smallest admissible distance between a negative and the gold symptoms.
    pub min_distance: usize,
}

impl CurriculumStage {
    /// No distance constraint beyond being outside the label closure.
    pub const FINAL: CurriculumStage = CurriculumStage {
        index: 0,
        min_distance: 1,
    };
}

/// Stage distance list plus the fraction of epochs each stage occupies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub distances: Vec<usize>,
    /// Relative epoch share per stage; equal bands when empty.
    pub epoch_fractions: Vec<f64>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            distances: vec![4, 3, 2, 1],
            epoch_fractions: Vec::new(),
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.distances.is_empty() {
            return Err(SamplingError::NoStages);
        }
        let decreasing = self.distances.windows(2).all(|w| w[0] > w[1]);
        if !decreasing || *self.distances.last().expect("non-empty") != 1 {
            return Err(SamplingError::BadDistances(self.distances.clone()));
        }
        Ok(())
    }

    pub fn stages(&self) -> Vec<CurriculumStage> {
        self.distances
            .iter()
            .enumerate()
            .map(|(index, &min_distance)| CurriculumStage { index, min_distance })
            .collect()
    }
}

/// Stage active in `epoch` (0-based): equal-width epoch bands, one per stage,
/// unless `fractions` gives explicit relative band widths.
pub fn curriculum_schedule(
    epoch: usize,
    total_epochs: usize,
    stages: &[CurriculumStage],
    fractions: &[f64],
) -> Result<CurriculumStage, SamplingError> {
    if stages.is_empty() {
        return Err(SamplingError::NoStages);
    }
    let total = total_epochs.max(1);
    let epoch = epoch.min(total - 1);
    let index = if fractions.len() == stages.len() && fractions.iter().all(|f| *f > 0.0) {
        let sum: f64 = fractions.iter().sum();
        let mut acc = 0.0;
        let position = epoch as f64 / total as f64;
        let mut idx = stages.len() - 1;
        for (k, f) in fractions.iter().enumerate() {
            acc += f / sum;
            if position < acc - 1e-12 {
                idx = k;
                break;
            }
        }
        idx
    } else {
        epoch * stages.len() / total
    };
    Ok(stages[index.min(stages.len() - 1)])
}

/// Positive examples for a post: every symptom in the label closure of the
/// gold symptoms (or only the gold symptoms with `closure = false`) with its
/// canonical description, plus one example per augmented description when
/// `use_augmented` is set.
pub fn positives_for_post(
    post: &AnnotatedPost,
    ontology: &SymptomOntology,
    pool: &BTreeMap<SymptomId, Vec<String>>,
    use_augmented: bool,
    closure: bool,
) -> Result<Vec<ClassificationExample>, SamplingError> {
    let targets: BTreeSet<SymptomId> = if closure {
        ontology.label_closure(post.gold_symptoms())?
    } else {
        for s in post.gold_symptoms() {
            ontology.node(s)?;
        }
        post.gold_symptoms().cloned().collect()
    };
    let mut out = Vec::new();
    for s in targets {
        let node = ontology.node(&s)?;
        out.push(ClassificationExample {
            post_id: post.id().to_string(),
            symptom_id: s.clone(),
            description: node.description.clone(),
            label: 1,
            difficulty: 0.0,
        });
        if use_augmented {
            for alt in pool.get(&s).into_iter().flatten() {
                out.push(ClassificationExample {
                    post_id: post.id().to_string(),
                    symptom_id: s.clone(),
                    description: alt.clone(),
                    label: 1,
                    difficulty: 0.0,
                });
            }
        }
    }
    Ok(out)
}

/// Symptoms eligible as negatives for `post` under `min_distance`, with the
/// distance constraint relaxed to the largest satisfiable value.
pub fn eligible_negatives(
    post: &AnnotatedPost,
    ontology: &SymptomOntology,
    min_distance: usize,
    exclude: &BTreeSet<SymptomId>,
) -> Result<Vec<(SymptomId, usize)>, SamplingError> {
    let gold: Vec<&SymptomId> = post.gold_symptoms().collect();
    let closure = ontology.label_closure(gold.iter().copied())?;
    let mut candidates = Vec::new();
    for id in ontology.ids() {
        if closure.contains(id) || exclude.contains(id) {
            continue;
        }
        let d = ontology.min_distance(id, gold.iter().copied())?.unwrap_or(usize::MAX);
        candidates.push((id.clone(), d));
    }
    if candidates.is_empty() {
        return Err(SamplingError::NoNegatives(post.id().to_string()));
    }
    let best = candidates.iter().map(|(_, d)| *d).max().expect("non-empty");
    let bound = min_distance.min(best);
    Ok(candidates.into_iter().filter(|(_, d)| *d >= bound).collect())
}

/// Draws one negative per positive, uniformly (with replacement) among the
/// eligible symptoms of the current stage. With `use_augmented`, the
/// description of a negative is drawn from its canonical description and its
/// augmentation pool entries.
#[allow(clippy::too_many_arguments)]
pub fn sample_negatives<R: Rng + ?Sized>(
    post: &AnnotatedPost,
    ontology: &SymptomOntology,
    stage: CurriculumStage,
    n_positives: usize,
    pool: &BTreeMap<SymptomId, Vec<String>>,
    use_augmented: bool,
    exclude: &BTreeSet<SymptomId>,
    rng: &mut R,
) -> Result<Vec<ClassificationExample>, SamplingError> {
    if n_positives == 0 {
        return Err(SamplingError::NoPositives(post.id().to_string()));
    }
    let eligible = eligible_negatives(post, ontology, stage.min_distance, exclude)?;
    let mut out = Vec::with_capacity(n_positives);
    for _ in 0..n_positives {
        let (id, d) = eligible.choose(rng).expect("eligible set is non-empty");
        let node = ontology.node(id)?;
        let description = match pool.get(id) {
            Some(alts) if use_augmented && !alts.is_empty() => {
                let k = rng.random_range(0..=alts.len());
                if k == 0 {
                    node.description.clone()
                } else {
                    alts[k - 1].clone()
                }
            }
            _ => node.description.clone(),
        };
        out.push(ClassificationExample {
            post_id: post.id().to_string(),
            symptom_id: id.clone(),
            description,
            label: 0,
            difficulty: *d as f64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Post, SymptomAnnotation};
    use crate::fixtures;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn post_with(gold: &[&str]) -> AnnotatedPost {
        AnnotatedPost {
            post: Post {
                id: "p".into(),
                text: "Text".into(),
            },
            symptoms: gold
                .iter()
                .map(|g| SymptomAnnotation {
                    symptom_id: SymptomId::new(*g),
                    evidence: vec![],
                })
                .collect(),
            attributes: vec![],
            double_labeled_correct: true,
        }
    }

    #[test]
    fn closure_positives() {
        let o = fixtures::ontology();
        let pos = positives_for_post(&post_with(&["upper_abdominal_pain"]), &o, &BTreeMap::new(), false, true).unwrap();
        assert_eq!(pos.len(), 4);
        assert!(pos.iter().all(|e| e.label == 1));
        let with_empty_pool =
            positives_for_post(&post_with(&["upper_abdominal_pain"]), &o, &BTreeMap::new(), true, true).unwrap();
        assert_eq!(pos, with_empty_pool);
        let leaf_only = positives_for_post(
            &post_with(&["upper_abdominal_pain"]),
            &o,
            &BTreeMap::new(),
            false,
            false,
        )
        .unwrap();
        assert_eq!(leaf_only.len(), 1);
    }

    #[test]
    fn augmented_positives() {
        let o = fixtures::ontology();
        let s = SymptomId::new("fever");
        let pool = BTreeMap::from([(
            s.clone(),
            vec!["Fieber".to_string(), "Temperatur".into(), "heiß".into()],
        )]);
        let pos = positives_for_post(&post_with(&["fever"]), &o, &pool, true, true).unwrap();
        let for_s: Vec<_> = pos.iter().filter(|e| e.symptom_id == s).collect();
        assert_eq!(for_s.len(), 4);
        assert_eq!(for_s[0].description, o.node(&s).unwrap().description);
        // Plus the root from the closure.
        assert_eq!(pos.len(), 5);
    }

    #[test]
    fn negatives_respect_distance_and_closure() {
        let o = fixtures::ontology();
        let post = post_with(&["upper_abdominal_pain"]);
        let closure = o.label_closure(post.gold_symptoms()).unwrap();
        let stage = CurriculumStage {
            index: 1,
            min_distance: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let neg = sample_negatives(
            &post,
            &o,
            stage,
            200,
            &BTreeMap::new(),
            false,
            &BTreeSet::new(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(neg.len(), 200);
        assert!(neg.iter().all(|e| !closure.contains(&e.symptom_id)));
        assert!(neg.iter().all(|e| e.symptom_id.as_str() != "lower_abdominal_pain"));
        assert!(neg.iter().all(|e| e.difficulty >= 3.0));
    }

    #[test]
    fn final_stage_allows_siblings() {
        let o = fixtures::ontology();
        let post = post_with(&["upper_abdominal_pain"]);
        let elig = eligible_negatives(&post, &o, 1, &BTreeSet::new()).unwrap();
        assert!(elig
            .iter()
            .any(|(id, d)| id.as_str() == "lower_abdominal_pain" && *d == 2));
        assert_eq!(elig.len(), o.len() - 4);
    }

    #[test]
    fn distance_constraint_is_relaxed() {
        let o = fixtures::ontology();
        let post = post_with(&["upper_abdominal_pain"]);
        let far = eligible_negatives(&post, &o, 100, &BTreeSet::new()).unwrap();
        let max = far.iter().map(|(_, d)| *d).max().unwrap();
        assert!(!far.is_empty());
        assert!(far.iter().all(|(_, d)| *d == max));
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let o = fixtures::ontology();
        let post = post_with(&["nausea", "headache"]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_negatives(
                &post,
                &o,
                CurriculumStage::FINAL,
                12,
                &BTreeMap::new(),
                false,
                &BTreeSet::new(),
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn no_negatives_when_everything_is_positive() {
        let o = SymptomOntology::from_toml_str(
            "[[node]]\nid = \"r\"\nname = \"R\"\ndescription = \"d\"\n[[node]]\nid = \"a\"\nname = \"A\"\ndescription = \"d\"\nparent = \"r\"\n",
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_negatives(
                &post_with(&["a"]),
                &o,
                CurriculumStage::FINAL,
                2,
                &BTreeMap::new(),
                false,
                &BTreeSet::new(),
                &mut rng
            ),
            Err(SamplingError::NoNegatives(_))
        ));
    }

    #[test]
    fn schedule_bands() {
        let cfg = CurriculumConfig::default();
        let stages = cfg.stages();
        let m = |e| curriculum_schedule(e, 40, &stages, &[]).unwrap().min_distance;
        assert_eq!(
            (m(0), m(9), m(10), m(19), m(20), m(29), m(30), m(39)),
            (4, 4, 3, 3, 2, 2, 1, 1)
        );
        let one = [CurriculumStage::FINAL];
        assert!((0..7).all(|e| curriculum_schedule(e, 7, &one, &[]).unwrap() == CurriculumStage::FINAL));
        assert_eq!(curriculum_schedule(0, 4, &[], &[]), Err(SamplingError::NoStages));
        // Explicit fractions: first stage takes half the epochs.
        let f = [2.0, 1.0, 0.5, 0.5];
        let m = |e| curriculum_schedule(e, 40, &stages, &f).unwrap().min_distance;
        assert_eq!((m(19), m(20), m(29), m(30), m(35)), (4, 3, 3, 2, 1));
    }

    #[test]
    fn schedule_is_monotone() {
        let stages = CurriculumConfig::default().stages();
        for total in 4..50 {
            let idx: Vec<usize> = (0..total)
                .map(|e| curriculum_schedule(e, total, &stages, &[]).unwrap().index)
                .collect();
            assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            assert_eq!(*idx.last().unwrap(), 3);
        }
    }

    #[test]
    fn curriculum_config_validation() {
        assert!(CurriculumConfig::default().validate().is_ok());
        let bad = CurriculumConfig {
            distances: vec![3, 3, 1],
            epoch_fractions: vec![],
        };
        assert!(bad.validate().is_err());
        let bad = CurriculumConfig {
            distances: vec![4, 2],
            epoch_fractions: vec![],
        };
        assert!(bad.validate().is_err());
    }
}
