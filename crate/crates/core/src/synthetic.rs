//! Template-based generator for annotated German forum-style posts.
//!
//! Posts mention a handful of leaf symptoms through surface variants, attach
//! typed attribute phrases to each mention and mix in distractor sentences.
//! Gold character spans are recorded while the text is assembled, so they
//! are exact by construction.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    AnnotatedPost, AttributeAnnotation, AttributeType, CharSpan, Corpus, CorpusError, Post, SymptomAnnotation,
};
use crate::ontology::{SymptomId, SymptomOntology};

/// Share of generated posts flagged as double-labeled-correct.
pub const CORRECT_FRACTION: f64 = 0.6;

const MAX_ATTRIBUTES_PER_SYMPTOM: usize = 4;

/// Leaves that appear most often in real gastrointestinal forum data.
const FREQUENT_LEAVES: [&str; 5] = [
    "diarrhea",
    "nausea",
    "upper_abdominal_pain",
    "flatulence",
    "hematochezia",
];

/// Noun-phrase surface variants for the bundled ontology's leaves.
pub fn surface_variants(id: &SymptomId) -> Option<&'static [&'static str]> {
    let v: &'static [&'static str] = match id.as_str() {
        "upper_abdominal_pain" => &[
            "Schmerzen im Oberbauch",
            "Oberbauchschmerzen",
            "ein Stechen im Oberbauch",
        ],
        "lower_abdominal_pain" => &[
            "Schmerzen im Unterbauch",
            "Unterbauchschmerzen",
            "ein Ziehen im Unterbauch",
        ],
        "headache" => &["Kopfschmerzen", "Schmerzen im Kopf", "einen dröhnenden Kopf"],
        "back_pain" => &["Rückenschmerzen", "Schmerzen im Rücken"],
        "diarrhea" => &["Durchfall", "dünnen Stuhl", "wässrigen Durchfall"],
        "nausea" => &["Übelkeit", "ein flaues Gefühl im Magen", "starke Übelkeit"],
        "vomiting" => &["Erbrechen", "Brechreiz mit Erbrechen"],
        "flatulence" => &["Blähungen", "viele Winde", "Blähungen im Darm"],
        "bloating" => &["Völlegefühl", "einen aufgeblähten Bauch"],
        "hematochezia" => &["Blut im Stuhl", "blutigen Stuhl", "hellrotes Blut im Stuhl"],
        "constipation" => &["Verstopfung", "harten Stuhl"],
        "heartburn" => &["Sodbrennen", "saures Aufstoßen"],
        "cough" => &["Husten", "einen trockenen Husten"],
        "shortness_of_breath" => &["Atemnot", "kaum Luft beim Atmen"],
        "dizziness" => &["Schwindel", "Schwindelanfälle"],
        "numbness" => &["ein Taubheitsgefühl", "Kribbeln in den Fingern"],
        "agitation" => &["innere Unruhe", "starke Nervosität"],
        "fatigue" => &["Müdigkeit", "Erschöpfung"],
        "fever" => &["Fieber", "erhöhte Temperatur"],
        _ => return None,
    };
    Some(v)
}

/// Attribute phrases per type. Lengths loosely follow forum data: actions are
/// the longest, descriptions and frequencies the shortest.
pub fn phrase_bank(kind: AttributeType) -> &'static [&'static str] {
    match kind {
        AttributeType::Time => &[
            "seit drei Wochen",
            "seit gestern",
            "seit einigen Monaten",
            "morgens",
            "nach dem Essen",
            "in der Nacht",
            "seit zwei Tagen",
            "abends",
            "seit über einem Jahr",
            "am Wochenende",
            "direkt nach dem Aufstehen",
        ],
        AttributeType::Description => &[
            "stechend",
            "krampfartig",
            "brennend",
            "sehr stark",
            "dumpf",
            "ganz leicht",
            "ziehend",
            "kaum auszuhalten",
            "unangenehm drückend",
        ],
        AttributeType::Location => &[
            "auf der linken Seite",
            "neben dem Bauchnabel",
            "rechts unten",
            "hinter dem Brustbein",
            "im ganzen Körper",
            "unter den Rippen",
            "links",
            "in der Magengegend",
        ],
        AttributeType::Frequency => &[
            "ständig",
            "immer wieder",
            "mehrmals täglich",
            "ab und zu",
            "jeden Tag",
            "meistens",
            "selten",
            "fast immer",
        ],
        AttributeType::Action => &[
            "wenn man draufdrückt",
            "wenn ich mich nach vorne beuge",
            "nach dem Treppensteigen",
            "beim tiefen Einatmen in der Nacht",
            "wenn ich lange am Schreibtisch sitze",
            "wenn ich etwas Fettiges esse",
            "beim Aufstehen am Morgen",
            "sobald ich mich hinlege",
        ],
    }
}

const ATTRIBUTE_PROBABILITY: [(AttributeType, f64); 5] = [
    (AttributeType::Time, 0.65),
    (AttributeType::Description, 0.55),
    (AttributeType::Location, 0.4),
    (AttributeType::Frequency, 0.35),
    (AttributeType::Action, 0.3),
];

const GREETINGS: [&str; 4] = ["Hallo zusammen, ", "Hallo, ", "Liebe Forumsmitglieder, ", ""];

const DISTRACTORS: [&str; 14] = [
    "Ich war schon beim Arzt.",
    "Mein Hausarzt meint, das ist nichts Schlimmes.",
    "Hat jemand Erfahrung damit?",
    "Ich nehme zurzeit keine Medikamente.",
    "Letzte Woche war ich im Urlaub.",
    "Eine Magenspiegelung hatte ich noch nicht.",
    "Ich weiss nicht so recht, was ich tun soll.",
    "Meine Mutter hatte so etwas auch.",
    "Die Blutwerte waren alle in Ordnung.",
    "Ich arbeite viel am Computer.",
    "Mir wurden Protonenhemmer verschrieben.",
    "Ich habe schon meine Ernährung umgestellt.",
    "Der Termin beim Facharzt ist erst in zwei Monaten.",
    "Sport mache ich regelmäßig.",
];

const CLOSINGS: [&str; 4] = ["Danke im Voraus!", "Viele Grüße", "Was meint ihr?", ""];

struct TextBuilder {
    text: String,
    len: usize,
}

impl TextBuilder {
    fn new() -> Self {
        TextBuilder {
            text: String::new(),
            len: 0,
        }
    }

    fn push(&mut self, s: &str) -> CharSpan {
        let start = self.len;
        self.text.push_str(s);
        self.len += s.chars().count();
        CharSpan::new(start, self.len)
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Surface variants for any leaf: the built-in lexicon, else the node's
/// own description.
fn surfaces_for(ontology: &SymptomOntology, id: &SymptomId) -> Vec<String> {
    match surface_variants(id) {
        Some(v) => v.iter().map(|s| s.to_string()).collect(),
        None => vec![ontology.node(id).expect("leaf exists").description.clone()],
    }
}

/// Generates `size` posts deterministically from `seed`.
pub fn generate_synthetic_corpus(ontology: &SymptomOntology, size: usize, seed: u64) -> Result<Corpus, CorpusError> {
    if size == 0 {
        return Err(CorpusError::EmptySynthetic);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves: Vec<SymptomId> = ontology
        .leaves()
        .into_iter()
        .filter(|l| *l != ontology.root())
        .cloned()
        .collect();
    let weighted: Vec<(SymptomId, u32)> = leaves
        .iter()
        .map(|l| {
            let w = if FREQUENT_LEAVES.contains(&l.as_str()) { 3 } else { 1 };
            (l.clone(), w)
        })
        .collect();

    let mut posts = Vec::with_capacity(size);
    for i in 0..size {
        posts.push(generate_post(ontology, &weighted, &format!("syn-{i:04}"), &mut rng));
    }

    let n_correct = (CORRECT_FRACTION * size as f64).round() as usize;
    let mut order: Vec<usize> = (0..size).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().take(n_correct) {
        posts[i].double_labeled_correct = true;
    }
    Ok(Corpus::new(posts))
}

fn pick_symptoms(weighted: &[(SymptomId, u32)], rng: &mut ChaCha8Rng) -> Vec<SymptomId> {
    const COUNTS: [usize; 7] = [1, 2, 2, 3, 3, 4, 5];
    let k = (*COUNTS.choose(rng).expect("non-empty")).min(weighted.len());
    let mut chosen: Vec<SymptomId> = Vec::with_capacity(k);
    while chosen.len() < k {
        let candidates: Vec<&(SymptomId, u32)> = weighted.iter().filter(|(id, _)| !chosen.contains(id)).collect();
        let (id, _) = candidates
            .choose_weighted(rng, |(_, w)| *w)
            .expect("at least one candidate with positive weight");
        chosen.push(id.clone());
    }
    chosen
}

fn generate_post(
    ontology: &SymptomOntology,
    weighted: &[(SymptomId, u32)],
    id: &str,
    rng: &mut ChaCha8Rng,
) -> AnnotatedPost {
    let symptoms = if weighted.is_empty() {
        Vec::new()
    } else {
        pick_symptoms(weighted, rng)
    };
    let mut b = TextBuilder::new();
    b.push(GREETINGS.choose(rng).expect("non-empty"));

    let mut annotations = Vec::new();
    let mut attributes = Vec::new();
    for (k, symptom) in symptoms.iter().enumerate() {
        if k > 0 {
            b.push(" ");
        }
        if rng.random_bool(0.4) {
            b.push(DISTRACTORS.choose(rng).expect("non-empty"));
            b.push(" ");
        }

        let mut kinds: Vec<AttributeType> = ATTRIBUTE_PROBABILITY
            .iter()
            .filter(|(_, p)| rng.random_bool(*p))
            .map(|(t, _)| *t)
            .collect();
        while kinds.len() > MAX_ATTRIBUTES_PER_SYMPTOM {
            let drop = rng.random_range(0..kinds.len());
            kinds.remove(drop);
        }
        let phrase = |t: AttributeType, rng: &mut ChaCha8Rng| -> Option<&'static str> {
            kinds
                .contains(&t)
                .then(|| *phrase_bank(t).choose(rng).expect("non-empty bank"))
        };
        let time = phrase(AttributeType::Time, rng);
        let frequency = phrase(AttributeType::Frequency, rng);
        let location = phrase(AttributeType::Location, rng);
        let description = phrase(AttributeType::Description, rng);
        let action = phrase(AttributeType::Action, rng);
        let mut attr = |kind: AttributeType, span: CharSpan| {
            attributes.push(AttributeAnnotation {
                symptom_id: symptom.clone(),
                kind,
                span,
            })
        };

        let time_first = time.is_some() && rng.random_bool(0.5);
        if time_first {
            let span = b.push(&capitalize(time.expect("checked")));
            attr(AttributeType::Time, span);
            b.push(" habe ich ");
        } else {
            b.push(
                ["Ich habe ", "Außerdem habe ich ", "Zusätzlich habe ich "]
                    .choose(rng)
                    .expect("non-empty"),
            );
        }
        if let Some(f) = frequency {
            let span = b.push(f);
            attr(AttributeType::Frequency, span);
            b.push(" ");
        }
        let surfaces = surfaces_for(ontology, symptom);
        let evidence = b.push(surfaces.choose(rng).expect("non-empty"));
        if let Some(l) = location {
            b.push(" ");
            let span = b.push(l);
            attr(AttributeType::Location, span);
        }
        if let (Some(t), false) = (time, time_first) {
            b.push(" ");
            let span = b.push(t);
            attr(AttributeType::Time, span);
        }
        if let Some(d) = description {
            b.push(", es ist ");
            let span = b.push(d);
            attr(AttributeType::Description, span);
        }
        if let Some(a) = action {
            b.push(", ");
            let span = b.push(a);
            attr(AttributeType::Action, span);
        }
        b.push(".");
        annotations.push(SymptomAnnotation {
            symptom_id: symptom.clone(),
            evidence: vec![evidence],
        });
    }
    if rng.random_bool(0.5) {
        b.push(" ");
        b.push(DISTRACTORS.choose(rng).expect("non-empty"));
    }
    let closing = CLOSINGS.choose(rng).expect("non-empty");
    if !closing.is_empty() {
        b.push(" ");
        b.push(closing);
    }
    if b.text.trim().is_empty() {
        b.push(DISTRACTORS[0]);
    }

    AnnotatedPost {
        post: Post {
            id: id.to_string(),
            text: b.text,
        },
        symptoms: annotations,
        attributes,
        double_labeled_correct: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{char_slice, corpus_stats};
    use crate::fixtures;

    #[test]
    fn single_post_is_valid() {
        let o = fixtures::ontology();
        let c = generate_synthetic_corpus(&o, 1, 0).unwrap();
        assert_eq!(c.len(), 1);
        c.posts[0].validate(Some(&o)).unwrap();
    }

    #[test]
    fn zero_size_is_rejected() {
        let o = fixtures::ontology();
        assert!(matches!(
            generate_synthetic_corpus(&o, 0, 0),
            Err(CorpusError::EmptySynthetic)
        ));
    }

    #[test]
    fn deterministic() {
        let o = fixtures::ontology();
        let a = generate_synthetic_corpus(&o, 30, 5).unwrap();
        let b = generate_synthetic_corpus(&o, 30, 5).unwrap();
        assert_eq!(a.to_jsonl_string(), b.to_jsonl_string());
        let c = generate_synthetic_corpus(&o, 30, 6).unwrap();
        assert_ne!(a.to_jsonl_string(), c.to_jsonl_string());
    }

    #[test]
    fn gold_spans_match_recorded_phrases() {
        let o = fixtures::ontology();
        let c = generate_synthetic_corpus(&o, 100, 11).unwrap();
        for p in &c.posts {
            p.validate(Some(&o)).unwrap();
            assert!((1..=5).contains(&p.symptoms.len()));
            for s in &p.symptoms {
                assert!(o.is_leaf(&s.symptom_id).unwrap());
                let text = char_slice(p.text(), s.evidence[0]);
                assert!(surface_variants(&s.symptom_id).unwrap().contains(&text), "{text}");
                assert!(p.attributes_of(&s.symptom_id).count() <= MAX_ATTRIBUTES_PER_SYMPTOM);
            }
            for a in &p.attributes {
                let text = char_slice(p.text(), a.span);
                let bank = phrase_bank(a.kind);
                assert!(
                    bank.iter().any(|b| *b == text || capitalize(b) == text),
                    "{text} not in {:?} bank",
                    a.kind
                );
            }
        }
        let correct = c.posts.iter().filter(|p| p.double_labeled_correct).count();
        assert_eq!(correct, 60);
    }

    #[test]
    fn attribute_distribution_shape() {
        let o = fixtures::ontology();
        let stats = corpus_stats(&generate_synthetic_corpus(&o, 400, 1).unwrap());
        let get = |t| stats.attributes.iter().find(|(k, _)| *k == t).unwrap().1.clone();
        let time = get(AttributeType::Time).total;
        let desc = get(AttributeType::Description).total;
        for t in [AttributeType::Location, AttributeType::Frequency, AttributeType::Action] {
            assert!(time > get(t).total && desc > get(t).total);
        }
        let action = get(AttributeType::Action).mean_length;
        for t in AttributeType::ALL.into_iter().filter(|t| *t != AttributeType::Action) {
            assert!(action > get(t).mean_length);
        }
        assert!((4.0..=6.0).contains(&action), "action mean {action}");
    }

    #[test]
    fn unknown_leaves_fall_back_to_description() {
        let o = SymptomOntology::from_toml_str(
            "[[node]]\nid = \"r\"\nname = \"R\"\ndescription = \"alles\"\n\n[[node]]\nid = \"x\"\nname = \"X\"\ndescription = \"ein seltsames Gefühl\"\nparent = \"r\"\n",
        )
        .unwrap();
        let c = generate_synthetic_corpus(&o, 3, 2).unwrap();
        for p in &c.posts {
            assert_eq!(char_slice(p.text(), p.symptoms[0].evidence[0]), "ein seltsames Gefühl");
        }
    }
}
