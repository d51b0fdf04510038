use std::time::Instant;

use anamnesis_core::corpus::AttributeType;
use anamnesis_core::decoding::{decode_contiguous, decode_start_end, spans_to_output, TokenSpan};
use anamnesis_core::encoding::encode_pair;
use anamnesis_core::tokenizer::WordPieceTokenizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TAU: f64 = 0.7;
const FACTOR: f64 = 2.0 / 3.0;

/// Every (i, j) pair checked against the acceptance rules one by one, then
/// greedy acceptance by (score desc, start asc, length asc).
fn brute_force(ps: &[f32], pe: &[f32], tau: f64, factor: f64, cap: usize) -> Vec<(usize, usize, f64)> {
    let n = ps.len();
    let mut cands = Vec::new();
    for i in 0..n {
        for j in i..n {
            let p_range = (ps[i] as f64 + pe[j] as f64) / 2.0;
            let ok_interior = (i + 1..j).all(|k| factor * p_range > ps[k] as f64 && factor * p_range > pe[k] as f64);
            if p_range > tau && span_len(i, j) <= cap && ok_interior {
                cands.push((i, j, p_range));
            }
        }
    }
    cands.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(a.0.cmp(&b.0))
            .then((a.1 - a.0).cmp(&(b.1 - b.0)))
    });
    let mut taken: Vec<(usize, usize, f64)> = Vec::new();
    for c in cands {
        if taken.iter().all(|t| c.1 < t.0 || t.1 < c.0) {
            taken.push(c);
        }
    }
    taken.sort_by_key(|t| t.0);
    taken
}

/// Probabilities with frequent exact ties and high values, so that the
/// interior rule and the overlap resolution are exercised.
fn random_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| match rng.random_range(0..4) {
            0 => 0.0,
            1 => rng.random_range(0..=20) as f32 / 20.0,
            2 => rng.random_range(0.6f32..1.0),
            _ => rng.random::<f32>(),
        })
        .collect()
}

fn triples(spans: &[TokenSpan]) -> Vec<(usize, usize, f64)> {
    spans.iter().map(|s| (s.start, s.end, s.score)).collect()
}

#[test]
fn start_end_matches_brute_force() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..1000 {
        let n = rng.random_range(1..=64);
        let ps = random_vector(&mut rng, n);
        let pe = random_vector(&mut rng, n);
        let cap = [1, 3, 12, 64][case % 4];
        let got = decode_start_end(&ps, &pe, TAU, FACTOR, cap).unwrap();
        assert_eq!(
            triples(&got),
            brute_force(&ps, &pe, TAU, FACTOR, cap),
            "case {case}: {ps:?} {pe:?}"
        );
        for w in got.windows(2) {
            assert!(w[0].end < w[1].start, "overlap in case {case}");
        }
    }
    assert!(started.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn contiguous_matches_mask_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.random_range(0..=64);
        let p = random_vector(&mut rng, n);
        let mask: Vec<bool> = p.iter().map(|&x| x as f64 > TAU).collect();
        let mut expected = Vec::new();
        let mut k = 0;
        while k < n {
            if mask[k] {
                let s = k;
                while k < n && mask[k] {
                    k += 1;
                }
                expected.push((s, k - 1));
            } else {
                k += 1;
            }
        }
        let got: Vec<(usize, usize)> = decode_contiguous(&p, TAU).iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(got, expected);
        // Raising the threshold only removes covered tokens.
        let covered = |spans: &[TokenSpan]| -> Vec<usize> { spans.iter().flat_map(|s| s.start..=s.end).collect() };
        let low = covered(&decode_contiguous(&p, TAU));
        let high = covered(&decode_contiguous(&p, 0.9));
        assert!(high.iter().all(|k| low.contains(k)));
    }
}

#[test]
fn start_end_is_deterministic_under_ties() {
    let ps = [0.8f32, 0.8, 0.8, 0.8];
    let pe = [0.8f32, 0.8, 0.8, 0.8];
    let a = decode_start_end(&ps, &pe, TAU, FACTOR, 12).unwrap();
    let b = decode_start_end(&ps, &pe, TAU, FACTOR, 12).unwrap();
    assert_eq!(a, b);
    assert_eq!(triples(&a), brute_force(&ps, &pe, TAU, FACTOR, 12));
}

fn table_pair() -> (anamnesis_core::encoding::TokenizedPair, &'static str, usize) {
    let text = "I have pain in my right knee and shin";
    let tok = WordPieceTokenizer::build(&[text, "Schmerzen"], 1);
    let pair = encode_pair("Schmerzen", text, &tok, 64).unwrap();
    let offset = pair.post_range().unwrap().0;
    (pair, text, offset)
}

#[test]
fn table_rows_decode_to_right_knee_and_shin() {
    let (pair, text, off) = table_pair();
    let n = pair.len();
    let row = |marks: &[usize]| {
        let mut v = vec![0.0f32; n];
        for &m in marks {
            v[off + m] = 1.0;
        }
        v
    };
    let inside = decode_contiguous(&row(&[5, 6, 8]), TAU);
    let spans: Vec<_> = inside.into_iter().map(|s| (AttributeType::Location, s)).collect();
    let texts: Vec<String> = spans_to_output(&pair, text, &spans)
        .unwrap()
        .into_iter()
        .map(|p| p.text)
        .collect();
    let mut sorted = texts.clone();
    sorted.sort();
    assert_eq!(sorted, vec!["right knee".to_string(), "shin".to_string()]);

    let se = decode_start_end(&row(&[5, 8]), &row(&[6, 8]), TAU, FACTOR, 12).unwrap();
    assert_eq!(
        se.iter().map(|s| (s.start - off, s.end - off)).collect::<Vec<_>>(),
        vec![(5, 6), (8, 8)]
    );
}

#[test]
fn mismatched_start_end_case_yields_two_spans() {
    let ps = [0.9f32, 0.0, 0.9, 0.0];
    let pe = [0.0f32, 0.9, 0.0, 0.9];
    let out = decode_start_end(&ps, &pe, TAU, FACTOR, 12).unwrap();
    let got: Vec<(usize, usize)> = out.iter().map(|s| (s.start, s.end)).collect();
    assert_eq!(got, vec![(0, 1), (2, 3)]);
    for s in &out {
        assert!((s.score - 0.9).abs() < 1e-6);
    }
}

fn span_len(i: usize, j: usize) -> usize {
    j - i + 1
}
