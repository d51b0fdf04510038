use anamnesis_core::corpus::char_slice;
use anamnesis_core::encoding::{align_spans_to_tokens, encode_pair, tokens_to_char_span};
use anamnesis_core::fixtures;
use anamnesis_core::synthetic::generate_synthetic_corpus;
use anamnesis_core::tokenizer::WordPieceTokenizer;

#[test]
fn aligned_spans_round_trip_on_500_posts() {
    let onto = fixtures::ontology();
    let corpus = generate_synthetic_corpus(&onto, 500, 11).unwrap();
    let texts: Vec<&str> = corpus.posts.iter().map(|p| p.text()).collect();
    let tok = WordPieceTokenizer::build(&texts, 1);
    let (mut aligned, mut exact, mut total, mut contained) = (0, 0, 0, 0);
    for post in &corpus.posts {
        let pair = encode_pair("Beschwerden", post.text(), &tok, 512).unwrap();
        assert!(!pair.truncated);
        let targets = align_spans_to_tokens(&pair, &post.attributes);
        assert_eq!(targets.dropped, 0);
        for a in &post.attributes {
            total += 1;
            let spans = &targets.of(a.kind).spans;
            // The annotation's own token range: the unique one covering it.
            let (i, j) = *spans
                .iter()
                .find(|&&(i, j)| {
                    let c = tokens_to_char_span(&pair, i, j).unwrap();
                    c.start <= a.span.start && a.span.end <= c.end
                })
                .expect("every span is aligned");
            let recovered = tokens_to_char_span(&pair, i, j).unwrap();
            let surface = char_slice(post.text(), a.span);
            if char_slice(post.text(), recovered).contains(surface) {
                contained += 1;
            }
            let on_boundary = |pos: usize, start: bool| {
                pair.char_offsets
                    .iter()
                    .flatten()
                    .any(|o| if start { o.start == pos } else { o.end == pos })
            };
            if on_boundary(a.span.start, true) && on_boundary(a.span.end, false) {
                aligned += 1;
                if recovered == a.span {
                    exact += 1;
                }
            }
        }
    }
    assert!(total > 500);
    assert_eq!(exact, aligned, "{exact}/{aligned} aligned spans round-tripped");
    assert_eq!(contained, total);
}
