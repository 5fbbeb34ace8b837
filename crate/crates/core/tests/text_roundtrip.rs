use bloop::text::{detokenize, tokenize, Document, TokenId, VocabMode, Vocabulary, NEWLINE_TOKEN};
use proptest::prelude::*;

fn text_strategy() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        4 => "[a-zA-Z0-9éß]{1,6}",
        2 => Just(" ".to_string()),
        1 => prop::sample::select(vec![".", ",", ";", ":", "!", "?", "\"", "'", "(", ")"]).prop_map(str::to_owned),
        1 => prop::sample::select(vec!["\n", " \n ", "\n\n", "\t", "  "]).prop_map(str::to_owned),
    ];
    prop::collection::vec(piece, 0..40).prop_map(|v| v.concat())
}

fn corpus_vocab() -> Vocabulary {
    let mut v = Vocabulary::new();
    tokenize(
        "Good example. The cat sat (on the mat)!\nDon't stop: \"now\"? yes; 3.5 ok, fine.",
        VocabMode::Build,
        &mut v,
    )
    .unwrap();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn built_documents_round_trip(text in text_strategy()) {
        let mut vocab = Vocabulary::new();
        let doc = tokenize(&text, VocabMode::Build, &mut vocab).unwrap();
        let ids = doc.flatten();
        let rendered = detokenize(&ids, &vocab).unwrap();
        let again = tokenize(&rendered, VocabMode::Frozen, &mut vocab.clone()).unwrap();
        prop_assert_eq!(again.flatten(), ids);
    }

    #[test]
    fn random_sequences_round_trip(picks in prop::collection::vec(any::<prop::sample::Index>(), 20)) {
        let mut vocab = corpus_vocab();
        let nl = vocab.id(NEWLINE_TOKEN).unwrap();
        let mut ids: Vec<TokenId> = Vec::new();
        for p in picks {
            let id = p.index(vocab.len()) as TokenId;
            // a whitespace run is always a single newline token
            if id == nl && ids.last() == Some(&nl) {
                continue;
            }
            ids.push(id);
        }
        let rendered = detokenize(&ids, &vocab).unwrap();
        let doc = tokenize(&rendered, VocabMode::Frozen, &mut vocab).unwrap();
        prop_assert_eq!(doc.flatten(), ids);
    }

    #[test]
    fn newline_mask_matches_surface(text in text_strategy()) {
        let mut vocab = Vocabulary::new();
        tokenize(&text, VocabMode::Build, &mut vocab).unwrap();
        for (i, t) in vocab.tokens().iter().enumerate() {
            prop_assert_eq!(vocab.is_newline(i as TokenId), t.contains('\n'));
            prop_assert_eq!(vocab.id(t), Some(i as TokenId));
        }
    }

    #[test]
    fn sentences_are_non_empty_and_end_at_boundaries(text in text_strategy()) {
        let mut vocab = Vocabulary::new();
        let doc = tokenize(&text, VocabMode::Build, &mut vocab).unwrap();
        for (k, s) in doc.sentences.iter().enumerate() {
            prop_assert!(!s.is_empty());
            if k + 1 < doc.sentences.len() {
                let last = vocab.token(*s.last().unwrap()).unwrap();
                prop_assert!([".", "!", "?", "\n"].contains(&last), "sentence ended on {:?}", last);
            }
        }
    }
}

#[test]
fn tokenization_is_deterministic() {
    let text = "Alpha beta. Gamma!\nDelta (epsilon) zeta?";
    let (mut v1, mut v2) = (Vocabulary::new(), Vocabulary::new());
    let a: Document = tokenize(text, VocabMode::Build, &mut v1).unwrap();
    let b = tokenize(text, VocabMode::Build, &mut v2).unwrap();
    assert_eq!(a, b);
    assert_eq!(v1.tokens(), v2.tokens());
}

#[test]
fn vocabulary_file_survives_newline_tokens() {
    let v = corpus_vocab();
    let mut buf = Vec::new();
    v.write_to(&mut buf).unwrap();
    assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), v.len());
    let back = Vocabulary::read_from(&buf[..]).unwrap();
    assert_eq!(back.tokens(), v.tokens());
}
