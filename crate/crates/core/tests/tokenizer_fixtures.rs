//! Compatibility with the published GPT-2 vocabulary files.

use std::path::PathBuf;
use std::sync::OnceLock;

use forge_core::doc::{DocId, Document, Lang, SourceCategory};
use forge_core::tokenizer::{words_per_token, TokenizerModel, EOS_TOKEN};
use proptest::prelude::*;
use serde::Deserialize;

fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/gpt2")
}

fn gpt2() -> &'static TokenizerModel {
    static MODEL: OnceLock<TokenizerModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        TokenizerModel::load(&assets().join("encoder.json"), &assets().join("vocab.bpe")).unwrap()
    })
}

#[derive(Deserialize)]
struct Reference {
    text: String,
    ids: Vec<u32>,
}

#[test]
fn published_vocab_has_50257_entries() {
    let m = gpt2();
    assert_eq!(m.vocab_size(), 50_257);
    assert_eq!(m.num_merges(), 50_000);
    assert_eq!(m.token_str(m.eos_id()), Some(EOS_TOKEN));
}

#[test]
fn soc_splits_into_so_and_c() {
    let m = gpt2();
    let ids = m.encode("SoC").ids;
    let pieces: Vec<_> = ids.iter().map(|&i| m.token_str(i).unwrap()).collect();
    assert_eq!(pieces, ["So", "C"]);
}

#[test]
fn empty_text_has_no_tokens() {
    assert!(gpt2().encode("").ids.is_empty());
}

#[test]
fn agrees_with_reference_encodings() {
    let fixtures: Vec<Reference> =
        serde_json::from_str(include_str!("data/reference_encodings.json")).unwrap();
    assert_eq!(fixtures.len(), 1000);
    let m = gpt2();
    let mismatches: Vec<_> = fixtures
        .iter()
        .filter(|f| m.encode(&f.text).ids != f.ids)
        .map(|f| f.text.clone())
        .collect();
    assert!(mismatches.is_empty(), "mismatches: {mismatches:?}");
}

#[test]
fn eos_boundary_decodes_to_literal_separator() {
    let m = gpt2();
    let (a, b) = ("module top;", " endmodule\n");
    let mut ids = m.encode(a).ids;
    ids.push(m.eos_id());
    ids.extend(m.encode(b).ids);
    assert_eq!(m.decode(&ids).unwrap().text, format!("{a}{EOS_TOKEN}{b}"));
}

#[derive(Deserialize)]
struct WordsFixture {
    documents: Vec<String>,
    words: Vec<u64>,
    tokens: Vec<u64>,
}

#[test]
fn words_per_token_matches_oracle_counts() {
    let fx: WordsFixture =
        serde_json::from_str(include_str!("data/words_per_token_fixture.json")).unwrap();
    let docs: Vec<Document> = fx
        .documents
        .iter()
        .map(|t| Document {
            id: DocId::from_text(t),
            source: "fixture".into(),
            source_category: SourceCategory::CuratedNL,
            path: "f".into(),
            lang: Lang::NaturalLanguage,
            license: None,
            text: t.clone(),
        })
        .collect();
    let expected = fx.words.iter().sum::<u64>() as f64 / fx.tokens.iter().sum::<u64>() as f64;
    let ratio = words_per_token(&docs, gpt2()).unwrap();
    assert_eq!(ratio, (expected * 1e4).round() / 1e4);
    assert_eq!(ratio, 0.7463);
}

#[test]
fn single_token_words_give_ratio_one() {
    let m = gpt2();
    let text = "the cat sat on the mat";
    let doc = Document {
        id: DocId::from_text(text),
        source: "x".into(),
        source_category: SourceCategory::WebNL,
        path: "x".into(),
        lang: Lang::NaturalLanguage,
        license: None,
        text: text.into(),
    };
    assert_eq!(m.encode(text).ids.len(), 6);
    assert_eq!(words_per_token(&[doc], m).unwrap(), 1.0);
    assert!(words_per_token(&[], m).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn roundtrip_any_utf8(s in "\\PC{0,48}|[ -~\\n\\t]{0,64}|[\u{80}-\u{10ffff}]{0,12}") {
        let m = gpt2();
        let ids = m.encode(&s).ids;
        prop_assert!(ids.iter().all(|&i| (i as usize) < m.vocab_size()));
        let d = m.decode(&ids).unwrap();
        prop_assert!(!d.lossy);
        prop_assert_eq!(d.text, s);
    }

    #[test]
    fn encoding_is_deterministic(s in "[a-zA-Z0-9 ,.'\\n]{0,64}") {
        let m = gpt2();
        prop_assert_eq!(m.encode(&s), m.encode(&s));
    }
}
