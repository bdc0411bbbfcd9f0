use std::sync::OnceLock;

use proptest::prelude::*;
use tinytune::data::{
    build_sft_example, load_dataset, parse_dataset, parse_file, preferences_to_json, Dataset, FileRecords,
    PreferencePair, SftTemplate, Text2TextInstance, Tokenizer,
};

fn trained() -> &'static Tokenizer {
    static TOK: OnceLock<Tokenizer> = OnceLock::new();
    TOK.get_or_init(|| {
        let texts = [
            "the cat sat on the mat and the cat ate the rat",
            "über café naïve résumé, déjà vu",
            "汉字 汉字 汉字 かな かな",
            "fn main() { println!(\"hello\"); }",
        ];
        Tokenizer::train_bpe(&texts, 320).unwrap()
    })
}

fn arb_text() -> impl Strategy<Value = String> {
    prop_oneof![any::<String>(), "[a-z ]{0,40}", "(the|cat|sat|café|汉字|\\{|\\}|,|\\]| ){0,20}",]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn byte_level_round_trips(s in arb_text()) {
        let tok = Tokenizer::byte_level();
        let ids = tok.encode(&s);
        prop_assert_eq!(ids.len(), s.len());
        prop_assert_eq!(tok.decode(&ids), s);
    }

    #[test]
    fn trained_bpe_round_trips_and_never_grows(s in arb_text()) {
        let tok = trained();
        let ids = tok.encode(&s);
        prop_assert!(ids.len() <= s.len());
        prop_assert!(ids.iter().all(|&i| (i as usize) < tok.vocab_size()));
        prop_assert_eq!(tok.decode(&ids), s);
    }

    #[test]
    fn tokenizer_json_round_trips(extra in prop::collection::btree_set("[a-zA-Z]{3,8}", 0..4)) {
        let mut tok = trained().clone();
        let extra: Vec<String> = extra.into_iter().filter(|t| tok.token_id(t).is_none()).collect();
        tok.extend_vocabulary(&extra).unwrap();
        let back = Tokenizer::from_json(&tok.to_json()).unwrap();
        prop_assert_eq!(&back, &tok);
        prop_assert_eq!(back.encode("the cat ate über"), tok.encode("the cat ate über"));
    }

    #[test]
    fn extension_keeps_encodings_without_new_tokens(s in "[a-z ]{0,40}") {
        let base = trained();
        let mut ext = base.clone();
        let added = ["QQZX", "<tool>", "ÆØÅ"];
        ext.extend_vocabulary(&added).unwrap();
        prop_assert_eq!(ext.vocab_size(), base.vocab_size() + added.len());
        prop_assert_eq!(ext.encode(&s), base.encode(&s));
        for (i, t) in added.iter().enumerate() {
            prop_assert_eq!(ext.token_id(t), Some((base.vocab_size() + i) as u32));
        }
    }

    #[test]
    fn sft_mask_covers_exactly_output_and_eos(
        input in arb_text(),
        output in arb_text().prop_filter("non-empty", |s| !s.is_empty()),
        prefix in "[A-Z#: \n]{0,12}",
        infix in "[A-Z#: \n]{0,12}",
    ) {
        let tok = trained();
        let tmpl = SftTemplate { prefix, infix, ..Default::default() };
        let inst = Text2TextInstance { input, output };
        let ex = build_sft_example(&tmpl, &inst, tok, None).unwrap();
        prop_assert_eq!(ex.tokens.len(), ex.mask.len());
        let masked: Vec<u32> = ex.tokens.iter().zip(&ex.mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
        prop_assert_eq!(masked.last(), Some(&tok.eos()));
        prop_assert_eq!(&masked[..masked.len() - 1], &tok.encode(&inst.output)[..]);
        prop_assert_eq!(tok.decode(&masked), inst.output.clone());
        let unmasked: Vec<u32> = ex.tokens.iter().zip(&ex.mask).filter(|(_, &m)| !m).map(|(&t, _)| t).collect();
        prop_assert_eq!(tok.decode(&unmasked), tmpl.render_prompt(&inst.input));
    }

    #[test]
    fn sft_truncation_keeps_the_output(
        input in "[a-z ]{0,60}",
        output in "[a-z]{1,10}",
        max_len in 1usize..80,
    ) {
        let tok = Tokenizer::byte_level();
        let tmpl = SftTemplate { prefix: "Q:".into(), infix: "A:".into(), ..Default::default() };
        let inst = Text2TextInstance { input, output };
        let fixed = 4 + inst.output.len() + 1;
        match build_sft_example(&tmpl, &inst, &tok, Some(max_len)) {
            Ok(ex) => {
                prop_assert!(fixed <= max_len);
                prop_assert!(ex.len() <= max_len);
                let text = tok.decode(&ex.tokens);
                let tail = format!("A:{}", inst.output);
                prop_assert!(text.ends_with(&tail));
                prop_assert!(text.starts_with("Q:"));
            }
            Err(e) => {
                prop_assert!(fixed > max_len);
                prop_assert!(matches!(e, tinytune::Error::Length(_)));
            }
        }
    }

    #[test]
    fn datasets_round_trip_through_files(
        texts in prop::collection::vec(arb_text(), 1..6),
        pairs in prop::collection::vec((arb_text(), arb_text()), 1..6),
    ) {
        for ds in [Dataset::text_only(texts.clone()), Dataset::text2text(pairs.clone())] {
            let parsed = parse_dataset("d.json", &ds.to_json()).unwrap();
            prop_assert_eq!(&parsed, &ds);
            let dir = tempfile::tempdir().unwrap();
            ds.save(dir.path(), "a.json").unwrap();
            let loaded = load_dataset(dir.path()).unwrap();
            prop_assert_eq!(&loaded, &ds);
            prop_assert_eq!(loaded.to_json(), ds.to_json());
        }
    }

    #[test]
    fn preferences_round_trip(rows in prop::collection::vec((arb_text(), arb_text(), arb_text()), 1..5)) {
        let pairs: Vec<PreferencePair> = rows
            .into_iter()
            .map(|(prompt, chosen, rejected)| {
                let rejected = if rejected == chosen { format!("{rejected}!") } else { rejected };
                PreferencePair { prompt, chosen, rejected }
            })
            .collect();
        let back = parse_file("p.json", &preferences_to_json(&pairs)).unwrap();
        prop_assert_eq!(back, FileRecords::Preference(pairs));
    }

    #[test]
    fn parsers_never_panic(s in any::<String>()) {
        let _ = parse_file("x.json", &s);
        let _ = Tokenizer::from_json(&s);
    }
}

#[test]
fn directory_files_concatenate_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    Dataset::text_only(["second"]).save(dir.path(), "b.json").unwrap();
    Dataset::text_only(["first", "also first"]).save(dir.path(), "a.json").unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.texts().unwrap(), vec!["first", "also first", "second"]);
}

#[test]
fn mixed_directory_names_both_files() {
    let dir = tempfile::tempdir().unwrap();
    Dataset::text_only(["x"]).save(dir.path(), "a.json").unwrap();
    Dataset::text2text([("q", "a")]).save(dir.path(), "b.json").unwrap();
    let err = load_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("a.json") && err.contains("b.json"), "{err}");
}

#[test]
fn invalid_utf8_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.json"), b"{\"type\": \"text_only\", \"instances\": [{\"text\": \"\xff\"}]}")
        .unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, tinytune::Error::Format { .. }), "{err:?}");
}
