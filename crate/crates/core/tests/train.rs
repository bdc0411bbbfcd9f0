use tinytune::data::{build_sft_example, Dataset, SftTemplate, Text2TextInstance, Tokenizer};
use tinytune::infer::{generate_ids, GenParams};
use tinytune::model::{ModelConfig, Transformer};
use tinytune::train::{
    examples_loss, load_checkpoint, pack_texts, save_checkpoint, train_examples, train_pretrain, LoopOptions,
    TrainConfig,
};
use tinytune::Error;

const TEXT: &str = "The quick brown fox jumps over the lazy dog while seven owls hum";

fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, n_heads: 4, d_model: 64, d_ff: 128, context: 64, ..ModelConfig::tiny(vocab) }
}

#[test]
fn overfits_a_single_text_and_recites_it() {
    let tok = Tokenizer::byte_level();
    assert_eq!(tok.encode(TEXT).len(), 64);
    let ds = Dataset::text_only(vec![TEXT; 4]);
    let mut model = Transformer::new(small_config(tok.vocab_size()), 1).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        warmup_steps: 10,
        total_steps: 200,
        batch_size: 4,
        seq_len: 64,
        weight_decay: 0.0,
        ..Default::default()
    };
    let out = train_pretrain(&mut model, &ds, &tok, &cfg, LoopOptions::default()).unwrap();
    let last = out.history.last().unwrap().loss;
    assert!(last < 0.1, "final loss {last}");

    let ids = tok.encode(TEXT);
    let mut rng = rand::rng();
    let (gen, _) = generate_ids(&model, &ids[..8], &[], &GenParams::greedy(32), &mut rng, |_| Ok(())).unwrap();
    assert_eq!(gen, ids[8..40].to_vec());
}

fn corpus() -> Vec<String> {
    (0..24).map(|i| format!("sample {i}: {}", &TEXT[i % 20..])).collect()
}

fn quick_cfg(total: u64) -> TrainConfig {
    TrainConfig { lr: 2e-3, warmup_steps: 5, total_steps: total, batch_size: 4, seq_len: 32, ..Default::default() }
}

fn tiny_model(tok: &Tokenizer, seed: u64) -> Transformer {
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        context: 32,
        ..ModelConfig::tiny(tok.vocab_size())
    };
    Transformer::new(cfg, seed).unwrap()
}

#[test]
fn identical_runs_give_identical_weights() {
    let tok = Tokenizer::byte_level();
    let ds = Dataset::text_only(corpus());
    let run = || {
        let mut m = tiny_model(&tok, 7);
        train_pretrain(&mut m, &ds, &tok, &quick_cfg(20), LoopOptions::default()).unwrap();
        m
    };
    let (a, b) = (run(), run());
    assert_eq!(a.params(), b.params());
}

#[test]
fn split_run_with_checkpoint_matches_straight_run() {
    let tok = Tokenizer::byte_level();
    let ds = Dataset::text_only(corpus());
    let cfg = quick_cfg(100);
    let mut straight = tiny_model(&tok, 3);
    let full = train_pretrain(&mut straight, &ds, &tok, &cfg, LoopOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = tiny_model(&tok, 3);
    let half =
        train_pretrain(&mut first, &ds, &tok, &cfg, LoopOptions { stop_at: Some(50), ..Default::default() }).unwrap();
    assert_eq!(half.state.step, 50);
    save_checkpoint(&first, &half.state, dir.path()).unwrap();
    drop(first);
    let (mut resumed, state) = load_checkpoint(dir.path()).unwrap();
    let rest = train_pretrain(&mut resumed, &ds, &tok, &cfg, LoopOptions { resume: Some(state), ..Default::default() })
        .unwrap();

    assert_eq!(rest.history.len(), 50);
    assert_eq!(rest.history.last().unwrap().loss.to_bits(), full.history.last().unwrap().loss.to_bits());
    assert_eq!(rest.state, full.state);
    assert_eq!(resumed.params(), straight.params());
}

#[test]
fn metrics_and_periodic_checkpoints_land_in_the_run_dir() {
    let tok = Tokenizer::byte_level();
    let ds = Dataset::text_only(corpus());
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 5, ..quick_cfg(10) };
    let mut m = tiny_model(&tok, 1);
    train_pretrain(&mut m, &ds, &tok, &cfg, LoopOptions { run_dir: Some(dir.path()), ..Default::default() }).unwrap();
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 10);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i as u64 + 1);
        for key in ["loss", "lr", "tokens_seen"] {
            assert!(l.get(key).is_some(), "{key}");
        }
    }
    for step in ["step-000005", "step-000010"] {
        let (model, state) = load_checkpoint(&dir.path().join("checkpoints").join(step)).unwrap();
        assert_eq!(state.step, step[5..].parse::<u64>().unwrap());
        assert_eq!(model.config(), m.config());
    }
}

#[test]
fn resume_with_other_architecture_is_a_version_error() {
    let tok = Tokenizer::byte_level();
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_model(&tok, 1);
    let state = tinytune::train::OptimizerState::new(m.params(), 0);
    save_checkpoint(&m, &state, dir.path()).unwrap();
    let path = dir.path().join("trainer_state.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["config_hash"] = "0000000000000000".into();
    std::fs::write(&path, v.to_string()).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Version(_))));
}

#[test]
fn sft_with_loss_on_input_matches_pretraining() {
    let tok = Tokenizer::byte_level();
    let tmpl = SftTemplate { loss_on_input: true, ..Default::default() };
    let inst = Text2TextInstance { input: "abc".into(), output: "defgh".into() };
    let sft = build_sft_example(&tmpl, &inst, &tok, None).unwrap();
    let rendered = format!("{}abc{}defgh", tmpl.prefix, tmpl.infix);
    let seq_len = sft.len() - 1;
    let packed = pack_texts(&tok, &[&rendered], seq_len).unwrap();
    assert_eq!(packed.len(), 1);
    assert_eq!(packed[0], sft);

    let cfg = TrainConfig { seq_len, batch_size: 1, total_steps: 5, warmup_steps: 1, ..Default::default() };
    let cfg_model = ModelConfig { context: 32, ..tiny_model(&tok, 0).config().clone() };
    let mut a = Transformer::new(cfg_model.clone(), 2).unwrap();
    let mut b = Transformer::new(cfg_model, 2).unwrap();
    let ha = train_examples(&mut a, &[sft], tok.pad(), &cfg, LoopOptions::default()).unwrap();
    let ds = Dataset::text_only(vec![rendered]);
    let hb = train_pretrain(&mut b, &ds, &tok, &cfg, LoopOptions::default()).unwrap();
    for (x, y) in ha.history.iter().zip(&hb.history) {
        assert!((x.loss - y.loss).abs() < 1e-5);
    }
}

#[test]
fn frozen_batch_loss_decreases_over_ten_steps() {
    let tok = Tokenizer::byte_level();
    let examples = pack_texts(&tok, &[TEXT], 32).unwrap();
    let batch = vec![examples[0].clone()];
    let mut m = tiny_model(&tok, 5);
    let cfg =
        TrainConfig { lr: 1e-3, warmup_steps: 0, total_steps: 10, batch_size: 1, seq_len: 32, ..Default::default() };
    let mut prev = examples_loss(&m, &batch, tok.pad()).unwrap();
    let mut state = None;
    for step in 1..=10 {
        let out = train_examples(
            &mut m,
            &batch,
            tok.pad(),
            &cfg,
            LoopOptions { resume: state.take(), stop_at: Some(step), ..Default::default() },
        )
        .unwrap();
        state = Some(out.state);
        let now = examples_loss(&m, &batch, tok.pad()).unwrap();
        assert!(now < prev, "step {step}: {now} ≥ {prev}");
        prev = now;
    }
}

#[test]
fn short_corpus_is_degenerate() {
    let tok = Tokenizer::byte_level();
    let mut m = tiny_model(&tok, 0);
    let ds = Dataset::text_only(["hi"]);
    let cfg = TrainConfig { warmup_steps: 0, ..quick_cfg(1) };
    let err = train_pretrain(&mut m, &ds, &tok, &cfg, LoopOptions::default()).unwrap_err();
    assert!(matches!(err, Error::DegenerateInput(_)));
}

#[test]
fn nan_weights_abort_with_step() {
    let tok = Tokenizer::byte_level();
    let mut m = tiny_model(&tok, 0);
    let i = m.param_index("final_norm").unwrap();
    m.params_mut()[i].value.data_mut()[0] = f32::NAN;
    let ds = Dataset::text_only(corpus());
    let cfg = TrainConfig { warmup_steps: 1, ..quick_cfg(3) };
    let err = train_pretrain(&mut m, &ds, &tok, &cfg, LoopOptions::default()).unwrap_err();
    assert!(matches!(err, Error::NumericAbort { step: 1, .. }), "{err:?}");
}

#[test]
fn gradient_checkpointing_leaves_training_unchanged() {
    let tok = Tokenizer::byte_level();
    let ds = Dataset::text_only(corpus());
    let mut a = tiny_model(&tok, 9);
    let mut b = tiny_model(&tok, 9);
    train_pretrain(&mut a, &ds, &tok, &quick_cfg(5), LoopOptions::default()).unwrap();
    let cfg = TrainConfig { gradient_checkpointing: true, ..quick_cfg(5) };
    train_pretrain(&mut b, &ds, &tok, &cfg, LoopOptions::default()).unwrap();
    assert_eq!(a.params(), b.params());
}
