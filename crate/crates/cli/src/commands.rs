use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use tinytune::align::{raft_continue, train_reward, RaftProgress, RewardFn, RewardModel};
use tinytune::data::{load_dataset, load_preferences, Dataset, Tokenizer};
use tinytune::eval::{evaluate, EvalOptions};
use tinytune::infer::{inference, speculative_decode, stream_inference, Completion};
use tinytune::model::{load_model, load_model_tokenizer, save_model, save_model_with_tokenizer, Transformer};
use tinytune::train::{load_checkpoint, train_pretrain, train_sft, LoopOptions, TrainOutcome};
use tinytune::Error;

use crate::args::Command;
use crate::config::{RewardKind, RunConfig};
use crate::error::{usage, CliError, CliResult};
use crate::run::{self, io_err};

const TOKENIZER_FILE: &str = "tokenizer.json";
const FINAL_DIR: &str = "final";
const RAFT_STATE: &str = "raft_state";
const RAFT_PROGRESS: &str = "progress.json";

pub fn execute(cmd: &Command, cfg: RunConfig, resume: Option<&Path>) -> CliResult<()> {
    match cmd {
        Command::Pretrain => train_stage(Stage::Pretrain, cfg, resume),
        Command::Finetune => train_stage(Stage::Finetune, cfg, resume),
        Command::Reward => train_stage(Stage::Reward, cfg, resume),
        Command::Raft => raft(cfg, resume),
        Command::Eval => eval(cfg, resume),
        _ if resume.is_some() => Err(usage(format!("`{}` does not keep a run directory to resume", cmd.name()))),
        Command::InitModel => init_model(&cfg),
        Command::TrainTokenizer => train_tokenizer(&cfg),
        Command::Infer { prompt } => infer(&cfg, prompt),
        Command::Chat => chat(&cfg),
        Command::MergeLora => merge_lora(&cfg),
        Command::ExtendVocab { tokens } => extend_vocab(&cfg, tokens),
        Command::ShowConfig => {
            println!("{}", cfg.to_json());
            Ok(())
        }
    }
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str, flag: &str, cmd: &str) -> CliResult<&'a Path> {
    value.as_deref().ok_or_else(|| usage(format!("`{cmd}` needs {key} (--{flag})")))
}

fn check_vocab(model: &Transformer, tok: &Tokenizer, what: &str) -> CliResult<()> {
    if model.config().vocab != tok.vocab_size() {
        return Err(Error::Config(format!(
            "{what} has vocabulary {} but the tokenizer has {} tokens",
            model.config().vocab,
            tok.vocab_size()
        ))
        .into());
    }
    Ok(())
}

/// Loads `paths.model` or initialises a model from the `model` section. The
/// tokenizer is `tokenizer.path`, else the checkpoint's own, else byte-level.
fn load_or_init(cfg: &RunConfig) -> CliResult<(Transformer, Tokenizer)> {
    let explicit = cfg.tokenizer.path.as_deref().map(Tokenizer::load).transpose()?;
    match &cfg.paths.model {
        Some(dir) => {
            let model = load_model(dir)?;
            let tok = match explicit {
                Some(t) => t,
                None => load_model_tokenizer(dir)?.unwrap_or_else(Tokenizer::byte_level),
            };
            check_vocab(&model, &tok, &dir.display().to_string())?;
            Ok((model, tok))
        }
        None => {
            let tok = explicit.unwrap_or_else(Tokenizer::byte_level);
            let model = Transformer::new(cfg.model.model_config(tok.vocab_size()), cfg.model.init_seed)?;
            Ok((model, tok))
        }
    }
}

fn attach_configured_lora(model: &mut Transformer, cfg: &RunConfig) -> CliResult<()> {
    if let (Some(lora), None) = (&cfg.model.lora, model.lora()) {
        model.attach_lora(lora.clone(), cfg.model.init_seed)?;
    }
    Ok(())
}

/// Texts of a text_only prompt set, or the inputs of a text2text one.
fn load_prompts(cfg: &RunConfig, cmd: &str) -> CliResult<Vec<String>> {
    let ds = load_dataset(require(&cfg.data.prompts, "data.prompts", "prompts", cmd)?)?;
    Ok(match &ds {
        Dataset::TextOnly(v) => v.iter().map(|t| t.text.clone()).collect(),
        Dataset::Text2Text(v) => v.iter().map(|t| t.input.clone()).collect(),
    })
}

fn exclamations(_: &str, completion: &str) -> f64 {
    completion.matches('!').count() as f64
}

fn reward_fn(cfg: &RunConfig) -> CliResult<Option<Box<dyn RewardFn>>> {
    let kind = cfg.eval.reward.or(cfg.paths.reward_model.as_ref().map(|_| RewardKind::Model));
    Ok(match kind {
        None => None,
        Some(RewardKind::Exclamations) => Some(Box::new(exclamations)),
        Some(RewardKind::Model) => {
            let dir = cfg
                .paths
                .reward_model
                .as_deref()
                .ok_or_else(|| usage("eval.reward is `model` but paths.reward_model (--reward-model) is unset"))?;
            Some(Box::new(RewardModel::load(dir)?))
        }
    })
}

/// A fresh run directory, or the one being resumed.
fn start_run(cfg: &mut RunConfig, cmd: &str, resume: Option<&Path>) -> CliResult<PathBuf> {
    match resume {
        Some(dir) => Ok(dir.to_path_buf()),
        None => run::create(cfg, cmd),
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    Pretrain,
    Finetune,
    Reward,
}

enum TrainData {
    Set(Dataset),
    Pairs(Vec<tinytune::data::PreferencePair>),
}

fn train_stage(stage: Stage, mut cfg: RunConfig, resume: Option<&Path>) -> CliResult<()> {
    let name = match stage {
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
        Stage::Reward => "reward",
    };
    // Data problems are reported before anything is written.
    let data = match stage {
        Stage::Reward => TrainData::Pairs(load_preferences(require(
            &cfg.data.preferences,
            "data.preferences",
            "preferences",
            name,
        )?)?),
        _ => TrainData::Set(load_dataset(require(&cfg.data.dir, "data.dir", "data", name)?)?),
    };
    let run = start_run(&mut cfg, name, resume)?;
    let tok_path = run.join(TOKENIZER_FILE);
    let checkpoint = match resume {
        Some(_) => run::latest_checkpoint(&run)?,
        None => None,
    };
    let (mut model, tok, state) = match checkpoint {
        Some(dir) => {
            let (model, state) = load_checkpoint(&dir)?;
            (model, Tokenizer::load(&tok_path)?, Some(state))
        }
        None => {
            let (mut model, tok) = load_or_init(&cfg)?;
            match stage {
                Stage::Reward => model = model.with_reward_head(),
                _ => attach_configured_lora(&mut model, &cfg)?,
            }
            tok.save(&tok_path)?;
            (model, tok, None)
        }
    };
    if resume.is_some() {
        let done = state.as_ref().map_or(0, |s| s.step);
        eprintln!("resuming {} after step {done}", run.display());
        run::truncate_log(&run.join("metrics.jsonl"), |v| v["step"].as_u64().is_some_and(|s| s <= done))?;
    }
    let opts = LoopOptions { run_dir: Some(&run), resume: state, stop_at: None };
    let outcome: TrainOutcome = match &data {
        TrainData::Set(ds) if stage == Stage::Pretrain => train_pretrain(&mut model, ds, &tok, &cfg.train, opts)?,
        TrainData::Set(ds) => train_sft(&mut model, ds, &tok, &cfg.data.template, &cfg.train, opts)?,
        TrainData::Pairs(pairs) => {
            let mut rm = RewardModel::new(model, tok.clone())?;
            let outcome = train_reward(&mut rm, pairs, &cfg.train, opts)?;
            let stats = rm.evaluate_pairs(pairs)?;
            println!("pairwise loss {:.6}, accuracy {:.4}", stats.loss, stats.accuracy);
            model = rm.model;
            outcome
        }
    };
    let final_dir = run.join(FINAL_DIR);
    save_model_with_tokenizer(&model, &tok, &final_dir)?;
    if let Some(m) = outcome.history.last() {
        println!("step {} loss {:.6} tokens {}", m.step, m.loss, m.tokens_seen);
    }
    println!("final checkpoint: {}", final_dir.display());
    Ok(())
}

fn raft(mut cfg: RunConfig, resume: Option<&Path>) -> CliResult<()> {
    let prompts = load_prompts(&cfg, "raft")?;
    let reward = reward_fn(&cfg)?
        .ok_or_else(|| usage("`raft` needs a reward: set eval.reward (--reward) or paths.reward_model"))?;
    let run = start_run(&mut cfg, "raft", resume)?;
    let tok_path = run.join(TOKENIZER_FILE);
    let state_dir = run.join(RAFT_STATE);
    let progress_path = state_dir.join(RAFT_PROGRESS);
    let (mut policy, tok, mut progress) = if resume.is_some() && progress_path.exists() {
        let text = run::read(&progress_path)?;
        let progress: RaftProgress = serde_json::from_str(&text)
            .map_err(|e| CliError::Format { file: progress_path.display().to_string(), msg: e.to_string() })?;
        (load_model(&state_dir)?, Tokenizer::load(&tok_path)?, progress)
    } else {
        let (mut policy, tok) = load_or_init(&cfg)?;
        attach_configured_lora(&mut policy, &cfg)?;
        tok.save(&tok_path)?;
        (policy, tok, RaftProgress::default())
    };
    if resume.is_some() {
        let done = progress.next_iteration as u64;
        eprintln!("resuming {} at iteration {done}", run.display());
        run::truncate_log(&run.join("raft_metrics.jsonl"), |v| v["iteration"].as_u64().is_some_and(|i| i < done))?;
    }
    let staging = run.join(format!("{RAFT_STATE}.next"));
    let history = raft_continue(
        &mut policy,
        &tok,
        &*reward,
        &prompts,
        &cfg.raft,
        Some(&run),
        &mut progress,
        |_, _| {},
        |policy, progress| {
            // Written aside and swapped in so the weights and progress always agree.
            save_model(policy, &staging)?;
            let text = serde_json::to_string(progress).expect("progress serializes");
            let p = staging.join(RAFT_PROGRESS);
            fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })?;
            if state_dir.exists() {
                fs::remove_dir_all(&state_dir).map_err(|e| Error::Io { path: state_dir.clone(), source: e })?;
            }
            fs::rename(&staging, &state_dir).map_err(|e| Error::Io { path: state_dir.clone(), source: e })
        },
    )?;
    for m in &history {
        println!(
            "iteration {}: sampled reward {:.4}, selected reward {:.4}, {} of {} kept, sft loss {}",
            m.iteration,
            m.mean_sampled_reward,
            m.mean_selected_reward,
            m.selected,
            m.samples,
            m.sft_final_loss.map_or("-".to_string(), |l| format!("{l:.4}")),
        );
    }
    let final_dir = run.join(FINAL_DIR);
    save_model_with_tokenizer(&policy, &tok, &final_dir)?;
    println!("final checkpoint: {}", final_dir.display());
    Ok(())
}

fn eval(mut cfg: RunConfig, resume: Option<&Path>) -> CliResult<()> {
    let prompts = load_prompts(&cfg, "eval")?;
    let ppl_data = cfg.data.eval.as_deref().map(load_dataset).transpose()?;
    let reward = reward_fn(&cfg)?;
    let (policy, tok) = load_or_init(&cfg)?;
    let run = start_run(&mut cfg, "eval", resume)?;
    let opts = EvalOptions {
        reward: reward.as_deref(),
        ppl_data: ppl_data.as_ref(),
        template: cfg.generation.template.then_some(&cfg.data.template),
        seeds: cfg.eval.seeds.clone(),
    };
    let report = evaluate(&policy, &tok, &prompts, &cfg.generation.params(), &opts)?;
    report.write(&run)?;
    print!("{}", report.to_table());
    println!("report: {}", run.display());
    Ok(())
}

fn init_model(cfg: &RunConfig) -> CliResult<()> {
    let out = require(&cfg.paths.output, "paths.output", "out", "init-model")?;
    let tok = cfg.tokenizer.path.as_deref().map(Tokenizer::load).transpose()?.unwrap_or_else(Tokenizer::byte_level);
    let model = Transformer::new(cfg.model.model_config(tok.vocab_size()), cfg.model.init_seed)?;
    save_model_with_tokenizer(&model, &tok, out)?;
    println!(
        "{} parameters written to {}",
        model.params().iter().map(|p| p.value.numel()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

fn train_tokenizer(cfg: &RunConfig) -> CliResult<()> {
    let ds = load_dataset(require(&cfg.data.dir, "data.dir", "data", "train-tokenizer")?)?;
    let out = require(&cfg.paths.output, "paths.output", "out", "train-tokenizer")?;
    let texts: Vec<&str> = match &ds {
        Dataset::TextOnly(v) => v.iter().map(|t| t.text.as_str()).collect(),
        Dataset::Text2Text(v) => v.iter().flat_map(|t| [t.input.as_str(), t.output.as_str()]).collect(),
    };
    let tok = Tokenizer::train_bpe(&texts, cfg.tokenizer.vocab_size)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    tok.save(out)?;
    println!("{} tokens ({} merges) written to {}", tok.vocab_size(), tok.merges().len(), out.display());
    Ok(())
}

fn print_completion(c: &Completion) -> CliResult<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", c.text).map_err(|e| io_err(Path::new("<stdout>"), e))?;
    if c.truncated {
        eprintln!("note: generation stopped at the context limit");
    }
    Ok(())
}

fn infer(cfg: &RunConfig, prompt: &str) -> CliResult<()> {
    let (model, tok) = load_or_init(cfg)?;
    let g = &cfg.generation;
    let prompt = if g.template { cfg.data.template.render_prompt(prompt) } else { prompt.to_string() };
    let params = g.params();
    if let Some(dir) = &cfg.paths.draft {
        if g.stream {
            return Err(usage("--stream cannot be combined with --draft"));
        }
        let draft = load_model(dir)?;
        check_vocab(&draft, &tok, &dir.display().to_string())?;
        let (c, stats) = speculative_decode(&model, &draft, &tok, &prompt, &params, g.gamma)?;
        print_completion(&c)?;
        eprintln!(
            "speculative: accepted {}/{} drafted tokens ({:.1}%), {} target forward calls",
            stats.accepted,
            stats.proposed,
            100.0 * stats.acceptance_rate(),
            stats.target_forward_calls
        );
        return Ok(());
    }
    if g.stream {
        let mut out = std::io::stdout().lock();
        let c = stream_inference(&model, &tok, &prompt, &params, |piece| {
            out.write_all(piece.as_bytes()).and_then(|_| out.flush()).map_err(|e| e.to_string())
        })?;
        writeln!(out).map_err(|e| io_err(Path::new("<stdout>"), e))?;
        if c.truncated {
            eprintln!("note: generation stopped at the context limit");
        }
        return Ok(());
    }
    print_completion(&inference(&model, &tok, &prompt, &params)?)
}

/// Renders the conversation so far plus a new user turn, dropping the oldest
/// turns until it leaves room for a reply.
fn chat_prompt(
    cfg: &RunConfig,
    tok: &Tokenizer,
    limit: usize,
    turns: &mut Vec<(String, String)>,
    user: &str,
) -> String {
    let t = &cfg.data.template;
    loop {
        let mut text = String::new();
        for (u, r) in turns.iter() {
            text.push_str(&t.render_prompt(u));
            text.push_str(r);
            text.push_str(&t.suffix);
        }
        text.push_str(&t.render_prompt(user));
        if turns.is_empty() || tok.encode(&text).len() < limit {
            return text;
        }
        turns.remove(0);
    }
}

fn chat(cfg: &RunConfig) -> CliResult<()> {
    let (model, tok) = load_or_init(cfg)?;
    let limit = model.config().max_positions();
    let mut turns: Vec<(String, String)> = Vec::new();
    let stdin = std::io::stdin();
    let stdout_err = |e: std::io::Error| io_err(Path::new("<stdout>"), e);
    eprintln!("chat: empty line or /quit ends, /reset clears the transcript");
    for (n, line) in stdin.lock().lines().enumerate() {
        let line = line.map_err(|e| io_err(Path::new("<stdin>"), e))?;
        let user = line.trim_end();
        match user {
            "" | "/quit" => break,
            "/reset" => {
                turns.clear();
                continue;
            }
            _ => {}
        }
        let prompt = chat_prompt(cfg, &tok, limit, &mut turns, user);
        let params =
            tinytune::infer::GenParams { seed: cfg.generation.seed.wrapping_add(n as u64), ..cfg.generation.params() };
        let mut out = std::io::stdout().lock();
        let result = stream_inference(&model, &tok, &prompt, &params, |piece| {
            out.write_all(piece.as_bytes()).and_then(|_| out.flush()).map_err(|e| e.to_string())
        });
        writeln!(out).map_err(stdout_err)?;
        match result {
            Ok(c) => turns.push((user.to_string(), c.text)),
            // A turn that no longer fits is reported and the session goes on.
            Err(e @ Error::Length(_)) => eprintln!("{}", CliError::from(e).line()),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn merge_lora(cfg: &RunConfig) -> CliResult<()> {
    let out = require(&cfg.paths.output, "paths.output", "out", "merge-lora")?;
    require(&cfg.paths.model, "paths.model", "model", "merge-lora")?;
    let (mut model, tok) = load_or_init(cfg)?;
    model.merge_lora()?;
    save_model_with_tokenizer(&model, &tok, out)?;
    println!("merged model written to {}", out.display());
    Ok(())
}

fn extend_vocab(cfg: &RunConfig, tokens: &[String]) -> CliResult<()> {
    let out = require(&cfg.paths.output, "paths.output", "out", "extend-vocab")?;
    require(&cfg.paths.model, "paths.model", "model", "extend-vocab")?;
    let (mut model, mut tok) = load_or_init(cfg)?;
    let before = tok.vocab_size();
    let added = tok.extend_vocabulary(tokens)?;
    model.resize_embeddings(tok.vocab_size())?;
    save_model_with_tokenizer(&model, &tok, out)?;
    println!("{added} tokens added (ids {before}..{}), written to {}", tok.vocab_size(), out.display());
    Ok(())
}
