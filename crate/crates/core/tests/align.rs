mod common;

use common::{same_weights, tiny_config};
use proptest::prelude::*;
use tinytune::align::{
    pairwise_loss, raft_continue, raft_select, raft_train, raft_train_with, train_reward, RaftConfig, RaftProgress,
    RewardModel,
};
use tinytune::data::{PreferencePair, SftTemplate, Tokenizer};
use tinytune::model::Transformer;
use tinytune::train::{LoopOptions, TrainConfig};

fn policy(seed: u64) -> Transformer {
    Transformer::with_init_std(tiny_config(Tokenizer::byte_level().vocab_size(), 48), seed, 0.3).unwrap()
}

fn prompts() -> Vec<String> {
    ["cat", "dog", "owl", "hen", "cow"].iter().map(|s| s.to_string()).collect()
}

fn config(iterations: usize) -> RaftConfig {
    RaftConfig {
        b: 4,
        accept_fraction: 0.5,
        max_new_tokens: 8,
        iterations,
        prompts_per_iter: 3,
        sft_epochs: 1,
        seed: 17,
        sft: TrainConfig { lr: 1e-3, warmup_steps: 1, batch_size: 2, seq_len: 24, ..Default::default() },
        template: SftTemplate { prefix: "Q:".into(), infix: " A:".into(), ..Default::default() },
        ..Default::default()
    }
}

fn vowels(_: &str, c: &str) -> f64 {
    c.chars().filter(|ch| "aeiou".contains(*ch)).count() as f64
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, ..ProptestConfig::default() })]

    #[test]
    fn selection_keeps_the_top_ceil_kb(
        rewards in prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0), Just(1.0), -5.0f64..5.0], 2..12), 1..5),
        k in 0.01f64..=1.0,
    ) {
        let sel = raft_select(&rewards, k);
        prop_assert_eq!(sel.len(), rewards.len());
        for (r, s) in rewards.iter().zip(&sel) {
            // Smallest count c with c ≥ k·b, computed by exact search.
            let want = (1..=r.len()).find(|&c| c as f64 >= k * r.len() as f64 - 1e-9).unwrap();
            prop_assert_eq!(s.len(), want);
            let mut uniq = s.clone();
            uniq.sort();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), s.len());
            for w in s.windows(2) {
                prop_assert!(r[w[0]] > r[w[1]] || (r[w[0]] == r[w[1]] && w[0] < w[1]));
            }
            let worst_kept = s.iter().map(|&i| r[i]).fold(f64::INFINITY, f64::min);
            for i in (0..r.len()).filter(|i| !s.contains(i)) {
                prop_assert!(r[i] <= worst_kept);
                if r[i] == worst_kept {
                    prop_assert!(s.iter().all(|&j| r[j] > worst_kept || j < i));
                }
            }
            let kept: f64 = s.iter().map(|&i| r[i]).sum::<f64>() / s.len() as f64;
            let all: f64 = r.iter().sum::<f64>() / r.len() as f64;
            prop_assert!(kept >= all - 1e-12 * all.abs().max(1.0));
        }
    }

    #[test]
    fn pairwise_loss_is_softplus_of_negative_margin(m in -50.0f64..50.0) {
        let oracle = (1.0 + (-m).exp()).ln();
        prop_assert!((pairwise_loss(m) - oracle).abs() <= 1e-12 * oracle.max(1e-300) + 1e-15);
        prop_assert!(pairwise_loss(m) > 0.0);
    }
}

#[test]
fn zero_iterations_leave_the_policy_untouched() {
    let before = policy(1);
    let mut p = before.clone();
    let dir = tempfile::tempdir().unwrap();
    let h = raft_train(&mut p, &Tokenizer::byte_level(), &vowels, &prompts(), &config(0), Some(dir.path())).unwrap();
    assert!(h.is_empty());
    assert!(same_weights(&p, &before));
}

#[test]
fn raft_runs_are_reproducible() {
    let tok = Tokenizer::byte_level();
    let run = || {
        let mut p = policy(2);
        let mut seen = Vec::new();
        let h = raft_train_with(&mut p, &tok, &vowels, &prompts(), &config(2), None, |it, round| {
            seen.push((it, round.to_vec()));
        })
        .unwrap();
        (p, h, seen)
    };
    let (pa, ha, sa) = run();
    let (pb, hb, sb) = run();
    assert!(same_weights(&pa, &pb));
    assert_eq!(ha, hb);
    assert_eq!(sa, sb);
    assert!(!same_weights(&pa, &policy(2)));
}

#[test]
fn metrics_agree_with_the_observed_samples() {
    let tok = Tokenizer::byte_level();
    let mut p = policy(3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(3);
    let mut rounds = Vec::new();
    let h = raft_train_with(&mut p, &tok, &vowels, &prompts(), &cfg, Some(dir.path()), |_, r| rounds.push(r.to_vec()))
        .unwrap();
    assert_eq!(h.len(), 3);
    for (it, (m, round)) in h.iter().zip(&rounds).enumerate() {
        assert_eq!(m.iteration, it);
        assert_eq!(m.samples, cfg.prompts_per_iter * cfg.b);
        assert_eq!(m.selected, cfg.prompts_per_iter * cfg.keep_count());
        let indices: Vec<usize> = round.iter().map(|r| r.prompt_index).collect();
        let want: Vec<usize> = (0..cfg.prompts_per_iter).map(|j| (it * cfg.prompts_per_iter + j) % 5).collect();
        assert_eq!(indices, want);
        let all: Vec<f64> = round.iter().flat_map(|r| r.rewards.clone()).collect();
        let kept: Vec<f64> = round.iter().flat_map(|r| r.selected.iter().map(|&i| r.rewards[i])).collect();
        assert!((m.mean_sampled_reward - all.iter().sum::<f64>() / all.len() as f64).abs() < 1e-12);
        assert!((m.mean_selected_reward - kept.iter().sum::<f64>() / kept.len() as f64).abs() < 1e-12);
        assert!(m.mean_selected_reward >= m.mean_sampled_reward);
        assert_eq!(m.dominance_violations, 0);
        assert!(m.skipped_too_long <= m.selected);
        for r in round {
            assert_eq!(r.completions.len(), cfg.b);
            for (c, &score) in r.completions.iter().zip(&r.rewards) {
                assert_eq!(score, vowels("", c));
            }
            assert_eq!(r.selected, raft_select(std::slice::from_ref(&r.rewards), cfg.accept_fraction)[0]);
        }
    }
    let log = std::fs::read_to_string(dir.path().join("raft_metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn interrupted_raft_continues_identically() {
    let tok = Tokenizer::byte_level();
    let cfg = config(3);
    let mut straight = policy(6);
    let mut snapshots = Vec::new();
    let full = raft_continue(
        &mut straight,
        &tok,
        &vowels,
        &prompts(),
        &cfg,
        None,
        &mut RaftProgress::default(),
        |_, _| {},
        |p, progress| {
            snapshots.push((p.clone(), progress.clone()));
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(snapshots.len(), 3);
    let (mut resumed, mut progress) = snapshots.swap_remove(0);
    assert_eq!(progress.next_iteration, 1);
    let rest =
        raft_continue(&mut resumed, &tok, &vowels, &prompts(), &cfg, None, &mut progress, |_, _| {}, |_, _| Ok(()))
            .unwrap();
    assert_eq!(rest, full[1..]);
    assert!(same_weights(&resumed, &straight));
    assert_eq!(progress.next_iteration, 3);
}

#[test]
fn constant_reward_selects_the_earliest_samples() {
    let tok = Tokenizer::byte_level();
    let mut p = policy(4);
    let mut rounds = Vec::new();
    let h = raft_train_with(&mut p, &tok, &|_: &str, _: &str| 1.5, &prompts(), &config(1), None, |_, r| {
        rounds.push(r.to_vec())
    })
    .unwrap();
    assert_eq!(h[0].mean_sampled_reward, 1.5);
    assert_eq!(h[0].mean_selected_reward, 1.5);
    for r in &rounds[0] {
        assert_eq!(r.selected, vec![0, 1]);
    }
}

#[test]
fn invalid_raft_settings_are_rejected() {
    let tok = Tokenizer::byte_level();
    let mut p = policy(1);
    for cfg in [
        RaftConfig { b: 1, ..config(1) },
        RaftConfig { accept_fraction: 0.0, ..config(1) },
        RaftConfig { temperature: 0.0, ..config(1) },
        RaftConfig { sft: TrainConfig { seq_len: 4, ..config(1).sft }, ..config(1) },
    ] {
        assert!(matches!(raft_train(&mut p, &tok, &vowels, &prompts(), &cfg, None), Err(tinytune::Error::Config(_))));
    }
    assert!(raft_train(&mut p, &tok, &vowels, &[], &config(1), None).is_err());
}

#[test]
fn reward_model_learns_a_preference_and_round_trips() {
    let tok = Tokenizer::byte_level();
    let cfg = tiny_config(tok.vocab_size(), 64);
    let mut rm = RewardModel::new(Transformer::new(cfg, 6).unwrap(), tok).unwrap();
    let mut rng = common::rng(8);
    let pairs: Vec<PreferencePair> = (0..48)
        .map(|_| {
            let s = common::farm_sentence(&mut rng);
            PreferencePair { prompt: String::new(), chosen: s.replace('.', "!"), rejected: s }
        })
        .collect();
    let before = rm.evaluate_pairs(&pairs).unwrap();
    assert!((before.loss - std::f64::consts::LN_2).abs() < 1e-9);
    let tc = TrainConfig { lr: 3e-3, warmup_steps: 2, total_steps: 60, batch_size: 8, ..Default::default() };
    train_reward(&mut rm, &pairs, &tc, LoopOptions::default()).unwrap();
    let after = rm.evaluate_pairs(&pairs).unwrap();
    assert!(after.loss < before.loss, "{} ≥ {}", after.loss, before.loss);
    assert!(after.accuracy > 0.9, "{}", after.accuracy);

    let dir = tempfile::tempdir().unwrap();
    rm.save(dir.path()).unwrap();
    let back = RewardModel::load(dir.path()).unwrap();
    assert_eq!(back.evaluate_pairs(&pairs).unwrap(), after);
    assert_eq!(back.score_text("a dog sees the hen!").unwrap(), rm.score_text("a dog sees the hen!").unwrap());
}
