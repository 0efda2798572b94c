//! Acceptance suite: one test per release criterion, each printing a PASS
//! line with its measured numbers (`cargo test --test acceptance -- --nocapture`
//! shows them on success).

mod common;

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use avchase_core::config::validate_config;
use avchase_core::diff::{ParamStore, Tape, Tensor};
use avchase_core::grid::{
    bfs_shortest_path, generate_grid, EnvSpec, EpisodeState, EpisodeSummary, SignatureBank,
};
use avchase_core::metrics::aggregate_report;
use avchase_core::policy::{fsa_attention, fsa_fuse, FusionKind};
use avchase_core::ppo::{compute_gae, run_eval_episodes, train, TrainSetup};
use avchase_core::rng::stream_from_seed;
use avchase_core::runner::{run_eval, run_grad_check, run_replay};
use avchase_core::RunConfig;

fn sig(bank_seed: u64) -> avchase_core::grid::SoundSignature {
    SignatureBank::generate(bank_seed, 16).get(0).clone()
}

#[test]
fn criterion_01_gradient_suite() {
    let started = Instant::now();
    let results = run_grad_check(7).unwrap();
    let elapsed = started.elapsed();
    assert_eq!(results.len(), 4, "all four fusion kinds must be covered");
    let mut worst: f64 = 0.0;
    for (kind, err) in &results {
        assert!(
            *err <= 1e-4,
            "FAIL criterion 1: {} fusion grad error {:.3e} > 1e-4",
            kind.as_str(),
            err
        );
        worst = worst.max(*err);
    }
    assert!(
        elapsed.as_secs() < 60,
        "FAIL criterion 1: runtime {:?} >= 1 min",
        elapsed
    );
    println!(
        "PASS criterion 1: full-policy gradient check, 4 fusion kinds, 3-step unroll; max rel err {:.3e} <= 1e-4 in {:.1?}",
        worst, elapsed
    );
}

#[test]
fn criterion_02_fsa_closed_forms() {
    // Single token (2D == d): attention over a singleton is 1, out = 2 * in.
    let d = 6usize;
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    let mut rng = stream_from_seed(2);
    let rand_mat = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
        Tensor::new(vec![n, n], (0..n * n).map(|_| rng.gen::<f64>() - 0.5).collect()).unwrap()
    };
    store.insert("w1", rand_mat(&mut rng, d)).unwrap();
    store.insert("w2", rand_mat(&mut rng, d)).unwrap();
    let input: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    let e = tape.constant(Tensor::new(vec![1, d], input.clone()).unwrap());
    let w1 = tape.param(&store, "w1").unwrap();
    let w2 = tape.param(&store, "w2").unwrap();
    let out = fsa_fuse(&mut tape, e, w1, w2, d).unwrap();
    for (o, i) in tape.value(out).data().iter().zip(&input) {
        assert!(
            (o - 2.0 * i).abs() <= 1e-12,
            "FAIL criterion 2: single-token residual identity"
        );
    }

    // Zero weights: every attention row is uniform, out_i = V_i + mean_j V_j.
    let (tokens, d) = (4usize, 8usize);
    let width = tokens * d;
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    store.insert("w1", Tensor::zeros(&[d, d])).unwrap();
    store.insert("w2", Tensor::zeros(&[d, d])).unwrap();
    let data: Vec<f64> = (0..width).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
    let e = tape.constant(Tensor::new(vec![1, width], data.clone()).unwrap());
    let w1 = tape.param(&store, "w1").unwrap();
    let w2 = tape.param(&store, "w2").unwrap();
    let out = fsa_fuse(&mut tape, e, w1, w2, d).unwrap();
    for t in 0..tokens {
        for j in 0..d {
            let mean: f64 = (0..tokens).map(|k| data[k * d + j]).sum::<f64>() / tokens as f64;
            let want = data[t * d + j] + mean;
            let got = tape.value(out).data()[t * d + j];
            assert!(
                (got - want).abs() <= 1e-12,
                "FAIL criterion 2: zero-weight token-mean form"
            );
        }
    }

    // Attention rows are a probability simplex for random weights.
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    store.insert("w1", rand_mat(&mut rng, d)).unwrap();
    store.insert("w2", rand_mat(&mut rng, d)).unwrap();
    let e = tape.constant(Tensor::new(
        vec![3, width],
        (0..3 * width).map(|_| rng.gen::<f64>() - 0.5).collect(),
    )
    .unwrap());
    let w1 = tape.param(&store, "w1").unwrap();
    let w2 = tape.param(&store, "w2").unwrap();
    let attn = fsa_attention(&mut tape, e, w1, w2, d).unwrap();
    for row in tape.value(attn).data().chunks(tokens) {
        let sum: f64 = row.iter().sum();
        assert!(
            (sum - 1.0).abs() <= 1e-9,
            "FAIL criterion 2: attention row sums to {}",
            sum
        );
        assert!(row.iter().all(|&p| p >= 0.0));
    }

    println!(
        "PASS criterion 2: FSA closed forms exact to 1e-12; attention rows sum to 1 within 1e-9"
    );
}

#[test]
fn criterion_03_gae_oracle() {
    let mut rng = stream_from_seed(33);
    let (gamma, tau) = (0.99, 0.95);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = 20;
        let rewards: Vec<f64> = (0..t).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let values: Vec<f64> = (0..t).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let dones: Vec<bool> = (0..t).map(|_| rng.gen::<f64>() < 0.2).collect();
        let bootstrap: f64 = rng.gen::<f64>() - 0.5;
        let got = compute_gae(&rewards, &values, &dones, bootstrap, gamma, tau);

        // Brute-force double loop: A_t = sum_k (gamma*tau)^(k-t) * delta_k,
        // cut at episode boundaries.
        for start in 0..t {
            let mut acc = 0.0;
            let mut weight = 1.0;
            for k in start..t {
                let mask = if dones[k] { 0.0 } else { 1.0 };
                let next_value = if k + 1 < t { values[k + 1] } else { bootstrap };
                acc += weight * (rewards[k] + gamma * next_value * mask - values[k]);
                if mask == 0.0 {
                    break;
                }
                weight *= gamma * tau;
            }
            let diff = (got.advantages[start] - acc).abs();
            worst = worst.max(diff);
            assert!(
                diff <= 1e-12,
                "FAIL criterion 3: advantage mismatch {} at step {}",
                diff,
                start
            );
            let ret_diff = (got.returns[start] - (acc + values[start])).abs();
            assert!(ret_diff <= 1e-12);
        }
    }
    println!(
        "PASS criterion 3: 100 random 20-step GAE sequences match the double-loop oracle; worst abs diff {:.2e} <= 1e-12",
        worst
    );
}

#[test]
fn criterion_04_metric_oracle() {
    let mut rng = stream_from_seed(44);
    let mut worst: f64 = 0.0;
    for set in 0..200 {
        let n = 1 + (rng.gen::<f64>() * 30.0) as usize;
        let summaries: Vec<EpisodeSummary> = (0..n)
            .map(|_| {
                let success = rng.gen::<f64>() < 0.5;
                let l = (rng.gen::<f64>() * 12.0) as usize;
                let p = (rng.gen::<f64>() * 20.0) as usize;
                let la = l + (rng.gen::<f64>() * 6.0) as usize;
                let pa = p + (rng.gen::<f64>() * 10.0) as usize;
                let d = if rng.gen::<f64>() < 0.1 { 0 } else { 1 + (rng.gen::<f64>() * 10.0) as usize };
                let da = if success { 0 } else { (rng.gen::<f64>() * 12.0) as usize };
                EpisodeSummary {
                    success,
                    executed_path_length: p,
                    executed_action_count: pa,
                    shortest_path_length: l,
                    shortest_action_count: la,
                    final_agent_to_goal: da,
                    start_to_final_goal: d,
                    total_reward: rng.gen::<f64>() * 22.0 - 2.0,
                }
            })
            .collect();
        let report = aggregate_report(&summaries).unwrap();
        let oracle = common::recompute_metrics(&summaries);
        let got = [
            report.splt,
            report.ssplt,
            report.srt,
            report.nat,
            report.snat,
            report.dtgt,
            report.ndtgt,
            report.r_mean,
        ];
        for (name, (g, o)) in ["splt", "ssplt", "srt", "nat", "snat", "dtgt", "ndtgt", "r_mean"]
            .iter()
            .zip(got.iter().zip(oracle.iter()))
        {
            let diff = (g - o).abs();
            worst = worst.max(diff);
            assert!(
                diff <= 1e-12,
                "FAIL criterion 4: {} mismatch {} in set {}",
                name,
                diff,
                set
            );
        }
    }
    println!(
        "PASS criterion 4: 200 random summary sets match the independent recomputation on all metrics; worst abs diff {:.2e} <= 1e-12",
        worst
    );
}

#[test]
fn criterion_05_source_protocol() {
    let graph = Arc::new(generate_grid(21, 8, 8, 0.25).unwrap());
    let spec = EnvSpec {
        noise_std: 0.0,
        ..EnvSpec::default()
    };
    let (mut state, _) =
        EpisodeState::reset(graph.clone(), &spec, 4242, sig(5)).unwrap();
    let ticks = 10_000;
    let mut moves = 0usize;
    for _ in 0..ticks {
        let before = state.source.cell;
        let moved = state.source_tick(&spec);
        if moved {
            moves += 1;
            assert!(
                graph.neighbors(before).any(|n| n == state.source.cell),
                "FAIL criterion 5: source move was not a single graph edge"
            );
        } else {
            assert_eq!(before, state.source.cell);
        }
        assert!(
            graph
                .bfs_distance(state.source.cell, state.source.destination)
                .is_some(),
            "FAIL criterion 5: destination unreachable"
        );
        // The remaining plan is always a valid shortest path.
        assert_eq!(state.source.planned_path[0], state.source.cell);
        assert_eq!(
            state.source.planned_path.len() - 1,
            graph
                .bfs_distance(state.source.cell, state.source.destination)
                .unwrap()
        );
    }
    let freq = moves as f64 / ticks as f64;
    assert!(
        (0.28..=0.32).contains(&freq),
        "FAIL criterion 5: move frequency {} outside [0.28, 0.32]",
        freq
    );
    println!(
        "PASS criterion 5: 10000 source ticks; move frequency {:.4} in [0.28, 0.32]; every move one edge; destinations reachable",
        freq
    );
}

#[test]
fn criterion_06_shortest_path_oracle() {
    let mut rng = stream_from_seed(66);
    let mut pairs_checked = 0usize;
    for seed in 0..50u64 {
        let w = 3 + (rng.gen::<f64>() * 6.0) as usize; // 3..=8
        let h = 3 + (rng.gen::<f64>() * 6.0) as usize;
        let density = rng.gen::<f64>() * 0.4;
        let graph = generate_grid(seed, w, h, density).unwrap();
        let oracle = common::floyd_warshall(&graph);
        let cells = graph.traversable_cells();
        for &a in &cells {
            let bfs = graph.bfs_distances_from(a);
            for &b in &cells {
                assert_eq!(
                    bfs[b], oracle[a][b],
                    "FAIL criterion 6: distance mismatch {}->{} on seed {}",
                    a, b, seed
                );
                // Path hop counts agree with the distances.
                if a != b && (a + b) % 7 == 0 {
                    let path = bfs_shortest_path(&graph, a, b).unwrap();
                    assert_eq!(path.map(|p| p.len() - 1), oracle[a][b]);
                }
                pairs_checked += 1;
            }
        }
    }
    println!(
        "PASS criterion 6: BFS equals Floyd-Warshall on 50 random grids ({} pairs), exact",
        pairs_checked
    );
}

fn determinism_config() -> RunConfig {
    let mut cfg = validate_config("{}").unwrap();
    cfg.ppo.num_updates = 5;
    cfg.ppo.num_envs = 4;
    cfg.ppo.eval_every = 0;
    cfg.ppo.eval_episodes = 5;
    cfg.ppo.checkpoint_every = 2;
    cfg.resolve().unwrap()
}

#[test]
fn criterion_07_full_run_determinism_and_replay() {
    let cfg = determinism_config();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let outcome = train(&cfg, dir.path()).unwrap();
        let files = [
            "train_log.jsonl",
            "episodes.jsonl",
            "eval_log.jsonl",
            "ckpt_000002.bin",
            "ckpt_000004.bin",
            "ckpt_final.bin",
        ];
        let bytes: Vec<Vec<u8>> = files
            .iter()
            .map(|f| std::fs::read(dir.path().join(f)).unwrap())
            .collect();
        (dir, outcome, files, bytes)
    };
    let (_dir_a, outcome_a, files, bytes_a) = run();
    let (_dir_b, _outcome_b, _, bytes_b) = run();
    for ((f, a), b) in files.iter().zip(&bytes_a).zip(&bytes_b) {
        assert_eq!(a, b, "FAIL criterion 7: {f} differs between identical runs");
    }

    // Replay an eval trajectory from the trained checkpoint, bitwise.
    let eval_dir = tempfile::tempdir().unwrap();
    let arts = run_eval(
        &outcome_a.final_checkpoint,
        eval_dir.path(),
        Some(5),
        false,
        None,
    )
    .unwrap();
    let replayed = run_replay(&eval_dir.path().join("trajectory.jsonl")).unwrap();
    assert_eq!(replayed.steps, arts.steps);
    assert_eq!(replayed.episodes, arts.episodes);

    println!(
        "PASS criterion 7: two 5-update runs byte-identical across logs and checkpoints; replay reproduced {} steps bitwise",
        replayed.steps
    );
}

#[test]
fn criterion_08_learning_smoke_test() {
    let started = Instant::now();
    let mut cfg = validate_config("{}").unwrap();
    // 9x9 grid at 0.15 density, FSA fusion, stock hyperparameters; cap at
    // 500k env steps (833 updates x 4 envs x 150 steps).
    assert_eq!(cfg.env.width, 9);
    assert_eq!(cfg.env.height, 9);
    assert_eq!(cfg.env.obstacle_density, 0.15);
    assert_eq!(cfg.policy.fusion, FusionKind::Fsa);
    cfg.ppo.num_updates = 833;
    cfg.ppo.eval_every = 10;
    cfg.ppo.eval_episodes = 20;
    cfg.ppo.checkpoint_every = 0;
    cfg.ppo.target_srt = Some(0.7);
    let cfg = cfg.resolve().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&cfg, dir.path()).unwrap();
    let elapsed = started.elapsed();

    let hit = outcome
        .evals
        .iter()
        .find(|(_, report)| report.srt >= 0.7)
        .map(|(update, report)| (*update, report.clone()));
    let (update, report) = hit.unwrap_or_else(|| {
        panic!(
            "FAIL criterion 8: SRT never reached 0.7 within {} env steps",
            outcome.env_steps
        )
    });
    let steps_at_hit = update * cfg.ppo.num_envs * cfg.ppo.rollout_steps;
    assert!(
        steps_at_hit <= 500_000,
        "FAIL criterion 8: target reached only after {} env steps",
        steps_at_hit
    );
    assert!(
        elapsed.as_secs() <= 30 * 60,
        "FAIL criterion 8: runtime {:?} over 30 min",
        elapsed
    );
    println!(
        "PASS criterion 8: eval SRT {:.3} >= 0.7 at update {} ({} env steps, splt {:.3}, nat {:.1}) in {:.1?}",
        report.srt, update, steps_at_hit, report.splt, report.nat, elapsed
    );
}

#[test]
fn criterion_09_directional_fsa_vs_concat() {
    // Soft, non-blocking: reported, not asserted. The budget sits past the
    // pursuit phase transition observed during calibration (~110 updates on
    // the smoke grid), so the comparison reflects trained behavior.
    let budget_updates = 120;
    let mut means = Vec::new();
    for fusion in [FusionKind::Fsa, FusionKind::Concat] {
        let mut srts = Vec::new();
        for seed in [11u64, 22, 33] {
            let mut cfg = validate_config("{}").unwrap();
            cfg.policy.fusion = fusion;
            cfg.seeds.env = seed;
            cfg.seeds.init = seed + 100;
            cfg.seeds.action = seed + 200;
            cfg.ppo.num_updates = budget_updates;
            cfg.ppo.eval_every = 0;
            cfg.ppo.eval_episodes = 20;
            cfg.ppo.checkpoint_every = 0;
            let cfg = cfg.resolve().unwrap();
            let dir = tempfile::tempdir().unwrap();
            let outcome = train(&cfg, dir.path()).unwrap();
            let srt = outcome.evals.last().map(|(_, r)| r.srt).unwrap_or(0.0);
            srts.push(srt);
        }
        let mean = srts.iter().sum::<f64>() / srts.len() as f64;
        println!(
            "REPORT criterion 9: {} mean SRT {:.3} over seeds {:?}",
            fusion.as_str(),
            mean,
            srts
        );
        means.push(mean);
    }
    let (fsa, concat) = (means[0], means[1]);
    let ordering_holds = fsa >= concat - 0.05;
    println!(
        "PASS criterion 9 (reported, non-blocking): FSA {:.3} vs Concat {:.3}; FSA >= Concat - 0.05 is {} at {} updates/seed",
        fsa, concat, ordering_holds, budget_updates
    );
}

#[test]
fn criterion_10_impact_probe_with_blinded_visual_encoder() {
    let mut cfg = validate_config("{}").unwrap();
    cfg.env.width = 6;
    cfg.env.height = 6;
    cfg.env.max_steps = 30;
    let cfg = cfg.resolve().unwrap();
    let setup = TrainSetup::from_config(&cfg).unwrap();
    let mut store = avchase_core::policy::init_params(setup.net.cfg(), 5).unwrap();
    store.zero_values_with_prefix("visual.");

    // Record real argmax episodes (observations + pre-step hiddens).
    let mut records: VecDeque<avchase_core::analysis::ObsRecord> = VecDeque::new();
    run_eval_episodes(
        &setup.graph,
        &setup.bank,
        cfg.eval_ids(),
        &setup.spec,
        &setup.net,
        &store,
        1234,
        6,
        &mut |hook| {
            records.push_back(avchase_core::analysis::ObsRecord {
                episode: hook.episode,
                step: hook.step,
                observation: hook.pre_obs.clone(),
                h_prev: hook.h_prev.to_vec(),
            });
        },
    )
    .unwrap();
    let records: Vec<_> = records.into_iter().collect();
    assert!(records.len() >= 6);

    let scores = avchase_core::analysis::modality_impact(
        &setup.net,
        &store,
        &records,
        cfg.seeds.noise,
        1,
    )
    .unwrap();
    for s in &scores {
        assert_eq!(
            (s.visual_impact, s.audio_impact),
            (0.0, 1.0),
            "FAIL criterion 10: step {} impacts not exactly (0, 1)",
            s.step
        );
    }
    println!(
        "PASS criterion 10: zeroed visual encoder yields per-step normalized impacts (0, 1) exactly over {} steps",
        scores.len()
    );
}
