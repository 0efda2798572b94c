//! The training loop: rollouts, updates, periodic argmax evaluation, JSONL
//! logging, and checkpointing with exact resume.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::buffer::{RewardWindow, RolloutCtx};
use super::{
    collect_rollout, load_checkpoint, ppo_update, save_checkpoint, Adam, Checkpoint,
    CheckpointMeta, EnvRunner, SavedEnvRunner, TrainError, UpdateStats,
};
use crate::config::RunConfig;
use crate::diff::{ParamStore, Tensor};
use crate::grid::{
    generate_grid, Action, EnvSpec, EpisodeState, EpisodeSummary, Heading, NavGraph, Observation,
    SignatureBank,
};
use crate::metrics::{aggregate_report, MetricReport};
use crate::policy::{ActMode, PolicyNet};
use crate::rng::{derive_seed, stream_from_seed, RngState};

const BANK_TAG: u64 = 0xBA;
const ENV_POOL_TAG: u64 = 0xE0;
const ACTION_TAG: u64 = 0xAC;
const EVAL_TAG: u64 = 0xE7A1;

/// Master seed for an evaluation pass (periodic evals use the update index,
/// the standalone evaluator uses 0).
pub fn eval_master_seed(env_seed: u64, update: u64) -> u64 {
    derive_seed(env_seed, &[EVAL_TAG, update])
}

/// Static context shared by training and evaluation.
pub struct TrainSetup {
    pub graph: Arc<NavGraph>,
    pub bank: SignatureBank,
    pub spec: EnvSpec,
    pub net: PolicyNet,
}

impl TrainSetup {
    pub fn from_config(cfg: &RunConfig) -> Result<TrainSetup, TrainError> {
        let graph = Arc::new(generate_grid(
            cfg.grid_seed(),
            cfg.env.width,
            cfg.env.height,
            cfg.env.obstacle_density,
        )?);
        if graph.traversable_count() < 2 {
            return Err(TrainError::Setup(
                "generated grid has fewer than 2 traversable cells".to_string(),
            ));
        }
        let bank = SignatureBank::generate(
            derive_seed(cfg.seeds.env, &[BANK_TAG]),
            cfg.env.audio_bins,
        );
        let spec = cfg.env_spec();
        let resolved = cfg
            .policy
            .resolve(cfg.env.depth_res, cfg.env.audio_bins)
            .map_err(TrainError::Policy)?;
        Ok(TrainSetup {
            graph,
            bank,
            spec,
            net: PolicyNet::new(resolved),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub updates_run: usize,
    pub env_steps: usize,
    pub episodes_completed: usize,
    /// (update index, report) for every evaluation pass, final one last.
    pub evals: Vec<(usize, MetricReport)>,
    pub stopped_early: bool,
    pub final_checkpoint: PathBuf,
}

struct LoopState {
    store: ParamStore,
    adam: Adam,
    envs: Vec<EnvRunner>,
    action_rng: ChaCha8Rng,
    update: usize,
    env_steps: usize,
    episodes_completed: usize,
    reward_window: RewardWindow,
}

/// Trains from scratch per the config, writing logs and checkpoints under
/// `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let setup = TrainSetup::from_config(cfg)?;
    let env_master = derive_seed(cfg.seeds.env, &[ENV_POOL_TAG]);
    let mut envs = Vec::with_capacity(cfg.ppo.num_envs);
    for i in 0..cfg.ppo.num_envs {
        envs.push(EnvRunner::fresh(
            setup.graph.clone(),
            &setup.bank,
            &cfg.sound_split.train,
            &setup.spec,
            env_master,
            i,
            0,
            setup.net.cfg().hidden_dim,
        )?);
    }
    let store = crate::policy::init_params(setup.net.cfg(), cfg.seeds.init)?;
    let adam = Adam::new(&store);
    let state = LoopState {
        store,
        adam,
        envs,
        action_rng: stream_from_seed(derive_seed(cfg.seeds.action, &[ACTION_TAG])),
        update: 0,
        env_steps: 0,
        episodes_completed: 0,
        reward_window: RewardWindow::new(cfg.ppo.reward_window),
    };
    run_loop(cfg, &setup, state, out_dir)
}

/// Resumes a checkpointed run. The stored config is reused verbatim except
/// for an optional new total update count.
pub fn resume_training(
    checkpoint_path: &Path,
    out_dir: &Path,
    num_updates_override: Option<usize>,
) -> Result<TrainOutcome, TrainError> {
    let ckpt = load_checkpoint(checkpoint_path)?;
    let mut cfg: RunConfig = serde_json::from_value(ckpt.meta.config.clone())?;
    if let Some(m) = num_updates_override {
        cfg.ppo.num_updates = m;
    }
    let cfg = cfg
        .resolve()
        .map_err(|e| TrainError::Setup(e.to_string()))?;
    let setup = TrainSetup::from_config(&cfg)?;

    let mut store = ParamStore::new();
    for (name, tensor) in &ckpt.tensors {
        if let Some(stripped) = name.strip_prefix("param/") {
            store
                .insert(stripped, tensor.clone())
                .map_err(crate::policy::PolicyError::from)?;
        }
    }
    let mut m = Vec::with_capacity(store.len());
    let mut v = Vec::with_capacity(store.len());
    for (name, _) in store.iter() {
        let mm = ckpt
            .tensor(&format!("adam_m/{name}"))
            .ok_or_else(|| TrainError::Setup(format!("checkpoint missing adam_m/{name}")))?;
        let vv = ckpt
            .tensor(&format!("adam_v/{name}"))
            .ok_or_else(|| TrainError::Setup(format!("checkpoint missing adam_v/{name}")))?;
        m.push(mm.data().to_vec());
        v.push(vv.data().to_vec());
    }
    let adam = Adam::restore(&store, m, v, ckpt.meta.adam_step);

    let envs = ckpt
        .meta
        .envs
        .iter()
        .map(|saved| EnvRunner {
            env_index: saved.env_index,
            episode_index: saved.episode_index,
            state: EpisodeState::restore(setup.graph.clone(), &setup.bank, &saved.episode),
            last_obs: saved.last_obs.clone(),
            hidden: saved.hidden.clone(),
        })
        .collect();

    let state = LoopState {
        store,
        adam,
        envs,
        action_rng: ckpt.meta.action_rng.restore(),
        update: ckpt.meta.update,
        env_steps: ckpt.meta.env_steps,
        episodes_completed: ckpt.meta.episodes_completed,
        reward_window: RewardWindow::restore(cfg.ppo.reward_window, ckpt.meta.reward_window),
    };
    run_loop(&cfg, &setup, state, out_dir)
}

fn run_loop(
    cfg: &RunConfig,
    setup: &TrainSetup,
    mut state: LoopState,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let mut train_log = JsonlWriter::create(out_dir.join("train_log.jsonl"))?;
    let mut episode_log = JsonlWriter::create(out_dir.join("episodes.jsonl"))?;
    let mut eval_log = JsonlWriter::create(out_dir.join("eval_log.jsonl"))?;

    let env_master = derive_seed(cfg.seeds.env, &[ENV_POOL_TAG]);
    let config_echo = cfg.to_value();
    let ppo_cfg = &cfg.ppo;
    let mut evals: Vec<(usize, MetricReport)> = Vec::new();
    let mut stopped_early = false;

    #[derive(Serialize)]
    struct EpisodeRecord<'a> {
        env: usize,
        episode: u64,
        #[serde(flatten)]
        summary: &'a EpisodeSummary,
    }
    #[derive(Serialize)]
    struct EvalRecord<'a> {
        update: usize,
        env_steps: usize,
        #[serde(flatten)]
        report: &'a MetricReport,
    }

    while state.update < ppo_cfg.num_updates {
        let update = state.update + 1;
        let ctx = RolloutCtx {
            graph: setup.graph.clone(),
            bank: &setup.bank,
            split: &cfg.sound_split.train,
            spec: &setup.spec,
            env_master,
        };
        let mut new_summaries: Vec<(usize, u64, EpisodeSummary)> = Vec::new();
        let buffer = collect_rollout(
            &ctx,
            &mut state.envs,
            &setup.net,
            &state.store,
            ppo_cfg,
            &mut state.action_rng,
            |env, episode, summary| new_summaries.push((env, episode, summary.clone())),
        )?;
        for (env, episode, summary) in &new_summaries {
            state.episodes_completed += 1;
            state.reward_window.push(summary.total_reward);
            episode_log.write(&EpisodeRecord {
                env: *env,
                episode: *episode,
                summary,
            })?;
        }
        state.env_steps += buffer.transitions();

        let mut stats: UpdateStats =
            ppo_update(&buffer, &setup.net, &mut state.store, &mut state.adam, ppo_cfg)?;
        stats.update = update;
        stats.env_steps = state.env_steps;
        stats.mean_episode_reward = state.reward_window.mean();
        stats.episodes_completed = state.episodes_completed;
        train_log.write(&stats)?;
        state.update = update;

        if ppo_cfg.eval_every > 0 && update % ppo_cfg.eval_every == 0 {
            let summaries = run_eval_episodes(
                &setup.graph,
                &setup.bank,
                cfg.eval_ids(),
                &setup.spec,
                &setup.net,
                &state.store,
                eval_master_seed(cfg.seeds.env, update as u64),
                ppo_cfg.eval_episodes,
                &mut |_| {},
            )?;
            let report = aggregate_report(&summaries)?;
            eval_log.write(&EvalRecord {
                update,
                env_steps: state.env_steps,
                report: &report,
            })?;
            let srt = report.srt;
            evals.push((update, report));
            if let Some(target) = ppo_cfg.target_srt {
                if srt >= target {
                    log::info!("target SRT {target} reached at update {update}");
                    stopped_early = true;
                    break;
                }
            }
        }

        if ppo_cfg.checkpoint_every > 0 && update % ppo_cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("ckpt_{update:06}.bin"));
            save_checkpoint(&path, &build_checkpoint(&config_echo, &state))?;
        }
    }

    let final_path = out_dir.join("ckpt_final.bin");
    save_checkpoint(&final_path, &build_checkpoint(&config_echo, &state))?;

    // Make sure the run ends with an evaluation unless one just happened.
    let needs_final_eval = ppo_cfg.eval_episodes > 0
        && evals.last().map(|(u, _)| *u) != Some(state.update);
    if needs_final_eval {
        let summaries = run_eval_episodes(
            &setup.graph,
            &setup.bank,
            cfg.eval_ids(),
            &setup.spec,
            &setup.net,
            &state.store,
            eval_master_seed(cfg.seeds.env, state.update as u64),
            ppo_cfg.eval_episodes,
            &mut |_| {},
        )?;
        let report = aggregate_report(&summaries)?;
        eval_log.write(&EvalRecord {
            update: state.update,
            env_steps: state.env_steps,
            report: &report,
        })?;
        evals.push((state.update, report));
    }

    train_log.finish()?;
    episode_log.finish()?;
    eval_log.finish()?;

    Ok(TrainOutcome {
        updates_run: state.update,
        env_steps: state.env_steps,
        episodes_completed: state.episodes_completed,
        evals,
        stopped_early,
        final_checkpoint: final_path,
    })
}

fn build_checkpoint(config_echo: &serde_json::Value, state: &LoopState) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(3 * state.store.len());
    for (name, tensor) in state.store.iter() {
        tensors.push((format!("param/{name}"), tensor.clone()));
    }
    let (m, v) = state.adam.moments();
    for (idx, (name, _)) in state.store.iter().enumerate() {
        tensors.push((
            format!("adam_m/{name}"),
            Tensor::from_vec(m[idx].clone()),
        ));
        tensors.push((
            format!("adam_v/{name}"),
            Tensor::from_vec(v[idx].clone()),
        ));
    }
    Checkpoint {
        meta: CheckpointMeta {
            config: config_echo.clone(),
            update: state.update,
            env_steps: state.env_steps,
            episodes_completed: state.episodes_completed,
            adam_step: state.adam.step_count(),
            action_rng: RngState::capture(&state.action_rng),
            envs: state
                .envs
                .iter()
                .map(|e| SavedEnvRunner {
                    env_index: e.env_index,
                    episode_index: e.episode_index,
                    episode: e.state.save(),
                    hidden: e.hidden.clone(),
                    last_obs: e.last_obs.clone(),
                })
                .collect(),
            reward_window: state.reward_window.snapshot(),
        },
        tensors,
    }
}

/// One step of an evaluation episode, for trajectory logging.
pub struct EvalHook<'a> {
    pub episode: u64,
    pub step: usize,
    pub pre_obs: &'a Observation,
    pub h_prev: &'a [f64],
    pub robot_cell: usize,
    pub robot_heading: Heading,
    pub source_cell: usize,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

/// Runs argmax evaluation episodes on fresh deterministic seeds, invoking the
/// hook after every step. Never touches training RNG streams.
#[allow(clippy::too_many_arguments)]
pub fn run_eval_episodes(
    graph: &Arc<NavGraph>,
    bank: &SignatureBank,
    ids: &[usize],
    spec: &EnvSpec,
    net: &PolicyNet,
    store: &ParamStore,
    eval_master: u64,
    episodes: usize,
    on_step: &mut dyn FnMut(EvalHook<'_>),
) -> Result<Vec<EpisodeSummary>, TrainError> {
    let mut summaries = Vec::with_capacity(episodes);
    // Argmax never draws from this stream; it only satisfies the interface.
    let mut rng = stream_from_seed(0);
    for k in 0..episodes as u64 {
        let seed = EnvRunner::episode_seed(eval_master, 0, k);
        let sig = EnvRunner::episode_signature(eval_master, 0, k, ids);
        let (mut state, mut obs) =
            EpisodeState::reset(graph.clone(), spec, seed, bank.get(sig).clone())?;
        let mut hidden = net.zero_hidden();
        let mut step = 0usize;
        loop {
            let act = net.act(store, &obs, &hidden, ActMode::Argmax, &mut rng)?;
            let outcome = state.step(act.action, spec)?;
            on_step(EvalHook {
                episode: k,
                step,
                pre_obs: &obs,
                h_prev: &hidden,
                robot_cell: state.robot.cell,
                robot_heading: state.robot.heading,
                source_cell: state.source.cell,
                action: act.action,
                reward: outcome.reward,
                done: outcome.done,
                success: outcome.success,
            });
            step += 1;
            if outcome.done {
                summaries.push(outcome.summary.expect("done steps carry a summary"));
                break;
            }
            obs = outcome.observation;
            hidden = act.h_new;
        }
    }
    Ok(summaries)
}

/// Line-buffered JSONL writer with stable formatting.
pub struct JsonlWriter {
    inner: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: PathBuf) -> Result<JsonlWriter, TrainError> {
        Ok(JsonlWriter {
            inner: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), TrainError> {
        serde_json::to_writer(&mut self.inner, record)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), TrainError> {
        self.inner.flush()?;
        Ok(())
    }
}
