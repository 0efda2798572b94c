//! Episode state machine: reset, the moving-source protocol, step dynamics
//! and rewards, plus per-episode summaries for the metric suite.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    bfs_shortest_path, min_action_count, render_depth, synthesize_binaural, Action, CellId,
    GridError, Heading, NavGraph, Observation, Pose, SignatureBank, SoundSignature, HEADINGS,
};
use crate::rng::{derive_seed, stream_from_seed, RngState};

/// Reward rule constants, applied additively per step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Bonus on catching the target.
    pub success: f64,
    /// Bonus when the Manhattan distance to the target shrank this step.
    pub approach_bonus: f64,
    /// Multiplier on the approach bonus.
    pub distance_scale: f64,
    /// Per-step time penalty (negative).
    pub slack: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            success: 10.0,
            approach_bonus: 0.25,
            distance_scale: 1.0,
            slack: -0.01,
        }
    }
}

/// Static per-run environment parameters shared by all episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub max_steps: usize,
    pub depth_res: (usize, usize),
    pub max_range: usize,
    pub noise_std: f64,
    pub move_prob: f64,
    pub reward: RewardConfig,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            max_steps: 500,
            depth_res: (16, 16),
            max_range: 8,
            noise_std: 0.02,
            move_prob: 0.3,
            reward: RewardConfig::default(),
        }
    }
}

/// The moving sound source: where it is, where it is headed, and the
/// remaining shortest path between the two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceState {
    pub cell: CellId,
    pub destination: CellId,
    /// Remaining path; `planned_path[0]` is always the current cell.
    pub planned_path: VecDeque<CellId>,
    pub signature: SoundSignature,
}

/// Everything a finished episode contributes to the metric suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub success: bool,
    /// Cells actually traversed by the robot.
    pub executed_path_length: usize,
    /// Actions executed, including rotations and blocked moves.
    pub executed_action_count: usize,
    /// Geodesic hops from the robot's start to the target's final cell.
    pub shortest_path_length: usize,
    /// Minimal actions (moves + rotations) from the start pose to the
    /// target's final cell.
    pub shortest_action_count: usize,
    /// Geodesic distance robot-to-target at episode end (0 on success).
    pub final_agent_to_goal: usize,
    /// Geodesic distance from the robot's start to the target's final cell.
    pub start_to_final_goal: usize,
    pub total_reward: f64,
}

/// Result of one environment step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub summary: Option<EpisodeSummary>,
}

/// Full mutable episode state. Single-owner; all randomness flows through the
/// episode's own streams, so independent episodes never interact.
#[derive(Clone, Debug)]
pub struct EpisodeState {
    graph: Arc<NavGraph>,
    pub robot: Pose,
    pub source: SourceState,
    pub step_count: usize,
    pub done: bool,
    pub success: bool,
    prev_manhattan: usize,
    /// Placement at reset, observation noise afterwards.
    rng_env: ChaCha8Rng,
    /// Source destinations and the move gate; isolated so source behavior is
    /// reproducible independent of observation noise.
    rng_source: ChaCha8Rng,
    pub start_robot_cell: CellId,
    pub start_source_cell: CellId,
    start_heading: Heading,
    cells_moved: usize,
    actions_taken: usize,
    total_reward: f64,
}

/// Serializable snapshot of an [`EpisodeState`] (graph and signature bank are
/// reconstructed from config, so only the signature id is stored).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedEpisode {
    pub robot: Pose,
    pub source_cell: CellId,
    pub destination: CellId,
    pub planned_path: VecDeque<CellId>,
    pub signature_id: usize,
    pub step_count: usize,
    pub done: bool,
    pub success: bool,
    pub prev_manhattan: usize,
    pub rng_env: RngState,
    pub rng_source: RngState,
    pub start_robot_cell: CellId,
    pub start_source_cell: CellId,
    pub start_heading: Heading,
    pub cells_moved: usize,
    pub actions_taken: usize,
    pub total_reward: f64,
}

const STREAM_ENV: u64 = 0;
const STREAM_SOURCE: u64 = 1;

impl EpisodeState {
    /// Places robot and source on distinct uniformly random traversable
    /// cells, samples the source's first destination, and returns the initial
    /// observation.
    pub fn reset(
        graph: Arc<NavGraph>,
        spec: &EnvSpec,
        episode_seed: u64,
        signature: SoundSignature,
    ) -> Result<(EpisodeState, Observation), GridError> {
        let cells = graph.traversable_cells();
        if cells.len() < 2 {
            return Err(GridError::TooFewCells(cells.len()));
        }

        let mut rng_env = stream_from_seed(derive_seed(episode_seed, &[STREAM_ENV]));
        let mut rng_source = stream_from_seed(derive_seed(episode_seed, &[STREAM_SOURCE]));

        let robot_cell = cells[rng_env.gen_range(0..cells.len())];
        let source_cell = sample_excluding(&cells, robot_cell, &mut rng_env);
        let heading = HEADINGS[rng_env.gen_range(0..4)];

        let (destination, planned_path) = plan_route(&graph, source_cell, &mut rng_source);

        let robot = Pose {
            cell: robot_cell,
            heading,
        };
        let prev_manhattan = graph.manhattan(robot_cell, source_cell);
        let mut state = EpisodeState {
            graph,
            robot,
            source: SourceState {
                cell: source_cell,
                destination,
                planned_path,
                signature,
            },
            step_count: 0,
            done: false,
            success: false,
            prev_manhattan,
            rng_env,
            rng_source,
            start_robot_cell: robot_cell,
            start_source_cell: source_cell,
            start_heading: heading,
            cells_moved: 0,
            actions_taken: 0,
            total_reward: 0.0,
        };
        let obs = state.observe(spec)?;
        Ok((state, obs))
    }

    pub fn graph(&self) -> &Arc<NavGraph> {
        &self.graph
    }

    pub fn total_reward(&self) -> f64 {
        self.total_reward
    }

    /// Advances the source with probability `move_prob`; on arrival a fresh
    /// reachable destination is planned immediately, so the source never
    /// idles at its destination. Returns whether the source moved.
    pub fn source_tick(&mut self, spec: &EnvSpec) -> bool {
        debug_assert!(!self.done, "source_tick on a done episode");
        let u: f64 = self.rng_source.gen();
        let mut moved = false;
        if u < spec.move_prob && self.source.planned_path.len() >= 2 {
            self.source.planned_path.pop_front();
            self.source.cell = self.source.planned_path[0];
            moved = true;
        }
        if self.source.planned_path.len() <= 1 {
            let (destination, path) = plan_route(&self.graph, self.source.cell, &mut self.rng_source);
            self.source.destination = destination;
            self.source.planned_path = path;
        }
        moved
    }

    /// Ordered transition: robot action, catch check, source tick, catch
    /// re-check, reward, truncation. Additive reward composition:
    /// success bonus + approach bonus + time penalty.
    pub fn step(&mut self, action: Action, spec: &EnvSpec) -> Result<StepOutcome, GridError> {
        if self.done {
            return Err(GridError::EpisodeDone);
        }
        self.step_count += 1;
        self.actions_taken += 1;

        let mut stopped = false;
        match action {
            Action::MoveForward => {
                if let Some(next) = self.graph.neighbor(self.robot.cell, self.robot.heading) {
                    self.robot.cell = next;
                    self.cells_moved += 1;
                }
            }
            Action::TurnLeft => self.robot.heading = self.robot.heading.left(),
            Action::TurnRight => self.robot.heading = self.robot.heading.right(),
            Action::Stop => stopped = true,
        }

        // Catch check after the robot's own move (covers Stop on the
        // source's cell, which is co-location).
        if self.robot.cell == self.source.cell {
            self.done = true;
            self.success = true;
        } else if stopped {
            self.done = true;
        }

        if !self.done {
            self.source_tick(spec);
            if self.robot.cell == self.source.cell {
                self.done = true;
                self.success = true;
            }
        }

        if !self.done && self.step_count >= spec.max_steps {
            self.done = true;
        }

        let dist_now = self.graph.manhattan(self.robot.cell, self.source.cell);
        let mut reward = spec.reward.slack;
        if dist_now < self.prev_manhattan {
            reward += spec.reward.approach_bonus * spec.reward.distance_scale;
        }
        if self.success {
            reward += spec.reward.success;
        }
        self.prev_manhattan = dist_now;
        self.total_reward += reward;

        let observation = self.observe(spec)?;
        let summary = if self.done {
            Some(self.summarize()?)
        } else {
            None
        };
        Ok(StepOutcome {
            observation,
            reward,
            done: self.done,
            success: self.success,
            summary,
        })
    }

    /// Renders the current observation (depth + binaural audio).
    pub fn observe(&mut self, spec: &EnvSpec) -> Result<Observation, GridError> {
        let depth = render_depth(&self.graph, &self.robot, spec.depth_res, spec.max_range);
        let audio = synthesize_binaural(
            &self.graph,
            &self.robot,
            self.source.cell,
            &self.source.signature,
            spec.noise_std,
            &mut self.rng_env,
        )?;
        Ok(Observation {
            depth,
            depth_shape: spec.depth_res,
            audio,
            audio_bins: self.source.signature.spectrum.len(),
            rgb: None,
        })
    }

    /// Metric inputs for the (finished or running) episode. Distances are
    /// geodesic against the source's current cell.
    pub fn summarize(&self) -> Result<EpisodeSummary, GridError> {
        let goal = self.source.cell;
        let final_agent_to_goal = self
            .graph
            .bfs_distance(self.robot.cell, goal)
            .ok_or(GridError::Unreachable(self.robot.cell, goal))?;
        let start_to_final_goal = self
            .graph
            .bfs_distance(self.start_robot_cell, goal)
            .ok_or(GridError::Unreachable(self.start_robot_cell, goal))?;
        let start_pose = Pose {
            cell: self.start_robot_cell,
            heading: self.start_heading,
        };
        let shortest_action_count = min_action_count(&self.graph, start_pose, goal)
            .ok_or(GridError::Unreachable(self.start_robot_cell, goal))?;
        Ok(EpisodeSummary {
            success: self.success,
            executed_path_length: self.cells_moved,
            executed_action_count: self.actions_taken,
            shortest_path_length: start_to_final_goal,
            shortest_action_count,
            final_agent_to_goal,
            start_to_final_goal,
            total_reward: self.total_reward,
        })
    }

    pub fn save(&self) -> SavedEpisode {
        SavedEpisode {
            robot: self.robot,
            source_cell: self.source.cell,
            destination: self.source.destination,
            planned_path: self.source.planned_path.clone(),
            signature_id: self.source.signature.id,
            step_count: self.step_count,
            done: self.done,
            success: self.success,
            prev_manhattan: self.prev_manhattan,
            rng_env: RngState::capture(&self.rng_env),
            rng_source: RngState::capture(&self.rng_source),
            start_robot_cell: self.start_robot_cell,
            start_source_cell: self.start_source_cell,
            start_heading: self.start_heading,
            cells_moved: self.cells_moved,
            actions_taken: self.actions_taken,
            total_reward: self.total_reward,
        }
    }

    pub fn restore(
        graph: Arc<NavGraph>,
        bank: &SignatureBank,
        saved: &SavedEpisode,
    ) -> EpisodeState {
        EpisodeState {
            graph,
            robot: saved.robot,
            source: SourceState {
                cell: saved.source_cell,
                destination: saved.destination,
                planned_path: saved.planned_path.clone(),
                signature: bank.get(saved.signature_id).clone(),
            },
            step_count: saved.step_count,
            done: saved.done,
            success: saved.success,
            prev_manhattan: saved.prev_manhattan,
            rng_env: saved.rng_env.restore(),
            rng_source: saved.rng_source.restore(),
            start_robot_cell: saved.start_robot_cell,
            start_source_cell: saved.start_source_cell,
            start_heading: saved.start_heading,
            cells_moved: saved.cells_moved,
            actions_taken: saved.actions_taken,
            total_reward: saved.total_reward,
        }
    }
}

fn sample_excluding(cells: &[CellId], excluded: CellId, rng: &mut ChaCha8Rng) -> CellId {
    debug_assert!(cells.len() >= 2);
    let pos = cells.iter().position(|&c| c == excluded);
    match pos {
        None => cells[rng.gen_range(0..cells.len())],
        Some(p) => {
            let i = rng.gen_range(0..cells.len() - 1);
            cells[if i >= p { i + 1 } else { i }]
        }
    }
}

/// Samples a destination among reachable cells (excluding `from` when other
/// cells are reachable) and plans the shortest route to it.
fn plan_route(
    graph: &NavGraph,
    from: CellId,
    rng: &mut ChaCha8Rng,
) -> (CellId, VecDeque<CellId>) {
    let dist = graph.bfs_distances_from(from);
    let reachable: Vec<CellId> = (0..graph.cell_count())
        .filter(|&c| c != from && dist[c].is_some())
        .collect();
    if reachable.is_empty() {
        return (from, VecDeque::from([from]));
    }
    let destination = reachable[rng.gen_range(0..reachable.len())];
    let path = bfs_shortest_path(graph, from, destination)
        .expect("endpoints are traversable")
        .expect("destination sampled among reachable cells");
    (destination, path.into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open(n: usize) -> Arc<NavGraph> {
        let rows = vec![".".repeat(n); n];
        Arc::new(NavGraph::from_ascii(&rows.join("\n")))
    }

    fn spec_with(move_prob: f64, noise: f64) -> EnvSpec {
        EnvSpec {
            noise_std: noise,
            move_prob,
            ..EnvSpec::default()
        }
    }

    fn sig() -> SoundSignature {
        SignatureBank::generate(0, 16).get(0).clone()
    }

    #[test]
    fn two_cell_corridor_occupies_both_cells() {
        let g = Arc::new(NavGraph::from_ascii("..##"));
        let (state, _) = EpisodeState::reset(g, &spec_with(0.3, 0.0), 7, sig()).unwrap();
        assert_ne!(state.robot.cell, state.source.cell);
        assert!(state.robot.cell < 2 && state.source.cell < 2);
    }

    #[test]
    fn reset_is_deterministic() {
        let g = open(7);
        let spec = spec_with(0.3, 0.02);
        let (a, oa) = EpisodeState::reset(g.clone(), &spec, 123, sig()).unwrap();
        let (b, ob) = EpisodeState::reset(g, &spec, 123, sig()).unwrap();
        assert_eq!(a.robot, b.robot);
        assert_eq!(a.source, b.source);
        assert_eq!(oa, ob);
    }

    #[test]
    fn reset_rejects_tiny_graphs() {
        let g = Arc::new(NavGraph::from_ascii(".###"));
        assert!(matches!(
            EpisodeState::reset(g, &EnvSpec::default(), 1, sig()),
            Err(GridError::TooFewCells(1))
        ));
    }

    #[test]
    fn robot_start_cells_are_uniform() {
        let g = Arc::new(crate::grid::generate_grid(3, 9, 9, 0.1).unwrap());
        let spec = spec_with(0.3, 0.0);
        let n = g.traversable_count();
        let mut counts = vec![0usize; g.cell_count()];
        let trials = 10_000;
        for seed in 0..trials {
            let (s, _) = EpisodeState::reset(g.clone(), &spec, seed, sig()).unwrap();
            counts[s.robot.cell] += 1;
        }
        // Chi-square goodness of fit against the uniform placement law.
        let expected = trials as f64 / n as f64;
        let chi2: f64 = g
            .traversable_cells()
            .iter()
            .map(|&c| {
                let d = counts[c] as f64 - expected;
                d * d / expected
            })
            .sum();
        // Wilson-Hilferty upper quantile at z = 3.29 (p ~ 5e-4).
        let df = (n - 1) as f64;
        let t = 1.0 - 2.0 / (9.0 * df) + 3.29 * (2.0 / (9.0 * df)).sqrt();
        let critical = df * t * t * t;
        assert!(
            chi2 < critical,
            "chi-square {} exceeds critical {} for df {}",
            chi2,
            critical,
            df
        );
    }

    #[test]
    fn forced_move_advances_along_planned_path() {
        let g = open(5);
        let spec = spec_with(1.0, 0.0); // gate always passes
        let (mut state, _) = EpisodeState::reset(g, &spec, 11, sig()).unwrap();
        let expected_next = state.source.planned_path[1];
        let moved = state.source_tick(&spec);
        assert!(moved);
        assert_eq!(state.source.cell, expected_next);
        assert_eq!(state.source.planned_path[0], state.source.cell);
    }

    #[test]
    fn source_at_destination_replans_on_move_draw() {
        let g = open(5);
        let spec = spec_with(1.0, 0.0);
        let (mut state, _) = EpisodeState::reset(g, &spec, 11, sig()).unwrap();
        // Force the degenerate at-destination state.
        let here = state.source.cell;
        state.source.destination = here;
        state.source.planned_path = VecDeque::from([here]);
        state.source_tick(&spec);
        assert_ne!(state.source.destination, here);
        assert_eq!(state.source.planned_path[0], here);
        assert!(state.source.planned_path.len() >= 2);
        // The fresh path is a shortest path to the new destination.
        assert_eq!(
            state.source.planned_path.len() - 1,
            state
                .graph()
                .bfs_distance(here, state.source.destination)
                .unwrap()
        );
    }

    #[test]
    fn source_moves_traverse_single_edges() {
        let g = Arc::new(crate::grid::generate_grid(21, 8, 8, 0.25).unwrap());
        let spec = spec_with(0.5, 0.0);
        let (mut state, _) = EpisodeState::reset(g.clone(), &spec, 5, sig()).unwrap();
        for _ in 0..2000 {
            let before = state.source.cell;
            let moved = state.source_tick(&spec);
            let after = state.source.cell;
            if moved {
                assert!(g.neighbors(before).any(|n| n == after));
            } else {
                assert_eq!(before, after);
            }
        }
    }

    /// Builds a 1x5 corridor with the robot at cell 0 facing the source.
    fn corridor_fixture(source_x: usize) -> (EpisodeState, EnvSpec) {
        let g = Arc::new(NavGraph::from_ascii("....."));
        let spec = spec_with(0.0, 0.0); // frozen source, no noise
        let (mut state, _) = EpisodeState::reset(g, &spec, 0, sig()).unwrap();
        state.robot = Pose {
            cell: 0,
            heading: Heading::East,
        };
        state.start_robot_cell = 0;
        state.start_heading = Heading::East;
        state.source.cell = source_x;
        state.source.destination = source_x;
        state.source.planned_path = VecDeque::from([source_x]);
        state.start_source_cell = source_x;
        state.prev_manhattan = source_x;
        (state, spec)
    }

    #[test]
    fn approach_step_earns_the_distance_bonus() {
        let (mut state, spec) = corridor_fixture(3);
        let out = state.step(Action::MoveForward, &spec).unwrap();
        assert!((out.reward - 0.24).abs() <= 1e-12);
        assert!(!out.done);
    }

    #[test]
    fn catching_the_source_pays_success_plus_bonus() {
        let (mut state, spec) = corridor_fixture(1);
        let out = state.step(Action::MoveForward, &spec).unwrap();
        assert!((out.reward - 10.24).abs() <= 1e-12);
        assert!(out.done);
        assert!(out.success);
        let s = out.summary.unwrap();
        assert_eq!(s.final_agent_to_goal, 0);
        assert_eq!(s.executed_path_length, 1);
        assert_eq!(s.executed_action_count, 1);
        assert!(s.success);
    }

    #[test]
    fn turning_in_place_costs_the_time_penalty() {
        let (mut state, spec) = corridor_fixture(3);
        let out = state.step(Action::TurnLeft, &spec).unwrap();
        assert!((out.reward - (-0.01)).abs() <= 1e-12);
    }

    #[test]
    fn stop_off_target_fails_the_episode() {
        let (mut state, spec) = corridor_fixture(3);
        let out = state.step(Action::Stop, &spec).unwrap();
        assert!(out.done);
        assert!(!out.success);
        assert!((out.reward - (-0.01)).abs() <= 1e-12);
    }

    #[test]
    fn blocked_move_is_a_no_op() {
        let (mut state, spec) = corridor_fixture(3);
        state.robot.heading = Heading::North; // wall above the corridor
        let out = state.step(Action::MoveForward, &spec).unwrap();
        assert_eq!(state.robot.cell, 0);
        assert!((out.reward - (-0.01)).abs() <= 1e-12);
        assert_eq!(state.cells_moved, 0);
        assert_eq!(state.actions_taken, 1);
    }

    #[test]
    fn stepping_a_done_episode_is_an_error() {
        let (mut state, spec) = corridor_fixture(3);
        state.step(Action::Stop, &spec).unwrap();
        assert!(matches!(
            state.step(Action::TurnLeft, &spec),
            Err(GridError::EpisodeDone)
        ));
    }

    #[test]
    fn truncation_at_max_steps() {
        let (mut state, mut spec) = corridor_fixture(4);
        spec.max_steps = 3;
        for i in 0..3 {
            let out = state.step(Action::TurnLeft, &spec).unwrap();
            assert_eq!(out.done, i == 2);
        }
        assert!(state.done);
        assert!(!state.success);
        assert_eq!(state.step_count, 3);
    }

    #[test]
    fn source_walking_into_robot_counts_as_catch() {
        let g = Arc::new(NavGraph::from_ascii("..."));
        let spec = spec_with(1.0, 0.0);
        let (mut state, _) = EpisodeState::reset(g, &spec, 1, sig()).unwrap();
        state.robot = Pose {
            cell: 0,
            heading: Heading::North,
        };
        state.source.cell = 2;
        state.source.destination = 0;
        state.source.planned_path = VecDeque::from([2, 1, 0]);
        state.prev_manhattan = 2;
        // Robot turns in place; the source (gate forced open) walks toward it.
        let out1 = state.step(Action::TurnLeft, &spec).unwrap();
        assert!(!out1.done);
        let out2 = state.step(Action::TurnLeft, &spec).unwrap();
        assert!(out2.done && out2.success);
        assert!((out2.reward - 10.24).abs() <= 1e-12);
    }

    #[test]
    fn save_restore_round_trips_and_resumes_identically() {
        let g = Arc::new(crate::grid::generate_grid(9, 6, 6, 0.2).unwrap());
        let bank = SignatureBank::generate(0, 16);
        let spec = spec_with(0.3, 0.02);
        let (mut a, _) = EpisodeState::reset(g.clone(), &spec, 17, bank.get(4).clone()).unwrap();
        for action in [Action::MoveForward, Action::TurnLeft, Action::MoveForward] {
            if a.done {
                break;
            }
            a.step(action, &spec).unwrap();
        }
        let saved = a.save();
        let mut b = EpisodeState::restore(g, &bank, &saved);
        for _ in 0..5 {
            if a.done {
                break;
            }
            let oa = a.step(Action::MoveForward, &spec).unwrap();
            let ob = b.step(Action::MoveForward, &spec).unwrap();
            assert_eq!(oa.observation, ob.observation);
            assert_eq!(oa.reward, ob.reward);
            assert_eq!(oa.done, ob.done);
        }
    }
}
