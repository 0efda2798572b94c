//! Tracking metrics over finished episodes: success rate, path- and
//! action-efficiency, and distance-to-goal aggregates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::EpisodeSummary;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no episodes")]
    Empty,
}

/// Aggregated metric suite over an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub splt: f64,
    pub ssplt: f64,
    pub srt: f64,
    pub nat: f64,
    pub snat: f64,
    pub dtgt: f64,
    pub ndtgt: f64,
    pub r_mean: f64,
    pub episodes: usize,
}

fn require_nonempty(summaries: &[EpisodeSummary]) -> Result<(), MetricsError> {
    if summaries.is_empty() {
        Err(MetricsError::Empty)
    } else {
        Ok(())
    }
}

/// Success weighted by path length: mean of `S * l / max(p, l)`.
/// Episodes with `l = p = 0` contribute their success indicator.
pub fn compute_splt(summaries: &[EpisodeSummary]) -> Result<f64, MetricsError> {
    require_nonempty(summaries)?;
    let total: f64 = summaries
        .iter()
        .map(|s| {
            let denom = s.executed_path_length.max(s.shortest_path_length);
            let success = if s.success { 1.0 } else { 0.0 };
            if denom == 0 {
                success
            } else {
                success * s.shortest_path_length as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / summaries.len() as f64)
}

/// Soft variant: mean of `l * max(0, 1 - d_a/d) / max(p, l)`.
///
/// A zero start-to-goal distance counts as 1 when the agent also ended on the
/// goal and 0 otherwise.
pub fn compute_ssplt(summaries: &[EpisodeSummary]) -> Result<f64, MetricsError> {
    require_nonempty(summaries)?;
    let total: f64 = summaries
        .iter()
        .map(|s| {
            let ratio = if s.start_to_final_goal == 0 {
                if s.final_agent_to_goal == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (1.0 - s.final_agent_to_goal as f64 / s.start_to_final_goal as f64).max(0.0)
            };
            let denom = s.executed_path_length.max(s.shortest_path_length);
            if denom == 0 {
                ratio
            } else {
                s.shortest_path_length as f64 * ratio / denom as f64
            }
        })
        .sum();
    Ok(total / summaries.len() as f64)
}

/// Raw success rate.
pub fn compute_srt(summaries: &[EpisodeSummary]) -> Result<f64, MetricsError> {
    require_nonempty(summaries)?;
    let hits = summaries.iter().filter(|s| s.success).count();
    Ok(hits as f64 / summaries.len() as f64)
}

/// Success weighted by action count: mean of `S * l_a / max(p_a, l_a)`,
/// where `l_a` counts moves plus required rotations.
pub fn compute_snat(summaries: &[EpisodeSummary]) -> Result<f64, MetricsError> {
    require_nonempty(summaries)?;
    let total: f64 = summaries
        .iter()
        .map(|s| {
            let denom = s.executed_action_count.max(s.shortest_action_count);
            let success = if s.success { 1.0 } else { 0.0 };
            if denom == 0 {
                success
            } else {
                success * s.shortest_action_count as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / summaries.len() as f64)
}

/// Mean final distance to the goal.
pub fn compute_dtgt(summaries: &[EpisodeSummary]) -> Result<f64, MetricsError> {
    require_nonempty(summaries)?;
    let total: f64 = summaries.iter().map(|s| s.final_agent_to_goal as f64).sum();
    Ok(total / summaries.len() as f64)
}

/// Mean of `d_a / d`. Episodes with `d = 0` are excluded from the mean (and
/// counted with a warning); an all-degenerate set yields 0.
pub fn compute_ndtgt(summaries: &[EpisodeSummary]) -> Result<f64, MetricsError> {
    require_nonempty(summaries)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for s in summaries {
        if s.start_to_final_goal == 0 {
            skipped += 1;
        } else {
            total += s.final_agent_to_goal as f64 / s.start_to_final_goal as f64;
            counted += 1;
        }
    }
    if skipped > 0 {
        log::warn!(
            "ndtgt: excluded {} episode(s) with zero start-to-goal distance",
            skipped
        );
    }
    if counted == 0 {
        return Ok(0.0);
    }
    Ok(total / counted as f64)
}

/// Computes the full report: the suite above plus NAT (mean executed action
/// count) and the mean episode reward.
pub fn aggregate_report(summaries: &[EpisodeSummary]) -> Result<MetricReport, MetricsError> {
    require_nonempty(summaries)?;
    let n = summaries.len() as f64;
    Ok(MetricReport {
        splt: compute_splt(summaries)?,
        ssplt: compute_ssplt(summaries)?,
        srt: compute_srt(summaries)?,
        nat: summaries.iter().map(|s| s.executed_action_count as f64).sum::<f64>() / n,
        snat: compute_snat(summaries)?,
        dtgt: compute_dtgt(summaries)?,
        ndtgt: compute_ndtgt(summaries)?,
        r_mean: summaries.iter().map(|s| s.total_reward).sum::<f64>() / n,
        episodes: summaries.len(),
    })
}
