//! Independent oracles for the acceptance suite. These deliberately re-derive
//! results from first principles with straightforward loops, sharing no code
//! with the implementation paths they check.

use avchase_core::grid::{EpisodeSummary, NavGraph};

/// All-pairs shortest hop counts via Floyd-Warshall (None = unreachable or
/// untraversable endpoint).
pub fn floyd_warshall(graph: &NavGraph) -> Vec<Vec<Option<usize>>> {
    let n = graph.cell_count();
    const INF: usize = usize::MAX / 4;
    let mut dist = vec![vec![INF; n]; n];
    for a in 0..n {
        if !graph.is_traversable(a) {
            continue;
        }
        dist[a][a] = 0;
        for b in graph.neighbors(a) {
            dist[a][b] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            if dist[i][k] == INF {
                continue;
            }
            for j in 0..n {
                let through = dist[i][k] + dist[k][j];
                if through < dist[i][j] {
                    dist[i][j] = through;
                }
            }
        }
    }
    dist.into_iter()
        .map(|row| {
            row.into_iter()
                .map(|d| if d >= INF { None } else { Some(d) })
                .collect()
        })
        .collect()
}

/// Single-pass recomputation of the whole metric suite:
/// (splt, ssplt, srt, nat, snat, dtgt, ndtgt, r_mean).
///
/// Degenerate conventions under test: zero-length optimal paths contribute
/// the bare indicator/ratio, and zero start-to-goal distances are excluded
/// from the normalized distance mean.
pub fn recompute_metrics(summaries: &[EpisodeSummary]) -> [f64; 8] {
    let n = summaries.len() as f64;
    let mut splt = 0.0;
    let mut ssplt = 0.0;
    let mut srt = 0.0;
    let mut nat = 0.0;
    let mut snat = 0.0;
    let mut dtgt = 0.0;
    let mut ndtgt_sum = 0.0;
    let mut ndtgt_count = 0usize;
    let mut r_mean = 0.0;
    for s in summaries {
        let success = if s.success { 1.0 } else { 0.0 };
        let p = s.executed_path_length as f64;
        let l = s.shortest_path_length as f64;
        let pa = s.executed_action_count as f64;
        let la = s.shortest_action_count as f64;
        let da = s.final_agent_to_goal as f64;
        let d = s.start_to_final_goal as f64;

        splt += if p.max(l) == 0.0 { success } else { success * l / p.max(l) };

        let soft = if d == 0.0 {
            if da == 0.0 { 1.0 } else { 0.0 }
        } else {
            (1.0 - da / d).max(0.0)
        };
        ssplt += if p.max(l) == 0.0 { soft } else { l * soft / p.max(l) };

        srt += success;
        nat += pa;
        snat += if pa.max(la) == 0.0 { success } else { success * la / pa.max(la) };
        dtgt += da;
        if d > 0.0 {
            ndtgt_sum += da / d;
            ndtgt_count += 1;
        }
        r_mean += s.total_reward;
    }
    let ndtgt = if ndtgt_count == 0 { 0.0 } else { ndtgt_sum / ndtgt_count as f64 };
    [
        splt / n,
        ssplt / n,
        srt / n,
        nat / n,
        snat / n,
        dtgt / n,
        ndtgt,
        r_mean / n,
    ]
}
