//! Property checks behind `--check`. Each returns the list of violations;
//! an empty list means the run passed.

use std::collections::BTreeMap;

use ase_core::harness::track::SweepCell;
use ase_core::harness::{mean_trace, Condition, EpisodeMetrics, ExperimentOutput};

/// Per-run sanity: demonstrations are well formed and every metric lies in
/// its range.
pub fn check_run(environment: &str, episodes: usize, output: &ExperimentOutput) -> Vec<String> {
    let mut out = Vec::new();
    if output.metrics.len() != episodes {
        out.push(format!("expected {episodes} metric rows, got {}", output.metrics.len()));
    }
    for demo in &output.demonstrations {
        if let Err(e) = demo.validate() {
            out.push(e.to_string());
        }
    }
    for m in &output.metrics {
        out.extend(check_metrics(environment, m));
    }
    for (k, theta) in output.theta_trace.iter().enumerate() {
        if theta.iter().any(|t| !t.is_finite()) {
            out.push(format!("theta trace entry {k} is not finite"));
        }
        if environment == "grid_nav" && theta.iter().any(|t| !(0.0..=1.0).contains(t)) {
            out.push(format!("theta trace entry {k} leaves [0, 1]"));
        }
    }
    out
}

fn check_metrics(environment: &str, m: &EpisodeMetrics) -> Vec<String> {
    let mut out = Vec::new();
    let ep = m.episode;
    if m.environment != environment {
        out.push(format!("episode {ep}: environment {:?}", m.environment));
    }
    let floats = [
        m.distance_to_goal_normalized,
        m.belief_in_true_state,
        m.episode_return,
        m.mean_abs_tilt,
        m.final_accuracy,
    ];
    if floats.iter().flatten().any(|x| !x.is_finite()) {
        out.push(format!("episode {ep}: non-finite metric"));
    }
    match environment {
        "grid_nav" => {
            if m.success.is_none() || m.distance_to_goal_normalized.is_none() {
                out.push(format!("episode {ep}: nav metrics missing"));
            }
            if m.distance_to_goal_normalized.is_some_and(|d| d < 0.0) {
                out.push(format!("episode {ep}: negative distance"));
            }
            if m.time_to_goal.is_some() != (m.success == Some(true)) {
                out.push(format!("episode {ep}: time_to_goal disagrees with success"));
            }
            if m.belief_in_true_state.is_some_and(|b| b > 0.0) {
                out.push(format!("episode {ep}: log belief above zero"));
            }
        }
        "row_reveal" => {
            let binary = |a: f64| a == 0.0 || a == 1.0;
            if !m.final_accuracy.is_some_and(binary) || !m.per_step_accuracy.iter().copied().all(binary) {
                out.push(format!("episode {ep}: accuracy outside {{0, 1}}"));
            }
        }
        "delay_track" => {
            if m.episode_return.is_none() {
                out.push(format!("episode {ep}: return missing"));
            }
        }
        "tilt_lander" => {
            if !m.mean_abs_tilt.is_some_and(|t| (0.0..=std::f64::consts::PI).contains(&t)) {
                out.push(format!("episode {ep}: mean tilt outside [0, pi]"));
            }
        }
        other => out.push(format!("episode {ep}: unknown environment {other:?}")),
    }
    out
}

/// Delay-sweep orderings: exact passthrough at `d_max = 0`; for `d_max >= 2`
/// Oracle >= ASE >= Unassisted >= Random in mean return; the ASE-Unassisted
/// gap non-decreasing over `2 <= d_max <= 10`.
pub fn check_delay_sweep(cells: &[SweepCell]) -> Vec<String> {
    let mut out = Vec::new();
    let find = |d: usize, c: Condition| cells.iter().find(|x| x.d_max == d && x.condition == c);
    let mut ds: Vec<usize> = cells.iter().map(|c| c.d_max).collect();
    ds.sort_unstable();
    ds.dedup();
    let mut gaps = Vec::new();
    for &d in &ds {
        let ase = find(d, Condition::Ase);
        let un = find(d, Condition::Unassisted);
        if d == 0 {
            if let (Some(a), Some(u)) = (ase, un) {
                if a.returns != u.returns {
                    out.push("d_max 0: ase returns differ from unassisted".into());
                }
            }
            continue;
        }
        if d < 2 {
            continue;
        }
        let chain = [Condition::Oracle, Condition::Ase, Condition::Unassisted, Condition::Random];
        let present: Vec<&SweepCell> = chain.iter().filter_map(|&c| find(d, c)).collect();
        for pair in present.windows(2) {
            if pair[0].mean_return < pair[1].mean_return {
                out.push(format!(
                    "d_max {d}: {} return {:.3} below {} return {:.3}",
                    pair[0].condition, pair[0].mean_return, pair[1].condition, pair[1].mean_return
                ));
            }
        }
        if let (Some(a), Some(u)) = (ase, un) {
            if d <= 10 {
                gaps.push((d, a.mean_return - u.mean_return));
            }
        }
    }
    for w in gaps.windows(2) {
        if w[1].1 < w[0].1 {
            out.push(format!(
                "ase-unassisted gap shrinks from {:.3} at d_max {} to {:.3} at d_max {}",
                w[0].1, w[0].0, w[1].1, w[1].0
            ));
        }
    }
    out
}

/// Parameter error must not grow from the smallest to the largest dataset.
pub fn check_dataset_sweep(errors: &[(usize, f64)]) -> Vec<String> {
    let (Some(first), Some(last)) = (errors.iter().min_by_key(|e| e.0), errors.iter().max_by_key(|e| e.0)) else {
        return vec!["empty dataset sweep".into()];
    };
    let mut out: Vec<String> = errors
        .iter()
        .filter(|e| !e.1.is_finite())
        .map(|e| format!("size {}: non-finite error", e.0))
        .collect();
    if last.1 > first.1 {
        out.push(format!(
            "parameter error grows from {:.4} at {} episodes to {:.4} at {} episodes",
            first.1, first.0, last.1, last.0
        ));
    }
    out
}

type Stat<'a> = &'a dyn Fn(&EpisodeMetrics) -> Option<f64>;

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Condition orderings over aggregated metrics, for every environment in
/// which both sides of a comparison are present.
pub fn check_report(rows: &[EpisodeMetrics]) -> Vec<String> {
    let mut groups: BTreeMap<(&str, &str), Vec<&EpisodeMetrics>> = BTreeMap::new();
    for m in rows {
        groups.entry((&m.environment, &m.condition)).or_default().push(m);
    }
    let stat = |env: &str, cond: &str, f: Stat| {
        groups.get(&(env, cond)).and_then(|g| mean(g.iter().filter_map(|m| f(m))))
    };
    let success = |m: &EpisodeMetrics| m.success.map(|s| f64::from(u8::from(s)));
    let belief = |m: &EpisodeMetrics| m.belief_in_true_state;
    let ret = |m: &EpisodeMetrics| m.episode_return;
    let neg_tilt = |m: &EpisodeMetrics| m.mean_abs_tilt.map(|t| -t);
    let row_curve = |m: &EpisodeMetrics| mean(m.per_step_accuracy.iter().copied());

    let orderings: [(&str, &str, &[&str], Stat); 6] = [
        ("grid_nav", "success rate", &["ase", "unassisted", "random"], &success),
        ("grid_nav", "belief in true state", &["ase", "unassisted", "random"], &belief),
        ("delay_track", "return", &["oracle", "ase", "unassisted", "random"], &ret),
        ("tilt_lander", "negated tilt", &["ase", "unassisted"], &neg_tilt),
        ("row_reveal", "mean per-step accuracy", &["ase", "unassisted"], &row_curve),
        ("row_reveal", "mean per-step accuracy", &["ase", "random"], &row_curve),
    ];
    let mut out = Vec::new();
    for (env, what, chain, f) in orderings {
        let present: Vec<(&str, f64)> = chain.iter().filter_map(|c| stat(env, c, f).map(|v| (*c, v))).collect();
        for w in present.windows(2) {
            if w[0].1 < w[1].1 {
                out.push(format!("{env}: {what} of {} ({:.4}) below {} ({:.4})", w[0].0, w[0].1, w[1].0, w[1].1));
            }
        }
    }
    out
}

/// Mean per-step accuracy curve of one row-reveal group.
pub fn accuracy_curve(rows: &[EpisodeMetrics], condition: &str) -> Vec<f64> {
    let traces: Vec<&[f64]> = rows
        .iter()
        .filter(|m| m.environment == "row_reveal" && m.condition == condition)
        .map(|m| m.per_step_accuracy.as_slice())
        .collect();
    mean_trace(&traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(d: usize, condition: Condition, returns: Vec<f64>) -> SweepCell {
        SweepCell {
            d_max: d,
            condition,
            mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
            mean_belief_accuracy: 0.0,
            returns,
        }
    }

    #[test]
    fn delay_orderings() {
        let good = vec![
            cell(0, Condition::Ase, vec![1.0, 2.0]),
            cell(0, Condition::Unassisted, vec![1.0, 2.0]),
            cell(2, Condition::Oracle, vec![5.0]),
            cell(2, Condition::Ase, vec![4.0]),
            cell(2, Condition::Unassisted, vec![3.0]),
            cell(2, Condition::Random, vec![0.0]),
            cell(5, Condition::Ase, vec![4.0]),
            cell(5, Condition::Unassisted, vec![1.0]),
        ];
        assert!(check_delay_sweep(&good).is_empty());

        let mut bad = good.clone();
        bad[1].returns[1] = 2.5;
        bad[7] = cell(5, Condition::Unassisted, vec![3.5]);
        let v = check_delay_sweep(&bad);
        assert_eq!(v.len(), 2, "{v:?}");
    }

    #[test]
    fn report_orderings() {
        let m = |cond: &str, s: bool| EpisodeMetrics {
            environment: "grid_nav".into(),
            condition: cond.into(),
            success: Some(s),
            ..Default::default()
        };
        assert!(check_report(&[m("ase", true), m("unassisted", true), m("random", false)]).is_empty());
        assert_eq!(check_report(&[m("ase", false), m("random", true)]).len(), 1);
    }

    #[test]
    fn dataset_error_must_not_grow() {
        assert!(check_dataset_sweep(&[(10, 0.3), (100, 0.1)]).is_empty());
        assert_eq!(check_dataset_sweep(&[(100, 0.3), (10, 0.1)]).len(), 1);
    }

    #[test]
    fn run_sanity_flags_out_of_range_metrics() {
        let output = ExperimentOutput {
            metrics: vec![EpisodeMetrics {
                environment: "tilt_lander".into(),
                mean_abs_tilt: Some(4.0),
                ..Default::default()
            }],
            ..Default::default()
        };
        assert_eq!(check_run("tilt_lander", 1, &output).len(), 1);
        assert_eq!(check_run("tilt_lander", 2, &output).len(), 2);
    }
}
