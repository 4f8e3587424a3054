//! Exact reference answers: BFS shortest paths, tabular value iteration and
//! expectiles by bisection. Everything learned elsewhere is checked against
//! these.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{Cell, MazeEnv, MazeLayout, State};
use crate::error::{Error, Result};

/// BFS step counts from `origin` to every cell (`None` for walls and cells
/// in other components), indexed by `y * width + x`.
pub fn bfs_from(layout: &MazeLayout, origin: Cell) -> Result<Vec<Option<usize>>> {
    if layout.is_wall(origin) {
        return Err(Error::InvalidState([origin[0] as f64, origin[1] as f64]));
    }
    let mut dist = vec![None; layout.width * layout.height];
    let mut queue = VecDeque::new();
    dist[origin[1] * layout.width + origin[0]] = Some(0);
    queue.push_back(origin);
    while let Some(c) = queue.pop_front() {
        let d = dist[c[1] * layout.width + c[0]].unwrap();
        for n in layout.neighbours(c) {
            let slot = &mut dist[n[1] * layout.width + n[0]];
            if slot.is_none() {
                *slot = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    Ok(dist)
}

fn cell_of(env: &MazeEnv, s: &State) -> Result<Cell> {
    let c = s.cell().ok_or(Error::InvalidState(s.0))?;
    if env.layout().is_wall(c) {
        return Err(Error::InvalidState(s.0));
    }
    Ok(c)
}

/// Minimal number of grid moves from `s` to `g`.
pub fn bfs_distance(env: &MazeEnv, s: &State, g: &State) -> Result<usize> {
    let from = cell_of(env, s)?;
    let to = cell_of(env, g)?;
    let dist = bfs_from(env.layout(), to)?;
    dist[from[1] * env.layout().width + from[0]].ok_or(Error::Unreachable { from, to })
}

/// `(1 - gamma^n) / (1 - gamma)`: discounted cost of an `n`-step path.
pub fn discounted_cost(steps: usize, gamma: f64) -> f64 {
    (1.0 - gamma.powi(steps as i32)) / (1.0 - gamma)
}

/// Optimal goal-conditioned values under a -1 per-step reward with an
/// absorbing goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularValues {
    pub values: BTreeMap<Cell, f64>,
    pub goal: Cell,
    pub gamma: f64,
    pub sweeps: usize,
}

impl TabularValues {
    pub fn get(&self, c: Cell) -> Option<f64> {
        self.values.get(&c).copied()
    }
}

pub const MAX_SWEEPS: usize = 1_000_000;

/// Synchronous value iteration from `V = 0` until the sup-norm change drops
/// below `tol`.
pub fn value_iteration(env: &MazeEnv, goal: &State, gamma: f64, tol: f64) -> Result<TabularValues> {
    if !(gamma > 0.0 && gamma < 1.0) || tol <= 0.0 {
        return Err(Error::InvalidConfig(format!("gamma {gamma} / tol {tol}")));
    }
    let layout = env.layout();
    let g = cell_of(env, goal)?;
    let cells = layout.free_cells();
    let index: BTreeMap<Cell, usize> = cells.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    // Successors under every move, including staying put.
    let succ: Vec<Vec<usize>> = cells
        .iter()
        .map(|&c| {
            let mut v: Vec<usize> = layout.neighbours(c).map(|n| index[&n]).collect();
            v.push(index[&c]);
            v
        })
        .collect();
    let gi = index[&g];
    let mut v = vec![0.0; cells.len()];
    let mut next = v.clone();
    for sweep in 1..=MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        for i in 0..cells.len() {
            next[i] = if i == gi {
                0.0
            } else {
                let best = succ[i].iter().map(|&j| v[j]).fold(f64::NEG_INFINITY, f64::max);
                -1.0 + gamma * best
            };
            delta = delta.max((next[i] - v[i]).abs());
        }
        std::mem::swap(&mut v, &mut next);
        if delta < tol {
            let values = cells.iter().zip(&v).map(|(c, x)| (*c, *x)).collect();
            return Ok(TabularValues { values, goal: g, gamma, sweeps: sweep });
        }
    }
    Err(Error::NoConvergence(MAX_SWEEPS))
}

/// The tau-expectile of `samples`: the root of
/// `sum_i |tau - 1(x_i < m)| (x_i - m) = 0`, by bisection.
pub fn expectile_closed_form(samples: &[f64], tau: f64) -> Result<f64> {
    let weighted: Vec<(f64, f64)> = samples.iter().map(|&x| (x, 1.0)).collect();
    weighted_expectile(&weighted, tau)
}

/// Expectile of `(value, weight)` pairs with positive weights.
pub fn weighted_expectile(samples: &[(f64, f64)], tau: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidConfig(format!("expectile level {tau} outside (0, 1)")));
    }
    let score = |m: f64| -> f64 {
        samples
            .iter()
            .map(|&(x, w)| {
                let a = if x < m { 1.0 - tau } else { tau };
                a * w * (x - m)
            })
            .sum()
    };
    let mut lo = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let mut hi = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        if hi - lo <= 1e-13 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if score(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Empirical successor counts `cell -> (next cell -> count)` of a dataset.
pub type SuccessorCounts = BTreeMap<Cell, BTreeMap<Cell, f64>>;

pub fn successor_counts(trajs: &[crate::env::Trajectory]) -> Result<SuccessorCounts> {
    let mut out = SuccessorCounts::new();
    for t in trajs {
        for w in t.states.windows(2) {
            let a = w[0].cell().ok_or(Error::InvalidState(w[0].0))?;
            let b = w[1].cell().ok_or(Error::InvalidState(w[1].0))?;
            *out.entry(a).or_default().entry(b).or_default() += 1.0;
        }
    }
    Ok(out)
}

/// Fixed point of the expectile Bellman operator over the dataset's own
/// successor distribution: `V(s) = m_tau({-1 + gamma V(s')})`, goal absorbing.
///
/// This is what expectile-regressed distances converge to in the tabular
/// limit; it equals [`value_iteration`] only as `tau -> 1` (or when the data
/// contain optimal moves alone). Cells without outgoing data are omitted.
pub fn expectile_value_iteration(
    env: &MazeEnv,
    goal: &State,
    succ: &SuccessorCounts,
    gamma: f64,
    tau: f64,
    tol: f64,
) -> Result<TabularValues> {
    if !(gamma > 0.0 && gamma < 1.0) || tol <= 0.0 {
        return Err(Error::InvalidConfig(format!("gamma {gamma} / tol {tol}")));
    }
    let g = cell_of(env, goal)?;
    if succ.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut v: BTreeMap<Cell, f64> = succ.keys().map(|c| (*c, 0.0)).collect();
    v.insert(g, 0.0);
    for sweep in 1..=MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        let mut next = v.clone();
        for (c, nexts) in succ {
            if *c == g {
                continue;
            }
            let targets: Vec<(f64, f64)> = nexts
                .iter()
                .map(|(n, w)| {
                    let vn = if *n == g { 0.0 } else { v.get(n).copied().unwrap_or(0.0) };
                    (-1.0 + gamma * vn, *w)
                })
                .collect();
            let x = weighted_expectile(&targets, tau)?;
            delta = delta.max((x - v[c]).abs());
            next.insert(*c, x);
        }
        v = next;
        if delta < tol {
            return Ok(TabularValues { values: v, goal: g, gamma, sweeps: sweep });
        }
    }
    Err(Error::NoConvergence(MAX_SWEEPS))
}

/// Writes `x,y,bfs_steps,v_star` rows for every free cell.
pub fn write_table_csv<W: Write>(env: &MazeEnv, goal: &State, gamma: f64, mut out: W) -> Result<()> {
    let values = value_iteration(env, goal, gamma, 1e-12)?;
    let dist = bfs_from(env.layout(), values.goal)?;
    writeln!(out, "x,y,bfs_steps,v_star")?;
    for (c, v) in &values.values {
        let steps = dist[c[1] * env.layout().width + c[0]];
        let steps = steps.map(|s| s.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{:.12}", c[0], c[1], steps, v)?;
    }
    Ok(())
}

/// Outcome of one self-check run by [`verify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Cross-checks the exact oracles against each other on `env`: value
/// iteration against BFS for every free goal cell, plus the expectile limits.
pub fn verify(env: &MazeEnv, gamma: f64) -> Result<Vec<OracleCheck>> {
    let mut out = Vec::new();
    let mut worst: f64 = 0.0;
    for g in env.layout().free_cells() {
        let goal = State::from_cell(g);
        let values = value_iteration(env, &goal, gamma, 1e-12)?;
        let dist = bfs_from(env.layout(), g)?;
        for (c, v) in &values.values {
            let want = match dist[c[1] * env.layout().width + c[0]] {
                Some(n) => -discounted_cost(n, gamma),
                None => -1.0 / (1.0 - gamma),
            };
            worst = worst.max((v - want).abs());
        }
    }
    out.push(OracleCheck {
        name: "value iteration equals -(1 - gamma^n) / (1 - gamma) for BFS distance n".into(),
        passed: worst < 1e-8,
        detail: format!("max abs error {worst:.3e} over all goal cells"),
    });

    let samples: Vec<f64> = (0..50).map(|i| ((i * 37 % 50) as f64 * 0.31).sin() * 4.0).collect();
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let half = expectile_closed_form(&samples, 0.5)?;
    out.push(OracleCheck {
        name: "expectile at tau = 0.5 equals the mean".into(),
        passed: (half - mean).abs() < 1e-10,
        detail: format!("|m - mean| = {:.3e}", (half - mean).abs()),
    });
    let taus = [0.5, 0.7, 0.9, 0.95, 0.99, 0.999, 0.9999];
    let ms = taus.iter().map(|&t| expectile_closed_form(&samples, t)).collect::<Result<Vec<_>>>()?;
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let monotone = ms.windows(2).all(|w| w[1] > w[0]) && ms.iter().all(|m| *m <= max);
    out.push(OracleCheck {
        name: "expectile rises monotonically toward the maximum as tau -> 1".into(),
        passed: monotone && max - ms[ms.len() - 1] < 0.05,
        detail: format!("max - m(0.9999) = {:.3e}", max - ms[ms.len() - 1]),
    });
    Ok(out)
}
