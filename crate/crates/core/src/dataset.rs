//! Offline transition storage, hindsight goal relabeling and mixed batches.
//!
//! Real transitions live in an append-only [`TransitionStore`]; model-generated
//! ones in a bounded FIFO [`SyntheticBuffer`]. The two never share storage and
//! every transition carries its [`Source`] tag.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::env::{Action, ActionSpace, MazeEnv, State, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Synthetic,
}

impl Source {
    fn as_str(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
        }
    }
}

/// One goal-labelled step.
///
/// For real data `traj_id`/`t` locate the step in its trajectory and `origin`
/// is the transition's own index in the store. Synthetic transitions record the
/// real transition their rollout started from in `origin` and the number of
/// model steps taken so far in `depth` (1 for the first imagined step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: State,
    pub a: Action,
    pub s_next: State,
    pub g: State,
    pub terminal: bool,
    pub source: Source,
    pub traj_id: usize,
    pub t: usize,
    pub origin: usize,
    pub depth: usize,
}

/// Branch probabilities of hindsight relabeling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalLabelConfig {
    /// Use the transition's own state as the goal.
    pub p_random_state_as_goal: f64,
    /// Use a later state of the same trajectory.
    pub p_future_in_traj: f64,
    /// Use a uniformly drawn dataset state.
    pub p_uniform_random: f64,
    /// Discount of the geometric look-ahead for future goals.
    pub future_gamma: f64,
}

impl Default for GoalLabelConfig {
    fn default() -> Self {
        Self { p_random_state_as_goal: 0.2, p_future_in_traj: 0.5, p_uniform_random: 0.3, future_gamma: 0.99 }
    }
}

impl GoalLabelConfig {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_random_state_as_goal, self.p_future_in_traj, self.p_uniform_random];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidConfig(format!("goal-label probabilities {ps:?} must lie in [0, 1]")));
        }
        let total: f64 = ps.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("goal-label probabilities sum to {total}, not 1")));
        }
        if !(self.future_gamma > 0.0 && self.future_gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("future_gamma {} outside (0, 1)", self.future_gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GoalBranch {
    Current,
    Future,
    Uniform,
}

pub(crate) fn label_goals_with_branches(
    env: &MazeEnv,
    trajectories: &[Trajectory],
    cfg: &GoalLabelConfig,
    seed: u64,
) -> Result<Vec<(Transition, GoalBranch)>> {
    cfg.validate()?;
    let all_states: Vec<State> = trajectories.iter().flat_map(|t| t.states.iter().copied()).collect();
    if trajectories.iter().all(|t| t.actions.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometric = Geometric::new(1.0 - cfg.future_gamma)
        .map_err(|e| Error::InvalidConfig(format!("geometric look-ahead: {e}")))?;
    let mut out = Vec::new();
    for (traj_id, traj) in trajectories.iter().enumerate() {
        let last = traj.states.len() - 1;
        for (t, a) in traj.actions.iter().enumerate() {
            let s = traj.states[t];
            let s_next = traj.states[t + 1];
            let u: f64 = rng.gen();
            let (g, branch) = if u < cfg.p_random_state_as_goal {
                (s, GoalBranch::Current)
            } else if u < cfg.p_random_state_as_goal + cfg.p_future_in_traj {
                let offset = 1 + geometric.sample(&mut rng) as usize;
                (traj.states[(t + offset).min(last)], GoalBranch::Future)
            } else {
                (all_states[rng.gen_range(0..all_states.len())], GoalBranch::Uniform)
            };
            let origin = out.len();
            out.push((
                Transition {
                    s,
                    a: *a,
                    s_next,
                    g,
                    terminal: env.reached(&s_next, &g),
                    source: Source::Real,
                    traj_id,
                    t,
                    origin,
                    depth: 0,
                },
                branch,
            ));
        }
    }
    Ok(out)
}

/// Attaches a goal to every step, frozen for the rest of training.
pub fn label_goals(
    env: &MazeEnv,
    trajectories: &[Trajectory],
    cfg: &GoalLabelConfig,
    seed: u64,
) -> Result<Vec<Transition>> {
    Ok(label_goals_with_branches(env, trajectories, cfg, seed)?.into_iter().map(|(t, _)| t).collect())
}

/// Append-only store of real transitions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionStore {
    items: Vec<Transition>,
    terminal_idx: Vec<usize>,
}

impl TransitionStore {
    pub fn new(items: Vec<Transition>) -> Self {
        let terminal_idx = items.iter().enumerate().filter(|(_, t)| t.terminal).map(|(i, _)| i).collect();
        Self { items, terminal_idx }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn as_slice(&self) -> &[Transition] {
        &self.items
    }

    pub fn push(&mut self, t: Transition) {
        if t.terminal {
            self.terminal_idx.push(self.items.len());
        }
        self.items.push(t);
    }

    pub fn terminal_count(&self) -> usize {
        self.terminal_idx.len()
    }

    /// Uniform batch (with replacement) that holds at least one terminal
    /// transition whenever the store has any.
    pub fn sample_with_goal(&self, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Transition>> {
        if self.items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut out: Vec<Transition> = (0..batch).map(|_| self.items[rng.gen_range(0..self.items.len())]).collect();
        if !out.iter().any(|t| t.terminal) && !self.terminal_idx.is_empty() && batch > 0 {
            let j = self.terminal_idx[rng.gen_range(0..self.terminal_idx.len())];
            out[batch - 1] = self.items[j];
        }
        Ok(out)
    }
}

/// Bounded FIFO of synthetic transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
}

impl SyntheticBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { items: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, evicting the oldest entries past capacity. Only synthetic
    /// transitions are accepted.
    pub fn extend(&mut self, batch: impl IntoIterator<Item = Transition>) -> Result<()> {
        for t in batch {
            if t.source != Source::Synthetic {
                return Err(Error::InvalidConfig("real transition pushed into the synthetic buffer".into()));
            }
            if self.capacity == 0 {
                continue;
            }
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(t);
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }
}

/// Draws `round(sigma * B)` synthetic and the rest real transitions. Real
/// transitions are drawn without replacement, synthetic ones without
/// replacement when the buffer is large enough.
pub fn sample_batch(
    real: &TransitionStore,
    synthetic: &SyntheticBuffer,
    batch: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Transition>> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidConfig(format!("sampling ratio {sigma} outside [0, 1]")));
    }
    let n_syn = (sigma * batch as f64).round() as usize;
    let n_real = batch - n_syn;
    if n_real > real.len() {
        return Err(Error::InsufficientData(format!("{n_real} real transitions requested, {} stored", real.len())));
    }
    if n_syn > 0 && synthetic.is_empty() {
        return Err(Error::EmptySyntheticBuffer(sigma));
    }
    let mut out = Vec::with_capacity(batch);
    for i in index::sample(rng, real.len(), n_real) {
        out.push(*real.get(i));
    }
    if n_syn == 0 {
        // no draws at all, so sigma = 0 consumes exactly the real-only stream
    } else if n_syn <= synthetic.len() {
        for i in index::sample(rng, synthetic.len(), n_syn) {
            out.push(*synthetic.get(i));
        }
    } else {
        for _ in 0..n_syn {
            out.push(*synthetic.get(rng.gen_range(0..synthetic.len())));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

const BIN_MAGIC: &[u8; 8] = b"TDRLDATA";
const BIN_VERSION: u32 = 1;
const KIND_TRAJ: u8 = 0;
const KIND_TRANS: u8 = 1;

fn action_space_code(space: ActionSpace) -> u8 {
    match space {
        ActionSpace::Discrete => 0,
        ActionSpace::Continuous => 1,
    }
}

fn action_space_from_code(code: u8) -> Result<ActionSpace> {
    match code {
        0 => Ok(ActionSpace::Discrete),
        1 => Ok(ActionSpace::Continuous),
        c => Err(Error::Parse(format!("unknown action space code {c}"))),
    }
}

fn action_header(space: ActionSpace) -> &'static str {
    match space {
        ActionSpace::Discrete => "a0",
        ActionSpace::Continuous => "a0,a1",
    }
}

/// CSV with one row per state: `traj_id,t,s0,s1,a...`; the final state of a
/// trajectory has empty action cells.
pub fn write_trajectories_csv<W: Write>(trajs: &[Trajectory], space: ActionSpace, mut out: W) -> Result<()> {
    writeln!(out, "traj_id,t,s0,s1,{}", action_header(space))?;
    let blanks = vec![""; space.file_dim()].join(",");
    for (i, traj) in trajs.iter().enumerate() {
        for (t, s) in traj.states.iter().enumerate() {
            let a = match traj.actions.get(t) {
                Some(a) => join(&space.to_file_values(a)),
                None => blanks.clone(),
            };
            writeln!(out, "{i},{t},{},{},{a}", s.0[0], s.0[1])?;
        }
    }
    Ok(())
}

pub fn read_trajectories_csv<R: Read>(input: R, space: ActionSpace) -> Result<Vec<Trajectory>> {
    let mut trajs: Vec<Trajectory> = Vec::new();
    for (lineno, line) in BufReader::new(input).lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 4 + space.file_dim() {
            return Err(Error::Parse(format!("line {}: expected {} columns", lineno + 1, 4 + space.file_dim())));
        }
        let id: usize = parse(cells[0], lineno)?;
        let t: usize = parse(cells[1], lineno)?;
        let s = State([parse(cells[2], lineno)?, parse(cells[3], lineno)?]);
        if id == trajs.len() {
            trajs.push(Trajectory { states: vec![], actions: vec![] });
        }
        let traj = trajs.get_mut(id).ok_or_else(|| Error::Parse(format!("line {}: trajectories out of order", lineno + 1)))?;
        if t != traj.states.len() {
            return Err(Error::Parse(format!("line {}: steps out of order", lineno + 1)));
        }
        traj.states.push(s);
        if !cells[4].is_empty() {
            let vals: Vec<f64> = cells[4..].iter().map(|c| parse(c, lineno)).collect::<Result<_>>()?;
            traj.actions.push(space.from_file_values(&vals)?);
        }
    }
    Ok(trajs)
}

fn join(vals: &[f64]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: std::str::FromStr>(cell: &str, lineno: usize) -> Result<T> {
    cell.trim().parse().map_err(|_| Error::Parse(format!("line {}: bad value '{cell}'", lineno + 1)))
}

/// Labelled-transition CSV:
/// `traj_id,t,s0,s1,a...,sn0,sn1,g0,g1,terminal,source,origin,depth`.
pub fn write_transitions_csv<'a, W, I>(items: I, space: ActionSpace, mut out: W) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a Transition>,
{
    writeln!(out, "traj_id,t,s0,s1,{},sn0,sn1,g0,g1,terminal,source,origin,depth", action_header(space))?;
    for tr in items {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            tr.traj_id,
            tr.t,
            tr.s.0[0],
            tr.s.0[1],
            join(&space.to_file_values(&tr.a)),
            tr.s_next.0[0],
            tr.s_next.0[1],
            tr.g.0[0],
            tr.g.0[1],
            u8::from(tr.terminal),
            tr.source.as_str(),
            tr.origin,
            tr.depth
        )?;
    }
    Ok(())
}

pub fn read_transitions_csv<R: Read>(input: R, space: ActionSpace) -> Result<Vec<Transition>> {
    let ad = space.file_dim();
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(input).lines().enumerate().skip(1) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 12 + ad {
            return Err(Error::Parse(format!("line {}: expected {} columns", lineno + 1, 12 + ad)));
        }
        let f = |i: usize| parse::<f64>(c[i], lineno);
        let a_vals: Vec<f64> = (4..4 + ad).map(f).collect::<Result<_>>()?;
        let k = 4 + ad;
        let source = match c[k + 5] {
            "real" => Source::Real,
            "synthetic" => Source::Synthetic,
            other => return Err(Error::Parse(format!("line {}: unknown source '{other}'", lineno + 1))),
        };
        out.push(Transition {
            traj_id: parse(c[0], lineno)?,
            t: parse(c[1], lineno)?,
            s: State([f(2)?, f(3)?]),
            a: space.from_file_values(&a_vals)?,
            s_next: State([f(k)?, f(k + 1)?]),
            g: State([f(k + 2)?, f(k + 3)?]),
            terminal: parse::<u8>(c[k + 4], lineno)? == 1,
            source,
            origin: parse(c[k + 6], lineno)?,
            depth: parse(c[k + 7], lineno)?,
        });
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse("unexpected end of binary data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn header(kind: u8, space: ActionSpace) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BIN_MAGIC);
    put_u32(&mut out, BIN_VERSION);
    out.push(kind);
    out.push(action_space_code(space));
    out
}

fn read_header(r: &mut ByteReader<'_>, kind: u8) -> Result<ActionSpace> {
    if r.take(8)? != BIN_MAGIC {
        return Err(Error::Parse("not a dataset file".into()));
    }
    let version = r.u32()?;
    if version != BIN_VERSION {
        return Err(Error::Parse(format!("dataset version {version}, expected {BIN_VERSION}")));
    }
    if r.u8()? != kind {
        return Err(Error::Parse("dataset holds a different record kind".into()));
    }
    action_space_from_code(r.u8()?)
}

/// Little-endian binary container for trajectories.
pub fn trajectories_to_bytes(trajs: &[Trajectory], space: ActionSpace) -> Vec<u8> {
    let mut out = header(KIND_TRAJ, space);
    put_u64(&mut out, trajs.len() as u64);
    for traj in trajs {
        put_u64(&mut out, traj.states.len() as u64);
        for (t, s) in traj.states.iter().enumerate() {
            put_f64(&mut out, s.0[0]);
            put_f64(&mut out, s.0[1]);
            let vals = traj.actions.get(t).map(|a| space.to_file_values(a)).unwrap_or_else(|| vec![f64::NAN; space.file_dim()]);
            vals.into_iter().for_each(|v| put_f64(&mut out, v));
        }
    }
    out
}

pub fn trajectories_from_bytes(buf: &[u8]) -> Result<(Vec<Trajectory>, ActionSpace)> {
    let mut r = ByteReader::new(buf);
    let space = read_header(&mut r, KIND_TRAJ)?;
    let n = r.u64()? as usize;
    let mut trajs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u64()? as usize;
        let mut traj = Trajectory { states: Vec::with_capacity(len), actions: Vec::with_capacity(len.saturating_sub(1)) };
        for t in 0..len {
            traj.states.push(State([r.f64()?, r.f64()?]));
            let vals: Vec<f64> = (0..space.file_dim()).map(|_| r.f64()).collect::<Result<_>>()?;
            if t + 1 < len {
                traj.actions.push(space.from_file_values(&vals)?);
            }
        }
        trajs.push(traj);
    }
    if !r.finished() {
        return Err(Error::Parse("trailing bytes after dataset".into()));
    }
    Ok((trajs, space))
}

/// Little-endian binary container for labelled transitions.
pub fn transitions_to_bytes<'a>(items: impl IntoIterator<Item = &'a Transition>, space: ActionSpace) -> Vec<u8> {
    let items: Vec<&Transition> = items.into_iter().collect();
    let mut out = header(KIND_TRANS, space);
    put_u64(&mut out, items.len() as u64);
    for tr in items {
        put_u64(&mut out, tr.traj_id as u64);
        put_u64(&mut out, tr.t as u64);
        for v in tr.s.0.iter().chain(&space.to_file_values(&tr.a)).chain(&tr.s_next.0).chain(&tr.g.0) {
            put_f64(&mut out, *v);
        }
        out.push(u8::from(tr.terminal));
        out.push(match tr.source {
            Source::Real => 0,
            Source::Synthetic => 1,
        });
        put_u64(&mut out, tr.origin as u64);
        put_u64(&mut out, tr.depth as u64);
    }
    out
}

pub fn transitions_from_bytes(buf: &[u8]) -> Result<(Vec<Transition>, ActionSpace)> {
    let mut r = ByteReader::new(buf);
    let space = read_header(&mut r, KIND_TRANS)?;
    let n = r.u64()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let traj_id = r.u64()? as usize;
        let t = r.u64()? as usize;
        let s = State([r.f64()?, r.f64()?]);
        let vals: Vec<f64> = (0..space.file_dim()).map(|_| r.f64()).collect::<Result<_>>()?;
        let s_next = State([r.f64()?, r.f64()?]);
        let g = State([r.f64()?, r.f64()?]);
        let terminal = r.u8()? == 1;
        let source = match r.u8()? {
            0 => Source::Real,
            1 => Source::Synthetic,
            c => return Err(Error::Parse(format!("unknown source code {c}"))),
        };
        let origin = r.u64()? as usize;
        let depth = r.u64()? as usize;
        out.push(Transition { s, a: space.from_file_values(&vals)?, s_next, g, terminal, source, traj_id, t, origin, depth });
    }
    if !r.finished() {
        return Err(Error::Parse("trailing bytes after dataset".into()));
    }
    Ok((out, space))
}

/// Reads labelled transitions from `.csv` or binary (any other extension).
pub fn load_transitions(path: &Path, space: ActionSpace) -> Result<Vec<Transition>> {
    if path.extension().is_some_and(|e| e == "csv") {
        read_transitions_csv(std::fs::File::open(path)?, space)
    } else {
        let (items, stored) = transitions_from_bytes(&std::fs::read(path)?)?;
        if stored != space {
            return Err(Error::Parse(format!("dataset action space {stored:?}, env expects {space:?}")));
        }
        Ok(items)
    }
}

pub fn save_transitions(path: &Path, items: &[Transition], space: ActionSpace) -> Result<()> {
    if path.extension().is_some_and(|e| e == "csv") {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_transitions_csv(items, space, &mut f)?;
        f.flush()?;
    } else {
        std::fs::write(path, transitions_to_bytes(items, space))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, layouts, MazeLayout, UniformRandom, WaypointPlanner};

    fn env7() -> MazeEnv {
        MazeEnv::grid(MazeLayout::parse(layouts::MAZE_7X7).unwrap()).unwrap()
    }

    fn data(env: &MazeEnv, n: usize, h: usize) -> Vec<Trajectory> {
        generate_dataset(env, &UniformRandom, n, h, 5).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(GoalLabelConfig::default().validate().is_ok());
        let bad = GoalLabelConfig { p_uniform_random: 0.2, ..Default::default() };
        assert!(bad.validate().is_err());
        let neg = GoalLabelConfig { p_random_state_as_goal: -0.1, p_future_in_traj: 0.8, ..Default::default() };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn degenerate_current_state_goal() {
        let env = env7();
        let cfg = GoalLabelConfig { p_random_state_as_goal: 1.0, p_future_in_traj: 0.0, p_uniform_random: 0.0, ..Default::default() };
        let labelled = label_goals(&env, &data(&env, 5, 40), &cfg, 1).unwrap();
        for t in &labelled {
            assert_eq!(t.g, t.s);
            assert_eq!(t.terminal, t.s_next == t.s);
        }
    }

    #[test]
    fn terminal_flag_matches_goal_reward() {
        let env = env7();
        let labelled = label_goals(&env, &data(&env, 20, 60), &GoalLabelConfig::default(), 2).unwrap();
        assert!(labelled.iter().any(|t| t.terminal));
        for t in &labelled {
            assert_eq!(t.terminal, env.goal_reward(&t.s_next, &t.g) == 1.0);
        }
    }

    #[test]
    fn future_goals_come_from_later_in_the_trajectory() {
        let env = env7();
        let trajs = data(&env, 10, 30);
        let cfg = GoalLabelConfig { p_random_state_as_goal: 0.0, p_future_in_traj: 1.0, p_uniform_random: 0.0, ..Default::default() };
        for t in label_goals(&env, &trajs, &cfg, 3).unwrap() {
            assert!(trajs[t.traj_id].states[t.t + 1..].contains(&t.g));
        }
    }

    #[test]
    fn branch_frequencies_match_config() {
        let env = env7();
        let trajs = generate_dataset(&env, &WaypointPlanner { epsilon: 0.2 }, 100, 1001, 9).unwrap();
        let cfg = GoalLabelConfig::default();
        let labelled = label_goals_with_branches(&env, &trajs, &cfg, 4).unwrap();
        assert_eq!(labelled.len(), 100_000);
        let n = labelled.len() as f64;
        let freq = |b: GoalBranch| labelled.iter().filter(|(_, x)| *x == b).count() as f64 / n;
        assert!((freq(GoalBranch::Current) - 0.2).abs() < 0.01);
        assert!((freq(GoalBranch::Future) - 0.5).abs() < 0.01);
        assert!((freq(GoalBranch::Uniform) - 0.3).abs() < 0.01);
    }

    #[test]
    fn labeling_is_seeded() {
        let env = env7();
        let trajs = data(&env, 5, 30);
        let cfg = GoalLabelConfig::default();
        assert_eq!(label_goals(&env, &trajs, &cfg, 8).unwrap(), label_goals(&env, &trajs, &cfg, 8).unwrap());
    }

    #[test]
    fn empty_dataset_rejected() {
        let env = env7();
        assert!(matches!(label_goals(&env, &[], &GoalLabelConfig::default(), 1), Err(Error::EmptyDataset)));
    }

    fn synthetic_copy(t: &Transition) -> Transition {
        Transition { source: Source::Synthetic, depth: 1, ..*t }
    }

    #[test]
    fn mixed_batches_have_exact_composition() {
        let env = env7();
        let labelled = label_goals(&env, &data(&env, 20, 60), &GoalLabelConfig::default(), 2).unwrap();
        let real = TransitionStore::new(labelled.clone());
        let mut syn = SyntheticBuffer::new(2 * real.len());
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let b = sample_batch(&real, &syn, 512, 0.0, &mut rng).unwrap();
        assert!(b.iter().all(|t| t.source == Source::Real));

        assert!(matches!(sample_batch(&real, &syn, 512, 1.0, &mut rng), Err(Error::EmptySyntheticBuffer(_))));

        syn.extend(labelled.iter().take(100).map(synthetic_copy)).unwrap();
        let b = sample_batch(&real, &syn, 512, 0.5, &mut rng).unwrap();
        assert_eq!(b.len(), 512);
        assert_eq!(b.iter().filter(|t| t.source == Source::Synthetic).count(), 256);
        assert_eq!(b.iter().filter(|t| t.source == Source::Real).count(), 256);

        let b = sample_batch(&real, &syn, 10, 0.25, &mut rng).unwrap();
        // round(2.5) = 3
        assert_eq!(b.iter().filter(|t| t.source == Source::Synthetic).count(), 3);
    }

    #[test]
    fn sample_batch_checks_capacity() {
        let env = env7();
        let labelled = label_goals(&env, &data(&env, 1, 10), &GoalLabelConfig::default(), 2).unwrap();
        let real = TransitionStore::new(labelled);
        let syn = SyntheticBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_batch(&real, &syn, 64, 0.0, &mut rng), Err(Error::InsufficientData(_))));
        assert!(sample_batch(&real, &syn, 4, 1.5, &mut rng).is_err());
    }

    #[test]
    fn synthetic_buffer_evicts_fifo_and_rejects_real() {
        let env = env7();
        let labelled = label_goals(&env, &data(&env, 2, 20), &GoalLabelConfig::default(), 2).unwrap();
        let mut buf = SyntheticBuffer::new(5);
        assert!(buf.extend([labelled[0]]).is_err());
        buf.extend(labelled.iter().take(8).map(synthetic_copy)).unwrap();
        assert_eq!(buf.len(), 5);
        assert_eq!(buf.get(0).t, labelled[3].t);
        assert_eq!(buf.get(0).traj_id, labelled[3].traj_id);
    }

    #[test]
    fn representation_batches_contain_a_goal() {
        let env = env7();
        let labelled = label_goals(&env, &data(&env, 20, 60), &GoalLabelConfig::default(), 2).unwrap();
        let store = TransitionStore::new(labelled);
        assert!(store.terminal_count() > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert!(store.sample_with_goal(4, &mut rng).unwrap().iter().any(|t| t.terminal));
        }
    }

    #[test]
    fn file_formats_round_trip() {
        let env = env7();
        let trajs = data(&env, 3, 12);
        let space = env.action_space();
        let mut csv = Vec::new();
        write_trajectories_csv(&trajs, space, &mut csv).unwrap();
        assert_eq!(read_trajectories_csv(&csv[..], space).unwrap(), trajs);
        assert_eq!(trajectories_from_bytes(&trajectories_to_bytes(&trajs, space)).unwrap().0, trajs);

        let mut labelled = label_goals(&env, &trajs, &GoalLabelConfig::default(), 2).unwrap();
        labelled.push(Transition { s: State([1.25, 0.5]), s_next: State([1.0 / 3.0, 2.0]), ..synthetic_copy(&labelled[0]) });
        let mut csv = Vec::new();
        write_transitions_csv(&labelled, space, &mut csv).unwrap();
        assert_eq!(read_transitions_csv(&csv[..], space).unwrap(), labelled);
        assert_eq!(transitions_from_bytes(&transitions_to_bytes(&labelled, space)).unwrap().0, labelled);
    }

    #[test]
    fn continuous_actions_round_trip() {
        let env = MazeEnv::new(MazeLayout::parse(layouts::MAZE_7X7).unwrap(), crate::env::EnvKind::DEFAULT_POINT).unwrap();
        let trajs = generate_dataset(&env, &UniformRandom, 2, 15, 3).unwrap();
        let mut csv = Vec::new();
        write_trajectories_csv(&trajs, env.action_space(), &mut csv).unwrap();
        assert_eq!(read_trajectories_csv(&csv[..], env.action_space()).unwrap(), trajs);
    }

    #[test]
    fn corrupt_binary_is_rejected() {
        assert!(transitions_from_bytes(b"garbage!").is_err());
        let env = env7();
        let trajs = data(&env, 1, 5);
        let mut bytes = trajectories_to_bytes(&trajs, env.action_space());
        bytes.pop();
        assert!(trajectories_from_bytes(&bytes).is_err());
    }
}
