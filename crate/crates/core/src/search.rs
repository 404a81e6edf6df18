//! Timestep-dynamic activation bit-width allocation.
//!
//! Per-step candidate configurations come from a Fisher-ranked threshold
//! sweep. A beam over the sampler steps keeps the Pareto frontier of
//! (cumulative bits, cumulative step loss), and a short end-to-end rollout
//! picks the final schedule among the survivors.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::FisherMap;
use crate::model::{DenoiseState, Model};
use crate::numerics::{Matrix, Rng};
use crate::quant::{mse, ActivationQuantHook, ActivationRanges, QuantSpec, PASS_THROUGH_BITS};

/// Enumeration limit for [`brute_force_optimum`].
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

/// Slack on the budget comparison, absorbing the rounding of the average.
pub const BUDGET_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// Paths kept after each pruning step (`M`).
    pub beam_width: usize,
    /// Candidate configurations per timestep (`M_c`).
    pub candidates: usize,
    /// Upper bound on the mean bit-width over all `(t, l)` entries.
    pub target_bits: f64,
    pub palette: Vec<u8>,
    /// Reference trajectories whose states feed the step losses.
    pub calib_batch: usize,
    /// Trajectories per schedule in the end-to-end selection test.
    pub selection_batch: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam_width: 9,
            candidates: 9,
            target_bits: 4.0,
            palette: vec![3, 4, 8],
            calib_batch: 4,
            selection_batch: 8,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.candidates == 0 {
            return Err(Error::param("beam width and candidate count must be >= 1"));
        }
        if self.calib_batch == 0 || self.selection_batch == 0 {
            return Err(Error::param("search batch sizes must be >= 1"));
        }
        if self.palette.is_empty() {
            return Err(Error::param("bit palette is empty"));
        }
        for &b in &self.palette {
            QuantSpec::activation(b)?;
        }
        let levels = self.levels();
        let (lo, hi) = (levels[0] as f64, levels[levels.len() - 1] as f64);
        if !(self.target_bits >= lo && self.target_bits <= hi) {
            return Err(Error::param(format!(
                "target bits {} outside palette range [{lo}, {hi}]",
                self.target_bits
            )));
        }
        Ok(())
    }

    /// Distinct palette entries, ascending.
    pub fn levels(&self) -> Vec<u8> {
        let mut levels = self.palette.clone();
        levels.sort_unstable();
        levels.dedup();
        levels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateConfig {
    pub timestep: usize,
    pub bits: Vec<u8>,
    /// Step loss, once measured.
    pub loss: Option<f64>,
}

impl CandidateConfig {
    pub fn new(timestep: usize, bits: Vec<u8>) -> Self {
        Self {
            timestep,
            bits,
            loss: None,
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.bits.iter().map(|&b| u64::from(b)).sum()
    }

    pub fn avg_bits(&self) -> f64 {
        self.total_bits() as f64 / self.bits.len() as f64
    }
}

/// A partial schedule in sampler order with its cumulative loss `E` and bits `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchPath {
    pub configs: Vec<CandidateConfig>,
    pub step_losses: Vec<f64>,
    /// `E`: sum of step losses, accumulated left to right.
    pub loss: f64,
    /// `B`: sum of per-step average bit-widths.
    pub bits: f64,
}

impl SearchPath {
    pub fn empty() -> Self {
        Self {
            configs: Vec::new(),
            step_losses: Vec::new(),
            loss: 0.0,
            bits: 0.0,
        }
    }

    pub fn extend(&self, config: &CandidateConfig, step_loss: f64) -> Self {
        let mut next = self.clone();
        next.configs.push(config.clone());
        next.step_losses.push(step_loss);
        next.loss += step_loss;
        next.bits += config.avg_bits();
        next
    }

    pub fn total_bits(&self) -> u64 {
        self.configs.iter().map(CandidateConfig::total_bits).sum()
    }

    /// Mean over every `(t, l)` entry chosen so far.
    pub fn avg_bits(&self) -> f64 {
        let entries: usize = self.configs.iter().map(|c| c.bits.len()).sum();
        self.total_bits() as f64 / entries.max(1) as f64
    }

    /// `(E, B)` recomputed from the config list.
    pub fn recompute(&self) -> (f64, f64) {
        let loss = self.step_losses.iter().fold(0.0, |acc, v| acc + v);
        let bits = self.configs.iter().fold(0.0, |acc, c| acc + c.avg_bits());
        (loss, bits)
    }
}

/// A complete `T × L` activation bit assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BitSchedule {
    #[serde(rename = "T")]
    pub num_timesteps: usize,
    #[serde(rename = "L")]
    pub num_layers: usize,
    /// `grid[t - 1][l]`.
    pub grid: Vec<Vec<u8>>,
    pub avg_bits: f64,
    pub param_weighted_avg_bits: f64,
    /// `per_step_loss[t - 1]`; empty when the schedule was not searched.
    pub per_step_loss: Vec<f64>,
    pub search_config: Option<SearchConfig>,
    pub seeds: Vec<u64>,
}

impl BitSchedule {
    /// Builds a schedule from `grid[t - 1][l]`; `param_counts` weights the second average.
    pub fn from_grid(grid: Vec<Vec<u8>>, param_counts: &[usize]) -> Result<Self> {
        let num_timesteps = grid.len();
        if num_timesteps == 0 {
            return Err(Error::param("schedule has no timesteps"));
        }
        let num_layers = grid[0].len();
        if num_layers == 0 || grid.iter().any(|row| row.len() != num_layers) {
            return Err(Error::param("schedule rows must be nonempty and equally long"));
        }
        if param_counts.len() != num_layers {
            return Err(Error::param(format!(
                "{} parameter counts for {num_layers} layers",
                param_counts.len()
            )));
        }
        for &b in grid.iter().flatten() {
            QuantSpec::activation(b)?;
        }
        let total: u64 = grid.iter().flatten().map(|&b| u64::from(b)).sum();
        let avg_bits = total as f64 / (num_timesteps * num_layers) as f64;
        let weight_total: usize = param_counts.iter().sum();
        let weighted: f64 = grid
            .iter()
            .flat_map(|row| row.iter().zip(param_counts).map(|(&b, &p)| f64::from(b) * p as f64))
            .sum();
        let param_weighted_avg_bits = weighted / (weight_total * num_timesteps).max(1) as f64;
        Ok(Self {
            num_timesteps,
            num_layers,
            grid,
            avg_bits,
            param_weighted_avg_bits,
            per_step_loss: Vec::new(),
            search_config: None,
            seeds: Vec::new(),
        })
    }

    pub fn uniform(num_timesteps: usize, bits: u8, param_counts: &[usize]) -> Result<Self> {
        Self::from_grid(vec![vec![bits; param_counts.len()]; num_timesteps], param_counts)
    }

    /// Schedule of a complete sampler-order path.
    pub fn from_path(path: &SearchPath, param_counts: &[usize]) -> Result<Self> {
        let t_count = path.configs.len();
        let mut grid = vec![Vec::new(); t_count];
        let mut per_step_loss = vec![0.0; t_count];
        for (config, &loss) in path.configs.iter().zip(&path.step_losses) {
            if config.timestep == 0 || config.timestep > t_count || !grid[config.timestep - 1].is_empty() {
                return Err(Error::Invariant(format!(
                    "path does not cover timesteps 1..={t_count} exactly once"
                )));
            }
            grid[config.timestep - 1] = config.bits.clone();
            per_step_loss[config.timestep - 1] = loss;
        }
        let mut schedule = Self::from_grid(grid, param_counts)?;
        schedule.per_step_loss = per_step_loss;
        Ok(schedule)
    }

    pub fn bits(&self, timestep: usize, layer: usize) -> u8 {
        self.grid[timestep - 1][layer]
    }

    /// Re-derives both averages and checks the grid; used after loading.
    pub fn validate(&self, param_counts: &[usize]) -> Result<()> {
        let fresh = Self::from_grid(self.grid.clone(), param_counts)?;
        if fresh.num_timesteps != self.num_timesteps || fresh.num_layers != self.num_layers {
            return Err(Error::param(format!(
                "schedule declares {}x{} but its grid is {}x{}",
                self.num_timesteps, self.num_layers, fresh.num_timesteps, fresh.num_layers
            )));
        }
        if fresh.avg_bits != self.avg_bits {
            return Err(Error::param(format!(
                "schedule avg_bits {} disagrees with its grid ({})",
                self.avg_bits, fresh.avg_bits
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

/// True if a mean of `total_bits / entries` meets `target`.
pub fn within_budget(total_bits: u64, entries: usize, target: f64) -> bool {
    total_bits as f64 / entries as f64 <= target + BUDGET_TOLERANCE
}

/// Step-loss bit grid: layers at `config.timestep` get `config.bits`, all else passes through.
fn single_step_grid(num_timesteps: usize, config: &CandidateConfig) -> Vec<Vec<u8>> {
    let mut grid = vec![vec![PASS_THROUGH_BITS; config.bits.len()]; num_timesteps];
    grid[config.timestep - 1] = config.bits.clone();
    grid
}

/// Mean over `latents` of the MSE between the full-precision prediction and
/// the calibrated model's prediction with activations quantized per `config`.
pub fn step_loss(
    model: &Model,
    calibrated: &Model,
    ranges: &ActivationRanges,
    config: &CandidateConfig,
    latents: &[DenoiseState],
) -> Result<f64> {
    if latents.is_empty() {
        return Err(Error::param("step loss needs at least one latent"));
    }
    if config.bits.len() != model.num_layers() || config.timestep == 0 || config.timestep > model.num_timesteps() {
        return Err(Error::param(format!(
            "config for timestep {} with {} layers does not fit the model",
            config.timestep,
            config.bits.len()
        )));
    }
    let grid = single_step_grid(model.num_timesteps(), config);
    let hook = ActivationQuantHook { ranges, bits: &grid };
    let mut total = 0.0;
    for state in latents {
        if state.timestep != config.timestep {
            return Err(Error::param(format!(
                "latent at timestep {} scored with a config for timestep {}",
                state.timestep, config.timestep
            )));
        }
        let reference = model.forward(state, None)?;
        let quantized = calibrated.forward_hooked(state, &hook)?;
        total += mse(&reference, &quantized);
    }
    Ok(total / latents.len() as f64)
}

/// Final-latent MSE of `calibrated` under `grid` against the full-precision
/// sampler, averaged over the given starting latents.
pub fn end_to_end_error(
    model: &Model,
    calibrated: &Model,
    ranges: &ActivationRanges,
    grid: &[Vec<u8>],
    starts: &[Matrix],
) -> Result<f64> {
    if starts.is_empty() {
        return Err(Error::param("end-to-end test needs at least one starting latent"));
    }
    if grid.len() != model.num_timesteps() || grid.iter().any(|row| row.len() != model.num_layers()) {
        return Err(Error::param("schedule shape does not match the model"));
    }
    let hook = ActivationQuantHook { ranges, bits: grid };
    let mut total = 0.0;
    for start in starts {
        let reference = model.sample_from(start.clone(), None, None)?;
        let quantized = calibrated.sample_from(start.clone(), Some(&hook), None)?;
        total += mse(&reference.final_latent, &quantized.final_latent);
    }
    Ok(total / starts.len() as f64)
}

/// Starting latents for `count` trajectories drawn from `seed`.
pub fn starting_latents(model: &Model, seed: u64, count: usize) -> Vec<Matrix> {
    let mut rng = Rng::new(seed);
    (0..count).map(|_| model.initial_latent(&mut rng)).collect()
}

/// Seeds of the two sampling stages inside the search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSeeds {
    /// Reference trajectories for teacher-forced step losses.
    pub step_loss: u64,
    /// Starting latents of the end-to-end selection test.
    pub selection: u64,
}

/// Shared state of one search: models, teacher-forced latents and the step-loss cache.
pub struct SearchContext<'a> {
    model: &'a Model,
    calibrated: &'a Model,
    ranges: &'a ActivationRanges,
    seeds: SearchSeeds,
    /// Reference states at each timestep, `latents[t - 1]`.
    latents: Vec<Vec<DenoiseState>>,
    selection_starts: Vec<Matrix>,
    cache: Mutex<HashMap<(usize, Vec<u8>), f64>>,
}

impl<'a> SearchContext<'a> {
    pub fn new(
        model: &'a Model,
        calibrated: &'a Model,
        ranges: &'a ActivationRanges,
        cfg: &SearchConfig,
        seeds: SearchSeeds,
    ) -> Result<Self> {
        cfg.validate()?;
        if model.spec().latent_shape() != calibrated.spec().latent_shape()
            || model.num_layers() != calibrated.num_layers()
            || model.num_timesteps() != calibrated.num_timesteps()
        {
            return Err(Error::param("calibrated model does not match the reference model"));
        }
        if ranges.num_timesteps != model.num_timesteps() || ranges.num_layers != model.num_layers() {
            return Err(Error::param("activation ranges do not match the model"));
        }
        let mut latents = vec![Vec::with_capacity(cfg.calib_batch); model.num_timesteps()];
        for start in starting_latents(model, seeds.step_loss, cfg.calib_batch) {
            for state in model.sample_from(start, None, None)?.states {
                latents[state.timestep - 1].push(state);
            }
        }
        Ok(Self {
            model,
            calibrated,
            ranges,
            seeds,
            latents,
            selection_starts: starting_latents(model, seeds.selection, cfg.selection_batch),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn seeds(&self) -> SearchSeeds {
        self.seeds
    }

    pub fn param_counts(&self) -> Vec<usize> {
        self.model.layers().iter().map(|l| l.param_count()).collect()
    }

    /// Cached teacher-forced step loss of `config`.
    pub fn step_loss(&self, config: &CandidateConfig) -> Result<f64> {
        let key = (config.timestep, config.bits.clone());
        if let Some(&v) = self.lock_cache().get(&key) {
            return Ok(v);
        }
        let latents = self
            .latents
            .get(config.timestep.wrapping_sub(1))
            .ok_or_else(|| Error::param(format!("no latents for timestep {}", config.timestep)))?;
        let v = step_loss(self.model, self.calibrated, self.ranges, config, latents)?;
        // a concurrent writer computes the identical value, so either insert wins
        self.lock_cache().insert(key, v);
        Ok(v)
    }

    pub fn cached_losses(&self) -> usize {
        self.lock_cache().len()
    }

    /// End-to-end selection error of a full schedule grid.
    pub fn end_to_end(&self, grid: &[Vec<u8>]) -> Result<f64> {
        end_to_end_error(self.model, self.calibrated, self.ranges, grid, &self.selection_starts)
    }

    fn lock_cache(&self) -> std::sync::MutexGuard<'_, HashMap<(usize, Vec<u8>), f64>> {
        self.cache.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// Candidates at `t` with their step losses filled in.
    fn scored_candidates(&self, fisher: &FisherMap, t: usize, cfg: &SearchConfig) -> Result<Vec<CandidateConfig>> {
        let mut candidates = generate_candidates(fisher, t, cfg)?;
        for c in &mut candidates {
            c.loss = Some(self.step_loss(c)?);
        }
        Ok(candidates)
    }
}

/// Fisher-ranked candidate bit vectors for timestep `t`.
///
/// Layers are ranked by `I[t, l]` (descending, ties to the lower index). An
/// upgrade ladder raises one layer by one palette level per rung, taking all
/// layers to the second level in rank order before any reaches the third.
/// Candidate `k` climbs `round(q_k · R)` of the `R` rungs, `q_k = k / (M_c − 1)`.
/// With a two-level palette this is exactly "top `q_k` fraction gets the high bit".
pub fn generate_candidates(fisher: &FisherMap, t: usize, cfg: &SearchConfig) -> Result<Vec<CandidateConfig>> {
    if cfg.candidates == 0 {
        return Err(Error::param("candidate count must be >= 1"));
    }
    if t == 0 || t > fisher.num_timesteps {
        return Err(Error::param(format!("timestep {t} outside 1..={}", fisher.num_timesteps)));
    }
    let levels = cfg.levels();
    if levels.is_empty() {
        return Err(Error::param("bit palette is empty"));
    }
    let scores = fisher.timestep_scores(t);
    let l_count = scores.len();
    let mut ranked: Vec<usize> = (0..l_count).collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let rungs = l_count * (levels.len() - 1);
    let mut out: Vec<CandidateConfig> = Vec::with_capacity(cfg.candidates);
    for k in 0..cfg.candidates {
        let q = if cfg.candidates == 1 {
            0.0
        } else {
            k as f64 / (cfg.candidates - 1) as f64
        };
        let climbed = (q * rungs as f64).round() as usize;
        let mut level = vec![0usize; l_count];
        for rung in 0..climbed {
            level[ranked[rung % l_count]] = rung / l_count + 1;
        }
        let bits: Vec<u8> = level.iter().map(|&i| levels[i]).collect();
        if out.last().is_none_or(|prev| prev.bits != bits) {
            out.push(CandidateConfig::new(t, bits));
        }
    }
    Ok(out)
}

/// Indices of the Pareto-optimal `(B, E)` points, at most `m` of them, sorted by `B`.
///
/// A point equal to an earlier one in both coordinates is dropped. When more
/// than `m` survive, those closest to the origin after dividing each axis by
/// its maximum over the survivors are kept.
pub fn pareto_front(points: &[(f64, f64)], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[a].1.total_cmp(&points[b].1))
            .then(a.cmp(&b))
    });
    let mut survivors = Vec::new();
    let mut best_loss = f64::INFINITY;
    for i in order {
        if points[i].1 < best_loss {
            best_loss = points[i].1;
            survivors.push(i);
        }
    }
    if survivors.len() > m {
        let b_max = survivors.iter().map(|&i| points[i].0).fold(0.0, f64::max);
        let e_max = survivors.iter().map(|&i| points[i].1).fold(0.0, f64::max);
        let ratio = |v: f64, max: f64| if max > 0.0 { v / max } else { 0.0 };
        let distance = |i: usize| ratio(points[i].0, b_max).hypot(ratio(points[i].1, e_max));
        survivors.sort_by(|&a, &b| distance(a).total_cmp(&distance(b)).then(a.cmp(&b)));
        survivors.truncate(m);
        survivors.sort_by(|&a, &b| points[a].0.total_cmp(&points[b].0).then(a.cmp(&b)));
    }
    survivors
}

/// Non-dominated subset of `paths`, at most `m`, sorted by cumulative bits.
pub fn pareto_prune(paths: Vec<SearchPath>, m: usize) -> Vec<SearchPath> {
    let points: Vec<(f64, f64)> = paths.iter().map(|p| (p.bits, p.loss)).collect();
    let keep = pareto_front(&points, m);
    let mut slots: Vec<Option<SearchPath>> = paths.into_iter().map(Some).collect();
    keep.into_iter().filter_map(|i| slots[i].take()).collect()
}

/// Beam search over the sampler steps `t = T, …, 1`.
///
/// Every retained path is extended by every candidate. Extensions that can no
/// longer meet the budget, even with the base bit-width on all remaining
/// steps, are discarded before Pareto pruning.
pub fn beam_search(ctx: &SearchContext<'_>, fisher: &FisherMap, cfg: &SearchConfig) -> Result<Vec<SearchPath>> {
    cfg.validate()?;
    let (t_count, l_count) = (ctx.model.num_timesteps(), ctx.model.num_layers());
    check_fisher_shape(fisher, t_count, l_count)?;
    let base = u64::from(cfg.levels()[0]);
    let entries = t_count * l_count;
    let mut beam = vec![SearchPath::empty()];
    for (done, t) in (1..=t_count).rev().enumerate() {
        let candidates = ctx.scored_candidates(fisher, t, cfg)?;
        let remaining = (t_count - done - 1) as u64;
        let mut expanded = Vec::with_capacity(beam.len() * candidates.len());
        for path in &beam {
            for c in &candidates {
                let next = path.extend(c, c.loss.unwrap_or(f64::NAN));
                let floor = next.total_bits() + remaining * l_count as u64 * base;
                if within_budget(floor, entries, cfg.target_bits) {
                    expanded.push(next);
                }
            }
        }
        if expanded.is_empty() {
            return Err(Error::Invariant(format!("beam emptied at timestep {t}")));
        }
        beam = pareto_prune(expanded, cfg.beam_width);
    }
    Ok(beam)
}

/// Lowest cumulative loss among paths meeting the budget.
pub fn best_feasible<'p>(frontier: &'p [SearchPath], cfg: &SearchConfig) -> Option<&'p SearchPath> {
    frontier
        .iter()
        .filter(|p| within_budget(p.total_bits(), p.configs.iter().map(|c| c.bits.len()).sum(), cfg.target_bits))
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
}

/// Picks the budget-feasible frontier path with the lowest end-to-end error.
pub fn final_select(frontier: &[SearchPath], cfg: &SearchConfig, ctx: &SearchContext<'_>) -> Result<BitSchedule> {
    if frontier.is_empty() {
        return Err(Error::Invariant("final selection on an empty frontier".into()));
    }
    let param_counts = ctx.param_counts();
    let mut best: Option<(f64, BitSchedule)> = None;
    let mut closest = f64::INFINITY;
    for path in frontier {
        let schedule = BitSchedule::from_path(path, &param_counts)?;
        closest = closest.min(schedule.avg_bits);
        if schedule.avg_bits > cfg.target_bits + BUDGET_TOLERANCE {
            continue;
        }
        let error = ctx.end_to_end(&schedule.grid)?;
        let better = match &best {
            None => true,
            Some((e, s)) => error < *e || (error == *e && schedule.avg_bits < s.avg_bits),
        };
        if better {
            best = Some((error, schedule));
        }
    }
    let (_, mut schedule) = best.ok_or(Error::InfeasibleBudget {
        target: cfg.target_bits,
        closest,
    })?;
    schedule.search_config = Some(cfg.clone());
    schedule.seeds = vec![ctx.seeds.step_loss, ctx.seeds.selection];
    Ok(schedule)
}

/// Exhaustive minimum of the cumulative step loss over all candidate sequences within budget.
pub fn brute_force_optimum(ctx: &SearchContext<'_>, fisher: &FisherMap, cfg: &SearchConfig) -> Result<BitSchedule> {
    cfg.validate()?;
    let (t_count, l_count) = (ctx.model.num_timesteps(), ctx.model.num_layers());
    check_fisher_shape(fisher, t_count, l_count)?;
    let mut per_step = Vec::with_capacity(t_count);
    let mut sequences = 1usize;
    for t in (1..=t_count).rev() {
        let candidates = generate_candidates(fisher, t, cfg)?;
        sequences = sequences.saturating_mul(candidates.len());
        if sequences > BRUTE_FORCE_LIMIT {
            return Err(Error::param(format!(
                "brute force would enumerate more than {BRUTE_FORCE_LIMIT} sequences"
            )));
        }
        per_step.push(candidates);
    }
    for step in &mut per_step {
        for c in step.iter_mut() {
            c.loss = Some(ctx.step_loss(c)?);
        }
    }

    let mut best: Option<SearchPath> = None;
    let mut closest = f64::INFINITY;
    let mut stack = vec![SearchPath::empty()];
    while let Some(path) = stack.pop() {
        let depth = path.configs.len();
        if depth == t_count {
            let avg = path.avg_bits();
            closest = closest.min(avg);
            if within_budget(path.total_bits(), t_count * l_count, cfg.target_bits)
                && best.as_ref().is_none_or(|b| path.loss < b.loss)
            {
                best = Some(path);
            }
            continue;
        }
        // reversed so candidates are visited in generation order
        for c in per_step[depth].iter().rev() {
            stack.push(path.extend(c, c.loss.unwrap_or(f64::NAN)));
        }
    }
    let best = best.ok_or(Error::InfeasibleBudget {
        target: cfg.target_bits,
        closest,
    })?;
    let mut schedule = BitSchedule::from_path(&best, &ctx.param_counts())?;
    schedule.search_config = Some(cfg.clone());
    schedule.seeds = vec![ctx.seeds.step_loss, ctx.seeds.selection];
    Ok(schedule)
}

fn check_fisher_shape(fisher: &FisherMap, t_count: usize, l_count: usize) -> Result<()> {
    if fisher.num_timesteps != t_count || fisher.num_layers != l_count {
        return Err(Error::param(format!(
            "Fisher map is {}x{} but the model has T={t_count}, L={l_count}",
            fisher.num_timesteps, fisher.num_layers
        )));
    }
    Ok(())
}
