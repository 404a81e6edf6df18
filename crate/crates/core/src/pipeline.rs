//! Stage orchestration: config, persisted artifacts and the run report.
//!
//! Stages run in the order fisher → calibrate → search → evaluate → compare.
//! Each stage writes its artifacts into `output_dir`, and later stages can be
//! rerun alone from them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calib::{calibrate_model, CalibrationReport};
use crate::error::{Error, Result};
use crate::fisher::{estimate_fisher, temporal_weights, write_heatmap_csv, FisherMap, TemporalWeights};
use crate::model::{ActivationTrace, Model, ModelSpec, TraceSink};
use crate::numerics::{Matrix, Rng};
use crate::quant::{quantize_layer_weights, ActivationRanges, QuantSpec};
use crate::search::{
    beam_search, end_to_end_error, final_select, starting_latents, BitSchedule, SearchConfig, SearchContext,
    SearchSeeds,
};

/// Bit-widths a pipeline may use for weights or activations.
pub const ALLOWED_BITS: [u8; 4] = [3, 4, 8, 16];

/// Significant digits of every float written to `report.json` and `ablation.csv`.
pub const REPORT_DIGITS: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub weight_bits: u8,
    /// Activation bit-widths the search may assign.
    pub palette: Vec<u8>,
}

impl Default for QuantSection {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            palette: vec![3, 4, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FisherSection {
    /// Softmax temperature of the temporal weights.
    pub tau: f64,
    /// One sampler run per seed and batch entry.
    pub seeds: Vec<u64>,
    pub batch: usize,
    pub noise_scale: f64,
}

impl Default for FisherSection {
    fn default() -> Self {
        Self {
            tau: 1.0,
            seeds: vec![11, 12],
            batch: 4,
            noise_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    /// Full-precision trajectories whose layer inputs feed calibration and activation ranges.
    pub trajectories: usize,
    pub seed: u64,
    /// GPTQ damping as a fraction of the mean Hessian diagonal.
    pub damping: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            trajectories: 4,
            seed: 21,
            damping: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub beam_width: usize,
    pub candidates: usize,
    pub target_bits: f64,
    pub step_loss_batch: usize,
    pub selection_batch: usize,
    pub step_loss_seed: u64,
    pub selection_seed: u64,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        Self {
            beam_width: d.beam_width,
            candidates: d.candidates,
            target_bits: d.target_bits,
            step_loss_batch: d.calib_batch,
            selection_batch: d.selection_batch,
            step_loss_seed: 31,
            selection_seed: 41,
        }
    }
}

/// Held-out starting latents for the reported end-to-end errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub seed: u64,
    pub samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seed: 51, samples: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub quant: QuantSection,
    pub fisher: FisherSection,
    pub calibration: CalibrationSection,
    pub search: SearchSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("tquant-out"),
            model: ModelSpec::default(),
            quant: QuantSection::default(),
            fisher: FisherSection::default(),
            calibration: CalibrationSection::default(),
            search: SearchSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn config_err(msg: impl fmt::Display) -> Error {
    Error::Config(msg.to_string())
}

impl PipelineConfig {
    /// Parses and validates a TOML config.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dir.as_os_str().is_empty() {
            return Err(config_err("output_dir is empty"));
        }
        self.model.validate().map_err(|e| config_err(format!("model: {e}")))?;
        let allowed = |b: &u8| ALLOWED_BITS.contains(b);
        if !allowed(&self.quant.weight_bits) {
            return Err(config_err(format!(
                "quant.weight_bits {} not in {ALLOWED_BITS:?}",
                self.quant.weight_bits
            )));
        }
        if let Some(b) = self.quant.palette.iter().find(|b| !allowed(b)) {
            return Err(config_err(format!("quant.palette entry {b} not in {ALLOWED_BITS:?}")));
        }
        let f = &self.fisher;
        if !(f.tau.is_finite() && f.tau > 0.0) {
            return Err(config_err(format!("fisher.tau must be positive, got {}", f.tau)));
        }
        if f.seeds.is_empty() || f.batch == 0 {
            return Err(config_err("fisher needs at least one seed and batch >= 1"));
        }
        if !(f.noise_scale.is_finite() && f.noise_scale >= 0.0) {
            return Err(config_err(format!("fisher.noise_scale must be >= 0, got {}", f.noise_scale)));
        }
        let c = &self.calibration;
        if c.trajectories == 0 {
            return Err(config_err("calibration.trajectories must be >= 1"));
        }
        if !(c.damping.is_finite() && c.damping > 0.0) {
            return Err(config_err(format!("calibration.damping must be positive, got {}", c.damping)));
        }
        self.search_config()
            .validate()
            .map_err(|e| config_err(format!("search: {e}")))?;
        if self.eval.samples == 0 {
            return Err(config_err("eval.samples must be >= 1"));
        }
        Ok(())
    }

    pub fn search_config(&self) -> SearchConfig {
        let s = &self.search;
        SearchConfig {
            beam_width: s.beam_width,
            candidates: s.candidates,
            target_bits: s.target_bits,
            palette: self.quant.palette.clone(),
            calib_batch: s.step_loss_batch,
            selection_batch: s.selection_batch,
        }
    }

    pub fn search_seeds(&self) -> SearchSeeds {
        SearchSeeds {
            step_loss: self.search.step_loss_seed,
            selection: self.search.selection_seed,
        }
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts::new(&self.output_dir)
    }

    /// Largest palette level within the budget: the uniform schedule the search is compared to.
    pub fn baseline_bits(&self) -> u8 {
        let levels = self.search_config().levels();
        levels
            .iter()
            .rev()
            .copied()
            .find(|&b| f64::from(b) <= self.search.target_bits)
            .unwrap_or(levels[0])
    }
}

/// File layout of one output directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn fisher_csv(&self) -> PathBuf {
        self.path("fisher.csv")
    }

    pub fn fisher_raw(&self) -> PathBuf {
        self.path("fisher_raw.json")
    }

    pub fn calib_report(&self) -> PathBuf {
        self.path("calib_report.csv")
    }

    pub fn calibrated_model(&self) -> PathBuf {
        self.path("calibrated_model.json")
    }

    pub fn uniform_model(&self) -> PathBuf {
        self.path("uniform_calibrated_model.json")
    }

    pub fn schedule(&self) -> PathBuf {
        self.path("schedule.json")
    }

    pub fn baseline_schedule(&self) -> PathBuf {
        self.path("baseline_schedule.json")
    }

    pub fn ablation(&self) -> PathBuf {
        self.path("ablation.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.path("report.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.path("MANIFEST")
    }

    fn ensure_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }
}

pub const STAGES: [&str; 5] = ["fisher", "calibrate", "search", "evaluate", "compare"];

/// Completion state of each stage, one `stage status` line per stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    path: PathBuf,
    status: BTreeMap<String, String>,
}

impl Manifest {
    /// Reads an existing manifest or starts one with every stage pending.
    pub fn open(artifacts: &Artifacts) -> Result<Self> {
        let path = artifacts.manifest();
        let mut status: BTreeMap<String, String> =
            STAGES.iter().map(|s| (s.to_string(), "pending".to_string())).collect();
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let (stage, state) = line.split_once(' ').unwrap_or((line, ""));
                status.insert(stage.to_string(), state.trim().to_string());
            }
        }
        Ok(Self { path, status })
    }

    pub fn status(&self, stage: &str) -> Option<&str> {
        self.status.get(stage).map(String::as_str)
    }

    pub fn mark(&mut self, stage: &str, state: &str) -> Result<()> {
        self.status.insert(stage.to_string(), state.replace('\n', " "));
        let mut text = String::new();
        for stage in STAGES {
            text += &format!("{stage} {}\n", self.status[stage]);
        }
        std::fs::write(&self.path, text).map_err(|e| Error::io(&self.path, e))
    }

    /// Runs `f` as `stage`, recording `complete` or the failure.
    pub fn track<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        self.mark(stage, "running")?;
        match f() {
            Ok(v) => {
                self.mark(stage, "complete")?;
                Ok(v)
            }
            Err(e) => {
                self.mark(stage, &format!("failed: {e}"))?;
                Err(e)
            }
        }
    }
}

/// `x` as a plain decimal string with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let digits = digits.max(1);
    if x == 0.0 {
        return format!("{:.*}", digits - 1, 0.0);
    }
    // Round first so 9.995 at 3 digits lands on the right exponent.
    let sci = format!("{:.*e}", digits - 1, x);
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("exponent");
    let decimals = (digits as i32 - 1 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

fn num(x: f64) -> String {
    format_sig(x, REPORT_DIGITS)
}

/// Compression ratio relative to 16-bit storage.
pub fn reduction_ratio(avg_bits: f64) -> f64 {
    16.0 / avg_bits
}

/// The weight-quantization flavour of a model in the comparison grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WeightMode {
    /// Round-to-nearest on per-channel min-max grids.
    #[serde(rename = "minmax")]
    MinMax,
    #[serde(rename = "uniform-calib")]
    UniformCalib,
    #[serde(rename = "fisher-calib")]
    FisherCalib,
}

impl WeightMode {
    pub const ALL: [WeightMode; 3] = [WeightMode::MinMax, WeightMode::UniformCalib, WeightMode::FisherCalib];

    pub fn name(&self) -> &'static str {
        match self {
            WeightMode::MinMax => "minmax",
            WeightMode::UniformCalib => "uniform-calib",
            WeightMode::FisherCalib => "fisher-calib",
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub schedule: String,
    pub weights: WeightMode,
    /// End-to-end final-latent MSE against the full-precision sampler.
    pub error: f64,
}

/// End-to-end error of every schedule under every weight model.
///
/// Rows are schedule-major, in input order.
pub fn compare_policies(
    model: &Model,
    schedules: &[(String, BitSchedule)],
    weight_models: &[(WeightMode, &Model)],
    ranges: &ActivationRanges,
    starts: &[Matrix],
) -> Result<Vec<ComparisonRow>> {
    let shape = (model.num_timesteps(), model.num_layers());
    for (_, schedule) in schedules {
        if (schedule.num_timesteps, schedule.num_layers) != shape {
            return Err(Error::DimensionMismatch {
                op: "compare schedule",
                left: (schedule.num_timesteps, schedule.num_layers),
                right: shape,
            });
        }
        schedule.validate(&param_counts(model))?;
    }
    let mut rows = Vec::with_capacity(schedules.len() * weight_models.len());
    for (name, schedule) in schedules {
        for &(mode, weights) in weight_models {
            rows.push(ComparisonRow {
                schedule: name.clone(),
                weights: mode,
                error: end_to_end_error(model, weights, ranges, &schedule.grid, starts)?,
            });
        }
    }
    Ok(rows)
}

pub fn param_counts(model: &Model) -> Vec<usize> {
    model.layers().iter().map(|l| l.param_count()).collect()
}

pub fn write_comparison_csv(rows: &[ComparisonRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    w.write_record(["schedule", "weights", "error"])
        .map_err(|e| Error::format(path, e))?;
    for row in rows {
        w.write_record([row.schedule.as_str(), row.weights.name(), &num(row.error)])
            .map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Round-to-nearest weights on per-channel min-max grids.
pub fn minmax_model(model: &Model, bits: u8) -> Result<Model> {
    let spec = QuantSpec::weight(bits)?;
    if spec.is_pass_through() {
        return Ok(model.clone());
    }
    let weights = model
        .layers()
        .iter()
        .map(|l| quantize_layer_weights(l, &spec).map(|(q, _)| q.weight))
        .collect::<Result<Vec<_>>>()?;
    model.with_weights(weights)
}

/// Mean reconstruction error over each layer's `fraction` highest-α timesteps, pooled over layers.
pub fn top_alpha_error(report: &CalibrationReport, weights: &TemporalWeights, fraction: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for l in 0..weights.num_layers() {
        for t in weights.top_timesteps(l, fraction) {
            sum += report
                .error(l, t)
                .ok_or_else(|| Error::Invariant(format!("calibration report lacks layer {l}, timestep {t}")))?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::param("no timesteps selected"));
    }
    Ok(sum / count as f64)
}

/// Share of timesteps per layer that count as high-sensitivity in the report.
pub const TOP_ALPHA_FRACTION: f64 = 0.2;

/// Both calibrated weight sets, with their per-timestep error tables.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub weights: TemporalWeights,
    pub fisher_model: Model,
    pub fisher_report: CalibrationReport,
    pub uniform_model: Model,
    pub uniform_report: CalibrationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherSummary {
    pub tau: String,
    pub mean_score: String,
    pub max_score: String,
    /// Per layer, the timestep with the largest score.
    pub peak_timestep: Vec<usize>,
    /// Per layer, the largest temporal weight.
    pub max_alpha: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    pub layer: String,
    pub fisher_top_error: String,
    pub uniform_top_error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub top_fraction: String,
    pub fisher_top_error: String,
    pub uniform_top_error: String,
    pub layers: Vec<LayerCalibration>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub seed: u64,
    pub samples: usize,
    pub schedule_error: String,
    pub baseline_bits: u8,
    pub baseline_error: String,
    /// `1 - schedule_error / baseline_error`.
    pub improvement: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub schedule: String,
    pub weights: WeightMode,
    pub error: String,
}

/// Everything `run` reports. Floats are decimal strings; `stage_seconds` is the only
/// field that varies between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: ModelSpec,
    pub fisher: FisherSummary,
    pub calibration: CalibrationSummary,
    /// Selected `grid[t - 1][l]`.
    pub schedule: Vec<Vec<u8>>,
    pub search_loss: String,
    pub avg_bits: String,
    pub param_weighted_avg_bits: String,
    pub weight_bits: u8,
    /// `16 / param_weighted_avg_bits`.
    pub flops_reduction: String,
    /// `16 / avg_bits`.
    pub size_reduction: String,
    pub evaluation: EvaluationSummary,
    pub ablation: Vec<AblationEntry>,
    pub stage_seconds: BTreeMap<String, String>,
}

impl RunReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

fn fisher_summary(map: &FisherMap, weights: &TemporalWeights) -> FisherSummary {
    let scores = map.scores.data();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let max = scores.iter().copied().fold(0.0, f64::max);
    let peak_timestep = (0..map.num_layers)
        .map(|l| {
            let s = map.layer_scores(l);
            // first maximum, so ties resolve to the earliest timestep
            (0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best }) + 1
        })
        .collect();
    let max_alpha = (0..weights.num_layers())
        .map(|l| num(weights.layer(l).into_iter().fold(0.0, f64::max)))
        .collect();
    FisherSummary {
        tau: num(weights.tau.unwrap_or(f64::INFINITY)),
        mean_score: num(mean),
        max_score: num(max),
        peak_timestep,
        max_alpha,
    }
}

fn calibration_summary(model: &Model, calib: &Calibration) -> Result<CalibrationSummary> {
    let mut layers = Vec::with_capacity(model.num_layers());
    for (l, layer) in model.layers().iter().enumerate() {
        let mut fisher = 0.0;
        let mut uniform = 0.0;
        let top = calib.weights.top_timesteps(l, TOP_ALPHA_FRACTION);
        for &t in &top {
            fisher += calib.fisher_report.error(l, t).unwrap_or(f64::NAN);
            uniform += calib.uniform_report.error(l, t).unwrap_or(f64::NAN);
        }
        layers.push(LayerCalibration {
            layer: layer.name(),
            fisher_top_error: num(fisher / top.len() as f64),
            uniform_top_error: num(uniform / top.len() as f64),
        });
    }
    Ok(CalibrationSummary {
        top_fraction: num(TOP_ALPHA_FRACTION),
        fisher_top_error: num(top_alpha_error(&calib.fisher_report, &calib.weights, TOP_ALPHA_FRACTION)?),
        uniform_top_error: num(top_alpha_error(&calib.uniform_report, &calib.weights, TOP_ALPHA_FRACTION)?),
        layers,
    })
}

/// A validated config bound to its model and output directory.
pub struct Session {
    pub cfg: PipelineConfig,
    pub model: Model,
    pub artifacts: Artifacts,
    pub manifest: Manifest,
}

impl Session {
    pub fn open(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(cfg.model)?;
        let artifacts = cfg.artifacts();
        artifacts.ensure_dir()?;
        let manifest = Manifest::open(&artifacts)?;
        Ok(Self {
            cfg,
            model,
            artifacts,
            manifest,
        })
    }

    /// Estimates the Fisher map and writes `fisher.csv` and `fisher_raw.json`.
    pub fn fisher(&mut self) -> Result<FisherMap> {
        let (cfg, model, artifacts) = (&self.cfg, &self.model, &self.artifacts);
        self.manifest.track("fisher", || {
            let f = &cfg.fisher;
            let map = estimate_fisher(model, &f.seeds, f.batch, f.noise_scale)?;
            write_heatmap_csv(&map, &artifacts.fisher_csv())?;
            map.save(&artifacts.fisher_raw())?;
            Ok(map)
        })
    }

    pub fn load_fisher(&self) -> Result<FisherMap> {
        let path = self.artifacts.fisher_raw();
        let map = load_artifact(&path, "fisher", FisherMap::load)?;
        if map.model_fingerprint != self.model.fingerprint()
            || (map.num_timesteps, map.num_layers) != (self.model.num_timesteps(), self.model.num_layers())
        {
            return Err(config_err(format!(
                "{} was computed for a different model; rerun `fisher`",
                path.display()
            )));
        }
        Ok(map)
    }

    /// Layer inputs of the full-precision calibration trajectories.
    pub fn traces(&self) -> Result<Vec<ActivationTrace>> {
        let c = &self.cfg.calibration;
        let mut sink = TraceSink::new(0);
        let mut rng = Rng::new(c.seed);
        for batch in 0..c.trajectories {
            sink.batch = batch as u64;
            self.model
                .sample_from(self.model.initial_latent(&mut rng), None, Some(&mut sink))?;
        }
        Ok(sink.traces)
    }

    pub fn ranges(&self, traces: &[ActivationTrace]) -> Result<ActivationRanges> {
        ActivationRanges::from_traces(traces, self.model.num_timesteps(), self.model.num_layers())
    }

    /// Fisher-weighted and uniform GPTQ calibration; writes both models and error tables.
    pub fn calibrate(&mut self, fisher: &FisherMap, traces: &[ActivationTrace]) -> Result<Calibration> {
        let (cfg, model, artifacts) = (&self.cfg, &self.model, &self.artifacts);
        self.manifest.track("calibrate", || {
            let weights = temporal_weights(fisher, cfg.fisher.tau)?;
            let specs = vec![QuantSpec::weight(cfg.quant.weight_bits)?; model.num_layers()];
            let damping = cfg.calibration.damping;
            let (fisher_model, fisher_report) = calibrate_model(model, traces, &weights, &specs, damping)?;
            let uniform = TemporalWeights::uniform(model.num_timesteps(), model.num_layers());
            let (uniform_model, uniform_report) = calibrate_model(model, traces, &uniform, &specs, damping)?;
            fisher_report.write_csv(&artifacts.calib_report())?;
            uniform_report.write_csv(&artifacts.path("calib_report_uniform.csv"))?;
            fisher_model.save(&artifacts.calibrated_model())?;
            uniform_model.save(&artifacts.uniform_model())?;
            Ok(Calibration {
                weights,
                fisher_model,
                fisher_report,
                uniform_model,
                uniform_report,
            })
        })
    }

    /// Loads a persisted calibrated model and checks it belongs to this config's model.
    pub fn load_calibrated(&self, path: &Path) -> Result<Model> {
        let loaded = load_artifact(path, "calibrate", Model::load)?;
        let original: Vec<Matrix> = self.model.layers().iter().map(|l| l.weight.clone()).collect();
        let compatible = loaded.spec() == self.model.spec()
            && loaded.with_weights(original).map(|m| m == self.model).unwrap_or(false);
        if !compatible {
            return Err(config_err(format!(
                "{} belongs to a different model; rerun `calibrate`",
                path.display()
            )));
        }
        Ok(loaded)
    }

    /// Beam search plus final selection on `calibrated`; writes the searched and uniform schedules.
    pub fn search(
        &mut self,
        fisher: &FisherMap,
        calibrated: &Model,
        ranges: &ActivationRanges,
    ) -> Result<(BitSchedule, BitSchedule)> {
        let (cfg, model, artifacts) = (&self.cfg, &self.model, &self.artifacts);
        self.manifest.track("search", || {
            let search_cfg = cfg.search_config();
            let ctx = SearchContext::new(model, calibrated, ranges, &search_cfg, cfg.search_seeds())?;
            let frontier = beam_search(&ctx, fisher, &search_cfg)?;
            let schedule = final_select(&frontier, &search_cfg, &ctx)?;
            let baseline = BitSchedule::uniform(model.num_timesteps(), cfg.baseline_bits(), &param_counts(model))?;
            schedule.save(&artifacts.schedule())?;
            baseline.save(&artifacts.baseline_schedule())?;
            Ok((schedule, baseline))
        })
    }

    /// Starting latents of the held-out evaluation.
    pub fn eval_starts(&self) -> Vec<Matrix> {
        starting_latents(&self.model, self.cfg.eval.seed, self.cfg.eval.samples)
    }

    pub fn load_schedule(&self, path: &Path) -> Result<BitSchedule> {
        let schedule = load_artifact(path, "search", BitSchedule::load)?;
        schedule.validate(&param_counts(&self.model))?;
        Ok(schedule)
    }

    /// Every schedule under minmax, uniform-calibrated and Fisher-calibrated weights; writes `ablation.csv`.
    pub fn compare(
        &mut self,
        schedules: &[(String, BitSchedule)],
        uniform_model: &Model,
        fisher_model: &Model,
        ranges: &ActivationRanges,
        out: &Path,
    ) -> Result<Vec<ComparisonRow>> {
        let starts = self.eval_starts();
        let (cfg, model) = (&self.cfg, &self.model);
        self.manifest.track("compare", || {
            let minmax = minmax_model(model, cfg.quant.weight_bits)?;
            let weight_models = [
                (WeightMode::MinMax, &minmax),
                (WeightMode::UniformCalib, uniform_model),
                (WeightMode::FisherCalib, fisher_model),
            ];
            let rows = compare_policies(model, schedules, &weight_models, ranges, &starts)?;
            write_comparison_csv(&rows, out)?;
            Ok(rows)
        })
    }
}

/// Loads `path`, turning a missing file into a hint to run `stage` first.
fn load_artifact<T>(path: &Path, stage: &str, load: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(config_err(format!(
            "{} not found; run `{stage}` first",
            path.display()
        )));
    }
    load(path)
}

/// Runs every stage and writes `report.json`.
pub fn run_pipeline(cfg: PipelineConfig) -> Result<RunReport> {
    let mut session = Session::open(cfg)?;
    let mut seconds = BTreeMap::new();
    let mut clock = Instant::now();
    let mut lap = |stage: &str, clock: &mut Instant| {
        seconds.insert(stage.to_string(), format!("{:.6}", clock.elapsed().as_secs_f64()));
        *clock = Instant::now();
    };

    let fisher = session.fisher()?;
    lap("fisher", &mut clock);

    let traces = session.traces()?;
    let calib = session.calibrate(&fisher, &traces)?;
    lap("calibrate", &mut clock);

    let ranges = session.ranges(&traces)?;
    let (schedule, baseline) = session.search(&fisher, &calib.fisher_model, &ranges)?;
    lap("search", &mut clock);

    let starts = session.eval_starts();
    let evaluation = {
        let (model, cfg) = (&session.model, &session.cfg);
        session.manifest.track("evaluate", || {
            let e = |s: &BitSchedule| end_to_end_error(model, &calib.fisher_model, &ranges, &s.grid, &starts);
            let (schedule_error, baseline_error) = (e(&schedule)?, e(&baseline)?);
            Ok(EvaluationSummary {
                seed: cfg.eval.seed,
                samples: cfg.eval.samples,
                schedule_error: num(schedule_error),
                baseline_bits: cfg.baseline_bits(),
                baseline_error: num(baseline_error),
                improvement: num(1.0 - schedule_error / baseline_error),
            })
        })?
    };
    lap("evaluate", &mut clock);

    let schedules = [
        ("searched".to_string(), schedule.clone()),
        ("uniform".to_string(), baseline),
    ];
    let out = session.artifacts.ablation();
    let rows = session.compare(&schedules, &calib.uniform_model, &calib.fisher_model, &ranges, &out)?;
    lap("compare", &mut clock);

    let report = RunReport {
        model: *session.model.spec(),
        fisher: fisher_summary(&fisher, &calib.weights),
        calibration: calibration_summary(&session.model, &calib)?,
        schedule: schedule.grid.clone(),
        search_loss: num(schedule.per_step_loss.iter().sum()),
        avg_bits: num(schedule.avg_bits),
        param_weighted_avg_bits: num(schedule.param_weighted_avg_bits),
        weight_bits: session.cfg.quant.weight_bits,
        flops_reduction: num(reduction_ratio(schedule.param_weighted_avg_bits)),
        size_reduction: num(reduction_ratio(schedule.avg_bits)),
        evaluation,
        ablation: rows
            .iter()
            .map(|r| AblationEntry {
                schedule: r.schedule.clone(),
                weights: r.weights,
                error: num(r.error),
            })
            .collect(),
        stage_seconds: seconds,
    };
    report.save(&session.artifacts.report())?;
    Ok(report)
}
