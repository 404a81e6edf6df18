//! Per-layer, per-timestep Fisher sensitivity and the temporal weights derived from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DenoiseState, Model};
use crate::numerics::{softmax_with_temperature, Matrix, Rng};

/// Default standard deviation of the perturbation applied to sampler latents
/// before measuring the denoising loss.
pub const DEFAULT_NOISE_SCALE: f64 = 0.1;

/// Fisher scores `I[t, l]`, stored row-per-timestep (`t = 1` first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherMap {
    pub num_timesteps: usize,
    pub num_layers: usize,
    pub layer_names: Vec<String>,
    /// `T × L`, row `t - 1`.
    pub scores: Matrix,
    /// Samples averaged into each cell, same layout as `scores`.
    pub samples: Vec<usize>,
    pub model_fingerprint: u64,
}

impl FisherMap {
    pub fn score(&self, timestep: usize, layer: usize) -> f64 {
        self.scores[(timestep - 1, layer)]
    }

    /// The `T` scores of one layer, `t = 1` first.
    pub fn layer_scores(&self, layer: usize) -> Vec<f64> {
        self.scores.column(layer)
    }

    /// The `L` scores at one timestep.
    pub fn timestep_scores(&self, timestep: usize) -> &[f64] {
        self.scores.row(timestep - 1)
    }

    /// Map from explicit scores, e.g. for synthetic sensitivity profiles.
    pub fn from_scores(scores: Matrix) -> Result<Self> {
        if scores.data().iter().any(|v| *v < 0.0) {
            return Err(Error::param("Fisher scores must be non-negative"));
        }
        let (t, l) = scores.shape();
        if t == 0 || l == 0 {
            return Err(Error::param("empty Fisher map"));
        }
        Ok(Self {
            num_timesteps: t,
            num_layers: l,
            layer_names: (0..l).map(|i| format!("layer{i}")).collect(),
            scores,
            samples: vec![1; t * l],
            model_fingerprint: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e))
    }
}

/// One draw from `D_t`: a perturbed sampler state and the clean prediction it is scored against.
#[derive(Clone, Debug)]
pub struct FisherSample {
    pub state: DenoiseState,
    pub target: Matrix,
}

/// Draws the Fisher samples for every timestep.
///
/// For each seed, `batch` starting latents are sampled and run through the
/// full-precision sampler. Every visited state `z_t` is perturbed by
/// `noise_scale · ξ` and paired with the clean prediction `ε(z_t, t)`.
pub fn fisher_samples(model: &Model, seeds: &[u64], batch: usize, noise_scale: f64) -> Result<Vec<FisherSample>> {
    if seeds.is_empty() || batch == 0 {
        return Err(Error::param("Fisher estimation needs at least one seed and batch >= 1"));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::param(format!("noise scale must be >= 0, got {noise_scale}")));
    }
    let (d, n) = model.spec().latent_shape();
    let mut out = Vec::with_capacity(seeds.len() * batch * model.num_timesteps());
    for &seed in seeds {
        let mut rng = Rng::new(seed);
        for _ in 0..batch {
            let start = model.initial_latent(&mut rng);
            let trajectory = model.sample_from(start, None, None)?;
            for state in trajectory.states {
                let target = model.forward(&state, None)?;
                let noise = rng.normal_matrix(d, n).scale(noise_scale);
                let latent = state.latent.add(&noise)?;
                out.push(FisherSample {
                    state: DenoiseState {
                        latent,
                        timestep: state.timestep,
                    },
                    target,
                });
            }
        }
    }
    Ok(out)
}

/// Monte Carlo estimate of `I[t, l] = E[(∂L/∂W_l)²]`, reduced to the mean over weight entries.
pub fn estimate_fisher(model: &Model, seeds: &[u64], batch: usize, noise_scale: f64) -> Result<FisherMap> {
    let samples = fisher_samples(model, seeds, batch, noise_scale)?;
    let (t_count, l_count) = (model.num_timesteps(), model.num_layers());
    let mut scores = Matrix::zeros(t_count, l_count);
    let mut counts = vec![0usize; t_count * l_count];
    for sample in &samples {
        let grads = model.backward_weight_grads(&sample.state, &sample.target)?;
        let row = sample.state.timestep - 1;
        for (l, g) in grads.iter().enumerate() {
            scores[(row, l)] += g.sum_squares() / g.data().len() as f64;
            counts[row * l_count + l] += 1;
        }
    }
    for (cell, &count) in scores.data_mut().iter_mut().zip(&counts) {
        if count == 0 {
            return Err(Error::Invariant("Fisher cell without samples".into()));
        }
        *cell /= count as f64;
    }
    Ok(FisherMap {
        num_timesteps: t_count,
        num_layers: l_count,
        layer_names: model.layers().iter().map(|l| l.name()).collect(),
        scores,
        samples: counts,
        model_fingerprint: model.fingerprint(),
    })
}

/// Per-layer min-max normalization to `[0, 1]`; constant layers map to zero.
pub fn normalize_heatmap(map: &FisherMap) -> Matrix {
    let (t_count, l_count) = map.scores.shape();
    let mut out = Matrix::zeros(t_count, l_count);
    for l in 0..l_count {
        let col = map.layer_scores(l);
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for (t, v) in col.iter().enumerate() {
            out[(t, l)] = if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    out
}

/// Writes the normalized heatmap: one row per timestep, one column per layer.
pub fn write_heatmap_csv(map: &FisherMap, path: &Path) -> Result<()> {
    let heat = normalize_heatmap(map);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut header = vec!["timestep".to_string()];
    header.extend(map.layer_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for t in 0..map.num_timesteps {
        let mut row = vec![(t + 1).to_string()];
        row.extend(heat.row(t).iter().map(|v| format!("{v:.12}")));
        w.write_record(&row).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Temporal importance `α[t, l]`, row-per-timestep like [`FisherMap`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalWeights {
    pub alpha: Matrix,
    /// Softmax temperature, `None` for weights not derived from Fisher scores.
    pub tau: Option<f64>,
}

impl TemporalWeights {
    /// Wraps explicit weights. Only non-negativity is checked; columns need not sum to one.
    pub fn new(alpha: Matrix, tau: Option<f64>) -> Result<Self> {
        if alpha.data().iter().any(|v| *v < 0.0) {
            return Err(Error::param("temporal weights must be non-negative"));
        }
        Ok(Self { alpha, tau })
    }

    /// `α = 1/T` everywhere: plain averaged calibration.
    pub fn uniform(num_timesteps: usize, num_layers: usize) -> Self {
        Self {
            alpha: Matrix::from_fn(num_timesteps, num_layers, |_, _| 1.0 / num_timesteps as f64),
            tau: None,
        }
    }

    pub fn num_timesteps(&self) -> usize {
        self.alpha.rows()
    }

    pub fn num_layers(&self) -> usize {
        self.alpha.cols()
    }

    pub fn get(&self, timestep: usize, layer: usize) -> f64 {
        self.alpha[(timestep - 1, layer)]
    }

    pub fn layer(&self, layer: usize) -> Vec<f64> {
        self.alpha.column(layer)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            alpha: self.alpha.scale(k),
            tau: self.tau,
        }
    }

    /// Timesteps of `layer` holding the top `fraction` of weight (at least one).
    pub fn top_timesteps(&self, layer: usize, fraction: f64) -> Vec<usize> {
        let count = ((self.num_timesteps() as f64 * fraction).ceil() as usize).clamp(1, self.num_timesteps());
        let col = self.layer(layer);
        let mut order: Vec<usize> = (0..col.len()).collect();
        order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
        order.into_iter().take(count).map(|i| i + 1).collect()
    }
}

/// Per-layer softmax of `I[·, l] / τ` over timesteps.
pub fn temporal_weights(map: &FisherMap, tau: f64) -> Result<TemporalWeights> {
    let mut alpha = Matrix::zeros(map.num_timesteps, map.num_layers);
    for l in 0..map.num_layers {
        let weights = softmax_with_temperature(&map.layer_scores(l), tau)?;
        for (t, w) in weights.into_iter().enumerate() {
            alpha[(t, l)] = w;
        }
    }
    Ok(TemporalWeights { alpha, tau: Some(tau) })
}
