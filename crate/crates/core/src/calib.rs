//! Importance-weighted Hessians and GPTQ-style weight rounding.
//!
//! Calibration inputs from timestep `t` enter the Hessian of layer `l` with
//! weight `α[t, l]`:
//!
//! ```text
//! H'_l = Σ_t α[t, l] · X[t, l] X[t, l]ᵀ
//! ```
//!
//! which is the same as pre-scaling each `X[t, l]` by `√α[t, l]` and running
//! the ordinary accumulation. The solver then minimizes
//! `Σ_t α[t, l] ‖(W − Ŵ) X[t, l]‖²` column by column.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::TemporalWeights;
use crate::model::{ActivationTrace, LayerWeights, Model};
use crate::numerics::{cholesky, damp, spd_inverse, Matrix};
use crate::quant::{calibrate_minmax, QuantParams, QuantSpec};

/// Default damping, as a fraction of the mean Hessian diagonal.
pub const DEFAULT_DAMPING: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct RiskAwareHessian {
    pub layer: usize,
    pub h: Matrix,
    /// `Σ α · columns` over every accumulated trace.
    pub total_weight: f64,
    pub damping: f64,
}

impl RiskAwareHessian {
    pub fn new(layer: usize, h: Matrix) -> Result<Self> {
        if !h.is_square() {
            return Err(Error::DimensionMismatch {
                op: "hessian",
                left: h.shape(),
                right: (h.cols(), h.rows()),
            });
        }
        Ok(Self {
            layer,
            h,
            total_weight: 0.0,
            damping: DEFAULT_DAMPING,
        })
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    /// `Σ_r ΔW_r H' ΔW_rᵀ`, the weighted objective written through the Hessian.
    pub fn quadratic_form(&self, delta: &Matrix) -> Result<f64> {
        let hd = delta.matmul(&self.h)?;
        Ok(hd.hadamard(delta)?.data().iter().sum())
    }
}

/// Streaming accumulator for one layer's [`RiskAwareHessian`].
///
/// Traces may arrive in any order; partial accumulators merge associatively.
#[derive(Clone, Debug)]
pub struct HessianAccumulator {
    layer: usize,
    h: Matrix,
    seen: BTreeSet<usize>,
    total_weight: f64,
}

impl HessianAccumulator {
    pub fn new(layer: usize, dim: usize) -> Self {
        Self {
            layer,
            h: Matrix::zeros(dim, dim),
            seen: BTreeSet::new(),
            total_weight: 0.0,
        }
    }

    pub fn add(&mut self, trace: &ActivationTrace, weights: &TemporalWeights) -> Result<()> {
        let x = trace
            .inputs
            .get(self.layer)
            .ok_or_else(|| Error::param(format!("trace has no input for layer {}", self.layer)))?;
        if trace.timestep == 0 || trace.timestep > weights.num_timesteps() {
            return Err(Error::param(format!("trace timestep {} has no temporal weight", trace.timestep)));
        }
        let alpha = weights.get(trace.timestep, self.layer);
        let scaled = x.scale(alpha.sqrt());
        self.h.add_assign(&scaled.gram())?;
        self.total_weight += alpha * x.cols() as f64;
        self.seen.insert(trace.timestep);
        Ok(())
    }

    pub fn merge(&mut self, other: &HessianAccumulator) -> Result<()> {
        if other.layer != self.layer {
            return Err(Error::param("cannot merge Hessians of different layers"));
        }
        self.h.add_assign(&other.h)?;
        self.total_weight += other.total_weight;
        self.seen.extend(other.seen.iter().copied());
        Ok(())
    }

    /// Finishes accumulation, requiring every timestep `1..=num_timesteps` to be present.
    pub fn finish(self, num_timesteps: usize) -> Result<RiskAwareHessian> {
        let missing: Vec<usize> = (1..=num_timesteps).filter(|t| !self.seen.contains(t)).collect();
        if !missing.is_empty() {
            return Err(Error::MissingTimesteps {
                layer: self.layer,
                missing,
            });
        }
        Ok(RiskAwareHessian {
            layer: self.layer,
            h: self.h,
            total_weight: self.total_weight,
            damping: DEFAULT_DAMPING,
        })
    }
}

/// `H'_l = Σ_t α[t, l] X[t, l] X[t, l]ᵀ` over every trace, via `√α` pre-scaling.
pub fn accumulate_hessian<'a>(
    traces: impl IntoIterator<Item = &'a ActivationTrace>,
    weights: &TemporalWeights,
    layer: usize,
) -> Result<RiskAwareHessian> {
    let mut acc: Option<HessianAccumulator> = None;
    for trace in traces {
        let acc = acc.get_or_insert_with(|| {
            let dim = trace.inputs.get(layer).map_or(0, Matrix::rows);
            HessianAccumulator::new(layer, dim)
        });
        acc.add(trace, weights)?;
    }
    match acc {
        Some(acc) => acc.finish(weights.num_timesteps()),
        None => Err(Error::MissingTimesteps {
            layer,
            missing: (1..=weights.num_timesteps()).collect(),
        }),
    }
}

/// `Σ_t α[t, l] ‖W X[t, l] − Ŵ X[t, l]‖²_F`, summed over all traces.
pub fn weighted_objective(
    w: &Matrix,
    w_hat: &Matrix,
    traces: &[ActivationTrace],
    weights: &TemporalWeights,
    layer: usize,
) -> Result<f64> {
    let delta = w.sub(w_hat)?;
    let mut total = 0.0;
    for trace in traces {
        let x = &trace.inputs[layer];
        total += weights.get(trace.timestep, layer) * delta.matmul(x)?.sum_squares();
    }
    Ok(total)
}

/// Unweighted `‖(W − Ŵ) X‖²` per timestep, index `t - 1`.
pub fn per_timestep_errors(
    w: &Matrix,
    w_hat: &Matrix,
    traces: &[ActivationTrace],
    layer: usize,
    num_timesteps: usize,
) -> Result<Vec<f64>> {
    let delta = w.sub(w_hat)?;
    let mut errors = vec![0.0; num_timesteps];
    for trace in traces {
        errors[trace.timestep - 1] += delta.matmul(&trace.inputs[layer])?.sum_squares();
    }
    Ok(errors)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibResult {
    pub weight: Matrix,
    /// Integer grid codes, row-major like `weight`.
    pub codes: Vec<i64>,
    pub params: QuantParams,
    /// `Σ_r ΔW_r H' ΔW_rᵀ` with the undamped Hessian.
    pub weighted_error: f64,
    /// Filled by [`calibrate_model`]; empty when the solver ran on a bare Hessian.
    pub per_timestep_errors: Vec<f64>,
}

fn rtn_codes(w: &Matrix, params: &QuantParams) -> Vec<i64> {
    let mut codes = Vec::with_capacity(w.data().len());
    for r in 0..w.rows() {
        for c in 0..w.cols() {
            codes.push(params.encode(w[(r, c)], params.group_of(r, c)));
        }
    }
    codes
}

fn decode_all(shape: (usize, usize), codes: &[i64], params: &QuantParams) -> Matrix {
    Matrix::from_fn(shape.0, shape.1, |r, c| params.decode(codes[r * shape.1 + c], params.group_of(r, c)))
}

/// Round-to-nearest on the min-max grid of `w`; the baseline GPTQ must not lose to.
pub fn round_to_nearest(w: &Matrix, spec: &QuantSpec) -> Result<(Matrix, QuantParams)> {
    let params = calibrate_minmax(w, spec)?;
    let codes = rtn_codes(w, &params);
    Ok((decode_all(w.shape(), &codes, &params), params))
}

/// Greedy column pass; returns integer codes on the fixed grid `params`.
fn gptq_codes(weight: &Matrix, hessian: &Matrix, damping: f64, params: &QuantParams) -> Result<Vec<i64>> {
    let cols = weight.cols();
    let damped = damp(hessian, damping)?;
    let inverse = spd_inverse(&damped)?;
    let upper = cholesky(&inverse)?.transpose();

    let mut work = weight.clone();
    let mut codes = vec![0i64; weight.data().len()];
    for i in 0..cols {
        let pivot = upper[(i, i)];
        for r in 0..work.rows() {
            let g = params.group_of(r, i);
            let value = work[(r, i)];
            let code = params.encode(value, g);
            codes[r * cols + i] = code;
            let err = (value - params.decode(code, g)) / pivot;
            if err != 0.0 {
                let row = work.row_mut(r);
                for j in i + 1..cols {
                    row[j] -= err * upper[(i, j)];
                }
            }
        }
    }
    Ok(codes)
}

/// GPTQ column-wise rounding against `h`, with error feedback through the
/// upper Cholesky factor of the damped inverse Hessian.
///
/// Grid scales are fixed up front from min-max on the original weights. If
/// the greedy pass ends with a larger objective than plain round-to-nearest
/// on the same grid, the round-to-nearest solution is returned instead.
pub fn gptq_quantize(w: &LayerWeights, h: &RiskAwareHessian, spec: &QuantSpec) -> Result<CalibResult> {
    spec.validate()?;
    if spec.is_pass_through() {
        return Err(Error::param("GPTQ needs a quantizing bit-width (< 16)"));
    }
    let weight = &w.weight;
    let cols = weight.cols();
    if h.h.shape() != (cols, cols) {
        return Err(Error::DimensionMismatch {
            op: "gptq",
            left: weight.shape(),
            right: h.h.shape(),
        });
    }
    let params = calibrate_minmax(weight, spec)?;
    let mut codes = gptq_codes(weight, &h.h, h.damping, &params)?;
    let mut quantized = decode_all(weight.shape(), &codes, &params);
    let mut weighted_error = h.quadratic_form(&weight.sub(&quantized)?)?;
    let rtn = rtn_codes(weight, &params);
    let rtn_weight = decode_all(weight.shape(), &rtn, &params);
    let rtn_error = h.quadratic_form(&weight.sub(&rtn_weight)?)?;
    if rtn_error < weighted_error {
        codes = rtn;
        quantized = rtn_weight;
        weighted_error = rtn_error;
    }
    Ok(CalibResult {
        weight: quantized,
        codes,
        params,
        weighted_error,
        per_timestep_errors: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub layer: usize,
    pub timestep: usize,
    pub error: f64,
    pub alpha: f64,
}

/// Per-layer, per-timestep reconstruction errors of a calibration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rows: Vec<CalibrationRow>,
    /// Weighted objective per layer.
    pub weighted_errors: Vec<f64>,
}

impl CalibrationReport {
    pub fn error(&self, layer: usize, timestep: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.timestep == timestep)
            .map(|r| r.error)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
        w.write_record(["layer", "timestep", "error", "alpha"])
            .map_err(|e| Error::format(path, e))?;
        for row in &self.rows {
            w.write_record([
                row.layer.to_string(),
                row.timestep.to_string(),
                format!("{:.15e}", row.error),
                format!("{:.15e}", row.alpha),
            ])
            .map_err(|e| Error::format(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Quantizes every layer of `model` with GPTQ on its risk-aware Hessian.
///
/// `specs[l]` with 16 bits leaves layer `l` untouched.
pub fn calibrate_model(
    model: &Model,
    traces: &[ActivationTrace],
    weights: &TemporalWeights,
    specs: &[QuantSpec],
    damping: f64,
) -> Result<(Model, CalibrationReport)> {
    if specs.len() != model.num_layers() {
        return Err(Error::param(format!(
            "{} quantization specs for {} layers",
            specs.len(),
            model.num_layers()
        )));
    }
    if weights.num_layers() != model.num_layers() || weights.num_timesteps() != model.num_timesteps() {
        return Err(Error::param("temporal weights do not match the model's (T, L)"));
    }
    let t_count = model.num_timesteps();
    let mut new_weights = Vec::with_capacity(specs.len());
    let mut rows = Vec::new();
    let mut weighted_errors = Vec::with_capacity(specs.len());
    for (l, (layer, spec)) in model.layers().iter().zip(specs).enumerate() {
        let w_hat = if spec.is_pass_through() {
            layer.weight.clone()
        } else {
            let h = accumulate_hessian(traces, weights, l)
                .map_err(|e| e.in_layer(l))?
                .with_damping(damping);
            gptq_quantize(layer, &h, spec).map_err(|e| e.in_layer(l))?.weight
        };
        let errors = per_timestep_errors(&layer.weight, &w_hat, traces, l, t_count)?;
        weighted_errors.push(weighted_objective(&layer.weight, &w_hat, traces, weights, l)?);
        for (i, error) in errors.into_iter().enumerate() {
            rows.push(CalibrationRow {
                layer: l,
                timestep: i + 1,
                error,
                alpha: weights.get(i + 1, l),
            });
        }
        new_weights.push(w_hat);
    }
    Ok((model.with_weights(new_weights)?, CalibrationReport { rows, weighted_errors }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;
    use crate::numerics::Rng;

    fn random_traces(rng: &mut Rng, t_count: usize, layers: usize, d: usize, cols: usize) -> Vec<ActivationTrace> {
        (1..=t_count)
            .map(|t| ActivationTrace {
                timestep: t,
                batch: 0,
                inputs: (0..layers).map(|_| rng.normal_matrix(d, cols).scale(t as f64 * 0.5)).collect(),
            })
            .collect()
    }

    fn random_alpha(rng: &mut Rng, t_count: usize, layers: usize) -> TemporalWeights {
        TemporalWeights::new(Matrix::from_fn(t_count, layers, |_, _| rng.uniform() + 0.01), None).unwrap()
    }

    fn direct_weighted_sum(traces: &[ActivationTrace], weights: &TemporalWeights, layer: usize) -> Matrix {
        let d = traces[0].inputs[layer].rows();
        let mut h = Matrix::zeros(d, d);
        for tr in traces {
            let x = &tr.inputs[layer];
            let xxt = x.matmul(&x.transpose()).unwrap();
            h.add_assign(&xxt.scale(weights.get(tr.timestep, layer))).unwrap();
        }
        h
    }

    fn layer_of(weight: Matrix) -> LayerWeights {
        let d = weight.rows();
        LayerWeights {
            index: 0,
            kind: LayerKind::Mlp,
            weight,
            bias: vec![0.0; d],
        }
    }

    #[test]
    fn uniform_alpha_is_averaged_hessian() {
        let mut rng = Rng::new(1);
        let traces = random_traces(&mut rng, 4, 1, 5, 6);
        let uniform = TemporalWeights::uniform(4, 1);
        let h = accumulate_hessian(&traces, &uniform, 0).unwrap();
        let mut plain = Matrix::zeros(5, 5);
        for tr in &traces {
            plain.add_assign(&tr.inputs[0].gram()).unwrap();
        }
        assert!(h.h.max_abs_diff(&plain.scale(0.25)) <= 1e-10);
    }

    #[test]
    fn one_hot_alpha_selects_single_timestep() {
        let mut rng = Rng::new(2);
        let traces = random_traces(&mut rng, 3, 1, 4, 5);
        let mut alpha = Matrix::zeros(3, 1);
        alpha[(1, 0)] = 1.0;
        let w = TemporalWeights::new(alpha, None).unwrap();
        let h = accumulate_hessian(&traces, &w, 0).unwrap();
        assert_eq!(h.h, traces[1].inputs[0].gram());
    }

    #[test]
    fn scaled_accumulation_matches_direct_sum() {
        let mut rng = Rng::new(3);
        let traces = random_traces(&mut rng, 5, 2, 6, 7);
        let w = random_alpha(&mut rng, 5, 2);
        for layer in 0..2 {
            let h = accumulate_hessian(&traces, &w, layer).unwrap();
            assert!(h.h.max_abs_diff(&direct_weighted_sum(&traces, &w, layer)) <= 1e-10);
        }
    }

    #[test]
    fn order_independent_and_mergeable() {
        let mut rng = Rng::new(4);
        let traces = random_traces(&mut rng, 4, 1, 3, 4);
        let w = random_alpha(&mut rng, 4, 1);
        let forward = accumulate_hessian(&traces, &w, 0).unwrap();
        let backward = accumulate_hessian(traces.iter().rev(), &w, 0).unwrap();
        assert!(forward.h.max_abs_diff(&backward.h) <= 1e-10);

        let mut a = HessianAccumulator::new(0, 3);
        let mut b = HessianAccumulator::new(0, 3);
        for (i, tr) in traces.iter().enumerate() {
            if i % 2 == 0 { a.add(tr, &w).unwrap() } else { b.add(tr, &w).unwrap() }
        }
        a.merge(&b).unwrap();
        assert!(a.finish(4).unwrap().h.max_abs_diff(&forward.h) <= 1e-10);
    }

    #[test]
    fn missing_timesteps_are_listed() {
        let mut rng = Rng::new(5);
        let traces = random_traces(&mut rng, 5, 1, 3, 2);
        let partial: Vec<_> = traces.into_iter().filter(|t| t.timestep % 2 == 0).collect();
        match accumulate_hessian(&partial, &TemporalWeights::uniform(5, 1), 0) {
            Err(Error::MissingTimesteps { missing, .. }) => assert_eq!(missing, vec![1, 3, 5]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn objective_zero_for_identical_weights() {
        let mut rng = Rng::new(6);
        let traces = random_traces(&mut rng, 3, 1, 4, 3);
        let w = rng.normal_matrix(4, 4);
        assert_eq!(weighted_objective(&w, &w, &traces, &TemporalWeights::uniform(3, 1), 0).unwrap(), 0.0);
    }

    #[test]
    fn objective_matches_trace_form_and_is_linear_in_alpha() {
        let mut rng = Rng::new(7);
        let traces = random_traces(&mut rng, 4, 1, 5, 6);
        let alpha = random_alpha(&mut rng, 4, 1);
        let w = rng.normal_matrix(3, 5);
        let w_hat = w.add(&rng.normal_matrix(3, 5).scale(0.1)).unwrap();
        let direct = weighted_objective(&w, &w_hat, &traces, &alpha, 0).unwrap();
        let h = accumulate_hessian(&traces, &alpha, 0).unwrap();
        let delta = w.sub(&w_hat).unwrap();
        let mut trace_form = 0.0;
        for r in 0..delta.rows() {
            let row = Matrix::new(1, 5, delta.row(r).to_vec()).unwrap();
            trace_form += row.matmul(&h.h).unwrap().matmul(&row.transpose()).unwrap()[(0, 0)];
        }
        assert!((direct - trace_form).abs() <= 1e-9 * direct.max(1.0));
        let doubled = weighted_objective(&w, &w_hat, &traces, &alpha.scaled(2.0), 0).unwrap();
        assert!((doubled - 2.0 * direct).abs() <= 1e-12 * direct.max(1.0));
    }

    #[test]
    fn identity_hessian_reduces_to_round_to_nearest() {
        let mut rng = Rng::new(8);
        let w = layer_of(rng.normal_matrix(6, 6));
        let spec = QuantSpec::weight(3).unwrap();
        let h = RiskAwareHessian::new(0, Matrix::identity(6)).unwrap();
        let result = gptq_quantize(&w, &h, &spec).unwrap();
        let (rtn, _) = round_to_nearest(&w.weight, &spec).unwrap();
        assert_eq!(result.weight, rtn);
    }

    #[test]
    fn tiny_instance_near_exhaustive_optimum() {
        // 1x2 row, correlated Hessian, 3-bit symmetric grid.
        let w = layer_of(Matrix::from_rows(&[vec![0.83, -0.41]]).unwrap());
        let w = LayerWeights { bias: vec![0.0], ..w };
        let h = Matrix::from_rows(&[vec![1.0, 0.9], vec![0.9, 1.0]]).unwrap();
        let hess = RiskAwareHessian::new(0, h).unwrap().with_damping(0.0);
        let spec = QuantSpec::weight(3).unwrap();
        let result = gptq_quantize(&w, &hess, &spec).unwrap();
        let p = &result.params;
        let mut best = f64::INFINITY;
        for a in p.qmin..=p.qmax {
            for b in p.qmin..=p.qmax {
                let cand = Matrix::from_rows(&[vec![p.decode(a, 0), p.decode(b, 0)]]).unwrap();
                best = best.min(hess.quadratic_form(&w.weight.sub(&cand).unwrap()).unwrap());
            }
        }
        assert!(result.weighted_error <= best * 1.05 + 1e-15, "{} vs {best}", result.weighted_error);
    }

    #[test]
    fn outputs_lie_on_grid() {
        let mut rng = Rng::new(9);
        let traces = random_traces(&mut rng, 3, 1, 6, 10);
        let h = accumulate_hessian(&traces, &TemporalWeights::uniform(3, 1), 0).unwrap();
        let w = layer_of(rng.normal_matrix(6, 6));
        let r = gptq_quantize(&w, &h, &QuantSpec::weight(4).unwrap()).unwrap();
        for row in 0..6 {
            for col in 0..6 {
                let code = r.codes[row * 6 + col];
                assert!(code >= r.params.qmin && code <= r.params.qmax);
                assert_eq!(r.weight[(row, col)], r.params.decode(code, row));
            }
        }
    }

    #[test]
    fn singular_hessian_without_damping() {
        let w = layer_of(Matrix::identity(4));
        let h = RiskAwareHessian::new(0, Matrix::zeros(4, 4)).unwrap().with_damping(0.0);
        assert!(matches!(
            gptq_quantize(&w, &h, &QuantSpec::weight(4).unwrap()),
            Err(Error::SingularHessian { .. })
        ));
        assert!(gptq_quantize(&w, &h, &QuantSpec::weight(16).unwrap()).is_err());
    }

    #[test]
    fn pass_through_calibration_keeps_model() {
        let model = Model::init(crate::model::ModelSpec {
            num_layers: 2,
            hidden_dim: 4,
            num_timesteps: 3,
            tokens: 2,
            seed: 1,
        })
        .unwrap();
        let mut sink = crate::model::TraceSink::new(0);
        model
            .sample_from(model.initial_latent(&mut Rng::new(2)), None, Some(&mut sink))
            .unwrap();
        let specs = vec![QuantSpec::weight(16).unwrap(); 2];
        let (same, report) =
            calibrate_model(&model, &sink.traces, &TemporalWeights::uniform(3, 2), &specs, DEFAULT_DAMPING).unwrap();
        assert_eq!(same, model);
        assert!(report.rows.iter().all(|r| r.error == 0.0));
        assert_eq!(report.rows.len(), 6);
    }
}
