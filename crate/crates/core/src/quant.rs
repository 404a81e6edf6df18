//! Uniform affine fake quantization with min-max calibration.
//!
//! Everything here is simulated in `f64`: values are snapped to the integer
//! grid and immediately dequantized. A bit-width of 16 is treated as
//! pass-through and leaves data untouched.

use serde::{Deserialize, Serialize};

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::model::{ActivationTrace, LayerHook, LayerOperands, LayerWeights};
use crate::numerics::Matrix;

/// Bit-width that means "do not quantize".
pub const PASS_THROUGH_BITS: u8 = 16;

/// Smallest scale ever produced by calibration.
pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    /// One group per index along `axis` (0 = rows, 1 = columns).
    PerChannel { axis: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub symmetric: bool,
    pub granularity: Granularity,
}

impl QuantSpec {
    pub fn new(bits: u8, symmetric: bool, granularity: Granularity) -> Result<Self> {
        let spec = Self {
            bits,
            symmetric,
            granularity,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Symmetric, one scale per output row: the weight quantizer.
    pub fn weight(bits: u8) -> Result<Self> {
        Self::new(bits, true, Granularity::PerChannel { axis: 0 })
    }

    /// Asymmetric per-tensor: the activation quantizer.
    pub fn activation(bits: u8) -> Result<Self> {
        Self::new(bits, false, Granularity::PerTensor)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) && self.bits != PASS_THROUGH_BITS {
            return Err(Error::param(format!(
                "bit-width {} unsupported; expected 2..=8 or 16",
                self.bits
            )));
        }
        if let Granularity::PerChannel { axis } = self.granularity {
            if axis > 1 {
                return Err(Error::param(format!("channel axis {axis} out of range for a matrix")));
            }
        }
        Ok(())
    }

    pub fn is_pass_through(&self) -> bool {
        self.bits == PASS_THROUGH_BITS
    }
}

/// Integer range `[qmin, qmax]` for a bit-width.
pub fn integer_range(bits: u8, symmetric: bool) -> (i64, i64) {
    if symmetric {
        let half = 1i64 << (bits - 1);
        (-half, half - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u8,
    pub granularity: Granularity,
    pub scales: Vec<f64>,
    pub zero_points: Vec<i64>,
    pub qmin: i64,
    pub qmax: i64,
}

impl QuantParams {
    pub fn pass_through() -> Self {
        Self {
            bits: PASS_THROUGH_BITS,
            granularity: Granularity::PerTensor,
            scales: vec![1.0],
            zero_points: vec![0],
            qmin: i64::MIN,
            qmax: i64::MAX,
        }
    }

    pub fn is_pass_through(&self) -> bool {
        self.bits == PASS_THROUGH_BITS
    }

    /// Single-group parameters covering `[min, max]`.
    pub fn from_range(min: f64, max: f64, bits: u8, symmetric: bool) -> Self {
        if bits == PASS_THROUGH_BITS {
            return Self::pass_through();
        }
        let (scale, zero_point, qmin, qmax) = group_params(min, max, bits, symmetric);
        Self {
            bits,
            granularity: Granularity::PerTensor,
            scales: vec![scale],
            zero_points: vec![zero_point],
            qmin,
            qmax,
        }
    }

    /// Group owning entry `(r, c)`.
    pub fn group_of(&self, r: usize, c: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel { axis: 0 } => r,
            Granularity::PerChannel { .. } => c,
        }
    }

    /// Integer code for `x` in group `g`.
    pub fn encode(&self, x: f64, g: usize) -> i64 {
        let q = (x / self.scales[g]).round_ties_even() + self.zero_points[g] as f64;
        (q as i64).clamp(self.qmin, self.qmax)
    }

    pub fn decode(&self, code: i64, g: usize) -> f64 {
        (code - self.zero_points[g]) as f64 * self.scales[g]
    }

    pub fn quantize_value(&self, x: f64, g: usize) -> f64 {
        if self.is_pass_through() {
            return x;
        }
        self.decode(self.encode(x, g), g)
    }

    fn expected_groups(&self, x: &Matrix) -> usize {
        match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel { axis: 0 } => x.rows(),
            Granularity::PerChannel { .. } => x.cols(),
        }
    }
}

fn group_params(min: f64, max: f64, bits: u8, symmetric: bool) -> (f64, i64, i64, i64) {
    let (qmin, qmax) = integer_range(bits, symmetric);
    if symmetric {
        let absmax = min.abs().max(max.abs());
        let scale = (absmax / qmax as f64).max(SCALE_FLOOR);
        (scale, 0, qmin, qmax)
    } else {
        // real zero must be representable
        let lo = min.min(0.0);
        let hi = max.max(0.0);
        let scale = ((hi - lo) / (qmax - qmin) as f64).max(SCALE_FLOOR);
        let zero_point = ((qmin as f64) - lo / scale).round_ties_even() as i64;
        (scale, zero_point.clamp(qmin, qmax), qmin, qmax)
    }
}

/// Min-max calibration of `x` under `spec`.
pub fn calibrate_minmax(x: &Matrix, spec: &QuantSpec) -> Result<QuantParams> {
    spec.validate()?;
    if x.data().is_empty() {
        return Err(Error::param("cannot calibrate an empty matrix"));
    }
    if spec.is_pass_through() {
        return Ok(QuantParams::pass_through());
    }
    let groups: Vec<Vec<f64>> = match spec.granularity {
        Granularity::PerTensor => vec![x.data().to_vec()],
        Granularity::PerChannel { axis: 0 } => (0..x.rows()).map(|r| x.row(r).to_vec()).collect(),
        Granularity::PerChannel { .. } => (0..x.cols()).map(|c| x.column(c)).collect(),
    };
    let (qmin, qmax) = integer_range(spec.bits, spec.symmetric);
    let mut scales = Vec::with_capacity(groups.len());
    let mut zero_points = Vec::with_capacity(groups.len());
    for g in &groups {
        let min = g.iter().copied().fold(f64::INFINITY, f64::min);
        let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (s, z, _, _) = group_params(min, max, spec.bits, spec.symmetric);
        scales.push(s);
        zero_points.push(z);
    }
    Ok(QuantParams {
        bits: spec.bits,
        granularity: spec.granularity,
        scales,
        zero_points,
        qmin,
        qmax,
    })
}

/// Quantize-dequantize every entry of `x`.
///
/// # Panics
/// If `params` was calibrated for a differently shaped matrix.
pub fn fake_quant(x: &Matrix, params: &QuantParams) -> Matrix {
    if params.is_pass_through() {
        return x.clone();
    }
    assert_eq!(
        params.scales.len(),
        params.expected_groups(x),
        "quantization params do not match matrix shape {:?}",
        x.shape()
    );
    let mut out = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let g = params.group_of(r, c);
            out[(r, c)] = params.quantize_value(x[(r, c)], g);
        }
    }
    out
}

/// Min-max round-to-nearest quantization of one layer's weight matrix.
pub fn quantize_layer_weights(layer: &LayerWeights, spec: &QuantSpec) -> Result<(LayerWeights, QuantParams)> {
    let params = calibrate_minmax(&layer.weight, spec)?;
    let mut out = layer.clone();
    out.weight = fake_quant(&layer.weight, &params);
    Ok((out, params))
}

/// Observed `[min, max]` of every layer input `X[t, l]`, used for static
/// per-timestep activation quantization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRanges {
    pub num_timesteps: usize,
    pub num_layers: usize,
    /// `(min, max)` at index `(t - 1) * L + l`.
    pub ranges: Vec<(f64, f64)>,
}

impl ActivationRanges {
    pub fn from_traces(traces: &[ActivationTrace], num_timesteps: usize, num_layers: usize) -> Result<Self> {
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); num_timesteps * num_layers];
        for trace in traces {
            if trace.timestep == 0 || trace.timestep > num_timesteps || trace.inputs.len() != num_layers {
                return Err(Error::param(format!("trace at timestep {} does not fit ({num_timesteps}, {num_layers})", trace.timestep)));
            }
            for (l, x) in trace.inputs.iter().enumerate() {
                let slot = &mut ranges[(trace.timestep - 1) * num_layers + l];
                for &v in x.data() {
                    slot.0 = slot.0.min(v);
                    slot.1 = slot.1.max(v);
                }
            }
        }
        if let Some(i) = ranges.iter().position(|(lo, hi)| lo > hi) {
            return Err(Error::MissingTimesteps {
                layer: i % num_layers,
                missing: vec![i / num_layers + 1],
            });
        }
        Ok(Self {
            num_timesteps,
            num_layers,
            ranges,
        })
    }

    pub fn range(&self, timestep: usize, layer: usize) -> (f64, f64) {
        self.ranges[(timestep - 1) * self.num_layers + layer]
    }

    /// Asymmetric per-tensor parameters for `X[t, l]` at `bits`.
    pub fn params(&self, timestep: usize, layer: usize, bits: u8) -> QuantParams {
        let (lo, hi) = self.range(timestep, layer);
        QuantParams::from_range(lo, hi, bits, false)
    }
}

/// Fake-quantizes each layer input with the bit-width `bits[t - 1][l]`.
///
/// Weights pass through unchanged; they are quantized once, ahead of time.
pub struct ActivationQuantHook<'a> {
    pub ranges: &'a ActivationRanges,
    pub bits: &'a [Vec<u8>],
}

impl LayerHook for ActivationQuantHook<'_> {
    fn apply<'a>(&self, timestep: usize, layer: usize, input: &'a Matrix, weight: &'a Matrix) -> Result<LayerOperands<'a>> {
        let bits = self
            .bits
            .get(timestep - 1)
            .and_then(|row| row.get(layer))
            .copied()
            .ok_or_else(|| Error::param(format!("no bit-width for timestep {timestep}, layer {layer}")))?;
        let input = if bits == PASS_THROUGH_BITS {
            Cow::Borrowed(input)
        } else {
            Cow::Owned(fake_quant(input, &self.ranges.params(timestep, layer, bits)))
        };
        Ok(LayerOperands {
            input,
            weight: Cow::Borrowed(weight),
        })
    }
}

pub fn mse(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let n = a.data().len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerKind;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn row(values: &[f64]) -> Matrix {
        Matrix::new(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn asymmetric_two_bit_unit_interval() {
        let spec = QuantSpec::new(2, false, Granularity::PerTensor).unwrap();
        let p = calibrate_minmax(&row(&[0.0, 0.3, 1.0]), &spec).unwrap();
        assert!((p.scales[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.zero_points[0], 0);
        assert_eq!(p.qmax - p.qmin, 3);
    }

    #[test]
    fn symmetric_three_bit() {
        let spec = QuantSpec::new(3, true, Granularity::PerTensor).unwrap();
        let p = calibrate_minmax(&row(&[-2.0, 0.5, 2.0]), &spec).unwrap();
        assert_eq!((p.qmin, p.qmax), (-4, 3));
        assert!((p.scales[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.zero_points[0], 0);
    }

    #[test]
    fn all_zero_input_floors_scale() {
        for symmetric in [true, false] {
            let spec = QuantSpec::new(4, symmetric, Granularity::PerTensor).unwrap();
            let p = calibrate_minmax(&Matrix::zeros(2, 3), &spec).unwrap();
            assert_eq!(p.scales[0], SCALE_FLOOR);
            assert_eq!(p.zero_points[0], 0);
            assert_eq!(fake_quant(&Matrix::zeros(2, 3), &p), Matrix::zeros(2, 3));
        }
    }

    #[test]
    fn grid_points_are_fixed_points() {
        let spec = QuantSpec::new(2, false, Granularity::PerTensor).unwrap();
        let p = calibrate_minmax(&row(&[0.0, 1.0]), &spec).unwrap();
        let grid: Vec<f64> = (0..=3).map(|k| p.decode(k, 0)).collect();
        let x = row(&grid);
        assert_eq!(fake_quant(&x, &p), x);
    }

    #[test]
    fn half_rounds_to_even() {
        let spec = QuantSpec::new(2, false, Granularity::PerTensor).unwrap();
        let p = calibrate_minmax(&row(&[0.0, 1.0]), &spec).unwrap();
        let q = fake_quant(&row(&[0.5]), &p);
        assert!((q[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn half_step_bound_on_random_draws() {
        let mut rng = Rng::new(8);
        let x = rng.normal_matrix(100, 100);
        for bits in [3u8, 4, 8] {
            for symmetric in [true, false] {
                let spec = QuantSpec::new(bits, symmetric, Granularity::PerTensor).unwrap();
                let p = calibrate_minmax(&x, &spec).unwrap();
                let q = fake_quant(&x, &p);
                let lo = p.decode(p.qmin, 0);
                let hi = p.decode(p.qmax, 0);
                for (a, b) in x.data().iter().zip(q.data()) {
                    if *a >= lo && *a <= hi {
                        assert!((a - b).abs() <= p.scales[0] / 2.0 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn sixteen_bits_pass_through() {
        let mut rng = Rng::new(1);
        let w = LayerWeights {
            index: 0,
            kind: LayerKind::Mlp,
            weight: rng.normal_matrix(4, 4),
            bias: vec![0.0; 4],
        };
        let (q, p) = quantize_layer_weights(&w, &QuantSpec::weight(16).unwrap()).unwrap();
        assert!(p.is_pass_through());
        assert_eq!(q, w);
    }

    #[test]
    fn per_channel_beats_per_tensor_on_uneven_rows() {
        let mut rng = Rng::new(2);
        let mut w = rng.normal_matrix(6, 16);
        for r in 0..6 {
            let gain = 10f64.powi(r as i32 - 3);
            for v in w.row_mut(r) {
                *v *= gain;
            }
        }
        let layer = LayerWeights {
            index: 0,
            kind: LayerKind::Mlp,
            weight: w.clone(),
            bias: vec![0.0; 6],
        };
        let (pc, _) = quantize_layer_weights(&layer, &QuantSpec::weight(4).unwrap()).unwrap();
        let (pt, _) =
            quantize_layer_weights(&layer, &QuantSpec::new(4, true, Granularity::PerTensor).unwrap()).unwrap();
        assert!(mse(&pc.weight, &w) <= mse(&pt.weight, &w));
    }

    #[test]
    fn eight_bit_symmetric_relative_error_below_one_percent() {
        let mut rng = Rng::new(3);
        let w = rng.normal_matrix(64, 64);
        let p = calibrate_minmax(&w, &QuantSpec::weight(8).unwrap()).unwrap();
        let q = fake_quant(&w, &p);
        let rel = q.sub(&w).unwrap().frobenius_norm() / w.frobenius_norm();
        assert!(rel < 0.01, "relative error {rel}");
    }

    #[test]
    fn rejects_unsupported_bits() {
        assert!(QuantSpec::weight(1).is_err());
        assert!(QuantSpec::weight(12).is_err());
        assert!(QuantSpec::new(4, true, Granularity::PerChannel { axis: 2 }).is_err());
    }

    /// Nested symmetric grids: the b-bit grid uses scale `base * 2^(8-b)`, so every
    /// coarser grid is a subset of the finer one.
    fn nested(bits: u8, base: f64) -> QuantParams {
        let (qmin, qmax) = integer_range(bits, true);
        QuantParams {
            bits,
            granularity: Granularity::PerTensor,
            scales: vec![base * f64::from(1u32 << (8 - bits))],
            zero_points: vec![0],
            qmin,
            qmax,
        }
    }

    proptest! {
        #[test]
        fn idempotent(seed in 0u64..10_000, bits in prop::sample::select(vec![3u8, 4, 8]), symmetric in any::<bool>()) {
            let x = Rng::new(seed).normal_matrix(5, 7);
            let p = calibrate_minmax(&x, &QuantSpec::new(bits, symmetric, Granularity::PerTensor).unwrap()).unwrap();
            let once = fake_quant(&x, &p);
            let twice = fake_quant(&once, &p);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn monotone(a in -5.0f64..5.0, delta in 0.0f64..3.0, bits in prop::sample::select(vec![3u8, 4, 8]), symmetric in any::<bool>()) {
            let p = QuantParams::from_range(-2.5, 3.0, bits, symmetric);
            prop_assert!(p.quantize_value(a, 0) <= p.quantize_value(a + delta, 0));
        }

        #[test]
        fn error_bound_in_range(x in -3.0f64..3.0, bits in prop::sample::select(vec![3u8, 4, 8])) {
            let p = QuantParams::from_range(-3.0, 3.0, bits, false);
            let q = p.quantize_value(x, 0);
            prop_assert!((x - q).abs() <= p.scales[0] / 2.0 + 1e-12);
        }

        #[test]
        fn coarser_nested_grid_never_wins(seed in 0u64..10_000) {
            let x = Rng::new(seed).normal_matrix(8, 8);
            let base = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs())) / 127.0;
            let err = |bits| mse(&fake_quant(&x, &nested(bits, base)), &x);
            prop_assert!(err(3) >= err(4));
            prop_assert!(err(4) >= err(8));
        }
    }
}
