//! Global magnitude pruning, per-layer uniform affine weight quantization,
//! bit-packed code storage and compression accounting.
//!
//! Only convolution kernels are pruned and quantized. Biases and batch-norm
//! parameters stay in full precision.

use crate::error::{Error, Result};
use crate::estimation::Grid;
use crate::nn::{BatchNorm, ConvLayer, Tensor4};
use crate::scalar::Scalar;
use crate::xlcnet::{
    recalibrate_batchnorm, train, validation_loss, Dataset, EpochStats, Model, ParamConvention,
    TrainConfig, TrainReport,
};

/// Per-layer retention flags, congruent with each layer's kernel tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    layers: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn from_layers(layers: Vec<Vec<bool>>) -> Self {
        Self { layers }
    }

    /// Everything retained.
    pub fn dense<T: Scalar>(model: &Model<T>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| vec![true; l.kernel_count()])
                .collect(),
        }
    }

    pub fn layer(&self, i: usize) -> &[bool] {
        &self.layers[i]
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn retained(&self) -> usize {
        self.layers.iter().flatten().filter(|&&k| k).count()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn pruned(&self) -> usize {
        self.total() - self.retained()
    }

    pub fn check_model<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        if self.layers.len() != model.layers.len() {
            return Err(Error::shape(
                format!("{} layers", model.layers.len()),
                self.layers.len(),
            ));
        }
        for (i, (m, l)) in self.layers.iter().zip(&model.layers).enumerate() {
            if m.len() != l.kernel_count() {
                return Err(Error::shape(
                    format!("layer {i} with {} kernel weights", l.kernel_count()),
                    m.len(),
                ));
            }
        }
        Ok(())
    }
}

fn check_ratio(kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "pruning ratio must lie in (0, 1), got {kappa}"
        )));
    }
    Ok(())
}

/// The `floor(kappa * N_w)`-th smallest kernel magnitude (1-based) over all layers jointly.
pub fn compute_threshold<T: Scalar>(model: &Model<T>, kappa: f64) -> Result<T> {
    check_ratio(kappa)?;
    let mut mags: Vec<T> = model
        .layers
        .iter()
        .flat_map(|l| l.kernels.data().iter().map(|w| w.abs()))
        .collect();
    if mags.iter().any(|m| m.is_nan()) {
        return Err(Error::Numerical("kernel weights contain NaN".into()));
    }
    let rank = (kappa * mags.len() as f64).floor() as usize;
    if rank == 0 {
        return Err(Error::InvalidArgument(format!(
            "pruning ratio {kappa} selects no weight out of {}",
            mags.len()
        )));
    }
    let (_, nth, _) =
        mags.select_nth_unstable_by(rank - 1, |a, b| a.partial_cmp(b).expect("no NaN"));
    Ok(*nth)
}

fn mean_abs<T: Scalar>(w: &[T]) -> f64 {
    w.iter().map(|v| v.abs().to_f64_lossy()).sum::<f64>() / w.len().max(1) as f64
}

/// Rescales the kernels of every layer whose input is a batch-norm output so
/// that all such layers share one mean `|w|`, dividing that BN's scale and
/// shift by the same factor. The network computes the same function (up to
/// rounding); only the split of magnitude between BN and kernels moves.
///
/// Without this, a layer that trained to small weights (the zero-initialized
/// output layer in particular) can fall entirely below a global threshold.
pub fn balance_scales<T: Scalar>(model: &Model<T>) -> Model<T> {
    let mut out = model.clone();
    let fed: Vec<usize> = (1..out.layers.len())
        .filter(|&c| out.layers[c - 1].bn.is_some() && mean_abs(out.layers[c].kernels.data()) > 0.0)
        .collect();
    let (sum, count) = fed.iter().fold((0.0, 0usize), |(s, n), &c| {
        let d = out.layers[c].kernels.data();
        (s + mean_abs(d) * d.len() as f64, n + d.len())
    });
    if count == 0 {
        return out;
    }
    let target = sum / count as f64;
    for c in fed {
        let s = target / mean_abs(out.layers[c].kernels.data());
        let (scale, inv) = (T::lit(s), T::lit(1.0 / s));
        for w in out.layers[c].kernels.data_mut() {
            *w = *w * scale;
        }
        let bn = out.layers[c - 1].bn.as_mut().expect("filtered on BN");
        for v in bn.gamma.iter_mut().chain(bn.beta.iter_mut()) {
            *v = *v * inv;
        }
    }
    out
}

/// Global magnitude pruning on the scale-balanced model (see [`balance_scales`]):
/// zeroes every kernel weight with `|w| < threshold` and keeps weights at the
/// threshold. The threshold and mask refer to the returned model's weights.
pub fn prune<T: Scalar>(model: &Model<T>, kappa: f64) -> Result<(Model<T>, PruneMask, T)> {
    let mut pruned = balance_scales(model);
    let threshold = compute_threshold(&pruned, kappa)?;
    let mut mask = Vec::with_capacity(model.layers.len());
    for layer in &mut pruned.layers {
        let keep: Vec<bool> = layer
            .kernels
            .data()
            .iter()
            .map(|w| w.abs() >= threshold)
            .collect();
        for (w, &k) in layer.kernels.data_mut().iter_mut().zip(&keep) {
            if !k {
                *w = T::zero();
            }
        }
        mask.push(keep);
    }
    Ok((pruned, PruneMask { layers: mask }, threshold))
}

/// Retrains a pruned model with its mask frozen: pruned weights stay exactly zero.
/// Batch-norm running statistics are then re-estimated over `train_set`, and
/// the last history entry holds the validation loss of the returned model.
pub fn fine_tune<T: Scalar>(
    model: &mut Model<T>,
    mask: &PruneMask,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    seed: u64,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    mask.check_model(model)?;
    for (layer, keep) in model.layers.iter().zip(mask.layers()) {
        if layer
            .kernels
            .data()
            .iter()
            .zip(keep)
            .any(|(w, &k)| !k && *w != T::zero())
        {
            return Err(Error::InvalidArgument(
                "mask marks a non-zero weight as pruned".into(),
            ));
        }
    }
    let mut report = train(
        model,
        train_set,
        val_set,
        config,
        seed,
        Some(mask),
        on_epoch,
    )?;
    // Channels whose incoming weights are all pruned have near-zero batch
    // variance, so the moving averages lag far behind the batch statistics.
    if config.batch_size >= 2 && train_set.len() >= 2 {
        recalibrate_batchnorm(model, train_set, config.batch_size)?;
        if let Some(last) = report.history.last_mut() {
            last.val_loss = validation_loss(model, val_set)?;
        }
        report.best_val_epoch = report
            .history
            .iter()
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
            .map_or(0, |e| e.epoch);
    }
    Ok(report)
}

/// Packs `codes` LSB-first, `bits` bits each, into `ceil(len * bits / 8)` bytes.
pub fn pack_codes(codes: &[u32], bits: u8) -> Vec<u8> {
    assert!((1..=32).contains(&bits), "bit width {bits} outside 1..=32");
    let total_bits = codes.len() * bits as usize;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mask = if bits == 32 {
        u32::MAX
    } else {
        (1u32 << bits) - 1
    };
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut pos = 0usize;
    for &c in codes {
        acc |= ((c & mask) as u64) << filled;
        filled += bits as u32;
        while filled >= 8 {
            out[pos] = acc as u8;
            pos += 1;
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out[pos] = acc as u8;
    }
    out
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u32>> {
    if !(1..=32).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit width {bits} outside 1..=32"
        )));
    }
    let need = (count * bits as usize).div_ceil(8);
    if bytes.len() < need {
        return Err(Error::shape(format!("{need} packed bytes"), bytes.len()));
    }
    let mask = if bits == 32 {
        u32::MAX as u64
    } else {
        (1u64 << bits) - 1
    };
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut pos = 0usize;
    for _ in 0..count {
        while filled < bits as u32 {
            acc |= (bytes[pos] as u64) << filled;
            pos += 1;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= bits as u32;
    }
    Ok(out)
}

/// One layer's kernels after affine quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    /// Kernel tensor shape `(out, in, f, f)`.
    pub shape: [usize; 4],
    pub bits: u8,
    pub scale: f32,
    pub zero_point: i64,
    /// Set when every retained weight has the same value; `scale`/`zero_point`
    /// are then the `1`/`0` sentinel and all codes are zero.
    pub constant: Option<f32>,
    pub retained: Vec<bool>,
    /// One code per retained weight, in kernel order, packed by [`pack_codes`].
    pub packed: Vec<u8>,
}

impl QuantizedLayer {
    pub fn retained_count(&self) -> usize {
        self.retained.iter().filter(|&&k| k).count()
    }

    pub fn codes(&self) -> Result<Vec<u32>> {
        unpack_codes(&self.packed, self.bits, self.retained_count())
    }

    pub fn max_code(&self) -> u64 {
        (1u64 << self.bits) - 1
    }
}

/// Quantizes the retained entries of one kernel tensor:
/// `S = (max - min)/(2^b - 1)`, `Z = -round((2^b - 1) min / (max - min))`,
/// `q = clamp(round(w / S) + Z; 0, 2^b - 1)`, with round-half-away-from-zero.
pub fn quantize_layer<T: Scalar>(
    kernels: &Tensor4<T>,
    retained: &[bool],
    bits: u8,
) -> Result<QuantizedLayer> {
    if !(1..=32).contains(&bits) {
        return Err(Error::InvalidArgument(format!(
            "bit width must be in 1..=32, got {bits}"
        )));
    }
    if retained.len() != kernels.len() {
        return Err(Error::shape(kernels.len(), retained.len()));
    }
    let kept: Vec<f64> = kernels
        .data()
        .iter()
        .zip(retained)
        .filter(|(_, &k)| k)
        .map(|(w, _)| w.to_f64_lossy())
        .collect();
    if kept.is_empty() {
        // fully pruned layer: nothing to code
        return Ok(QuantizedLayer {
            shape: kernels.shape(),
            bits,
            scale: 1.0,
            zero_point: 0,
            constant: None,
            retained: retained.to_vec(),
            packed: Vec::new(),
        });
    }
    if kept.iter().any(|w| !w.is_finite()) {
        return Err(Error::Numerical("non-finite kernel weight".into()));
    }
    let lo = kept.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = kept.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let levels = ((1u64 << bits) - 1) as f64;
    if hi == lo {
        return Ok(QuantizedLayer {
            shape: kernels.shape(),
            bits,
            scale: 1.0,
            zero_point: 0,
            constant: Some(lo as f32),
            retained: retained.to_vec(),
            packed: pack_codes(&vec![0; kept.len()], bits),
        });
    }
    // the stored (f32) scale is the one used for coding so that decode is exact
    let scale = ((hi - lo) / levels) as f32;
    let s = scale as f64;
    let zero_point = -(levels * lo / (hi - lo)).round();
    let codes: Vec<u32> = kept
        .iter()
        .map(|w| ((w / s).round() + zero_point).clamp(0.0, levels) as u32)
        .collect();
    Ok(QuantizedLayer {
        shape: kernels.shape(),
        bits,
        scale,
        zero_point: zero_point as i64,
        constant: None,
        retained: retained.to_vec(),
        packed: pack_codes(&codes, bits),
    })
}

/// Rebuilds the kernel tensor: retained weights become `S (q - Z)`, pruned ones exact zero.
pub fn dequantize<T: Scalar>(layer: &QuantizedLayer) -> Result<Tensor4<T>> {
    let codes = layer.codes()?;
    let s = layer.scale as f64;
    let z = layer.zero_point as f64;
    let mut next = codes.into_iter();
    let data = layer
        .retained
        .iter()
        .map(|&k| {
            if !k {
                return T::zero();
            }
            let q = next.next().expect("one code per retained weight");
            match layer.constant {
                Some(c) => T::lit(c as f64),
                None => T::lit(s * (q as f64 - z)),
            }
        })
        .collect();
    Tensor4::from_vec(layer.shape, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedConvLayer {
    pub kernels: QuantizedLayer,
    pub bias: Vec<f32>,
    pub bn: Option<BatchNorm<f32>>,
    pub relu: bool,
}

/// A model whose kernels are stored as quantized codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub rows: usize,
    pub cols: usize,
    pub layers: Vec<QuantizedConvLayer>,
}

impl QuantizedModel {
    pub fn bits(&self) -> Option<u8> {
        self.layers.first().map(|l| l.kernels.bits)
    }

    pub fn retained_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernels.retained_count()).sum()
    }

    pub fn kernel_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernels.retained.len()).sum()
    }

    pub fn mask(&self) -> PruneMask {
        PruneMask::from_layers(
            self.layers
                .iter()
                .map(|l| l.kernels.retained.clone())
                .collect(),
        )
    }

    /// Full-precision model with dequantized kernels (simulated quantization).
    pub fn dequantize<T: Scalar>(&self) -> Result<Model<T>> {
        let layers = self
            .layers
            .iter()
            .map(|q| {
                Ok(ConvLayer {
                    kernels: dequantize(&q.kernels)?,
                    bias: q.bias.iter().map(|&b| T::lit(b as f64)).collect(),
                    bn: q.bn.as_ref().map(|b| b.cast()),
                    relu: q.relu,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = Model {
            layers,
            rows: self.rows,
            cols: self.cols,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Quantizes every layer's kernels to `bits` bits; `mask` (default: all
/// retained) selects which weights are stored.
pub fn quantize_model<T: Scalar>(
    model: &Model<T>,
    mask: Option<&PruneMask>,
    bits: u8,
) -> Result<QuantizedModel> {
    model.validate()?;
    let dense;
    let mask = match mask {
        Some(m) => m,
        None => {
            dense = PruneMask::dense(model);
            &dense
        }
    };
    mask.check_model(model)?;
    let layers = model
        .layers
        .iter()
        .zip(mask.layers())
        .map(|(l, keep)| {
            let f32_layer: ConvLayer<f32> = l.cast();
            Ok(QuantizedConvLayer {
                kernels: quantize_layer(&l.kernels, keep, bits)?,
                bias: f32_layer.bias,
                bn: f32_layer.bn,
                relu: l.relu,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        rows: model.rows,
        cols: model.cols,
        layers,
    })
}

/// Dequantizes and runs one grid through the model. For repeated calls,
/// dequantize once with [`QuantizedModel::dequantize`] and reuse the model.
pub fn quantized_infer(model: &QuantizedModel, ls: &Grid<f32>) -> Result<Grid<f32>> {
    if model.layers.is_empty() {
        return Err(Error::InvalidArgument(
            "quantized model has no layers".into(),
        ));
    }
    model.dequantize::<f32>()?.forward_grid(ls)
}

/// `32 / (b (1 - kappa))`.
pub fn compression_ratio(kappa: f64, bits: u8) -> Result<f64> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::InvalidArgument(format!(
            "pruning ratio must lie in [0, 1), got {kappa}"
        )));
    }
    if bits == 0 {
        return Err(Error::InvalidArgument(
            "bit width must be at least 1".into(),
        ));
    }
    Ok(32.0 / (bits as f64 * (1.0 - kappa)))
}

/// `(dense_count * 32) / (retained_count * b)` from actual parameter counts.
pub fn effective_ratio(dense_count: f64, retained_count: f64, bits: u8) -> f64 {
    dense_count * 32.0 / (retained_count * bits as f64)
}

/// Storage accounting for a quantized model against its dense 32-bit parent.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeReport {
    pub dense_params: usize,
    pub kernel_weights: usize,
    pub retained_weights: usize,
    pub exempt_params: usize,
    pub bits: u8,
    pub dense_bits: u64,
    pub code_bits: u64,
    pub bitmap_bits: u64,
    pub exempt_bits: u64,
}

impl SizeReport {
    pub fn new<T: Scalar>(dense: &Model<T>, quantized: &QuantizedModel) -> Self {
        let dense_params = dense.count_params(ParamConvention::WithRunningStats);
        let bits = quantized.bits().unwrap_or(32);
        let exempt = dense.exempt_param_count();
        let retained = quantized.retained_count();
        Self {
            dense_params,
            kernel_weights: quantized.kernel_count(),
            retained_weights: retained,
            exempt_params: exempt,
            bits,
            dense_bits: dense_params as u64 * 32,
            code_bits: retained as u64 * bits as u64,
            bitmap_bits: quantized.kernel_count() as u64,
            exempt_bits: exempt as u64 * 32,
        }
    }

    /// Codes, retention bitmap and full-precision exempt parameters.
    pub fn total_bits(&self) -> u64 {
        self.code_bits + self.bitmap_bits + self.exempt_bits
    }

    /// Dense size over everything actually stored.
    pub fn overall_ratio(&self) -> f64 {
        self.dense_bits as f64 / self.total_bits() as f64
    }

    /// Achieved pruning ratio on the kernels.
    pub fn achieved_kappa(&self) -> f64 {
        1.0 - self.retained_weights as f64 / self.kernel_weights as f64
    }

    /// Dense kernel bits over retained code bits, ignoring bitmap and exempt parameters.
    pub fn kernel_ratio(&self) -> f64 {
        effective_ratio(
            self.kernel_weights as f64,
            self.retained_weights as f64,
            self.bits,
        )
    }
}
