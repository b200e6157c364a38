//! The residual CNN denoiser: architecture, training data, training loop,
//! evaluation and complexity accounting.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::channel::{draw_channel, ComplexVector, HybridChannelSpec};
use crate::compression::PruneMask;
use crate::error::{Error, Result};
use crate::estimation::{ls_estimate, nmse_slices, observe, power_for_snr, reshape_to_grid, Grid};
use crate::nn::{
    mse_loss, stack_backward, stack_forward, AdamConfig, AdamState, ConvLayer, LayerCache,
    LayerGrads, Mode, Tensor4,
};
use crate::rng::{derive_seed, sample_stream, uniform};
use crate::scalar::Scalar;

/// Network shape. Defaults: 9 layers, 64 hidden maps, 3x3 kernels, 2 I/O maps, 16x16 grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct XlcnetConfig {
    pub layers: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub io_channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Default for XlcnetConfig {
    fn default() -> Self {
        Self {
            layers: 9,
            hidden: 64,
            kernel: 3,
            io_channels: 2,
            rows: 16,
            cols: 16,
        }
    }
}

impl XlcnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 layers, got {}",
                self.layers
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel side must be odd, got {}",
                self.kernel
            )));
        }
        if self.hidden == 0 || self.io_channels == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument(
                "channel counts and grid dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// SNR used to synthesize a sample's noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrRange {
    /// Uniform in `[lo, hi]` dB (a point when `lo == hi`).
    Uniform { lo: f64, hi: f64 },
    /// No noise at all; recorded as `+inf` dB.
    Noiseless,
}

impl SnrRange {
    pub fn point(db: f64) -> Self {
        SnrRange::Uniform { lo: db, hi: db }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-3,
        }
    }
}

/// Which parameters [`Model::count_params`] includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamConvention {
    KernelsOnly,
    /// Kernels, biases and BN scale/shift.
    Trainable,
    /// Trainable plus BN running mean/variance.
    WithRunningStats,
}

/// Ordered convolution stack wrapped in a single residual connection:
/// `output = input - cnn(input)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub layers: Vec<ConvLayer<T>>,
    pub rows: usize,
    pub cols: usize,
}

impl<T: Scalar> Model<T> {
    /// Builds the network. Hidden layers get Glorot kernels; the final layer
    /// starts at zero so the untrained model is exactly the LS pass-through.
    pub fn build(config: &XlcnetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = sample_stream(derive_seed(seed, "init"), 0);
        let mut layers = Vec::with_capacity(config.layers);
        for c in 0..config.layers {
            let last = c + 1 == config.layers;
            let n_in = if c == 0 {
                config.io_channels
            } else {
                config.hidden
            };
            let n_out = if last {
                config.io_channels
            } else {
                config.hidden
            };
            let mut layer = ConvLayer::zeros(n_in, n_out, config.kernel, !last, !last)?;
            if !last {
                layer.init_glorot(&mut rng);
            }
            layers.push(layer);
        }
        let model = Self {
            layers,
            rows: config.rows,
            cols: config.cols,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::InvalidArgument("model has no layers".into()))?;
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(Error::InvalidArgument(format!(
                    "layer {} emits {} channels but layer {} expects {}",
                    i,
                    pair[0].out_channels(),
                    i + 1,
                    pair[1].in_channels()
                )));
            }
        }
        let last = self.layers.last().expect("non-empty");
        if last.out_channels() != first.in_channels() {
            return Err(Error::InvalidArgument(format!(
                "residual output needs {} channels, last layer emits {}",
                first.in_channels(),
                last.out_channels()
            )));
        }
        Ok(())
    }

    pub fn io_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<()> {
        let want = [input.batch(), self.io_channels(), self.rows, self.cols];
        if input.shape() != want {
            return Err(Error::shape(
                format!("{want:?}"),
                format!("{:?}", input.shape()),
            ));
        }
        Ok(())
    }

    /// Inference (BN running statistics).
    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.infer(&x)?;
        }
        residual(input, &x)
    }

    pub fn forward_grid(&self, grid: &Grid<T>) -> Result<Grid<T>> {
        if grid.rows() != self.rows || grid.cols() != self.cols {
            return Err(Error::shape(
                format!("{}x{} grid", self.rows, self.cols),
                format!("{}x{}", grid.rows(), grid.cols()),
            ));
        }
        let input = Tensor4::from_vec([1, 2, self.rows, self.cols], grid.as_slice().to_vec())?;
        Grid::from_vec(self.rows, self.cols, self.forward(&input)?.into_vec())
    }

    /// Train-mode pass (batch statistics) keeping caches for [`Model::backward`].
    pub fn forward_train(&self, input: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<LayerCache<T>>)> {
        self.check_input(input)?;
        let (noise, caches) = stack_forward(&self.layers, input, Mode::Train)?;
        Ok((residual(input, &noise)?, caches))
    }

    /// Parameter gradients given the gradient of the residual output.
    pub fn backward(
        &self,
        caches: &[LayerCache<T>],
        grad_out: &Tensor4<T>,
    ) -> Result<Vec<LayerGrads<T>>> {
        let grad_noise = grad_out.map(|g| -g);
        Ok(stack_backward(&self.layers, caches, &grad_noise, false)?.1)
    }

    pub fn kernel_count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel_count()).sum()
    }

    pub fn nonzero_kernel_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.kernels.data().iter().filter(|w| **w != T::zero()).count())
            .sum()
    }

    pub fn count_params(&self, convention: ParamConvention) -> usize {
        let bias: usize = self.layers.iter().map(|l| l.bias.len()).sum();
        let bn: usize = self
            .layers
            .iter()
            .filter_map(|l| l.bn.as_ref())
            .map(|b| b.channels())
            .sum();
        match convention {
            ParamConvention::KernelsOnly => self.kernel_count(),
            ParamConvention::Trainable => self.kernel_count() + bias + 2 * bn,
            ParamConvention::WithRunningStats => self.kernel_count() + bias + 4 * bn,
        }
    }

    /// Parameters outside the kernels (biases, BN affine and running statistics).
    pub fn exempt_param_count(&self) -> usize {
        self.count_params(ParamConvention::WithRunningStats) - self.kernel_count()
    }

    /// Dense multiply-accumulates per inference: `sum_c area * F^2 N_{c-1} N_c`.
    pub fn dense_macs(&self) -> u64 {
        (self.rows * self.cols) as u64 * self.kernel_count() as u64
    }

    /// Multiply-accumulates that touch a non-zero kernel weight.
    pub fn retained_macs(&self) -> u64 {
        (self.rows * self.cols) as u64 * self.nonzero_kernel_count() as u64
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

fn residual<T: Scalar>(input: &Tensor4<T>, noise: &Tensor4<T>) -> Result<Tensor4<T>> {
    input.check_same_shape(noise)?;
    let data = input
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &n)| x - n)
        .collect();
    Tensor4::from_vec(input.shape(), data)
}

/// MAC complexity `M * sum_c F_c^2 N_{c-1} N_c * (1 - kappa)` for an `antennas`-element array.
pub fn flops<T: Scalar>(model: &Model<T>, antennas: usize, pruning_ratio: f64) -> f64 {
    antennas as f64 * model.kernel_count() as f64 * (1.0 - pruning_ratio)
}

/// Paired LS input / ground-truth grids with the SNR each sample was drawn at.
/// Stored in `f32`, the on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pub snr_db: Vec<f32>,
    pub ls: Vec<f32>,
    pub truth: Vec<f32>,
}

impl Dataset {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            snr_db: Vec::new(),
            ls: Vec::new(),
            truth: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.snr_db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snr_db.is_empty()
    }

    /// Values per grid (`2 * rows * cols`).
    pub fn grid_len(&self) -> usize {
        2 * self.rows * self.cols
    }

    pub fn push(&mut self, snr_db: f32, ls: &[f32], truth: &[f32]) -> Result<()> {
        let n = self.grid_len();
        if ls.len() != n || truth.len() != n {
            return Err(Error::shape(n, format!("{} / {}", ls.len(), truth.len())));
        }
        self.snr_db.push(snr_db);
        self.ls.extend_from_slice(ls);
        self.truth.extend_from_slice(truth);
        Ok(())
    }

    pub fn ls_grid(&self, i: usize) -> &[f32] {
        let n = self.grid_len();
        &self.ls[i * n..(i + 1) * n]
    }

    pub fn truth_grid(&self, i: usize) -> &[f32] {
        let n = self.grid_len();
        &self.truth[i * n..(i + 1) * n]
    }

    /// `(input, target)` tensors for the given sample indices.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor4<T>, Tensor4<T>) {
        let shape = [indices.len(), 2, self.rows, self.cols];
        let gather = |src: &[f32]| -> Vec<T> {
            let n = self.grid_len();
            indices
                .iter()
                .flat_map(|&i| src[i * n..(i + 1) * n].iter().map(|&v| T::lit(v as f64)))
                .collect()
        };
        let x = gather(&self.ls);
        let y = gather(&self.truth);
        (
            Tensor4::from_vec(shape, x).expect("dataset grids have the tensor shape"),
            Tensor4::from_vec(shape, y).expect("dataset grids have the tensor shape"),
        )
    }

    /// Mean NMSE of the stored LS grids.
    pub fn ls_nmse(&self) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.len() {
            total += nmse_slices(self.truth_grid(i), self.ls_grid(i))?;
        }
        Ok(total / self.len().max(1) as f64)
    }
}

/// One simulated pilot exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `+inf` for noiseless samples.
    pub snr_db: f64,
    pub channel: ComplexVector<f64>,
    pub ls: ComplexVector<f64>,
}

/// Channel, SNR, observation and LS estimate, drawn in that order from `rng`.
pub fn draw_sample<R: Rng + ?Sized>(
    spec: &HybridChannelSpec<f64>,
    snr: SnrRange,
    rng: &mut R,
) -> Result<Sample> {
    let channel = draw_channel(spec, rng)?;
    let (snr_db, power, noise) = match snr {
        SnrRange::Uniform { lo, hi } => {
            let s = uniform(rng, lo, hi);
            (s, power_for_snr(s), 1.0)
        }
        SnrRange::Noiseless => (f64::INFINITY, 1.0, 0.0),
    };
    let obs = observe(&channel, power, noise, rng)?;
    Ok(Sample {
        snr_db,
        ls: ls_estimate(&obs),
        channel,
    })
}

/// Generates `count` samples: channel from `spec`, SNR from `snr`, pilot
/// observation with unit noise power, LS estimate, reshape to `rows x cols`.
/// Sample `i` uses stream `(seed, i)`.
pub fn make_dataset(
    spec: &HybridChannelSpec<f64>,
    count: usize,
    snr: SnrRange,
    seed: u64,
    rows: usize,
    cols: usize,
) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument(
            "dataset needs at least one sample".into(),
        ));
    }
    if rows * cols != spec.geometry.antennas {
        return Err(Error::shape(
            format!("{} antennas", spec.geometry.antennas),
            format!("{rows}x{cols} grid"),
        ));
    }
    let mut data = Dataset::new(rows, cols);
    data.snr_db.reserve(count);
    data.ls.reserve(count * data.grid_len());
    data.truth.reserve(count * data.grid_len());
    for i in 0..count {
        let sample = draw_sample(spec, snr, &mut sample_stream(seed, i as u64))?;
        let ls = reshape_to_grid(&sample.ls, rows, cols)?;
        let truth = reshape_to_grid(&sample.channel, rows, cols)?;
        let to32 = |g: Grid<f64>| -> Vec<f32> { g.as_slice().iter().map(|&v| v as f32).collect() };
        data.push(sample.snr_db as f32, &to32(ls), &to32(truth))?;
    }
    Ok(data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Validation loss of the model before the first update.
    pub initial_val_loss: f64,
    pub history: Vec<EpochStats>,
    pub best_val_epoch: usize,
}

impl TrainReport {
    pub fn final_val_loss(&self) -> f64 {
        self.history
            .last()
            .map_or(self.initial_val_loss, |e| e.val_loss)
    }
}

const EVAL_BATCH: usize = 256;

/// Mean per-sample `||truth - model(ls)||_F^2` in inference mode.
pub fn validation_loss<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch::<T>(chunk);
        let out = model.forward(&x)?;
        total += out
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| {
                let d = a.to_f64_lossy() - b.to_f64_lossy();
                d * d
            })
            .sum::<f64>();
    }
    Ok(total / data.len().max(1) as f64)
}

/// Mean NMSE of the model's output over a dataset (inference mode).
pub fn evaluate_dataset<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch::<T>(chunk);
        let out = model.forward(&x)?;
        for n in 0..chunk.len() {
            total += nmse_slices(y.sample(n), out.sample(n))?;
        }
    }
    Ok(total / data.len().max(1) as f64)
}

/// Monte-Carlo NMSE on `count` fresh samples from `spec` at a fixed SNR.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    spec: &HybridChannelSpec<f64>,
    snr_db: f64,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let data = make_dataset(
        spec,
        count,
        SnrRange::point(snr_db),
        seed,
        model.rows,
        model.cols,
    )?;
    evaluate_dataset(model, &data)
}

/// Replaces every BN layer's running statistics with the batch statistics
/// of a train-mode pass over `data`, averaged over batches, parameters fixed.
/// The variance is the unbiased batch estimate, as in the running update.
pub fn recalibrate_batchnorm<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<()> {
    if batch_size < 2 || data.len() < 2 {
        return Err(Error::InvalidArgument(
            "recalibration needs batches of at least 2 samples".into(),
        ));
    }
    let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = model
        .layers
        .iter()
        .map(|l| {
            l.bn.as_ref()
                .map(|b| (vec![0.0; b.channels()], vec![0.0; b.channels()]))
        })
        .collect();
    let mut weight = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size).filter(|c| c.len() >= 2) {
        let (x, _) = data.batch::<T>(chunk);
        let (_, caches) = model.forward_train(&x)?;
        let w = chunk.len() as f64;
        for (acc, cache) in sums.iter_mut().zip(&caches) {
            if let (Some((mean, var)), Some(c)) = (acc.as_mut(), cache.bn.as_ref()) {
                let n = c.count.map_or(1.0, |n| n as f64);
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                for ch in 0..mean.len() {
                    mean[ch] += w * c.mean[ch].to_f64_lossy();
                    var[ch] += w * c.var[ch].to_f64_lossy() * unbias;
                }
            }
        }
        weight += w;
    }
    for (layer, acc) in model.layers.iter_mut().zip(sums) {
        if let (Some(bn), Some((mean, var))) = (layer.bn.as_mut(), acc) {
            bn.running_mean = mean.iter().map(|m| T::lit(m / weight)).collect();
            bn.running_var = var.iter().map(|v| T::lit(v / weight)).collect();
        }
    }
    Ok(())
}

/// Minimizes the batch loss with Adam over shuffled mini-batches and returns
/// the per-epoch history; the final-epoch weights are left in `model`.
///
/// With `mask`, masked-out kernel weights receive no updates (fine-tuning
/// after pruning). A trailing batch of one sample is dropped because train-mode
/// batch normalization needs two.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    config: &TrainConfig,
    seed: u64,
    mask: Option<&PruneMask>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    model.validate()?;
    for (name, d) in [("training", train_set), ("validation", val_set)] {
        if d.rows != model.rows || d.cols != model.cols {
            return Err(Error::shape(
                format!("{}x{} grids", model.rows, model.cols),
                format!("{name} set with {}x{}", d.rows, d.cols),
            ));
        }
        if d.is_empty() {
            return Err(Error::InvalidArgument(format!("{name} set is empty")));
        }
    }
    if config.batch_size < 2 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 2".into(),
        ));
    }
    if let Some(m) = mask {
        m.check_model(model)?;
    }

    let sizes: Vec<usize> = model.layers.iter().flat_map(|l| l.param_sizes()).collect();
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(config.learning_rate), &sizes);
    let initial_val_loss = validation_loss(model, val_set)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut sample_stream(
            derive_seed(seed, "shuffle"),
            epoch as u64,
        ));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = train_set.batch::<T>(chunk);
            let (pred, caches) = model.forward_train(&x)?;
            let (loss, grad) = mse_loss(&pred, &y)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            let grads = model.backward(&caches, &grad)?;
            apply_adam(model, &mut adam, &grads, mask)?;
            for (layer, cache) in model.layers.iter_mut().zip(&caches) {
                if let (Some(bn), Some(c)) = (layer.bn.as_mut(), cache.bn.as_ref()) {
                    bn.update_running(c);
                }
            }
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let val_loss = validation_loss(model, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: usize::MAX,
                loss: val_loss,
            });
        }
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
        };
        log::info!(
            "epoch {:>3}: train loss {:.5}, val loss {:.5}",
            stats.epoch,
            stats.train_loss,
            stats.val_loss
        );
        on_epoch(&stats);
        history.push(stats);
    }
    let best_val_epoch = history
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .map_or(0, |e| e.epoch);
    Ok(TrainReport {
        initial_val_loss,
        history,
        best_val_epoch,
    })
}

fn apply_adam<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut AdamState<T>,
    grads: &[LayerGrads<T>],
    mask: Option<&PruneMask>,
) -> Result<()> {
    let grad_slices: Vec<&[T]> = grads.iter().flat_map(|g| g.slices()).collect();
    let mut masks: Vec<Option<&[bool]>> = Vec::with_capacity(grad_slices.len());
    for (li, layer) in model.layers.iter().enumerate() {
        for ti in 0..layer.param_sizes().len() {
            masks.push(match (ti, mask) {
                (0, Some(m)) => Some(m.layer(li)),
                _ => None,
            });
        }
    }
    let mut params: Vec<&mut [T]> = model
        .layers
        .iter_mut()
        .flat_map(|l| l.params_mut())
        .collect();
    adam.step(&mut params, &grad_slices, &masks)
}
