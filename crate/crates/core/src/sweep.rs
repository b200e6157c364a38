//! NMSE-versus-SNR sweeps over the classical and learned estimators, CSV
//! output, and inference timing.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::channel::{draw_channel, HybridChannelSpec};
use crate::error::{Error, Result};
use crate::estimation::{nmse_vectors, reshape_to_grid, to_db, LmmseFilter};
use crate::linalg::{sample_covariance, ComplexMatrix};
use crate::nn::Tensor4;
use crate::rng::{derive_seed, sample_stream};
use crate::xlcnet::{draw_sample, Model, SnrRange};

pub const CSV_HEADER: &str = "estimator,snr_db,nmse,nmse_db,samples,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    Ls,
    Lmmse,
    /// The trained full-precision network.
    Xlcnet,
    /// The pruned and quantized network.
    Cxlcnet,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ls => "ls",
            Estimator::Lmmse => "lmmse",
            Estimator::Xlcnet => "xlcnet",
            Estimator::Cxlcnet => "cxlcnet",
        }
    }
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ls" => Ok(Estimator::Ls),
            "lmmse" => Ok(Estimator::Lmmse),
            "xlcnet" => Ok(Estimator::Xlcnet),
            "cxlcnet" => Ok(Estimator::Cxlcnet),
            other => Err(format!(
                "unknown estimator '{other}' (expected ls, lmmse, xlcnet or cxlcnet)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub estimator: Estimator,
    pub snr_db: f64,
    pub nmse: f64,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn get(&self, estimator: Estimator, snr_db: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.snr_db == snr_db)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{:.9e},{:.6},{},{}",
                r.estimator.name(),
                r.snr_db,
                r.nmse,
                to_db(r.nmse),
                r.samples,
                r.seed
            )
            .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// What the sweep needs beyond the scenario. Learned estimators require their model.
#[derive(Debug, Clone, Copy, Default)]
pub struct SweepModels<'a> {
    pub xlcnet: Option<&'a Model<f32>>,
    /// Dequantized compressed model.
    pub cxlcnet: Option<&'a Model<f32>>,
    pub covariance: Option<&'a ComplexMatrix<f64>>,
}

/// Channel covariance of `spec` estimated from `count` independent draws.
pub fn estimate_covariance(
    spec: &HybridChannelSpec<f64>,
    count: usize,
    seed: u64,
) -> Result<ComplexMatrix<f64>> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "covariance needs at least one channel draw".into(),
        ));
    }
    const CHUNK: usize = 2048;
    let m = spec.geometry.antennas;
    let mut acc = ComplexMatrix::<f64>::zeros(m, m);
    for start in (0..count).step_by(CHUNK) {
        let n = CHUNK.min(count - start);
        let draws = (start..start + n)
            .map(|i| draw_channel(spec, &mut sample_stream(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let part = sample_covariance(&draws)?;
        for (a, p) in acc.as_mut_slice().iter_mut().zip(part.as_slice()) {
            *a += p * n as f64;
        }
    }
    for a in acc.as_mut_slice() {
        *a /= count as f64;
    }
    Ok(acc)
}

const NET_BATCH: usize = 256;

/// Mean NMSE per (estimator, SNR). Every estimator sees the same `samples`
/// test draws at a given SNR; the draws for SNR index `k` come from
/// `derive_seed(seed, "sweep-k")`.
pub fn run_snr_sweep(
    spec: &HybridChannelSpec<f64>,
    estimators: &[Estimator],
    snrs: &[f64],
    samples: usize,
    seed: u64,
    models: &SweepModels<'_>,
) -> Result<SweepResult> {
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "sweep needs at least one sample per point".into(),
        ));
    }
    let net = |e: Estimator| -> Result<Option<&Model<f32>>> {
        let m = match e {
            Estimator::Xlcnet => models.xlcnet,
            Estimator::Cxlcnet => models.cxlcnet,
            _ => return Ok(None),
        };
        m.map(Some)
            .ok_or_else(|| Error::InvalidArgument(format!("estimator {} needs a model", e.name())))
    };
    if estimators.contains(&Estimator::Lmmse) && models.covariance.is_none() {
        return Err(Error::InvalidArgument(
            "estimator lmmse needs a channel covariance".into(),
        ));
    }
    for &e in estimators {
        if let Some(m) = net(e)? {
            if m.rows * m.cols != spec.geometry.antennas {
                return Err(Error::shape(
                    format!("{} antennas", spec.geometry.antennas),
                    format!("{} model on a {}x{} grid", e.name(), m.rows, m.cols),
                ));
            }
        }
    }

    let mut result = SweepResult::default();
    for (k, &snr) in snrs.iter().enumerate() {
        let point_seed = derive_seed(seed, &format!("sweep-{k}"));
        let draws = (0..samples)
            .map(|i| {
                draw_sample(
                    spec,
                    SnrRange::point(snr),
                    &mut sample_stream(point_seed, i as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let filter = match models.covariance {
            Some(r) if estimators.contains(&Estimator::Lmmse) => {
                let noise_to_power = 10f64.powf(-snr / 10.0);
                Some(LmmseFilter::new(r, noise_to_power)?)
            }
            _ => None,
        };
        for &e in estimators {
            let total: f64 = match e {
                Estimator::Ls => draws
                    .iter()
                    .map(|d| nmse_vectors(&d.channel, &d.ls))
                    .sum::<Result<f64>>()?,
                Estimator::Lmmse => {
                    let f = filter.as_ref().expect("filter built above");
                    draws
                        .iter()
                        .map(|d| nmse_vectors(&d.channel, &f.apply(&d.ls)?))
                        .sum::<Result<f64>>()?
                }
                Estimator::Xlcnet | Estimator::Cxlcnet => {
                    let model = net(e)?.expect("checked above");
                    network_nmse_sum(model, &draws)?
                }
            };
            result.rows.push(SweepRow {
                estimator: e,
                snr_db: snr,
                nmse: total / samples as f64,
                samples,
                seed: point_seed,
            });
        }
    }
    Ok(result)
}

fn network_nmse_sum(model: &Model<f32>, draws: &[crate::xlcnet::Sample]) -> Result<f64> {
    let (rows, cols) = (model.rows, model.cols);
    let plane = 2 * rows * cols;
    let mut total = 0.0;
    for chunk in draws.chunks(NET_BATCH) {
        let mut input = Vec::with_capacity(chunk.len() * plane);
        let mut truth = Vec::with_capacity(chunk.len() * plane);
        for d in chunk {
            input.extend(
                reshape_to_grid(&d.ls, rows, cols)?
                    .as_slice()
                    .iter()
                    .map(|&v| v as f32),
            );
            truth.extend_from_slice(reshape_to_grid(&d.channel, rows, cols)?.as_slice());
        }
        let x = Tensor4::from_vec([chunk.len(), 2, rows, cols], input)?;
        let out = model.forward(&x)?;
        for n in 0..chunk.len() {
            let est = out.sample(n);
            let t = &truth[n * plane..(n + 1) * plane];
            let mut err = 0.0;
            let mut energy = 0.0;
            for (&a, &b) in t.iter().zip(est) {
                let d = a - b as f64;
                err += d * d;
                energy += a * a;
            }
            if energy == 0.0 {
                return Err(Error::Numerical(
                    "NMSE of an all-zero channel is undefined".into(),
                ));
            }
            total += err / energy;
        }
    }
    Ok(total)
}

/// Wall-clock inference statistics. Informational only: the numbers depend on the machine.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeStats {
    pub repetitions: usize,
    pub batch: usize,
    pub per_sample_median_ms: f64,
    pub per_sample_min_ms: f64,
    pub per_sample_max_ms: f64,
    pub per_batch_median_ms: f64,
    pub per_batch_min_ms: f64,
    pub per_batch_max_ms: f64,
    pub dense_macs_per_sample: u64,
    pub retained_macs_per_sample: u64,
    pub machine: String,
}

impl RuntimeStats {
    pub fn render(&self) -> String {
        format!(
            "single sample: median {:.3} ms (min {:.3}, max {:.3}) over {} runs\n\
             batch of {}: median {:.3} ms (min {:.3}, max {:.3}), {:.4} ms per sample\n\
             MACs per sample: {} dense, {} on retained weights\n\
             machine: {}\n",
            self.per_sample_median_ms,
            self.per_sample_min_ms,
            self.per_sample_max_ms,
            self.repetitions,
            self.batch,
            self.per_batch_median_ms,
            self.per_batch_min_ms,
            self.per_batch_max_ms,
            self.per_batch_median_ms / self.batch as f64,
            self.dense_macs_per_sample,
            self.retained_macs_per_sample,
            self.machine
        )
    }
}

/// OS, architecture, logical CPUs and (on Linux) the CPU model name.
pub fn machine_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{} {} {} logical cpus, {}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        cpus,
        model
    )
}

fn timings(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64, f64)> {
    for _ in 0..3.min(reps) {
        f()?;
    }
    let mut ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 {
        ms[reps / 2]
    } else {
        0.5 * (ms[reps / 2 - 1] + ms[reps / 2])
    };
    Ok((median, ms[0], ms[reps - 1]))
}

/// Times single-sample and batched inference after a short warm-up.
pub fn benchmark_runtime(
    model: &Model<f32>,
    batch: usize,
    repetitions: usize,
) -> Result<RuntimeStats> {
    if batch == 0 || repetitions == 0 {
        return Err(Error::InvalidArgument(
            "benchmark needs a positive batch and repetition count".into(),
        ));
    }
    let c = model.io_channels();
    let one = Tensor4::<f32>::from_fn([1, c, model.rows, model.cols], |i| {
        ((i as f32) * 0.618).sin()
    });
    let many = Tensor4::<f32>::from_fn([batch, c, model.rows, model.cols], |i| {
        ((i as f32) * 0.618).sin()
    });
    let single = timings(repetitions, || model.forward(&one).map(drop))?;
    let batched = timings(repetitions, || model.forward(&many).map(drop))?;
    Ok(RuntimeStats {
        repetitions,
        batch,
        per_sample_median_ms: single.0,
        per_sample_min_ms: single.1,
        per_sample_max_ms: single.2,
        per_batch_median_ms: batched.0,
        per_batch_min_ms: batched.1,
        per_batch_max_ms: batched.2,
        dense_macs_per_sample: model.dense_macs(),
        retained_macs_per_sample: model.retained_macs(),
        machine: machine_descriptor(),
    })
}
