//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors that carry the 1-based line number.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::channel::{ArrayGeometry, HybridChannelSpec};
use crate::error::{Error, Result};
use crate::estimation::square_factorization;
use crate::io::Provenance;
use crate::rng::derive_seed;
use crate::sweep::Estimator;
use crate::xlcnet::{SnrRange, TrainConfig, XlcnetConfig};

/// A list of SNR points, written `lo:hi:step` or `a,b,c`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrList(pub Vec<f64>);

impl FromStr for SnrList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| format!("invalid number '{}'", t.trim()))
        };
        let parts: Vec<&str> = s.split(':').collect();
        let points = match parts.as_slice() {
            [lo, hi, step] => {
                let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
                if !(step > 0.0) || hi < lo {
                    return Err(format!("range {s} needs lo <= hi and a positive step"));
                }
                let n = ((hi - lo) / step + 1e-9).floor() as usize;
                (0..=n).map(|i| lo + i as f64 * step).collect()
            }
            [_] => s.split(',').map(num).collect::<Result<Vec<_>, _>>()?,
            _ => return Err(format!("expected lo:hi:step or a comma list, got '{s}'")),
        };
        if points.is_empty() || points.iter().any(|p| !p.is_finite()) {
            return Err(format!("SNR list '{s}' must hold finite values"));
        }
        Ok(SnrList(points))
    }
}

impl std::fmt::Display for SnrList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Comma-separated estimator names.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorList(pub Vec<Estimator>);

impl FromStr for EstimatorList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let list = s
            .split(',')
            .map(|t| t.trim().parse::<Estimator>())
            .collect::<Result<Vec<_>, _>>()?;
        if list.is_empty() {
            return Err("estimator list is empty".into());
        }
        Ok(EstimatorList(list))
    }
}

impl std::fmt::Display for EstimatorList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<&str> = self.0.iter().map(|e| e.name()).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! experiment_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)*) => {
        /// Every tunable of an experiment. Field names are the config keys.
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value
                            .parse::<$ty>()
                            .map_err(|e| format!("invalid value '{value}' for {key}: {e}"))?;
                    })*
                    _ => return Err(format!("unknown key '{key}'")),
                }
                Ok(())
            }

            /// Canonical text form: every key in declaration order.
            pub fn render(&self) -> String {
                let mut s = String::new();
                $(writeln!(s, "{} = {}", stringify!($key), self.$key).expect("string write");)*
                s
            }
        }
    };
}

experiment_config! {
    /// Master seed; every random stream is derived from it.
    seed: u64 = 1;
    antennas: usize = 256;
    /// Carrier wavelength in meters.
    wavelength: f64 = 0.01;
    /// Antenna spacing in wavelengths.
    spacing_wavelengths: f64 = 0.5;
    paths: usize = 6;
    far_paths: usize = 1;
    gain_power: f64 = 1.0;
    distance_min: f64 = 10.0;
    distance_max: f64 = 80.0;
    /// Path split of the test sets used by `eval`.
    test_paths: usize = 3;
    test_far_paths: usize = 0;
    train_samples: usize = 90_000;
    val_samples: usize = 10_000;
    test_samples: usize = 2_000;
    /// Training SNR is drawn uniformly from this range (dB).
    train_snr_min: f64 = 0.0;
    train_snr_max: f64 = 20.0;
    layers: usize = 9;
    hidden_channels: usize = 64;
    kernel_size: usize = 3;
    epochs: usize = 200;
    batch_size: usize = 128;
    learning_rate: f64 = 1e-3;
    prune_ratio: f64 = 0.9;
    finetune_epochs: usize = 50;
    finetune_learning_rate: f64 = 1e-3;
    bits: u8 = 8;
    /// Channel draws used to estimate the LMMSE covariance.
    covariance_samples: usize = 100_000;
    snr_sweep: SnrList = SnrList(vec![0.0, 5.0, 10.0, 15.0, 20.0]);
    estimators: EstimatorList = EstimatorList(vec![Estimator::Ls, Estimator::Lmmse, Estimator::Xlcnet]);
    benchmark_repetitions: usize = 50;
    benchmark_batch: usize = 128;
}

fn config_error(line: usize, reason: impl Into<String>) -> Error {
    Error::Config {
        line,
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<(&str, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                config_error(line_no, format!("expected 'key = value', got '{line}'"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some((_, first)) = seen.iter().find(|(k, _)| *k == key) {
                return Err(config_error(
                    line_no,
                    format!("key '{key}' already set on line {first}"),
                ));
            }
            cfg.set(key, value).map_err(|e| config_error(line_no, e))?;
            seen.push((key, line_no));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides; errors report the override's 1-based position as the line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for (i, o) in overrides.iter().enumerate() {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_error(i + 1, format!("override '{o}' is not key=value")))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| config_error(i + 1, e))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(config_error(0, reason));
        self.spec()?;
        self.test_spec()?;
        self.grid()?;
        self.model_config().validate()?;
        if self.train_snr_max < self.train_snr_min {
            return bad("train_snr_max must not be below train_snr_min".into());
        }
        if !(self.prune_ratio > 0.0 && self.prune_ratio < 1.0) {
            return bad(format!(
                "prune_ratio must lie in (0, 1), got {}",
                self.prune_ratio
            ));
        }
        if !(1..=32).contains(&self.bits) {
            return bad(format!("bits must be in 1..=32, got {}", self.bits));
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.learning_rate <= 0.0 || self.finetune_learning_rate <= 0.0 {
            return bad("learning rates must be positive".into());
        }
        if self.test_samples == 0 || self.benchmark_repetitions == 0 || self.benchmark_batch == 0 {
            return bad("sample and repetition counts must be at least 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical rendering, truncated to 64 bits.
    pub fn config_hash(&self) -> u64 {
        let digest = Sha256::digest(self.render().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config_hash(),
            seed: self.seed,
        }
    }

    /// Independent seed for one named stage of the experiment.
    pub fn stage_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn geometry(&self) -> Result<ArrayGeometry<f64>> {
        ArrayGeometry::with_spacing(
            self.antennas,
            self.wavelength,
            self.spacing_wavelengths * self.wavelength,
        )
    }

    /// Scenario the training and validation sets are drawn from.
    pub fn spec(&self) -> Result<HybridChannelSpec<f64>> {
        let spec = HybridChannelSpec {
            geometry: self.geometry()?,
            paths: self.paths,
            far_paths: self.far_paths,
            gain_power: self.gain_power,
            distance_min: self.distance_min,
            distance_max: self.distance_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Scenario of the evaluation sets.
    pub fn test_spec(&self) -> Result<HybridChannelSpec<f64>> {
        let spec = self
            .spec()?
            .with_paths(self.test_paths, self.test_far_paths);
        spec.validate()?;
        Ok(spec)
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        square_factorization(self.antennas)
    }

    pub fn model_config(&self) -> XlcnetConfig {
        let (rows, cols) = self.grid().unwrap_or((0, 0));
        XlcnetConfig {
            layers: self.layers,
            hidden: self.hidden_channels,
            kernel: self.kernel_size,
            io_channels: 2,
            rows,
            cols,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            learning_rate: self.finetune_learning_rate,
        }
    }

    pub fn train_snr(&self) -> SnrRange {
        SnrRange::Uniform {
            lo: self.train_snr_min,
            hi: self.train_snr_max,
        }
    }
}
