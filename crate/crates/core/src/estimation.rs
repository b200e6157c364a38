//! Pilot observation, LS and LMMSE estimation, grid reshaping and NMSE.

use num_complex::Complex;
use rand::Rng;

use crate::channel::ComplexVector;
use crate::error::{Error, Result};
use crate::linalg::{sample_covariance, Cholesky, ComplexMatrix};
use crate::rng::complex_gaussian;
use crate::scalar::Scalar;

/// Received pilot `y = sqrt(P) h + z` with its power and noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T> {
    pub y: ComplexVector<T>,
    pub power: T,
    pub noise_power: T,
}

/// `10 log10(P / noise)`.
pub fn snr_db(power: f64, noise_power: f64) -> f64 {
    10.0 * (power / noise_power).log10()
}

/// Transmit power giving `snr_db` against unit noise power.
pub fn power_for_snr(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 10.0)
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

pub fn observe<T: Scalar, R: Rng + ?Sized>(
    h: &[Complex<T>],
    power: T,
    noise_power: T,
    rng: &mut R,
) -> Result<Observation<T>> {
    if !(power > T::zero()) || !power.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "transmit power must be positive, got {power}"
        )));
    }
    if !(noise_power >= T::zero()) || !noise_power.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "noise power must be non-negative, got {noise_power}"
        )));
    }
    let amp = power.sqrt();
    let y = h
        .iter()
        .map(|hm| {
            let z = complex_gaussian(rng, noise_power);
            hm * amp + z
        })
        .collect();
    Ok(Observation {
        y,
        power,
        noise_power,
    })
}

/// `h_LS = y / sqrt(P)`.
pub fn ls_estimate<T: Scalar>(obs: &Observation<T>) -> ComplexVector<T> {
    let inv = T::one() / obs.power.sqrt();
    obs.y.iter().map(|y| y * inv).collect()
}

pub fn empirical_covariance<T: Scalar>(samples: &[ComplexVector<T>]) -> Result<ComplexMatrix<T>> {
    sample_covariance(samples)
}

/// LMMSE shrinkage `W = R (R + (noise/P) I)^{-1}` for one noise-to-power ratio.
///
/// Building the filter costs one Cholesky solve; applying it is a mat-vec.
#[derive(Debug, Clone)]
pub struct LmmseFilter<T> {
    weights: Option<ComplexMatrix<T>>,
    pub diagonal_loading: T,
}

impl<T: Scalar> LmmseFilter<T> {
    pub fn new(covariance: &ComplexMatrix<T>, noise_to_power: T) -> Result<Self> {
        let m = covariance.rows();
        if covariance.cols() != m {
            return Err(Error::shape(
                "square covariance",
                format!("{}x{}", m, covariance.cols()),
            ));
        }
        if !(noise_to_power >= T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "noise-to-power ratio must be non-negative, got {noise_to_power}"
            )));
        }
        if noise_to_power == T::zero() {
            // noiseless: the LMMSE filter reduces to the identity
            return Ok(Self {
                weights: None,
                diagonal_loading: T::zero(),
            });
        }
        let mut system = covariance.clone();
        for i in 0..m {
            system[(i, i)].re = system[(i, i)].re + noise_to_power;
        }
        // (R + aI)^{-1} R equals R (R + aI)^{-1}: both are functions of R
        let (chol, loading) = match Cholesky::new(&system) {
            Ok(c) => (c, T::zero()),
            Err(_) => {
                let loading =
                    T::lit(1e-12) * covariance.trace().re / T::from_usize(m).expect("dimension");
                for i in 0..m {
                    system[(i, i)].re = system[(i, i)].re + loading;
                }
                (Cholesky::new(&system)?, loading)
            }
        };
        let weights = chol.solve(covariance)?;
        Ok(Self {
            weights: Some(weights),
            diagonal_loading: loading,
        })
    }

    pub fn apply(&self, ls: &[Complex<T>]) -> Result<ComplexVector<T>> {
        match &self.weights {
            None => Ok(ls.to_vec()),
            Some(w) => w.mat_vec(ls),
        }
    }
}

/// `R (R + (noise/P) I)^{-1} h_LS` for a single observation.
pub fn lmmse_estimate<T: Scalar>(
    obs: &Observation<T>,
    covariance: &ComplexMatrix<T>,
) -> Result<ComplexVector<T>> {
    let filter = LmmseFilter::new(covariance, obs.noise_power / obs.power)?;
    filter.apply(&ls_estimate(obs))
}

/// Two-channel real image of a complex vector: plane 0 holds real parts,
/// plane 1 imaginary parts, each `rows x cols` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); 2 * rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 2 * rows * cols {
            return Err(Error::shape(format!("2x{rows}x{cols} values"), data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Value at `(channel, row, col)`.
    pub fn at(&self, channel: usize, row: usize, col: usize) -> T {
        self.data[(channel * self.rows + row) * self.cols + col]
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64_lossy().powi(2)).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// Most-square factor pair `rows <= cols` of `m`. Primes are rejected.
pub fn square_factorization(m: usize) -> Result<(usize, usize)> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "cannot factor an empty array".into(),
        ));
    }
    let mut rows = (m as f64).sqrt() as usize;
    while rows > 1 && !m.is_multiple_of(rows) {
        rows -= 1;
    }
    while (rows + 1) * (rows + 1) <= m && m.is_multiple_of(rows + 1) {
        rows += 1;
    }
    if rows == 1 && m > 1 {
        return Err(Error::InvalidArgument(format!(
            "{m} antennas is prime and has no 2-D factorization; pad the array to a composite size"
        )));
    }
    Ok((rows, m / rows))
}

/// Row-major placement: antenna `m` (0-based) lands at `(m / cols, m % cols)`.
pub fn reshape_to_grid<T: Scalar>(h: &[Complex<T>], rows: usize, cols: usize) -> Result<Grid<T>> {
    if rows * cols != h.len() {
        return Err(Error::shape(
            format!("{rows}x{cols} = {} antennas", rows * cols),
            h.len(),
        ));
    }
    let plane = rows * cols;
    let mut data = vec![T::zero(); 2 * plane];
    for (m, z) in h.iter().enumerate() {
        data[m] = z.re;
        data[plane + m] = z.im;
    }
    Ok(Grid { rows, cols, data })
}

pub fn grid_to_vector<T: Scalar>(grid: &Grid<T>) -> ComplexVector<T> {
    let plane = grid.rows * grid.cols;
    (0..plane)
        .map(|m| Complex::new(grid.data[m], grid.data[plane + m]))
        .collect()
}

/// `||truth - estimate||_F^2 / ||truth||_F^2`, accumulated in `f64`.
pub fn nmse<T: Scalar>(truth: &Grid<T>, estimate: &Grid<T>) -> Result<f64> {
    nmse_slices(truth.as_slice(), estimate.as_slice())
}

pub(crate) fn nmse_slices<T: Scalar>(truth: &[T], estimate: &[T]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::shape(truth.len(), estimate.len()));
    }
    let mut err = 0.0;
    let mut energy = 0.0;
    for (t, e) in truth.iter().zip(estimate) {
        let (t, e) = (t.to_f64_lossy(), e.to_f64_lossy());
        err += (t - e) * (t - e);
        energy += t * t;
    }
    if energy == 0.0 {
        return Err(Error::InvalidArgument(
            "NMSE undefined for a zero-norm channel".into(),
        ));
    }
    Ok(err / energy)
}

/// NMSE between complex vectors (same value as on their grids).
pub fn nmse_vectors<T: Scalar>(truth: &[Complex<T>], estimate: &[Complex<T>]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::shape(truth.len(), estimate.len()));
    }
    let mut err = 0.0;
    let mut energy = 0.0;
    for (t, e) in truth.iter().zip(estimate) {
        let d = t - e;
        err += d.norm_sqr().to_f64_lossy();
        energy += t.norm_sqr().to_f64_lossy();
    }
    if energy == 0.0 {
        return Err(Error::InvalidArgument(
            "NMSE undefined for a zero-norm channel".into(),
        ));
    }
    Ok(err / energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sample_stream;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn noiseless_observation_scales() {
        let obs = observe(&[c(1.0, 0.0)], 4.0, 0.0, &mut sample_stream(0, 0)).unwrap();
        assert_eq!(obs.y, vec![c(2.0, 0.0)]);
        assert_eq!(ls_estimate(&obs), vec![c(1.0, 0.0)]);
    }

    #[test]
    fn snr_definition() {
        assert!((snr_db(10.0, 1.0) - 10.0).abs() < 1e-12);
        assert!((power_for_snr(20.0) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn observe_rejects_bad_power() {
        let mut rng = sample_stream(0, 0);
        assert!(observe(&[c(1.0, 0.0)], 0.0, 1.0, &mut rng).is_err());
        assert!(observe(&[c(1.0, 0.0)], 1.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn ls_is_scale_invariant() {
        let obs = Observation {
            y: vec![c(1.0, -2.0), c(0.5, 0.0)],
            power: 4.0,
            noise_power: 1.0,
        };
        let scaled = Observation {
            y: obs.y.iter().map(|z| z * 3.0).collect(),
            power: 36.0,
            noise_power: 1.0,
        };
        let a = ls_estimate(&obs);
        let b = ls_estimate(&scaled);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-15);
        }
    }

    #[test]
    fn lmmse_identity_covariance_halves() {
        let r = ComplexMatrix::<f64>::identity(3);
        let obs = Observation {
            y: vec![c(1.0, 1.0), c(2.0, 0.0), c(0.0, -4.0)],
            power: 1.0,
            noise_power: 1.0,
        };
        let est = lmmse_estimate(&obs, &r).unwrap();
        for (e, y) in est.iter().zip(&obs.y) {
            assert!((e - y * 0.5).norm() < 1e-12);
        }
    }

    #[test]
    fn lmmse_noiseless_is_ls() {
        let r = ComplexMatrix::<f64>::zeros(2, 2);
        let obs = Observation {
            y: vec![c(1.0, 1.0), c(2.0, 0.0)],
            power: 4.0,
            noise_power: 0.0,
        };
        assert_eq!(lmmse_estimate(&obs, &r).unwrap(), ls_estimate(&obs));
    }

    #[test]
    fn lmmse_rank_deficient_covariance_still_solves() {
        // rank-one R plus a tiny noise term is near-singular but PD
        let v = vec![c(1.0, 0.0), c(0.0, 1.0)];
        let r = sample_covariance(&[v]).unwrap();
        let f = LmmseFilter::new(&r, 1e-20).unwrap();
        assert!(f
            .apply(&[c(1.0, 0.0), c(0.0, 0.0)])
            .unwrap()
            .iter()
            .all(|z| z.re.is_finite()));
    }

    #[test]
    fn reshape_example() {
        let h = vec![c(1.0, 0.0), c(0.0, 2.0), c(3.0, 0.0), c(4.0, 0.0)];
        let g = reshape_to_grid(&h, 2, 2).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 0.0, 3.0, 4.0, 0.0, 2.0, 0.0, 0.0]);
        assert_eq!(grid_to_vector(&g), h);
        assert!(reshape_to_grid(&h, 3, 2).is_err());
    }

    #[test]
    fn factorization() {
        assert_eq!(square_factorization(256).unwrap(), (16, 16));
        assert_eq!(square_factorization(200).unwrap(), (10, 20));
        assert_eq!(square_factorization(12).unwrap(), (3, 4));
        assert_eq!(square_factorization(1).unwrap(), (1, 1));
        assert!(square_factorization(13).is_err());
        assert!(square_factorization(2).is_err());
    }

    #[test]
    fn nmse_examples() {
        let t = Grid::from_vec(1, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        assert_eq!(nmse(&t, &Grid::zeros(1, 2)).unwrap(), 1.0);
        let doubled = Grid::from_vec(1, 2, t.as_slice().iter().map(|v| v * 2.0).collect()).unwrap();
        assert!((nmse(&t, &doubled).unwrap() - 1.0).abs() < 1e-15);
        assert!(nmse(&Grid::<f64>::zeros(1, 2), &t).is_err());
    }
}
