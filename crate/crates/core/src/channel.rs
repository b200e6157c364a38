//! Far-, near- and hybrid-field channel generation for a uniform linear array.

use num_complex::Complex;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::ComplexMatrix;
use crate::rng::{complex_gaussian, uniform};
use crate::scalar::Scalar;

pub type ComplexVector<T> = Vec<Complex<T>>;

/// Uniform linear array at the base station.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGeometry<T> {
    pub antennas: usize,
    pub wavelength: T,
    pub spacing: T,
}

impl<T: Scalar> ArrayGeometry<T> {
    /// Half-wavelength array.
    pub fn new(antennas: usize, wavelength: T) -> Result<Self> {
        Self::with_spacing(antennas, wavelength, wavelength / T::lit(2.0))
    }

    pub fn with_spacing(antennas: usize, wavelength: T, spacing: T) -> Result<Self> {
        let g = Self {
            antennas,
            wavelength,
            spacing,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 {
            return Err(Error::InvalidGeometry(
                "antenna count must be at least 1".into(),
            ));
        }
        if !(self.wavelength > T::zero()) || !self.wavelength.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "wavelength must be positive and finite, got {}",
                self.wavelength
            )));
        }
        if !(self.spacing > T::zero()) || !self.spacing.is_finite() {
            return Err(Error::InvalidGeometry(format!(
                "antenna spacing must be positive and finite, got {}",
                self.spacing
            )));
        }
        Ok(())
    }

    fn norm_factor(&self) -> T {
        T::one() / T::from_usize(self.antennas).expect("antenna count").sqrt()
    }
}

/// One propagation path. `distance` is `None` for far-field paths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathParams<T> {
    pub azimuth: T,
    pub distance: Option<T>,
    pub gain: Complex<T>,
}

/// Generative parameters of the hybrid-field model: the first `far_paths`
/// paths are planar-wave, the remaining ones spherical-wave.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HybridChannelSpec<T> {
    pub geometry: ArrayGeometry<T>,
    pub paths: usize,
    pub far_paths: usize,
    pub gain_power: T,
    pub distance_min: T,
    pub distance_max: T,
}

impl<T: Scalar> HybridChannelSpec<T> {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.paths == 0 {
            return Err(Error::InvalidArgument(
                "path count must be at least 1".into(),
            ));
        }
        if self.far_paths > self.paths {
            return Err(Error::InvalidArgument(format!(
                "far-field path count {} exceeds total path count {}",
                self.far_paths, self.paths
            )));
        }
        if !(self.gain_power > T::zero()) {
            return Err(Error::InvalidArgument(
                "average power gain must be positive".into(),
            ));
        }
        if !(self.distance_min > T::zero()) || self.distance_max < self.distance_min {
            return Err(Error::InvalidArgument(format!(
                "distance range [{}, {}] must satisfy 0 < min <= max",
                self.distance_min, self.distance_max
            )));
        }
        Ok(())
    }

    /// Same scenario with a different path split (e.g. pure near- or far-field test sets).
    pub fn with_paths(&self, paths: usize, far_paths: usize) -> Self {
        Self {
            paths,
            far_paths,
            ..*self
        }
    }

    /// Training sets should draw the far-field path count from `1..=floor(L/2)`.
    /// Returns a warning message when they don't.
    pub fn far_path_warning(&self) -> Option<String> {
        let upper = self.paths / 2;
        if (1..=upper).contains(&self.far_paths) {
            None
        } else {
            Some(format!(
                "far-field path count {} is outside the recommended training range 1..={} for {} paths",
                self.far_paths, upper, self.paths
            ))
        }
    }
}

fn check_azimuth<T: Scalar>(azimuth: T) -> Result<()> {
    let half_pi = T::FRAC_PI_2();
    // one ulp of slack for angles produced by arithmetic on pi/2
    let slack = half_pi * T::epsilon();
    if !azimuth.is_finite() || azimuth.abs() > half_pi + slack {
        return Err(Error::InvalidArgument(format!(
            "azimuth {azimuth} outside [-pi/2, pi/2]"
        )));
    }
    Ok(())
}

/// Planar-wave steering vector, phase referenced to the first antenna.
pub fn far_steering<T: Scalar>(
    azimuth: T,
    geometry: &ArrayGeometry<T>,
) -> Result<ComplexVector<T>> {
    geometry.validate()?;
    check_azimuth(azimuth)?;
    let amp = geometry.norm_factor();
    let step = -T::TAU() * geometry.spacing / geometry.wavelength * azimuth.sin();
    Ok((0..geometry.antennas)
        .map(|m| Complex::from_polar(amp, step * T::from_usize(m).expect("index")))
        .collect())
}

/// Spherical-wave steering vector for a scatterer at `distance` from the array centre.
pub fn near_steering<T: Scalar>(
    azimuth: T,
    distance: T,
    geometry: &ArrayGeometry<T>,
) -> Result<ComplexVector<T>> {
    geometry.validate()?;
    check_azimuth(azimuth)?;
    if !(distance > T::zero()) || !distance.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scatterer distance must be positive and finite, got {distance}"
        )));
    }
    let m = geometry.antennas;
    let amp = geometry.norm_factor();
    let k = T::TAU() / geometry.wavelength;
    let d = geometry.spacing;
    let sin = azimuth.sin();
    let two = T::lit(2.0);
    let total = T::from_usize(m).expect("antenna count");
    Ok((1..=m)
        .map(|idx| {
            let delta = (two * T::from_usize(idx).expect("index") - total - T::one()) / two;
            let offset = delta * d;
            let r_m =
                (distance * distance + offset * offset - two * distance * offset * sin).sqrt();
            // r_m - r without cancellation at large r
            let excess = (offset * offset - two * distance * offset * sin) / (r_m + distance);
            Complex::from_polar(amp, -k * excess)
        })
        .collect())
}

/// Near/far boundary `M^2 * lambda / 2`; defined only for half-wavelength arrays.
pub fn rayleigh_distance<T: Scalar>(geometry: &ArrayGeometry<T>) -> Result<T> {
    geometry.validate()?;
    let half = geometry.wavelength / T::lit(2.0);
    if (geometry.spacing - half).abs() > half * T::lit(1e-9) {
        return Err(Error::InvalidGeometry(format!(
            "Rayleigh distance closed form needs spacing = wavelength/2, got {} vs {}",
            geometry.spacing, half
        )));
    }
    let m = T::from_usize(geometry.antennas).expect("antenna count");
    Ok(m * m * geometry.wavelength / T::lit(2.0))
}

/// Draws `L` paths: `far_paths` planar ones first, then spherical ones.
pub fn sample_paths<T: Scalar, R: Rng + ?Sized>(
    spec: &HybridChannelSpec<T>,
    rng: &mut R,
) -> Vec<PathParams<T>> {
    let half_pi = T::FRAC_PI_2();
    (0..spec.paths)
        .map(|l| {
            let azimuth = uniform(rng, -half_pi, half_pi);
            let distance =
                (l >= spec.far_paths).then(|| uniform(rng, spec.distance_min, spec.distance_max));
            let gain = complex_gaussian(rng, spec.gain_power);
            PathParams {
                azimuth,
                distance,
                gain,
            }
        })
        .collect()
}

/// `h = sqrt(M/L) * sum_l g_l a_l`.
pub fn gen_channel<T: Scalar>(
    paths: &[PathParams<T>],
    geometry: &ArrayGeometry<T>,
) -> Result<ComplexVector<T>> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument(
            "channel needs at least one path".into(),
        ));
    }
    let scale = (T::from_usize(geometry.antennas).expect("antenna count")
        / T::from_usize(paths.len()).expect("path count"))
    .sqrt();
    let mut h = vec![Complex::new(T::zero(), T::zero()); geometry.antennas];
    for p in paths {
        let a = match p.distance {
            None => far_steering(p.azimuth, geometry)?,
            Some(r) => near_steering(p.azimuth, r, geometry)?,
        };
        let w = p.gain * scale;
        for (hm, am) in h.iter_mut().zip(&a) {
            *hm = *hm + w * am;
        }
    }
    Ok(h)
}

/// Draws a fresh channel realization from `spec`.
pub fn draw_channel<T: Scalar, R: Rng + ?Sized>(
    spec: &HybridChannelSpec<T>,
    rng: &mut R,
) -> Result<ComplexVector<T>> {
    let paths = sample_paths(spec, rng);
    gen_channel(&paths, &spec.geometry)
}

/// Stacks per-user channels as the columns of an `M x K` matrix.
pub fn assemble_multiuser<T: Scalar>(channels: &[ComplexVector<T>]) -> Result<ComplexMatrix<T>> {
    let first = channels
        .first()
        .ok_or_else(|| Error::InvalidArgument("no user channels".into()))?;
    let m = first.len();
    let k = channels.len();
    let mut out = ComplexMatrix::zeros(m, k);
    for (col, h) in channels.iter().enumerate() {
        if h.len() != m {
            return Err(Error::shape(
                format!("{m} antennas"),
                format!("user {col} with {}", h.len()),
            ));
        }
        for (row, z) in h.iter().enumerate() {
            out[(row, col)] = *z;
        }
    }
    Ok(out)
}

/// Euclidean norm of a complex vector.
pub fn norm<T: Scalar>(v: &[Complex<T>]) -> T {
    v.iter()
        .map(|z| z.norm_sqr())
        .fold(T::zero(), |a, b| a + b)
        .sqrt()
}

/// Modulus of the Hermitian inner product `a^H b`.
pub fn inner_modulus<T: Scalar>(a: &[Complex<T>], b: &[Complex<T>]) -> T {
    a.iter()
        .zip(b)
        .fold(Complex::new(T::zero(), T::zero()), |acc, (x, y)| {
            acc + x.conj() * y
        })
        .norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sample_stream;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};

    fn geom(m: usize) -> ArrayGeometry<f64> {
        ArrayGeometry::new(m, 0.01).unwrap()
    }

    #[test]
    fn far_steering_broadside_is_constant() {
        let a = far_steering(0.0, &geom(4)).unwrap();
        for z in a {
            assert!((z - Complex::new(0.5, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn far_steering_endfire_alternates() {
        let a = far_steering(FRAC_PI_2, &geom(4)).unwrap();
        let want = [0.5, -0.5, 0.5, -0.5];
        for (z, w) in a.iter().zip(want) {
            assert!((z - Complex::new(w, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn steering_vectors_have_unit_norm() {
        let g = geom(37);
        for phi in [-1.5, -0.3, 0.0, 0.7, 1.57] {
            assert!((norm(&far_steering(phi, &g).unwrap()) - 1.0).abs() < 1e-12);
            assert!((norm(&near_steering(phi, 12.5, &g).unwrap()) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn near_steering_symmetric_pair_at_broadside() {
        let a = near_steering(0.0, 3.0, &geom(2)).unwrap();
        assert!((a[0] - a[1]).norm() < 1e-15);
    }

    #[test]
    fn near_steering_far_limit() {
        let g = geom(16);
        let r = 1e4 * rayleigh_distance(&g).unwrap();
        let near = near_steering(FRAC_PI_6, r, &g).unwrap();
        let far = far_steering(-FRAC_PI_6, &g).unwrap();
        assert!(inner_modulus(&near, &far) >= 0.999);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(near_steering(0.1, 0.0, &geom(4)).is_err());
        assert!(near_steering(0.1, -2.0, &geom(4)).is_err());
        assert!(far_steering(f64::NAN, &geom(4)).is_err());
        assert!(far_steering(2.0, &geom(4)).is_err());
        assert!(ArrayGeometry::new(0, 0.01f64).is_err());
        assert!(ArrayGeometry::new(4, -1.0f64).is_err());
    }

    #[test]
    fn rayleigh_distance_examples() {
        assert!(
            (rayleigh_distance(&ArrayGeometry::new(200, 0.01f64).unwrap()).unwrap() - 200.0).abs()
                < 1e-9
        );
        assert!((rayleigh_distance(&geom(1)).unwrap() - 0.005).abs() < 1e-15);
        assert!((rayleigh_distance(&geom(256)).unwrap() - 327.68).abs() < 1e-9);
        let r1 = rayleigh_distance(&geom(50)).unwrap();
        let r2 = rayleigh_distance(&geom(100)).unwrap();
        assert_eq!(r2 / r1, 4.0);
        let odd = ArrayGeometry::with_spacing(8, 0.01, 0.007).unwrap();
        assert!(rayleigh_distance(&odd).is_err());
    }

    fn spec(paths: usize, far: usize) -> HybridChannelSpec<f64> {
        HybridChannelSpec {
            geometry: geom(64),
            paths,
            far_paths: far,
            gain_power: 1.0,
            distance_min: 10.0,
            distance_max: 80.0,
        }
    }

    #[test]
    fn sample_paths_split() {
        let mut rng = sample_stream(1, 0);
        let p = sample_paths(&spec(6, 1), &mut rng);
        assert_eq!(p.len(), 6);
        assert!(p[0].distance.is_none());
        assert!(p[1..]
            .iter()
            .all(|q| matches!(q.distance, Some(r) if (10.0..=80.0).contains(&r))));
        let p = sample_paths(&spec(4, 4), &mut rng);
        assert!(p.iter().all(|q| q.distance.is_none()));
        assert!(p.iter().all(|q| q.azimuth.abs() <= FRAC_PI_2));
    }

    #[test]
    fn single_far_path_unit_gain() {
        let g = geom(16);
        let path = PathParams {
            azimuth: 0.4,
            distance: None,
            gain: Complex::new(1.0, 0.0),
        };
        let h = gen_channel(&[path], &g).unwrap();
        let a = far_steering(0.4, &g).unwrap();
        for (x, y) in h.iter().zip(&a) {
            assert!((x - y * 4.0).norm() < 1e-12);
        }
        assert!((norm(&h).powi(2) - 16.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gains_give_zero_channel() {
        let g = geom(8);
        let paths = vec![
            PathParams {
                azimuth: 0.1,
                distance: None,
                gain: Complex::new(0.0, 0.0),
            },
            PathParams {
                azimuth: -0.5,
                distance: Some(20.0),
                gain: Complex::new(0.0, 0.0),
            },
        ];
        assert!(gen_channel(&paths, &g)
            .unwrap()
            .iter()
            .all(|z| z.norm() == 0.0));
        assert!(gen_channel::<f64>(&[], &g).is_err());
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let s = spec(6, 1);
        let a = draw_channel(&s, &mut sample_stream(5, 9)).unwrap();
        let b = draw_channel(&s, &mut sample_stream(5, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_validation_and_warning() {
        assert!(spec(6, 7).validate().is_err());
        assert!(spec(6, 1).validate().is_ok());
        assert!(spec(6, 1).far_path_warning().is_none());
        assert!(spec(6, 0).far_path_warning().is_some());
        assert!(spec(6, 4).far_path_warning().is_some());
    }

    #[test]
    fn multiuser_assembly() {
        let mut rng = sample_stream(3, 0);
        let h1 = draw_channel(&spec(3, 1), &mut rng).unwrap();
        let one = assemble_multiuser(std::slice::from_ref(&h1)).unwrap();
        assert_eq!(one.column(0), h1);
        let h2: Vec<_> = h1.iter().map(|z| z * 2.0).collect();
        let two = assemble_multiuser(&[h1.clone(), h2]).unwrap();
        for i in 0..h1.len() {
            assert_eq!(two[(i, 1)], two[(i, 0)] * 2.0);
        }
        assert!(assemble_multiuser(&[h1, vec![Complex::new(0.0, 0.0)]]).is_err());
    }
}
