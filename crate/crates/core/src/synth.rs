//! Synthetic spatio-temporal streams with a planted CP structure.
//!
//! Temporal columns follow AR processes around a level, spatial columns are
//! mixtures of Gaussian bumps, and bursts lift every temporal column over a
//! window. The generator returns both the noisy tensor and the planted model.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::DEFAULT_AR_COEFFICIENTS;
use crate::tensor::{DenseTensor, Dims, KruskalModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Burst {
    /// First affected time index.
    pub t: usize,
    /// Rise of the mean slice value while the burst lasts.
    pub magnitude: f64,
    pub duration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dims: Dims,
    pub rank: usize,
    /// AR coefficients per temporal component; a single entry is shared.
    pub ar: Vec<Vec<f64>>,
    pub innovation_sigma: f64,
    /// Mean of every temporal column.
    pub level: f64,
    /// Gaussian bumps per spatial column.
    pub bumps: usize,
    /// Bump width as a fraction of the axis length.
    pub bump_width: f64,
    /// Observation noise as a fraction of the clean signal RMS.
    pub noise_sigma: f64,
    pub bursts: Vec<Burst>,
    /// Clamp temporal factors at zero before bursts are added.
    pub nonneg: bool,
    /// AR steps discarded before the first kept value.
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dims: [250, 12, 10],
            rank: 3,
            ar: vec![DEFAULT_AR_COEFFICIENTS.to_vec()],
            innovation_sigma: 0.3,
            level: 2.0,
            bumps: 2,
            bump_width: 0.2,
            noise_sigma: 0.05,
            bursts: vec![
                Burst { t: 110, magnitude: 6.0, duration: 4 },
                Burst { t: 175, magnitude: 8.0, duration: 3 },
                Burst { t: 215, magnitude: 5.0, duration: 5 },
            ],
            nonneg: true,
            burn_in: 50,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| Error::config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config(format!("dims must be positive, got {:?}", self.dims)));
        }
        if self.rank == 0 {
            return Err(Error::config("rank must be at least 1"));
        }
        if self.ar.len() != 1 && self.ar.len() != self.rank {
            return Err(Error::config(format!(
                "need 1 or {} AR coefficient lists, got {}",
                self.rank,
                self.ar.len()
            )));
        }
        for (name, s) in [
            ("innovation_sigma", self.innovation_sigma),
            ("noise_sigma", self.noise_sigma),
            ("bump_width", self.bump_width),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.bumps == 0 {
            return Err(Error::config("at least one spatial bump is needed"));
        }
        if let Some(b) = self.bursts.iter().find(|b| b.t >= self.dims[0]) {
            return Err(Error::config(format!("burst at t={} outside [0, {})", b.t, self.dims[0])));
        }
        Ok(())
    }

    fn ar_for(&self, r: usize) -> &[f64] {
        if self.ar.len() == 1 { &self.ar[0] } else { &self.ar[r] }
    }
}

fn temporal(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = spec.dims[0];
    let innovation = Normal::new(0.0, spec.innovation_sigma).expect("validated sigma");
    let mut a = DMatrix::zeros(n, spec.rank);
    for r in 0..spec.rank {
        let alpha = spec.ar_for(r);
        let mut x = vec![0.0; spec.burn_in + n];
        for t in 0..x.len() {
            let mut v = innovation.sample(rng);
            for (j, c) in alpha.iter().enumerate() {
                if t > j {
                    v += c * x[t - j - 1];
                }
            }
            x[t] = v;
        }
        for t in 0..n {
            let v = spec.level + x[spec.burn_in + t];
            a[(t, r)] = if spec.nonneg { v.max(0.0) } else { v };
        }
    }
    a
}

fn spatial(len: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let width = (spec.bump_width * len as f64).max(0.5);
    let mut m = DMatrix::zeros(len, spec.rank);
    for r in 0..spec.rank {
        for _ in 0..spec.bumps {
            let center = rng.random_range(0.0..len as f64);
            let height = rng.random_range(0.5..1.5);
            for i in 0..len {
                let z = (i as f64 - center) / width;
                m[(i, r)] += height * (-0.5 * z * z).exp();
            }
        }
    }
    m
}

/// Noisy tensor and the planted model it was drawn from.
pub fn generate(spec: &SyntheticSpec) -> Result<(DenseTensor, KruskalModel)> {
    spec.validate()?;
    let [ni, nj, nk] = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut a = temporal(spec, &mut rng);
    let b = spatial(nj, spec, &mut rng);
    let c = spatial(nk, spec, &mut rng);

    // slice mean of Σ_r B C per unit added to every temporal column
    let gain: f64 = (0..spec.rank)
        .map(|r| b.column(r).mean() * c.column(r).mean())
        .sum();
    for burst in &spec.bursts {
        let shift = burst.magnitude / gain;
        for t in burst.t..(burst.t + burst.duration).min(ni) {
            a.row_mut(t).add_scalar_mut(shift);
        }
    }

    let planted = KruskalModel::new(a, b, c)?;
    let clean = planted.reconstruct();
    if spec.noise_sigma == 0.0 {
        return Ok((clean, planted));
    }
    let rms = (clean.values().iter().map(|v| v * v).sum::<f64>() / clean.values().len() as f64).sqrt();
    let noise = Normal::new(0.0, spec.noise_sigma * rms).expect("validated sigma");
    let values = clean.into_values().into_iter().map(|v| v + noise.sample(&mut rng)).collect();
    Ok((DenseTensor::new([ni, nj, nk], values)?, planted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matricize_dense, Mode};

    fn quiet(dims: Dims) -> SyntheticSpec {
        SyntheticSpec {
            dims,
            noise_sigma: 0.0,
            bursts: vec![],
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn noise_free_tensor_has_planted_rank() {
        let (x, planted) = generate(&quiet([60, 8, 7])).unwrap();
        assert_eq!(planted.rank(), 3);
        let s = matricize_dense(&x, Mode::One).singular_values();
        let mut s: Vec<f64> = s.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        assert!(s[2] / s[0] > 1e-6);
        assert!(s[3] / s[0] < 1e-10, "{:?}", &s[..5]);
    }

    #[test]
    fn same_seed_same_output() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec.clone() };
        assert_ne!(generate(&spec).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn burst_lifts_mean_slice_by_its_magnitude() {
        let spec = SyntheticSpec {
            bursts: vec![Burst { t: 40, magnitude: 10.0, duration: 3 }],
            ..quiet([80, 6, 6])
        };
        let (x, _) = generate(&spec).unwrap();
        let (clean, _) = generate(&SyntheticSpec { bursts: vec![], ..spec.clone() }).unwrap();
        let mean = |t: &DenseTensor, i| t.slice(i).mean();
        for i in 40..43 {
            let rise = mean(&x, i) - mean(&clean, i);
            assert!((rise - 10.0).abs() < 1e-9, "{rise}");
        }
        assert_eq!(mean(&x, 43), mean(&clean, 43));
        let pre: f64 = (30..40).map(|i| mean(&x, i)).sum::<f64>() / 10.0;
        assert!(((mean(&x, 40) - pre) - 10.0).abs() < 2.0);
    }

    #[test]
    fn noise_is_centered() {
        let spec = SyntheticSpec { noise_sigma: 0.1, bursts: vec![], ..SyntheticSpec::default() };
        let (x, planted) = generate(&spec).unwrap();
        let clean = planted.reconstruct();
        let n = x.values().len() as f64;
        let diffs: Vec<f64> = x.values().iter().zip(clean.values()).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let rms = (clean.values().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let sigma = 0.1 * rms;
        assert!(mean.abs() <= 3.0 * sigma / n.sqrt());
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd / sigma - 1.0).abs() < 0.05);
    }

    #[test]
    fn nonneg_clamps_temporal_factors() {
        let spec = SyntheticSpec { level: 0.0, innovation_sigma: 1.0, ..quiet([100, 4, 4]) };
        let (_, planted) = generate(&spec).unwrap();
        assert!(planted.a().iter().all(|v| *v >= 0.0));
        let free = SyntheticSpec { nonneg: false, ..spec };
        assert!(generate(&free).unwrap().1.a().iter().any(|v| *v < 0.0));
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let spec = SyntheticSpec::default();
        assert_eq!(SyntheticSpec::from_toml_str(&spec.to_toml_string()).unwrap(), spec);
        let partial = SyntheticSpec::from_toml_str("dims = [30, 4, 5]\nrank = 2\nseed = 7\nbursts = []\n").unwrap();
        assert_eq!(partial.dims, [30, 4, 5]);
        assert_eq!(partial.ar, SyntheticSpec::default().ar);
        assert!(SyntheticSpec::from_toml_str("rank = 0").is_err());
        assert!(SyntheticSpec::from_toml_str("dims = [10, 2, 2]\n[[bursts]]\nt = 10\nmagnitude = 1.0\nduration = 1\n").is_err());
        assert!(SyntheticSpec::from_toml_str("noise_sigma = -1.0").is_err());
        assert!(SyntheticSpec::from_toml_str("rank = 3\nar = [[0.5], [0.2]]").is_err());
        assert!(SyntheticSpec::from_toml_str("bogus = 1").is_err());
    }
}
