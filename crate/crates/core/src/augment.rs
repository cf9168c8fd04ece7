//! Gaussian noise augmentation and the per-example choice of which version
//! feeds the speaker encoder.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MelSpectrogram;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Probability that an example uses the augmented pair.
    pub alpha: f64,
    /// Noise standard deviation in log-mel units.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            alpha: 0.5,
            sigma: 0.1,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            alpha: 0.0,
            ..AugmentPolicy::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("augment.alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("augment.sigma", format!("{} is not a valid std", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Version {
    Original,
    Augmented,
}

/// Which version of an example each path sees. The reconstruction target
/// is always the version the speaker encoder sees, and the content encoder
/// always sees the original.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepPlan {
    speaker_input: Version,
}

impl StepPlan {
    pub fn speaker_input(&self) -> Version {
        self.speaker_input
    }

    pub fn target(&self) -> Version {
        self.speaker_input
    }

    pub fn content_input(&self) -> Version {
        Version::Original
    }
}

pub fn plan_step(policy: &AugmentPolicy, rng: &mut impl Rng) -> StepPlan {
    let speaker_input = if rng.random_bool(policy.alpha.clamp(0.0, 1.0)) {
        Version::Augmented
    } else {
        Version::Original
    };
    StepPlan { speaker_input }
}

/// `x` plus i.i.d. `N(0, sigma²)` noise on every element.
pub fn add_noise(x: &Array2<f32>, sigma: f64, rng: &mut impl Rng) -> Array2<f32> {
    if sigma == 0.0 {
        return x.clone();
    }
    let normal = Normal::new(0.0f32, sigma as f32).expect("sigma is finite and non-negative");
    let mut out = x.clone();
    out.mapv_inplace(|v| v + normal.sample(rng));
    out
}

pub fn add_noise_mel(x: &MelSpectrogram, sigma: f64, rng: &mut impl Rng) -> Result<MelSpectrogram> {
    MelSpectrogram::new(add_noise(&x.values, sigma, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_is_identity() {
        let x = Array2::from_shape_fn((80, 10), |(i, j)| (i * j) as f32 * 0.01);
        assert_eq!(add_noise(&x, 0.0, &mut ChaCha8Rng::seed_from_u64(0)), x);
    }

    #[test]
    fn noise_moments_match_sigma() {
        let x = Array2::<f32>::zeros((80, 2000));
        let y = add_noise(&x, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        let n = y.len() as f64;
        let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 3.0 * 0.1 / n.sqrt(), "{mean}");
        assert!((std - 0.1).abs() < 0.005, "{std}");
    }

    #[test]
    fn noise_is_reproducible() {
        let x = Array2::<f32>::ones((4, 4));
        let a = add_noise(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(2));
        let b = add_noise(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
    }

    fn augmented_fraction(alpha: f64, draws: usize) -> f64 {
        let policy = AugmentPolicy {
            alpha,
            ..AugmentPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hits = (0..draws)
            .map(|_| plan_step(&policy, &mut rng))
            .inspect(|p| {
                assert_eq!(p.target(), p.speaker_input());
                assert_eq!(p.content_input(), Version::Original);
            })
            .filter(|p| p.speaker_input() == Version::Augmented)
            .count();
        hits as f64 / draws as f64
    }

    #[test]
    fn alpha_extremes() {
        assert_eq!(augmented_fraction(0.0, 1000), 0.0);
        assert_eq!(augmented_fraction(1.0, 1000), 1.0);
    }

    #[test]
    fn alpha_half_converges() {
        let f = augmented_fraction(0.5, 10_000);
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn out_of_range_policies_are_rejected() {
        for (alpha, sigma) in [(1.5, 0.1), (-0.1, 0.1), (0.5, -1.0), (0.5, f64::NAN)] {
            let p = AugmentPolicy { alpha, sigma, seed: 0 };
            assert!(matches!(p.validate(), Err(Error::Config { .. })));
        }
        AugmentPolicy::default().validate().unwrap();
    }
}
