use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{mix64, LabeledDataset, Predictor, RngSeed, Trainer, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::scaling::ScalingLaw;
use crate::stats::normal_quantile;

/// Systematic error of the simulated predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum BiasProfile {
    Zero,
    /// Adds `c` to every prediction.
    Constant(f64),
    /// Adds `slope * (1 + x_1)`, so the bias depends on the features.
    Drifting(f64),
}

impl BiasProfile {
    #[inline]
    fn at(self, x: &[f64]) -> f64 {
        match self {
            BiasProfile::Zero => 0.0,
            BiasProfile::Constant(c) => c,
            BiasProfile::Drifting(slope) => slope * (1.0 + x[0]),
        }
    }

    /// Variance the bias contributes to the residual when `x_1 ~ N(0, 1)`.
    fn variance(self) -> f64 {
        match self {
            BiasProfile::Drifting(slope) => slope * slope,
            _ => 0.0,
        }
    }

    fn slope(self) -> f64 {
        match self {
            BiasProfile::Drifting(slope) => slope,
            _ => 0.0,
        }
    }

    /// Mean of the bias over the feature distribution.
    pub fn mean(self) -> f64 {
        match self {
            BiasProfile::Zero => 0.0,
            BiasProfile::Constant(c) => c,
            BiasProfile::Drifting(slope) => slope,
        }
    }
}

/// Deterministic standard-normal value attached to a feature vector.
///
/// Distinct feature vectors map to effectively independent draws, so over
/// random features this behaves like fresh `N(0, 1)` noise while staying a
/// pure function of `x`.
#[inline]
pub(crate) fn normal_field(x: &[f64], seed: u64) -> f64 {
    let mut h = mix64(seed ^ 0x5851_f42d_4c95_7f2d);
    for v in x {
        h = mix64(h ^ v.to_bits());
    }
    let u = ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    normal_quantile(u)
}

/// Outcome model: `Y = mu + c * x_1 + sqrt(v_eps) * zeta(x)` with
/// `x ~ N(0, I_d)` and `zeta` a fixed normal field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub true_mean: f64,
    pub signal: f64,
    pub noise_sd: f64,
    pub feature_dim: usize,
    pub field_seed: u64,
}

impl Population {
    #[inline]
    pub fn outcome(&self, x: &[f64]) -> f64 {
        let noise = if self.noise_sd == 0.0 {
            0.0
        } else {
            self.noise_sd * normal_field(x, self.field_seed)
        };
        self.true_mean + self.signal * x[0] + noise
    }

    fn draw_features(&self, rows: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..rows * self.feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Independent labeled and unlabeled samples.
    pub fn draw(&self, n: usize, m: usize, seed: RngSeed) -> Result<(LabeledDataset, UnlabeledDataset)> {
        let mut rng = seed.derive(0).rng();
        let features = self.draw_features(n, &mut rng);
        let outcomes = features
            .chunks_exact(self.feature_dim)
            .map(|x| self.outcome(x))
            .collect();
        let labeled = LabeledDataset::new(self.feature_dim, features, outcomes)?;
        let mut rng = seed.derive(1).rng();
        let pool = UnlabeledDataset::new(self.feature_dim, self.draw_features(m, &mut rng))?;
        Ok((labeled, pool))
    }

    pub fn variance(&self) -> f64 {
        self.signal * self.signal + self.noise_sd * self.noise_sd
    }
}

fn default_true() -> bool {
    true
}

fn default_field_seed() -> u64 {
    0x00c0_ffee
}

/// A synthetic task whose simulated fine-tuned predictors follow `law`
/// exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub true_mean: f64,
    pub var_y: f64,
    pub feature_dim: usize,
    pub law: ScalingLaw,
    pub bias_profile: BiasProfile,
    /// Smallest supported fine-tuning size.
    pub s_min: u64,
    /// When false every trainer seed yields the same predictor.
    #[serde(default = "default_true")]
    pub training_noise: bool,
    #[serde(default = "default_field_seed")]
    pub field_seed: u64,
}

impl SyntheticWorld {
    pub fn new(
        true_mean: f64,
        var_y: f64,
        feature_dim: usize,
        law: ScalingLaw,
        bias_profile: BiasProfile,
        s_min: u64,
    ) -> Result<Self> {
        let world = Self {
            true_mean,
            var_y,
            feature_dim,
            law,
            bias_profile,
            s_min,
            training_noise: true,
            field_seed: default_field_seed(),
        };
        world.validate()?;
        Ok(world)
    }

    pub fn with_training_noise(mut self, on: bool) -> Self {
        self.training_noise = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.law.validate()?;
        if !(self.true_mean.is_finite()) {
            return Err(Error::InvalidParameter("true_mean must be finite".into()));
        }
        if !(self.var_y.is_finite() && self.var_y > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "var_y must be positive, got {}",
                self.var_y
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidParameter("feature_dim must be at least 1".into()));
        }
        if self.s_min == 0 {
            return Err(Error::InvalidParameter("s_min must be at least 1".into()));
        }
        let worst = self.law.variance_at(self.s_min as f64);
        if worst > self.var_y {
            return Err(Error::InvalidParameter(format!(
                "residual variance {worst} at s_min = {} exceeds var_y = {}",
                self.s_min, self.var_y
            )));
        }
        if self.bias_profile.variance() > self.law.b {
            return Err(Error::InvalidParameter(
                "drifting bias variance exceeds the noise floor b".into(),
            ));
        }
        if !self.bias_profile.mean().is_finite() {
            return Err(Error::InvalidParameter("bias must be finite".into()));
        }
        Ok(())
    }

    /// Outcome noise variance left after the linear signal.
    fn noise_var(&self) -> f64 {
        self.law.b - self.bias_profile.variance()
    }

    fn signal(&self) -> f64 {
        (self.var_y - self.noise_var()).sqrt()
    }

    pub fn population(&self) -> Population {
        Population {
            true_mean: self.true_mean,
            signal: self.signal(),
            noise_sd: self.noise_var().sqrt(),
            feature_dim: self.feature_dim,
            field_seed: self.field_seed,
        }
    }

    pub fn generate(&self, n: usize, m: usize, seed: RngSeed) -> Result<(LabeledDataset, UnlabeledDataset)> {
        self.population().draw(n, m, seed)
    }

    /// Population variance of the predictions of a predictor with residual
    /// variance `law(s)` under this world's law.
    pub fn prediction_variance(&self, law: &ScalingLaw, s: f64) -> f64 {
        let c = self.signal() + self.bias_profile.slope();
        let w = self.learned_noise_weight(law);
        c * c + w * w + law.a * s.powf(-law.alpha)
    }

    /// Weight on the outcome noise field that brings the floor down to `law.b`.
    fn learned_noise_weight(&self, law: &ScalingLaw) -> f64 {
        let target = (law.b - self.bias_profile.variance()).max(0.0);
        self.noise_var().sqrt() - target.sqrt()
    }

    /// Predictor whose residual variance is `law.variance_at(s)`.
    pub fn predictor(&self, law: &ScalingLaw, s: f64, noise_seed: u64) -> Predictor {
        let pop = self.population();
        let bias = self.bias_profile;
        let spread = (law.a * s.powf(-law.alpha)).sqrt();
        let w = self.learned_noise_weight(law);
        let field_seed = self.field_seed;
        let trained_on = (s >= 1.0).then_some(s as usize);
        Predictor::new(
            move |x| {
                let mut f = pop.true_mean + pop.signal * x[0] + bias.at(x);
                if w != 0.0 {
                    f += w * normal_field(x, field_seed);
                }
                f + spread * normal_field(x, noise_seed)
            },
            trained_on,
        )
    }

    /// Untuned predictor standing in for prompting without task labels.
    pub fn untuned_predictor(&self, noise_seed: u64) -> Predictor {
        let p = self.predictor(&self.law, 1.0, noise_seed);
        Predictor::new(move |x| p.predict(x), None)
    }

    pub fn trainer(&self, seed: RngSeed) -> SimTrainer {
        SimTrainer {
            world: *self,
            law: self.law,
            seed,
        }
    }
}

/// Stand-in for fine-tuning: the predictor trained on `s` samples has
/// residual variance exactly `law(s)` and the world's bias profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimTrainer {
    pub world: SyntheticWorld,
    /// The law realized by this trainer; differs from the world's law when
    /// extra fine-tuning data is available.
    pub law: ScalingLaw,
    pub seed: RngSeed,
}

impl SimTrainer {
    /// Same trainer with its noise floor lowered to `b * (1 - strength)`.
    pub fn with_external_data(mut self, strength: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::InvalidParameter(format!(
                "external strength must lie in [0, 1], got {strength}"
            )));
        }
        let b = self.world.law.b * (1.0 - strength);
        if b < self.world.bias_profile.variance() {
            return Err(Error::InvalidParameter(
                "external data cannot remove the drifting bias variance".into(),
            ));
        }
        self.law = ScalingLaw { b, ..self.world.law };
        Ok(self)
    }

    fn noise_seed(&self) -> u64 {
        if self.world.training_noise {
            mix64(self.seed.0 ^ 0x7f4a_7c15_9e37_79b9)
        } else {
            mix64(self.world.field_seed ^ 0x1f83_d9ab_fb41_bd6b)
        }
    }
}

impl Trainer for SimTrainer {
    fn train(&self, ft_data: &LabeledDataset) -> Result<Predictor> {
        let s = ft_data.len();
        if (s as u64) < self.world.s_min {
            return Err(Error::UnsupportedSize {
                s,
                s_min: self.world.s_min as usize,
            });
        }
        Ok(self.world.predictor(&self.law, s as f64, self.noise_seed()))
    }
}

/// Labeled and unlabeled samples of `world`.
pub fn generate_world_data(
    world: &SyntheticWorld,
    n: usize,
    m: usize,
    seed: RngSeed,
) -> Result<(LabeledDataset, UnlabeledDataset)> {
    world.generate(n, m, seed)
}

/// Trains the simulated predictor on `ft_data`.
pub fn sim_train(trainer: &SimTrainer, ft_data: &LabeledDataset) -> Result<Predictor> {
    trainer.train(ft_data)
}
