use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::world::normal_field;
use crate::data::RngSeed;
use crate::error::{Error, Result};
use crate::m_estim::MEstimationData;

/// Linear model `y = theta_0 + theta_1 * x + eps` with `x ~ N(1, 1)` and a
/// fixed predictor `f(x) = theta_0 + theta_1 * x + bias + pred_noise * xi(x)`.
///
/// Features are emitted as `(1, x)` for the least-squares loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearWorld {
    pub theta: [f64; 2],
    pub noise_sd: f64,
    pub bias: f64,
    pub pred_noise_sd: f64,
    pub field_seed: u64,
}

impl LinearWorld {
    pub fn new(theta: [f64; 2], noise_sd: f64, bias: f64, pred_noise_sd: f64) -> Result<Self> {
        if !(noise_sd >= 0.0 && pred_noise_sd >= 0.0) || theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidParameter("invalid linear world".into()));
        }
        Ok(Self {
            theta,
            noise_sd,
            bias,
            pred_noise_sd,
            field_seed: 0x11ea_5eed,
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.theta[0] + self.theta[1] * x[1] + self.bias + self.pred_noise_sd * normal_field(x, self.field_seed)
    }

    pub fn draw(&self, n: usize, m: usize, seed: RngSeed) -> Result<MEstimationData> {
        let mut rng = seed.derive(0).rng();
        let mut lx = Vec::with_capacity(2 * n);
        let mut ly = Vec::with_capacity(n);
        let mut lf = Vec::with_capacity(n);
        for _ in 0..n {
            let x = [1.0, 1.0 + rng.sample::<f64, _>(StandardNormal)];
            let eps: f64 = rng.sample(StandardNormal);
            ly.push(self.theta[0] + self.theta[1] * x[1] + self.noise_sd * eps);
            lf.push(self.predict(&x));
            lx.extend_from_slice(&x);
        }
        let mut rng = seed.derive(1).rng();
        let mut ux = Vec::with_capacity(2 * m);
        let mut uf = Vec::with_capacity(m);
        for _ in 0..m {
            let x = [1.0, 1.0 + rng.sample::<f64, _>(StandardNormal)];
            uf.push(self.predict(&x));
            ux.extend_from_slice(&x);
        }
        MEstimationData::new(2, lx, ly, lf, ux, uf)
    }
}
