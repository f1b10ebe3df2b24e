use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_input, GROUP_DISCRIMINATOR};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::scalar::Real;

const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub base_width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            base_width: 64,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_width == 0 {
            return Err(Error::Architecture("discriminator channels and width must be positive".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.base_width, 2 * self.base_width, 4 * self.base_width]
    }
}

/// Patch discriminator: three 4x4 stride-2 stages with leaky ReLU (instance
/// norm on the last two) and a 1x1 projection to one logit per patch.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub params: ParamStore<T>,
    config: DiscriminatorConfig,
    stages: [Conv2d; 3],
    logit: Conv2d,
}

impl<T: Real> Discriminator<T> {
    /// Smallest accepted image side.
    pub const MIN_SIDE: usize = 8;

    pub fn new(config: &DiscriminatorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let [w1, w2, w4] = config.widths();
        let init = Init::Normal(0.02);
        let mut p = ParamStore::new(GROUP_DISCRIMINATOR);
        let stages = [
            Conv2d::new(&mut p, rng, "stage1", config.channels, w1, 4, 2, 1, init),
            Conv2d::new(&mut p, rng, "stage2", w1, w2, 4, 2, 1, init),
            Conv2d::new(&mut p, rng, "stage3", w2, w4, 4, 2, 1, init),
        ];
        let logit = Conv2d::new(&mut p, rng, "logit", w4, 1, 1, 1, 0, init);
        Ok(Self {
            params: p,
            config: config.clone(),
            stages,
            logit,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Patch logits `[n, 1, h/8, w/8]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        check_input("discriminator", tape.shape(x), self.config.channels, Self::MIN_SIDE)?;
        let mut h = x;
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(tape, &self.params, h);
            if i > 0 {
                h = tape.instance_norm(h);
            }
            h = tape.leaky_relu(h, T::of(SLOPE));
        }
        Ok(self.logit.forward(tape, &self.params, h))
    }
}
