use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generator::{DEFAULT_TAPS, TAP_NAMES};
use super::GROUP_HEADS;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamStore};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    /// Encoder taps fed to the contrastive loss, one head each.
    pub taps: Vec<usize>,
    pub hidden: usize,
    pub out: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            taps: DEFAULT_TAPS.to_vec(),
            hidden: 256,
            out: 256,
        }
    }
}

impl HeadsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Architecture("at least one encoder tap is required".into()));
        }
        for (i, &t) in self.taps.iter().enumerate() {
            if t >= TAP_NAMES.len() {
                return Err(Error::InvalidTap {
                    requested: t,
                    valid: (0..TAP_NAMES.len()).collect(),
                });
            }
            if self.taps[..i].contains(&t) {
                return Err(Error::Architecture(alloc::format!("tap {t} listed twice")));
            }
        }
        if self.hidden == 0 || self.out == 0 {
            return Err(Error::Architecture("projection head sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Per-tap two-layer MLPs mapping feature vectors to unit-norm embeddings.
#[derive(Clone, Debug)]
pub struct ProjectionHeads<T> {
    pub params: ParamStore<T>,
    config: HeadsConfig,
    layers: Vec<[Linear; 2]>,
    channels: Vec<usize>,
}

impl<T: Real> ProjectionHeads<T> {
    /// `channels[l]` is the feature width of tap `config.taps[l]`.
    pub fn new(config: &HeadsConfig, channels: &[usize], rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if channels.len() != config.taps.len() {
            return Err(Error::Architecture("one channel count per tap is required".into()));
        }
        let init = Init::Normal(0.02);
        let mut p = ParamStore::new(GROUP_HEADS);
        let layers = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let fc1 = Linear::new(&mut p, rng, &alloc::format!("head{l}.fc1"), c, config.hidden, init);
                let fc2 = Linear::new(&mut p, rng, &alloc::format!("head{l}.fc2"), config.hidden, config.out, init);
                // Nonzero biases keep all-zero feature vectors (dead ReLU
                // locations) from projecting to the zero vector.
                for (layer, fan_in) in [(&fc1, c), (&fc2, config.hidden)] {
                    let bound = 1.0 / num_traits::Float::sqrt(fan_in as f64);
                    for b in p.get_mut(layer.bias).data_mut() {
                        *b = T::of(rng.random_range(-bound..bound));
                    }
                }
                [fc1, fc2]
            })
            .collect();
        Ok(Self {
            params: p,
            config: config.clone(),
            layers,
            channels: channels.to_vec(),
        })
    }

    pub fn config(&self) -> &HeadsConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.layers.len()
    }

    /// Embeds `[rows, c]` features with head `layer`: `[rows, out]`, unit rows.
    pub fn embed(&self, tape: &mut Tape<T>, layer: usize, features: Var) -> Var {
        let [fc1, fc2] = &self.layers[layer];
        let h = fc1.forward(tape, &self.params, features);
        let h = tape.relu(h);
        let h = fc2.forward(tape, &self.params, h);
        tape.l2_normalize_rows(h)
    }

    /// Embeds the feature vectors at flattened `locations` of batch `item`
    /// of the feature map `fmap` (`[n, c, h, w]`).
    pub fn project(&self, tape: &mut Tape<T>, layer: usize, fmap: Var, item: usize, locations: &[usize]) -> Result<Var> {
        if layer >= self.layers.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "head {layer} requested but only {} exist",
                self.layers.len()
            )));
        }
        let shape = tape.shape(fmap).to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::InvalidShape {
                context: "projection head",
                shape,
                reason: "expected [batch, channels, height, width]",
            });
        };
        if c != self.channels[layer] {
            return Err(Error::ShapeMismatch {
                context: "projection head channels",
                left: alloc::vec![c],
                right: alloc::vec![self.channels[layer]],
            });
        }
        if item >= n {
            return Err(Error::InvalidArgument(alloc::format!("batch item {item} of {n}")));
        }
        if let Some(&bad) = locations.iter().find(|&&l| l >= h * w) {
            return Err(Error::LocationOutOfRange {
                location: bad,
                height: h,
                width: w,
            });
        }
        let rows = tape.gather_locations(fmap, item, locations);
        Ok(self.embed(tape, layer, rows))
    }
}
