//! Network builders: the unpaired generator (whose first half is the
//! encoder used by the contrastive loss), the patch discriminator, the
//! DuSE-UNet segmenter and the projection heads.
//!
//! Each network owns a [`ParamStore`] tagged with its own group id so the
//! trainer can freeze or step them independently.

mod discriminator;
mod generator;
mod heads;
mod segmenter;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use generator::{Generator, GeneratorConfig, DEFAULT_TAPS, ENCODER_RES_BLOCKS, RES_BLOCKS, TAP_NAMES};
pub use heads::{HeadsConfig, ProjectionHeads};
pub use segmenter::{scse_combine, ScseCombine, Segmenter, SegmenterConfig, SegmenterKind, LEVELS, SE_REDUCTION};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng;
use crate::scalar::Real;

pub const GROUP_GENERATOR: u16 = 1;
pub const GROUP_DISCRIMINATOR: u16 = 2;
pub const GROUP_SEGMENTER: u16 = 3;
pub const GROUP_HEADS: u16 = 4;

/// Sizes of all four networks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub segmenter: SegmenterConfig,
    pub heads: HeadsConfig,
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.segmenter.validate()?;
        self.heads.validate()?;
        Ok(())
    }
}

/// One line of an architecture audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapSummary {
    pub index: usize,
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Structural facts about a built bundle, checked against the config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureAudit {
    pub residual_blocks: usize,
    pub encoder_residual_blocks: usize,
    pub generator_widths: [usize; 3],
    pub discriminator_widths: [usize; 3],
    pub segmenter_widths: [usize; 5],
    pub scse_blocks: usize,
    pub taps: Vec<TapSummary>,
    pub head_hidden: usize,
    pub head_out: usize,
    pub parameters: ParameterCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCounts {
    pub generator: usize,
    pub discriminator: usize,
    pub segmenter: usize,
    pub heads: usize,
}

/// The four networks trained together.
#[derive(Clone, Debug)]
pub struct ModelBundle<T> {
    pub config: ArchitectureConfig,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub segmenter: Segmenter<T>,
    pub heads: ProjectionHeads<T>,
}

impl<T: Real> ModelBundle<T> {
    /// Builds and initializes every network from independent random streams.
    pub fn init(config: &ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(&config.generator, &mut rng::derive(seed, rng::stream::GENERATOR_INIT))?;
        let discriminator = Discriminator::new(&config.discriminator, &mut rng::derive(seed, rng::stream::DISCRIMINATOR_INIT))?;
        let segmenter = Segmenter::new(&config.segmenter, &mut rng::derive(seed, rng::stream::SEGMENTER_INIT))?;
        let channels = config
            .heads
            .taps
            .iter()
            .map(|&t| generator.tap_channels(t))
            .collect::<Result<Vec<_>>>()?;
        let heads = ProjectionHeads::new(&config.heads, &channels, &mut rng::derive(seed, rng::stream::HEADS_INIT))?;
        Ok(Self {
            config: config.clone(),
            generator,
            discriminator,
            segmenter,
            heads,
        })
    }

    /// The four parameter stores in a fixed order.
    pub fn stores(&self) -> [(&'static str, &ParamStore<T>); 4] {
        [
            ("generator", &self.generator.params),
            ("discriminator", &self.discriminator.params),
            ("segmenter", &self.segmenter.params),
            ("heads", &self.heads.params),
        ]
    }

    pub fn stores_mut(&mut self) -> [(&'static str, &mut ParamStore<T>); 4] {
        [
            ("generator", &mut self.generator.params),
            ("discriminator", &mut self.discriminator.params),
            ("segmenter", &mut self.segmenter.params),
            ("heads", &mut self.heads.params),
        ]
    }

    /// Overwrites every parameter from `(group, [(name, tensor)])` lists as
    /// produced by [`ModelBundle::stores`]; names and shapes must match.
    pub fn load_params(&mut self, stores: &[(String, Vec<(String, crate::Tensor<T>)>)]) -> Result<()> {
        let expected = self.stores().map(|(n, _)| n);
        if stores.len() != expected.len() {
            return Err(Error::Architecture(format!(
                "expected {} parameter groups, found {}",
                expected.len(),
                stores.len()
            )));
        }
        for ((group, store), (name, tensors)) in self.stores_mut().into_iter().zip(stores) {
            if group != name {
                return Err(Error::Architecture(format!("expected group `{group}`, found `{name}`")));
            }
            assign_store(group, store, tensors)?;
        }
        Ok(())
    }

    pub fn audit(&self, input_size: usize) -> Result<ArchitectureAudit> {
        let g = &self.config.generator;
        let taps = self
            .config
            .heads
            .taps
            .iter()
            .map(|&t| {
                let (c, h, w) = self.generator.tap_shape(t, input_size, input_size)?;
                Ok(TapSummary {
                    index: t,
                    name: TAP_NAMES[t].into(),
                    channels: c,
                    height: h,
                    width: w,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ArchitectureAudit {
            residual_blocks: self.generator.res_blocks(),
            encoder_residual_blocks: ENCODER_RES_BLOCKS,
            generator_widths: g.widths(),
            discriminator_widths: self.config.discriminator.widths(),
            segmenter_widths: self.config.segmenter.widths(),
            scse_blocks: self.segmenter.scse_blocks(),
            taps,
            head_hidden: self.config.heads.hidden,
            head_out: self.config.heads.out,
            parameters: ParameterCounts {
                generator: self.generator.params.num_scalars(),
                discriminator: self.discriminator.params.num_scalars(),
                segmenter: self.segmenter.params.num_scalars(),
                heads: self.heads.params.num_scalars(),
            },
        })
    }
}

/// Copies named tensors into `store`, requiring identical names, order and shapes.
pub fn assign_store<T: Real>(group: &str, store: &mut ParamStore<T>, tensors: &[(String, crate::Tensor<T>)]) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Architecture(format!(
            "{group}: expected {} tensors, found {}",
            store.len(),
            tensors.len()
        )));
    }
    for (i, (name, t)) in tensors.iter().enumerate() {
        if store.name(i) != name {
            return Err(Error::Architecture(format!(
                "{group}: tensor {i} is `{name}`, expected `{}`",
                store.name(i)
            )));
        }
        if store.tensor(i).shape() != t.shape() {
            return Err(Error::Architecture(format!(
                "{group}.{name}: expected shape {:?}, found {:?} (was the checkpoint built with different widths?)",
                store.tensor(i).shape(),
                t.shape()
            )));
        }
    }
    for (i, (_, t)) in tensors.iter().enumerate() {
        store.tensor_mut(i).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// Reflect-pads `[n, c, h, w]` up to multiples of `multiple`; returns the
/// padded variable and the original size.
pub(crate) fn pad_to_multiple<T: Real>(
    tape: &mut crate::autograd::Tape<T>,
    x: crate::autograd::Var,
    multiple: usize,
) -> (crate::autograd::Var, (usize, usize)) {
    let (h, w) = (tape.shape(x)[2], tape.shape(x)[3]);
    let ph = h.div_ceil(multiple) * multiple - h;
    let pw = w.div_ceil(multiple) * multiple - w;
    if ph == 0 && pw == 0 {
        return (x, (h, w));
    }
    let mode = if ph < h && pw < w {
        crate::autograd::PadMode::Reflect
    } else {
        crate::autograd::PadMode::Replicate
    };
    (tape.pad2d(x, (0, ph, 0, pw), mode), (h, w))
}

pub(crate) fn check_input(context: &'static str, shape: &[usize], channels: usize, min_side: usize) -> Result<()> {
    match *shape {
        [_, c, h, w] if c == channels && h >= min_side && w >= min_side => Ok(()),
        [_, c, _, _] if c == channels => Err(Error::InvalidShape {
            context,
            shape: shape.to_vec(),
            reason: "image too small for this network",
        }),
        _ => Err(Error::InvalidShape {
            context,
            shape: shape.to_vec(),
            reason: "unexpected channel count or rank",
        }),
    }
}

#[cfg(test)]
mod tests;
