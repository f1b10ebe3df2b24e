use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_input, pad_to_multiple, GROUP_GENERATOR};
use crate::autograd::{PadMode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::scalar::Real;

/// Residual blocks in the generator.
pub const RES_BLOCKS: usize = 9;
/// Residual blocks that belong to the encoder.
pub const ENCODER_RES_BLOCKS: usize = 5;
/// Names of the tappable encoder layers, indexed by tap id.
pub const TAP_NAMES: [&str; 3 + ENCODER_RES_BLOCKS] = ["stem", "down1", "down2", "res1", "res2", "res3", "res4", "res5"];
/// Stem, both down stages, and residual blocks 2 and 5.
pub const DEFAULT_TAPS: [usize; 5] = [0, 1, 2, 4, 7];

const INIT: Init = Init::Normal(0.02);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub channels: usize,
    /// Width of the stem; the down stages use 2x and 4x this.
    pub base_width: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            channels: 1,
            base_width: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_width == 0 {
            return Err(Error::Architecture("generator channels and width must be positive".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> [usize; 3] {
        [self.base_width, 2 * self.base_width, 4 * self.base_width]
    }
}

/// ResNet-style image-to-image generator.
///
/// `stem (7x7) -> down1 -> down2 -> 9 residual blocks -> up1 -> up2 -> 7x7
/// -> tanh`, instance norm after every hidden convolution and reflection
/// padding throughout. Each down stage is a stride-1 3x3 convolution
/// followed by 2x2 average pooling; its tap is the pre-pooling activation.
/// The encoder is everything up to the fifth residual block.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub params: ParamStore<T>,
    config: GeneratorConfig,
    stem: Conv2d,
    down: [Conv2d; 2],
    res: Vec<[Conv2d; 2]>,
    up: [Conv2d; 2],
    out: Conv2d,
}

impl<T: Real> Generator<T> {
    pub fn new(config: &GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let [w1, w2, w4] = config.widths();
        let mut p = ParamStore::new(GROUP_GENERATOR);
        let stem = Conv2d::new(&mut p, rng, "stem", config.channels, w1, 7, 1, 0, INIT);
        let down = [
            Conv2d::new(&mut p, rng, "down1", w1, w2, 3, 1, 1, INIT),
            Conv2d::new(&mut p, rng, "down2", w2, w4, 3, 1, 1, INIT),
        ];
        let res = (1..=RES_BLOCKS)
            .map(|i| {
                [
                    Conv2d::new(&mut p, rng, &alloc::format!("res{i}.conv1"), w4, w4, 3, 1, 0, INIT),
                    Conv2d::new(&mut p, rng, &alloc::format!("res{i}.conv2"), w4, w4, 3, 1, 0, INIT),
                ]
            })
            .collect();
        let up = [
            Conv2d::new(&mut p, rng, "up1", w4, w2, 3, 1, 1, INIT),
            Conv2d::new(&mut p, rng, "up2", w2, w1, 3, 1, 1, INIT),
        ];
        let out = Conv2d::new(&mut p, rng, "out", w1, config.channels, 7, 1, 0, INIT);
        Ok(Self {
            params: p,
            config: config.clone(),
            stem,
            down,
            res,
            up,
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn res_blocks(&self) -> usize {
        self.res.len()
    }

    /// Smallest accepted image side.
    pub const MIN_SIDE: usize = 8;
    /// Inputs are padded up to a multiple of this, and the output cropped.
    pub const SIZE_MULTIPLE: usize = 4;

    fn check_tap(tap: usize) -> Result<()> {
        if tap < TAP_NAMES.len() {
            Ok(())
        } else {
            Err(Error::InvalidTap {
                requested: tap,
                valid: (0..TAP_NAMES.len()).collect(),
            })
        }
    }

    pub fn tap_channels(&self, tap: usize) -> Result<usize> {
        Self::check_tap(tap)?;
        let [w1, w2, w4] = self.config.widths();
        Ok(match tap {
            0 => w1,
            1 => w2,
            _ => w4,
        })
    }

    /// `(channels, height, width)` of a tap for an `h x w` input.
    pub fn tap_shape(&self, tap: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let c = self.tap_channels(tap)?;
        let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
        let div = match tap {
            0 | 1 => 1,
            2 => 2,
            _ => 4,
        };
        Ok((c, ph / div, pw / div))
    }

    fn conv_in_relu(&self, tape: &mut Tape<T>, conv: &Conv2d, x: Var) -> Var {
        let y = conv.forward(tape, &self.params, x);
        let y = tape.instance_norm(y);
        tape.relu(y)
    }

    fn res_block(&self, tape: &mut Tape<T>, block: &[Conv2d; 2], x: Var) -> Var {
        let y = tape.pad2d(x, (1, 1, 1, 1), PadMode::Reflect);
        let y = self.conv_in_relu(tape, &block[0], y);
        let y = tape.pad2d(y, (1, 1, 1, 1), PadMode::Reflect);
        let y = block[1].forward(tape, &self.params, y);
        let y = tape.instance_norm(y);
        tape.add(x, y)
    }

    /// Runs the encoder up to the deepest requested tap and returns the taps
    /// in the order requested.
    fn run_encoder(&self, tape: &mut Tape<T>, x: Var, taps: &[usize], full: bool) -> Result<(Vec<Var>, Var)> {
        for &t in taps {
            Self::check_tap(t)?;
        }
        let last = if full {
            TAP_NAMES.len() - 1
        } else {
            taps.iter().copied().max().unwrap_or(0)
        };
        let mut found: [Option<Var>; TAP_NAMES.len()] = [None; TAP_NAMES.len()];
        let h = tape.pad2d(x, (3, 3, 3, 3), PadMode::Reflect);
        let mut h = self.conv_in_relu(tape, &self.stem, h);
        found[0] = Some(h);
        for (i, conv) in self.down.iter().enumerate() {
            if last < i + 1 {
                break;
            }
            let y = self.conv_in_relu(tape, conv, h);
            found[i + 1] = Some(y);
            h = tape.avg_pool2(y);
        }
        for (i, block) in self.res.iter().take(ENCODER_RES_BLOCKS).enumerate() {
            if last < i + 3 {
                break;
            }
            h = self.res_block(tape, block, h);
            found[i + 3] = Some(h);
        }
        let out = taps.iter().map(|&t| found[t].expect("tap computed")).collect();
        Ok((out, h))
    }

    /// Encoder feature maps at the given taps.
    pub fn encode(&self, tape: &mut Tape<T>, x: Var, taps: &[usize]) -> Result<Vec<Var>> {
        check_input("generator", tape.shape(x), self.config.channels, Self::MIN_SIDE)?;
        let (x, _) = pad_to_multiple(tape, x, Self::SIZE_MULTIPLE);
        Ok(self.run_encoder(tape, x, taps, false)?.0)
    }

    /// Translated image.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_taps(tape, x, &[])?.0)
    }

    /// Translated image plus the encoder taps of the same pass.
    pub fn forward_with_taps(&self, tape: &mut Tape<T>, x: Var, taps: &[usize]) -> Result<(Var, Vec<Var>)> {
        check_input("generator", tape.shape(x), self.config.channels, Self::MIN_SIDE)?;
        let (xp, (h0, w0)) = pad_to_multiple(tape, x, Self::SIZE_MULTIPLE);
        let (tapped, mut h) = self.run_encoder(tape, xp, taps, true)?;
        for block in &self.res[ENCODER_RES_BLOCKS..] {
            h = self.res_block(tape, block, h);
        }
        for conv in &self.up {
            let u = tape.upsample_nearest2(h);
            h = self.conv_in_relu(tape, conv, u);
        }
        let h = tape.pad2d(h, (3, 3, 3, 3), PadMode::Reflect);
        let y = self.out.forward(tape, &self.params, h);
        let y = tape.tanh(y);
        let (hp, wp) = (tape.shape(y)[2], tape.shape(y)[3]);
        let y = if (hp, wp) != (h0, w0) { tape.crop(y, 0, 0, h0, w0) } else { y };
        Ok((y, tapped))
    }
}
