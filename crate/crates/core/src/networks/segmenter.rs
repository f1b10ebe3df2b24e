use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_input, pad_to_multiple, GROUP_SEGMENTER};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore};
use crate::scalar::Real;

/// Resolution levels of the U-Net.
pub const LEVELS: usize = 5;
/// Channel reduction of the squeeze-excitation bottleneck.
pub const SE_REDUCTION: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmenterKind {
    /// U-Net with an scSE block after every level.
    #[default]
    DuseUnet,
    /// The same U-Net without recalibration blocks.
    Unet,
}

/// How the channel-gated and spatially-gated copies are merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScseCombine {
    #[default]
    Sum,
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub kind: SegmenterKind,
    pub channels: usize,
    /// Width of the top level; level `l` uses `base_width * 2^l`.
    pub base_width: usize,
    pub combine: ScseCombine,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            kind: SegmenterKind::DuseUnet,
            channels: 1,
            base_width: 32,
            combine: ScseCombine::Sum,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_width == 0 {
            return Err(Error::Architecture("segmenter channels and width must be positive".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        core::array::from_fn(|l| self.base_width << l)
    }
}

/// Concurrent spatial and channel squeeze-excitation.
#[derive(Clone, Debug)]
struct Scse {
    squeeze: Conv2d,
    excite: Conv2d,
    spatial: Conv2d,
}

impl Scse {
    fn new<T: Real>(p: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, c: usize) -> Self {
        let mid = (c / SE_REDUCTION).max(1);
        let init = Init::KaimingNormal;
        Self {
            squeeze: Conv2d::new(p, rng, &alloc::format!("{name}.cse.fc1"), c, mid, 1, 1, 0, init),
            excite: Conv2d::new(p, rng, &alloc::format!("{name}.cse.fc2"), mid, c, 1, 1, 0, init),
            spatial: Conv2d::new(p, rng, &alloc::format!("{name}.sse"), c, 1, 1, 1, 0, init),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var, combine: ScseCombine) -> Var {
        let g = tape.global_avg_pool(x);
        let g = self.squeeze.forward(tape, p, g);
        let g = tape.relu(g);
        let g = self.excite.forward(tape, p, g);
        let channel_gate = tape.sigmoid(g);
        let s = self.spatial.forward(tape, p, x);
        let spatial_gate = tape.sigmoid(s);
        scse_combine(tape, x, channel_gate, spatial_gate, combine)
    }
}

/// Applies a channel gate `[n, c, 1, 1]` and a spatial gate `[n, 1, h, w]`
/// to `x` and merges the two recalibrated copies.
pub fn scse_combine<T: Real>(tape: &mut Tape<T>, x: Var, channel_gate: Var, spatial_gate: Var, combine: ScseCombine) -> Var {
    let (c, h, w) = (tape.shape(x)[1], tape.shape(x)[2], tape.shape(x)[3]);
    let cg = tape.expand_spatial(channel_gate, h, w);
    let sg = tape.expand_channels(spatial_gate, c);
    let a = tape.mul(x, cg);
    let b = tape.mul(x, sg);
    match combine {
        ScseCombine::Sum => tape.add(a, b),
        ScseCombine::Mean => {
            let s = tape.add(a, b);
            tape.mul_const(s, T::of(0.5))
        }
        ScseCombine::Max => {
            // max(a, b) = -min(-a, -b)
            let na = tape.neg(a);
            let nb = tape.neg(b);
            let m = tape.minimum(na, nb);
            tape.neg(m)
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: [Conv2d; 2],
    scse: Option<Scse>,
}

impl ConvBlock {
    fn new<T: Real>(p: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, se: bool) -> Self {
        let init = Init::KaimingNormal;
        let conv = [
            Conv2d::new(p, rng, &alloc::format!("{name}.conv1"), cin, cout, 3, 1, 1, init),
            Conv2d::new(p, rng, &alloc::format!("{name}.conv2"), cout, cout, 3, 1, 1, init),
        ];
        let scse = se.then(|| Scse::new(p, rng, name, cout));
        Self { conv, scse }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &ParamStore<T>, x: Var, combine: ScseCombine) -> Var {
        let mut h = x;
        for conv in &self.conv {
            h = conv.forward(tape, p, h);
            h = tape.instance_norm(h);
            h = tape.relu(h);
        }
        match &self.scse {
            Some(se) => se.forward(tape, p, h, combine),
            None => h,
        }
    }
}

/// Five-level U-Net with max-pool downsampling, nearest-neighbour
/// upsampling, concatenated skips, instance norm, and a sigmoid output.
#[derive(Clone, Debug)]
pub struct Segmenter<T> {
    pub params: ParamStore<T>,
    config: SegmenterConfig,
    encoder: Vec<ConvBlock>,
    up: Vec<Conv2d>,
    decoder: Vec<ConvBlock>,
    out: Conv2d,
}

impl<T: Real> Segmenter<T> {
    /// Smallest accepted image side.
    pub const MIN_SIDE: usize = 8;
    pub const SIZE_MULTIPLE: usize = 1 << (LEVELS - 1);

    pub fn new(config: &SegmenterConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let se = config.kind == SegmenterKind::DuseUnet;
        let init = Init::KaimingNormal;
        let mut p = ParamStore::new(GROUP_SEGMENTER);
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut cin = config.channels;
        for (l, &w) in widths.iter().enumerate() {
            encoder.push(ConvBlock::new(&mut p, rng, &alloc::format!("enc{l}"), cin, w, se));
            cin = w;
        }
        let mut up = Vec::with_capacity(LEVELS - 1);
        let mut decoder = Vec::with_capacity(LEVELS - 1);
        for l in (0..LEVELS - 1).rev() {
            up.push(Conv2d::new(&mut p, rng, &alloc::format!("up{l}"), widths[l + 1], widths[l], 3, 1, 1, init));
            decoder.push(ConvBlock::new(&mut p, rng, &alloc::format!("dec{l}"), 2 * widths[l], widths[l], se));
        }
        let out = Conv2d::new(&mut p, rng, "out", widths[0], 1, 1, 1, 0, init);
        Ok(Self {
            params: p,
            config: config.clone(),
            encoder,
            up,
            decoder,
            out,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.encoder.len()
    }

    pub fn scse_blocks(&self) -> usize {
        self.encoder.iter().chain(&self.decoder).filter(|b| b.scse.is_some()).count()
    }

    /// Foreground probabilities, same spatial size as `x`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        check_input("segmenter", tape.shape(x), self.config.channels, Self::MIN_SIDE)?;
        let combine = self.config.combine;
        let (x, (h0, w0)) = pad_to_multiple(tape, x, Self::SIZE_MULTIPLE);
        let mut skips = Vec::with_capacity(LEVELS - 1);
        let mut h = x;
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = tape.max_pool2(h);
            }
            h = block.forward(tape, &self.params, h, combine);
            if l + 1 < LEVELS {
                skips.push(h);
            }
        }
        for (up, block) in self.up.iter().zip(&self.decoder) {
            let u = tape.upsample_nearest2(h);
            let u = up.forward(tape, &self.params, u);
            let u = tape.instance_norm(u);
            let u = tape.relu(u);
            let skip = skips.pop().expect("one skip per level");
            let cat = tape.concat_channels(&[skip, u]);
            h = block.forward(tape, &self.params, cat, combine);
        }
        let y = self.out.forward(tape, &self.params, h);
        let y = tape.sigmoid(y);
        let (hp, wp) = (tape.shape(y)[2], tape.shape(y)[3]);
        Ok(if (hp, wp) != (h0, w0) { tape.crop(y, 0, 0, h0, w0) } else { y })
    }
}
