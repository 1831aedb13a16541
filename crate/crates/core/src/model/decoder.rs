//! CNN up-sampling decoder with skip connections and the parallel
//! spatial-and-channel squeeze-and-excitation (P-scSE) module.
//!
//! P-scSE runs two branches over the shared cSE/sSE gates: their sum and
//! their elementwise max-out. A switch skips the max-out branch when the
//! channel count is small.

use crate::autodiff::{ConvGeometry, ParamStore, Tx};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Fwd, Linear};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeMode {
    None,
    Scse,
    Pscse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeConfig {
    pub mode: SeMode,
    /// Below this channel count the max-out branch is skipped.
    pub maxout_switch_threshold: usize,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig {
            mode: SeMode::Pscse,
            maxout_switch_threshold: 32,
        }
    }
}

/// Channel squeeze-and-excitation: global average pooling into a two-layer
/// bottleneck, sigmoid gates scale each channel.
pub struct CSe {
    fc1: Linear,
    fc2: Linear,
    pub channels: usize,
}

impl CSe {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        let hidden = (channels / 16).max(1);
        CSe {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), channels, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, channels, true),
            channels,
        }
    }

    /// The sigmoid channel gates, `[B,C,1,1]`.
    pub fn gates<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Tx<'t> {
        let b = x.shape()[0];
        let squeezed = x.global_avg_pool().reshape(&[b, self.channels]);
        let excited = self
            .fc2
            .forward(cx, self.fc1.forward(cx, squeezed).relu())
            .sigmoid();
        excited.reshape(&[b, self.channels, 1, 1])
    }

    pub fn forward<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Tx<'t> {
        x.mul_b(self.gates(cx, x))
    }

    /// Bias of the final excitation layer (tests force gates through it).
    pub fn excite_bias(&self) -> Option<crate::autodiff::ParamId> {
        self.fc2.bias
    }

    pub fn excite_weight(&self) -> crate::autodiff::ParamId {
        self.fc2.weight
    }
}

/// Spatial squeeze-and-excitation: a 1x1 convolution across channels yields
/// one sigmoid gate per pixel, identical across channels.
pub struct SSe {
    conv: Conv2d,
}

impl SSe {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        SSe {
            conv: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv"),
                channels,
                1,
                1,
                ConvGeometry {
                    stride: 1,
                    padding: 0,
                    groups: 1,
                },
                true,
            ),
        }
    }

    /// The sigmoid pixel gates, `[B,1,H,W]`.
    pub fn gates<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Tx<'t> {
        self.conv.forward(cx, x).sigmoid()
    }

    pub fn forward<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Tx<'t> {
        x.mul_b(self.gates(cx, x))
    }
}

/// The combined module: owns one cSE and one sSE and exposes the scSE sum,
/// plus the parallel max-out variant.
pub struct PScse {
    pub cse: CSe,
    pub sse: SSe,
    pub config: SeConfig,
    pub channels: usize,
}

impl PScse {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        config: SeConfig,
    ) -> Self {
        PScse {
            cse: CSe::new(store, rng, &format!("{name}.cse"), channels),
            sse: SSe::new(store, rng, &format!("{name}.sse"), channels),
            config,
            channels,
        }
    }

    /// `cse(x) + sse(x)`.
    pub fn scse<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Tx<'t> {
        self.cse.forward(cx, x).add(self.sse.forward(cx, x))
    }

    /// Additive branch plus (above the channel threshold) the max-out
    /// branch over the same two excitations.
    pub fn p_scse<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Tx<'t> {
        let c = self.cse.forward(cx, x);
        let s = self.sse.forward(cx, x);
        let branch_add = c.add(s);
        if self.channels < self.config.maxout_switch_threshold {
            branch_add
        } else {
            branch_add.add(c.maximum(s))
        }
    }

    /// Dispatch on the configured mode (`None` passes through untouched).
    pub fn forward<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Tx<'t> {
        match self.config.mode {
            SeMode::None => x,
            SeMode::Scse => self.scse(cx, x),
            SeMode::Pscse => self.p_scse(cx, x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Output widths of the three skip stages.
    pub widths: [usize; 3],
    pub se: SeConfig,
    /// false keeps the printed order Conv -> ReLU -> BatchNorm; true uses
    /// the conventional Conv -> BatchNorm -> ReLU.
    pub bn_before_activation: bool,
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            widths: [256, 128, 64],
            se: SeConfig::default(),
            bn_before_activation: false,
            num_classes: 4,
        }
    }
}

impl DecoderConfig {
    pub fn tiny() -> Self {
        DecoderConfig {
            widths: [16, 12, 8],
            ..DecoderConfig::default()
        }
    }
}

/// One decoder stage: 2x upsample, concatenate the encoder skip, attention,
/// then 3x3 Conv / ReLU / BatchNorm in the configured order.
pub struct DecoderStage {
    se: Option<PScse>,
    conv: Conv2d,
    bn: BatchNorm2d,
    bn_before_activation: bool,
}

impl DecoderStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        below_channels: usize,
        skip_channels: usize,
        out_channels: usize,
        se: SeConfig,
        bn_before_activation: bool,
    ) -> Self {
        let cat = below_channels + skip_channels;
        let se_module = match se.mode {
            SeMode::None => None,
            _ => Some(PScse::new(store, rng, &format!("{name}.se"), cat, se)),
        };
        DecoderStage {
            se: se_module,
            conv: Conv2d::new(
                store,
                rng,
                &format!("{name}.conv"),
                cat,
                out_channels,
                3,
                ConvGeometry {
                    stride: 1,
                    padding: 1,
                    groups: 1,
                },
                true,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels),
            bn_before_activation,
        }
    }

    pub fn has_excitation(&self) -> bool {
        self.se.is_some()
    }

    pub fn forward<'t>(&self, cx: &mut Fwd<'t, '_>, below: Tx<'t>, skip: Tx<'t>) -> Result<Tx<'t>> {
        let (bs, ss) = (below.shape(), skip.shape());
        if ss[2] != bs[2] * 2 || ss[3] != bs[3] * 2 || ss[0] != bs[0] {
            return Err(Error::shape_mismatch("decoder stage skip", &ss, &bs));
        }
        let up = below.upsample_2x();
        let cat = Tx::concat(1, &[up, skip]);
        let attended = match &self.se {
            Some(se) => se.forward(cx, cat),
            None => cat,
        };
        let conv = self.conv.forward(cx, attended);
        Ok(if self.bn_before_activation {
            self.bn.forward(cx, conv).relu()
        } else {
            self.bn.forward(cx, conv.relu())
        })
    }
}
