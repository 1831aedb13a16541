//! Four-stage hierarchical Mix-Transformer encoder: overlap patch
//! embedding, efficient self-attention with sequence reduction, and the
//! Mix-FFN with its depthwise convolution standing in for positional
//! encodings (there is no positional-encoding table anywhere here).

use crate::autodiff::{ConvGeometry, ParamStore, Tx};
use crate::error::{Error, Result};
use crate::nn::{drop_path, Conv2d, Fwd, LayerNorm, Linear};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MitConfig {
    pub embed_dims: [usize; 4],
    pub depths: [usize; 4],
    pub num_heads: [usize; 4],
    pub reduction_ratios: [usize; 4],
    pub patch_kernels: [usize; 4],
    pub patch_strides: [usize; 4],
    pub patch_paddings: [usize; 4],
    pub mlp_expansion: usize,
    pub drop_path_rate: f64,
}

impl Default for MitConfig {
    fn default() -> Self {
        MitConfig::b3()
    }
}

impl MitConfig {
    /// The published b3 configuration.
    pub fn b3() -> Self {
        MitConfig {
            embed_dims: [64, 128, 320, 512],
            depths: [3, 4, 18, 3],
            num_heads: [1, 2, 5, 8],
            reduction_ratios: [8, 4, 2, 1],
            patch_kernels: [7, 3, 3, 3],
            patch_strides: [4, 2, 2, 2],
            patch_paddings: [3, 1, 1, 1],
            mlp_expansion: 4,
            drop_path_rate: 0.0,
        }
    }

    /// Desk-scale configuration for gradient and shape checks.
    pub fn tiny() -> Self {
        MitConfig {
            embed_dims: [8, 16, 24, 32],
            depths: [1, 1, 1, 1],
            num_heads: [1, 2, 2, 4],
            reduction_ratios: [8, 4, 2, 1],
            patch_kernels: [7, 3, 3, 3],
            patch_strides: [4, 2, 2, 2],
            patch_paddings: [3, 1, 1, 1],
            mlp_expansion: 4,
            drop_path_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..4 {
            if self.patch_strides[i] >= self.patch_kernels[i] {
                return Err(Error::InvalidGeometry(format!(
                    "stage {i}: stride {} must be < kernel {} for overlap",
                    self.patch_strides[i], self.patch_kernels[i]
                )));
            }
            if !self.embed_dims[i].is_multiple_of(self.num_heads[i]) {
                return Err(Error::NotDivisible {
                    what: format!("stage {i} embed dim"),
                    value: self.embed_dims[i],
                    by: self.num_heads[i],
                });
            }
            if self.reduction_ratios[i] == 0 {
                return Err(Error::InvalidGeometry(format!(
                    "stage {i}: reduction ratio must be >= 1"
                )));
            }
        }
        Ok(())
    }
}

/// The four encoder maps at 1/4, 1/8, 1/16 and 1/32 of the input resolution.
pub struct FeaturePyramid<'t> {
    pub maps: [Tx<'t>; 4],
}

/// Strided overlapping convolution, flattened into `N x C` tokens.
pub struct OverlapPatchEmbed {
    conv: Conv2d,
    norm: LayerNorm,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl OverlapPatchEmbed {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride >= kernel {
            return Err(Error::InvalidGeometry(format!(
                "overlap patch embedding needs stride < kernel, got {stride} >= {kernel}"
            )));
        }
        let conv = Conv2d::new(
            store,
            rng,
            &format!("{name}.proj"),
            in_channels,
            out_channels,
            kernel,
            ConvGeometry {
                stride,
                padding,
                groups: 1,
            },
            true,
        );
        let norm = LayerNorm::new(store, &format!("{name}.norm"), out_channels);
        Ok(OverlapPatchEmbed {
            conv,
            norm,
            kernel,
            stride,
            padding,
        })
    }

    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::InvalidGeometry(format!(
                "input extent {input} too small for kernel {}",
                self.kernel
            )));
        }
        let out = (padded - self.kernel) / self.stride + 1;
        if out < 1 {
            return Err(Error::InvalidGeometry("empty patch grid".into()));
        }
        Ok(out)
    }

    /// `[B,Cin,H,W] -> ([B, H'*W', Cout], H', W')`.
    pub fn forward<'t>(&self, cx: &Fwd<'t, '_>, x: Tx<'t>) -> Result<(Tx<'t>, usize, usize)> {
        let shape = x.shape();
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let h_out = self.output_extent(h)?;
        let w_out = self.output_extent(w)?;
        let fm = self.conv.forward(cx, x);
        // [B,C,H',W'] -> [B, N, C]
        let tokens = fm
            .reshape(&[b, self.conv.out_channels, h_out * w_out])
            .permute(&[0, 2, 1]);
        Ok((self.norm.forward(cx, tokens), h_out, w_out))
    }
}

/// Snapshot of the last attention evaluation, for structural assertions.
#[derive(Clone, Debug)]
pub struct AttentionProbe {
    /// Allocated score-tensor shape `[B*heads, N, kv_len]`.
    pub score_shape: Vec<usize>,
    pub rowsum_min: f64,
    pub rowsum_max: f64,
}

/// Self-attention with key/value sequence reduction: the `N x C` token
/// matrix reshapes to `N/R x (C*R)` and a linear layer restores width C,
/// so score memory scales as `N * (N/R)`.
pub struct EfficientSelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    reduce: Option<(Linear, LayerNorm)>,
    pub heads: usize,
    pub reduction: usize,
    channels: usize,
    probe: RefCell<Option<AttentionProbe>>,
    probe_enabled: std::cell::Cell<bool>,
}

impl EfficientSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        heads: usize,
        reduction: usize,
    ) -> Result<Self> {
        if !channels.is_multiple_of(heads) {
            return Err(Error::NotDivisible {
                what: "attention channels".into(),
                value: channels,
                by: heads,
            });
        }
        let q = Linear::new(store, rng, &format!("{name}.q"), channels, channels, true);
        let k = Linear::new(store, rng, &format!("{name}.k"), channels, channels, true);
        let v = Linear::new(store, rng, &format!("{name}.v"), channels, channels, true);
        let proj = Linear::new(
            store,
            rng,
            &format!("{name}.proj"),
            channels,
            channels,
            true,
        );
        let reduce = (reduction > 1).then(|| {
            (
                Linear::new(
                    store,
                    rng,
                    &format!("{name}.reduce"),
                    channels * reduction,
                    channels,
                    true,
                ),
                LayerNorm::new(store, &format!("{name}.reduce_norm"), channels),
            )
        });
        Ok(EfficientSelfAttention {
            q,
            k,
            v,
            proj,
            reduce,
            heads,
            reduction,
            channels,
            probe: RefCell::new(None),
            probe_enabled: std::cell::Cell::new(false),
        })
    }

    pub fn enable_probe(&self) {
        self.probe_enabled.set(true);
    }

    pub fn last_probe(&self) -> Option<AttentionProbe> {
        self.probe.borrow().clone()
    }

    /// `[B,N,C] -> [B,N,C]`.
    pub fn forward<'t>(&self, cx: &Fwd<'t, '_>, tokens: Tx<'t>) -> Result<Tx<'t>> {
        let shape = tokens.shape();
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        if c != self.channels {
            return Err(Error::shape_mismatch(
                "attention width",
                &shape,
                &[b, n, self.channels],
            ));
        }
        #[allow(clippy::type_complexity)]
        let heads = self.heads;
        let dim = c / heads;

        let queries = self.q.forward(cx, tokens);

        // Sequence reduction for keys/values: zero-pad N to a multiple of R
        // (the pad is always shorter than one group, so every reduced
        // position keeps real content), group R consecutive tokens, and
        // project back to width C.
        let kv_source = match &self.reduce {
            Some((lin, norm)) => {
                let r = self.reduction;
                let padded_n = n.div_ceil(r) * r;
                let padded = if padded_n == n {
                    tokens
                } else {
                    tokens.pad_axis(1, 0, padded_n - n)
                };
                let grouped = padded.reshape(&[b, padded_n / r, c * r]);
                norm.forward(cx, lin.forward(cx, grouped))
            }
            None => tokens,
        };
        let kv_len = kv_source.shape()[1];

        let keys = self.k.forward(cx, kv_source);
        let values = self.v.forward(cx, kv_source);

        let split = |t: Tx<'t>, len: usize| {
            t.reshape(&[b, len, heads, dim])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b * heads, len, dim])
        };
        let qh = split(queries, n);
        let kh = split(keys, kv_len);
        let vh = split(values, kv_len);

        let scores = qh
            .bmm(kh.permute(&[0, 2, 1]))
            .scale(1.0 / (dim as f64).sqrt());
        let attn = scores.softmax(2);

        if self.probe_enabled.get() {
            let a = attn.value();
            let sums = a.sum_axis(ndarray::Axis(2));
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &s in sums.iter() {
                lo = lo.min(s);
                hi = hi.max(s);
            }
            *self.probe.borrow_mut() = Some(AttentionProbe {
                score_shape: scores.shape(),
                rowsum_min: lo,
                rowsum_max: hi,
            });
        }

        let out = attn
            .bmm(vh)
            .reshape(&[b, heads, n, dim])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, n, c]);
        Ok(self.proj.forward(cx, out))
    }
}

/// Feed-forward block whose 3x3 depthwise convolution (zero padded over the
/// re-folded token grid) supplies positional information.
pub struct MixFfn {
    fc1: Linear,
    dw: Conv2d,
    fc2: Linear,
    hidden: usize,
}

impl MixFfn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        expansion: usize,
    ) -> Self {
        let hidden = channels * expansion;
        MixFfn {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), channels, hidden, true),
            dw: Conv2d::new(
                store,
                rng,
                &format!("{name}.dwconv"),
                hidden,
                hidden,
                3,
                ConvGeometry {
                    stride: 1,
                    padding: 1,
                    groups: hidden,
                },
                true,
            ),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, channels, true),
            hidden,
        }
    }

    /// The branch without its residual (blocks wire the residual themselves).
    pub fn branch<'t>(
        &self,
        cx: &Fwd<'t, '_>,
        tokens: Tx<'t>,
        h: usize,
        w: usize,
    ) -> Result<Tx<'t>> {
        let shape = tokens.shape();
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        if n != h * w {
            return Err(Error::shape_mismatch(
                "mix_ffn token grid",
                &[n],
                &[h * w],
            ));
        }
        let _ = c;
        let x = self.fc1.forward(cx, tokens);
        // [B,N,hidden] -> [B,hidden,H,W] for the depthwise conv.
        let grid = x.permute(&[0, 2, 1]).reshape(&[b, self.hidden, h, w]);
        let conv = self.dw.forward(cx, grid);
        let back = conv
            .reshape(&[b, self.hidden, n])
            .permute(&[0, 2, 1])
            .gelu();
        Ok(self.fc2.forward(cx, back))
    }

    /// `MLP(GELU(DWConv(MLP(x)))) + x`.
    pub fn forward<'t>(
        &self,
        cx: &Fwd<'t, '_>,
        tokens: Tx<'t>,
        h: usize,
        w: usize,
    ) -> Result<Tx<'t>> {
        Ok(tokens.add(self.branch(cx, tokens, h, w)?))
    }
}

/// Pre-norm transformer block: attention and Mix-FFN residual branches.
pub struct MitBlock {
    norm1: LayerNorm,
    pub attn: EfficientSelfAttention,
    norm2: LayerNorm,
    ffn: MixFfn,
    drop_path_rate: f64,
}

impl MitBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        heads: usize,
        reduction: usize,
        expansion: usize,
        drop_path_rate: f64,
    ) -> Result<Self> {
        Ok(MitBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), channels),
            attn: EfficientSelfAttention::new(
                store,
                rng,
                &format!("{name}.attn"),
                channels,
                heads,
                reduction,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), channels),
            ffn: MixFfn::new(store, rng, &format!("{name}.ffn"), channels, expansion),
            drop_path_rate,
        })
    }

    pub fn forward<'t>(
        &self,
        cx: &mut Fwd<'t, '_>,
        tokens: Tx<'t>,
        h: usize,
        w: usize,
    ) -> Result<Tx<'t>> {
        let attn_branch = self.attn.forward(cx, self.norm1.forward(cx, tokens))?;
        let x = tokens.add(drop_path(cx, attn_branch, self.drop_path_rate));
        let ffn_branch = self.ffn.branch(cx, self.norm2.forward(cx, x), h, w)?;
        Ok(x.add(drop_path(cx, ffn_branch, self.drop_path_rate)))
    }
}

struct Stage {
    patch: OverlapPatchEmbed,
    blocks: Vec<MitBlock>,
    norm: LayerNorm,
    channels: usize,
}

/// The four-stage encoder producing a 1/4..1/32 feature pyramid.
pub struct MitEncoder {
    stages: Vec<Stage>,
    pub config: MitConfig,
}

impl MitEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        config: &MitConfig,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = 3;
        // Linearly increasing drop-path over the block sequence.
        let total_blocks: usize = config.depths.iter().sum();
        let mut block_index = 0usize;
        for s in 0..4 {
            let ch = config.embed_dims[s];
            let patch = OverlapPatchEmbed::new(
                store,
                rng,
                &format!("{name}.stage{s}.patch"),
                in_ch,
                ch,
                config.patch_kernels[s],
                config.patch_strides[s],
                config.patch_paddings[s],
            )?;
            let mut blocks = Vec::new();
            for bi in 0..config.depths[s] {
                let rate = if total_blocks > 1 {
                    config.drop_path_rate * block_index as f64 / (total_blocks - 1) as f64
                } else {
                    0.0
                };
                blocks.push(MitBlock::new(
                    store,
                    rng,
                    &format!("{name}.stage{s}.block{bi}"),
                    ch,
                    config.num_heads[s],
                    config.reduction_ratios[s],
                    config.mlp_expansion,
                    rate,
                )?);
                block_index += 1;
            }
            let norm = LayerNorm::new(store, &format!("{name}.stage{s}.norm"), ch);
            stages.push(Stage {
                patch,
                blocks,
                norm,
                channels: ch,
            });
            in_ch = ch;
        }
        Ok(MitEncoder {
            stages,
            config: config.clone(),
        })
    }

    /// `[B,3,H,W] -> FeaturePyramid`, H and W divisible by 32.
    pub fn forward<'t>(&self, cx: &mut Fwd<'t, '_>, image: Tx<'t>) -> Result<FeaturePyramid<'t>> {
        let shape = image.shape();
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        for (extent, axis) in [(h, "height"), (w, "width")] {
            if extent % 32 != 0 {
                return Err(Error::NotDivisible {
                    what: format!("input {axis}"),
                    value: extent,
                    by: 32,
                });
            }
        }
        let mut maps: Vec<Tx<'t>> = Vec::with_capacity(4);
        let mut x = image;
        for stage in &self.stages {
            let (mut tokens, sh, sw) = stage.patch.forward(cx, x)?;
            for block in &stage.blocks {
                tokens = block.forward(cx, tokens, sh, sw)?;
            }
            tokens = stage.norm.forward(cx, tokens);
            let map = tokens
                .permute(&[0, 2, 1])
                .reshape(&[b, stage.channels, sh, sw]);
            maps.push(map);
            x = map;
        }
        Ok(FeaturePyramid {
            maps: [maps[0], maps[1], maps[2], maps[3]],
        })
    }

    /// Borrow a block for probing (stage, block index).
    pub fn block(&self, stage: usize, block: usize) -> &MitBlock {
        &self.stages[stage].blocks[block]
    }
}
