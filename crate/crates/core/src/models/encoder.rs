//! Compact encoders: a patch-token transformer and a small residual convnet.

use rand::Rng as _;
use rob_tensor::{ConvGeometry, Graph, Matrix, Var};
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamStore};
use crate::data::{Image, PatchMask, CHANNELS};
use crate::error::{Result, RobError};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-6;
/// Per-channel input standardization (the usual ImageNet statistics).
const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn standardize(v: f32, c: usize) -> f64 {
    (v as f64 - PIXEL_MEAN[c]) / PIXEL_STD[c]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    PatchTransformer,
    ConvResidual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub family: EncoderFamily,
    /// Transformer blocks (patch_transformer only).
    #[serde(default)]
    pub depth: usize,
    /// Token width, or channel count of the last stage for the convnet.
    pub width: usize,
    #[serde(default)]
    pub n_heads: usize,
    #[serde(default)]
    pub patch_size: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub drop_path_rate: f64,
    /// Residual blocks per stage (conv_residual only); channels double per stage.
    #[serde(default)]
    pub stage_depths: Vec<usize>,
    /// Side of the large crops; fixes the positional-embedding grid.
    pub input_size: usize,
}

fn default_mlp_ratio() -> usize {
    2
}

impl EncoderConfig {
    pub fn transformer(
        depth: usize,
        width: usize,
        n_heads: usize,
        patch_size: usize,
        input_size: usize,
    ) -> Self {
        Self {
            family: EncoderFamily::PatchTransformer,
            depth,
            width,
            n_heads,
            patch_size,
            mlp_ratio: default_mlp_ratio(),
            drop_path_rate: 0.0,
            stage_depths: Vec::new(),
            input_size,
        }
    }

    pub fn conv(stage_depths: Vec<usize>, width: usize, input_size: usize) -> Self {
        Self {
            family: EncoderFamily::ConvResidual,
            depth: 0,
            width,
            n_heads: 0,
            patch_size: 0,
            mlp_ratio: default_mlp_ratio(),
            drop_path_rate: 0.0,
            stage_depths,
            input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(RobError::config("encoder width must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(RobError::config(format!(
                "drop_path_rate must lie in [0, 1), got {}",
                self.drop_path_rate
            )));
        }
        match self.family {
            EncoderFamily::PatchTransformer => {
                if self.depth == 0 {
                    return Err(RobError::config("transformer depth must be positive"));
                }
                if self.n_heads == 0 || self.width % self.n_heads != 0 {
                    return Err(RobError::config(format!(
                        "width {} not divisible by n_heads {}",
                        self.width, self.n_heads
                    )));
                }
                if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
                    return Err(RobError::config(format!(
                        "patch_size {} does not divide input size {}",
                        self.patch_size, self.input_size
                    )));
                }
                if self.mlp_ratio == 0 {
                    return Err(RobError::config("mlp_ratio must be positive"));
                }
            }
            EncoderFamily::ConvResidual => {
                if self.stage_depths.is_empty() {
                    return Err(RobError::config("conv encoder needs at least one stage"));
                }
                let div = 1usize << (self.stage_depths.len() - 1);
                if self.width % div != 0 {
                    return Err(RobError::config(format!(
                        "conv width {} must be divisible by 2^(stages-1) = {div}",
                        self.width
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks that a view of side `size` can be encoded.
    pub fn check_view_size(&self, size: usize) -> Result<()> {
        match self.family {
            EncoderFamily::PatchTransformer if size % self.patch_size != 0 => {
                Err(RobError::config(format!(
                    "patch_size {} does not divide view size {size}",
                    self.patch_size
                )))
            }
            EncoderFamily::ConvResidual if size < (1 << (self.stage_depths.len() - 1)) => Err(
                RobError::config(format!("view size {size} too small for the conv stages")),
            ),
            _ => Ok(()),
        }
    }

    pub fn n_patches(&self, size: usize) -> usize {
        match self.family {
            EncoderFamily::PatchTransformer => (size / self.patch_size).pow(2),
            EncoderFamily::ConvResidual => 0,
        }
    }

    fn stage_widths(&self) -> Vec<usize> {
        let n = self.stage_depths.len();
        (0..n).map(|i| self.width >> (n - 1 - i)).collect()
    }

    /// Number of global tokens available for layerwise probes.
    pub fn n_layers(&self) -> usize {
        match self.family {
            EncoderFamily::PatchTransformer => self.depth,
            EncoderFamily::ConvResidual => self.stage_depths.len(),
        }
    }
}

/// How a patch mask is applied inside the transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Masked tokens are removed from the sequence.
    Drop,
    /// Masked tokens are replaced by a learned mask token.
    Replace,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Register trainable parameters (otherwise every weight is a constant).
    pub train: bool,
    /// Stochastic-depth stream; `None` disables drop path.
    pub drop_path_rng: Option<&'a mut Rng>,
    pub masks: Option<&'a [Option<PatchMask>]>,
    pub mask_mode: Option<MaskMode>,
    /// Also return the normalized global token after every block/stage.
    pub layerwise: bool,
}

/// Graph handles produced by one encoder pass over a batch of equally sized views.
pub struct EncoderVars {
    /// `B × width`: class token (transformer) or pooled features (convnet).
    pub global: Var,
    /// Patch tokens after the final norm, images stacked in order.
    pub patch_tokens: Option<Var>,
    /// `patch_index[b][j]` is the patch position of image `b`'s `j`-th token row.
    pub patch_index: Vec<Vec<usize>>,
    /// Global representation after each block/stage, normalized (transformer).
    pub layerwise: Vec<Var>,
    /// Convnet only: last feature map rows and its spatial size.
    pub feature_map: Option<(Var, usize, usize)>,
}

impl EncoderVars {
    /// Row of `patch_tokens` holding patch `p` of image `b`, if present.
    pub fn patch_row(&self, b: usize, p: usize) -> Option<usize> {
        let offset: usize = self.patch_index[..b].iter().map(Vec::len).sum();
        self.patch_index[b]
            .iter()
            .position(|&q| q == p)
            .map(|j| offset + j)
    }
}

pub fn init_encoder(cfg: &EncoderConfig, store: &mut ParamStore, seed: u64, prefix: &str) {
    let w = cfg.width;
    let p = |n: &str| format!("{prefix}.{n}");
    match cfg.family {
        EncoderFamily::PatchTransformer => {
            let patch_dim = cfg.patch_size * cfg.patch_size * CHANNELS;
            let n_tok = cfg.n_patches(cfg.input_size) + 1;
            let hidden = w * cfg.mlp_ratio;
            store.init(
                seed,
                &p("patch_embed.weight"),
                patch_dim,
                w,
                Init::TruncNormal(0.02),
            );
            store.init(seed, &p("patch_embed.bias"), 1, w, Init::Zeros);
            store.init(seed, &p("cls_token"), 1, w, Init::TruncNormal(0.02));
            store.init(seed, &p("mask_token"), 1, w, Init::Zeros);
            store.init(seed, &p("pos_embed"), n_tok, w, Init::TruncNormal(0.02));
            for l in 0..cfg.depth {
                let b = |n: &str| p(&format!("blocks.{l:02}.{n}"));
                store.init(seed, &b("norm1.weight"), 1, w, Init::Ones);
                store.init(seed, &b("norm1.bias"), 1, w, Init::Zeros);
                store.init(
                    seed,
                    &b("attn.qkv.weight"),
                    w,
                    3 * w,
                    Init::TruncNormal(0.02),
                );
                store.init(seed, &b("attn.qkv.bias"), 1, 3 * w, Init::Zeros);
                store.init(seed, &b("attn.proj.weight"), w, w, Init::TruncNormal(0.02));
                store.init(seed, &b("attn.proj.bias"), 1, w, Init::Zeros);
                store.init(seed, &b("norm2.weight"), 1, w, Init::Ones);
                store.init(seed, &b("norm2.bias"), 1, w, Init::Zeros);
                store.init(
                    seed,
                    &b("mlp.fc1.weight"),
                    w,
                    hidden,
                    Init::TruncNormal(0.02),
                );
                store.init(seed, &b("mlp.fc1.bias"), 1, hidden, Init::Zeros);
                store.init(
                    seed,
                    &b("mlp.fc2.weight"),
                    hidden,
                    w,
                    Init::TruncNormal(0.02),
                );
                store.init(seed, &b("mlp.fc2.bias"), 1, w, Init::Zeros);
            }
            store.init(seed, &p("norm.weight"), 1, w, Init::Ones);
            store.init(seed, &p("norm.bias"), 1, w, Init::Zeros);
        }
        EncoderFamily::ConvResidual => {
            let widths = cfg.stage_widths();
            let conv = |store: &mut ParamStore, name: &str, cin: usize, cout: usize| {
                store.init(
                    seed,
                    &format!("{name}.weight"),
                    9 * cin,
                    cout,
                    Init::KaimingNormal { fan_in: 9 * cin },
                );
                store.init(seed, &format!("{name}.bias"), 1, cout, Init::Zeros);
            };
            let norm = |store: &mut ParamStore, name: &str, c: usize, zero: bool| {
                store.init(
                    seed,
                    &format!("{name}.weight"),
                    1,
                    c,
                    if zero { Init::Zeros } else { Init::Ones },
                );
                store.init(seed, &format!("{name}.bias"), 1, c, Init::Zeros);
            };
            conv(store, &p("stem.conv"), CHANNELS, widths[0]);
            norm(store, &p("stem.norm"), widths[0], false);
            for (s, &depth) in cfg.stage_depths.iter().enumerate() {
                let c = widths[s];
                if s > 0 {
                    conv(
                        store,
                        &p(&format!("stages.{s}.down.conv")),
                        widths[s - 1],
                        c,
                    );
                    norm(store, &p(&format!("stages.{s}.down.norm")), c, false);
                }
                for k in 0..depth {
                    let b = |n: &str| p(&format!("stages.{s}.blocks.{k}.{n}"));
                    conv(store, &b("conv1"), c, c);
                    norm(store, &b("norm1"), c, false);
                    conv(store, &b("conv2"), c, c);
                    // zero-initialized last norm: each block starts as identity
                    norm(store, &b("norm2"), c, true);
                }
            }
        }
    }
}

struct Ctx<'s, 'o, 'r> {
    store: &'s ParamStore,
    prefix: &'s str,
    opts: &'o mut ForwardOptions<'r>,
}

impl Ctx<'_, '_, '_> {
    fn leaf(&self, g: &mut Graph, name: &str) -> Var {
        self.store
            .leaf(g, &format!("{}.{name}", self.prefix), self.opts.train)
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let w = self.leaf(g, &format!("{name}.weight"));
        let b = self.leaf(g, &format!("{name}.bias"));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        let w = self.leaf(g, &format!("{name}.weight"));
        let b = self.leaf(g, &format!("{name}.bias"));
        g.layer_norm(x, w, b, LN_EPS)
    }

    /// Stochastic depth on a residual branch: each image keeps its branch
    /// with probability `1 - rate`, rescaled by `1 / (1 - rate)`.
    fn drop_path(&mut self, g: &mut Graph, x: Var, rate: f64, rows_per_image: &[usize]) -> Var {
        let Some(rng) = self.opts.drop_path_rng.as_deref_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let mut factors = Vec::with_capacity(g.value(x).rows());
        for &n in rows_per_image {
            let keep = rng.random::<f64>() >= rate;
            let f = if keep { 1.0 / (1.0 - rate) } else { 0.0 };
            factors.extend(std::iter::repeat_n(f, n));
        }
        g.scale_rows(x, factors)
    }
}

fn patchify(images: &[&Image], patch: usize) -> Matrix {
    let size = images[0].height;
    let grid = size / patch;
    let dim = patch * patch * CHANNELS;
    let mut out = Matrix::zeros(images.len() * grid * grid, dim);
    for (b, img) in images.iter().enumerate() {
        for gy in 0..grid {
            for gx in 0..grid {
                let row = out.row_mut((b * grid + gy) * grid + gx);
                let mut k = 0;
                for py in 0..patch {
                    for px in 0..patch {
                        for c in 0..CHANNELS {
                            row[k] = standardize(img.get(gy * patch + py, gx * patch + px, c), c);
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Bilinear resampling matrix from a `from × from` grid to a `to × to` grid.
fn grid_interpolation(from: usize, to: usize) -> Matrix {
    let weights_1d = |i: usize| -> Vec<(usize, f64)> {
        let src = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        let t = src - lo as f64;
        if hi == lo {
            vec![(lo, 1.0)]
        } else {
            vec![(lo, 1.0 - t), (hi, t)]
        }
    };
    let mut m = Matrix::zeros(to * to, from * from);
    for y in 0..to {
        for x in 0..to {
            for &(sy, wy) in &weights_1d(y) {
                for &(sx, wx) in &weights_1d(x) {
                    let c = sy * from + sx;
                    let v = m.get(y * to + x, c) + wy * wx;
                    m.set(y * to + x, c, v);
                }
            }
        }
    }
    m
}

/// Runs the encoder on a batch of equally sized square views.
pub fn forward_encoder(
    cfg: &EncoderConfig,
    store: &ParamStore,
    prefix: &str,
    g: &mut Graph,
    images: &[&Image],
    opts: &mut ForwardOptions<'_>,
) -> Result<EncoderVars> {
    if images.is_empty() {
        return Err(RobError::contract("encoder called on an empty batch"));
    }
    let size = images[0].height;
    if images
        .iter()
        .any(|im| im.height != size || im.width != size)
    {
        return Err(RobError::contract(
            "encoder batch must hold equally sized square views",
        ));
    }
    cfg.check_view_size(size)?;
    let mut ctx = Ctx {
        store,
        prefix,
        opts,
    };
    match cfg.family {
        EncoderFamily::PatchTransformer => forward_transformer(cfg, &mut ctx, g, images, size),
        EncoderFamily::ConvResidual => {
            if ctx
                .opts
                .masks
                .is_some_and(|m| m.iter().any(Option::is_some))
            {
                return Err(RobError::contract(
                    "patch masks require a patch_transformer encoder",
                ));
            }
            forward_conv(cfg, &mut ctx, g, images, size)
        }
    }
}

fn forward_transformer(
    cfg: &EncoderConfig,
    ctx: &mut Ctx<'_, '_, '_>,
    g: &mut Graph,
    images: &[&Image],
    size: usize,
) -> Result<EncoderVars> {
    let b = images.len();
    let n_patch = cfg.n_patches(size);
    let w = cfg.width;
    let masks: Vec<Option<&PatchMask>> = match ctx.opts.masks {
        Some(m) => {
            if m.len() != b {
                return Err(RobError::contract("one mask slot per image is required"));
            }
            m.iter().map(Option::as_ref).collect()
        }
        None => vec![None; b],
    };
    for m in masks.iter().flatten() {
        if m.n_patches != n_patch {
            return Err(RobError::contract(format!(
                "mask covers {} patches, view has {n_patch}",
                m.n_patches
            )));
        }
    }
    let mode = ctx.opts.mask_mode.unwrap_or(MaskMode::Replace);

    let patches = g.constant(patchify(images, cfg.patch_size));
    let mut x = ctx.linear(g, patches, "patch_embed");

    if mode == MaskMode::Replace && masks.iter().any(|m| m.is_some_and(|m| m.n_masked() > 0)) {
        let flags: Vec<bool> = masks
            .iter()
            .flat_map(|m| (0..n_patch).map(move |p| m.is_some_and(|m| !m.kept[p])))
            .collect();
        let tok = ctx.leaf(g, "mask_token");
        x = g.replace_rows(x, tok, flags);
    }

    let pos = ctx.leaf(g, "pos_embed");
    let n_large = cfg.n_patches(cfg.input_size);
    let pos_patch_full = g.gather_rows(pos, (1..=n_large).collect());
    let pos_patch = if n_patch == n_large {
        pos_patch_full
    } else {
        let from = cfg.input_size / cfg.patch_size;
        let to = size / cfg.patch_size;
        let interp = g.constant(grid_interpolation(from, to));
        g.matmul(interp, pos_patch_full)
    };
    let pos_rows = g.gather_rows(pos_patch, (0..b).flat_map(|_| 0..n_patch).collect());
    x = g.add(x, pos_rows);

    // surviving patch positions per image
    let patch_index: Vec<Vec<usize>> = masks
        .iter()
        .map(|m| match (m, mode) {
            (Some(m), MaskMode::Drop) => m.kept_indices(),
            _ => (0..n_patch).collect(),
        })
        .collect();
    if mode == MaskMode::Drop && masks.iter().any(Option::is_some) {
        let keep: Vec<usize> = patch_index
            .iter()
            .enumerate()
            .flat_map(|(i, ps)| ps.iter().map(move |&p| i * n_patch + p))
            .collect();
        x = g.gather_rows(x, keep);
    }

    let cls = ctx.leaf(g, "cls_token");
    let pos0 = g.gather_rows(pos, vec![0]);
    let cls = g.add(cls, pos0);
    // sequence per image: [cls, patches...]
    let all = g.concat_rows(&[cls, x]);
    let mut order = Vec::new();
    let mut segments = Vec::with_capacity(b);
    let mut cls_rows = Vec::with_capacity(b);
    let mut patch_rows = Vec::new();
    let mut off = 1;
    for ps in &patch_index {
        cls_rows.push(order.len());
        order.push(0);
        for j in 0..ps.len() {
            patch_rows.push(order.len());
            order.push(off + j);
        }
        off += ps.len();
        segments.push(ps.len() + 1);
    }
    let mut x = g.gather_rows(all, order);

    let hidden_rates: Vec<f64> = (0..cfg.depth)
        .map(|l| {
            if cfg.depth > 1 {
                cfg.drop_path_rate * l as f64 / (cfg.depth - 1) as f64
            } else {
                cfg.drop_path_rate
            }
        })
        .collect();
    let mut layer_cls = Vec::new();
    for (l, &rate) in hidden_rates.iter().enumerate() {
        let name = |n: &str| format!("blocks.{l:02}.{n}");
        let h = ctx.norm(g, x, &name("norm1"));
        let qkv = ctx.linear(g, h, &name("attn.qkv"));
        let a = g.attention(qkv, segments.clone(), cfg.n_heads);
        let a = ctx.linear(g, a, &name("attn.proj"));
        let a = ctx.drop_path(g, a, rate, &segments);
        x = g.add(x, a);
        let h = ctx.norm(g, x, &name("norm2"));
        let h = ctx.linear(g, h, &name("mlp.fc1"));
        let h = g.gelu(h);
        let h = ctx.linear(g, h, &name("mlp.fc2"));
        let h = ctx.drop_path(g, h, rate, &segments);
        x = g.add(x, h);
        if ctx.opts.layerwise && l + 1 < cfg.depth {
            let c = g.gather_rows(x, cls_rows.clone());
            layer_cls.push(ctx.norm(g, c, "norm"));
        }
    }
    let x = ctx.norm(g, x, "norm");
    let global = g.gather_rows(x, cls_rows);
    if ctx.opts.layerwise {
        layer_cls.push(global);
    }
    let patch_tokens = g.gather_rows(x, patch_rows);
    let _ = w;
    Ok(EncoderVars {
        global,
        patch_tokens: Some(patch_tokens),
        patch_index,
        layerwise: layer_cls,
        feature_map: None,
    })
}

fn forward_conv(
    cfg: &EncoderConfig,
    ctx: &mut Ctx<'_, '_, '_>,
    g: &mut Graph,
    images: &[&Image],
    size: usize,
) -> Result<EncoderVars> {
    let b = images.len();
    let mut pixels = Matrix::zeros(b * size * size, CHANNELS);
    for (i, img) in images.iter().enumerate() {
        for (k, v) in img.data.iter().enumerate() {
            pixels.data_mut()[i * size * size * CHANNELS + k] = standardize(*v, k % CHANNELS);
        }
    }
    let widths = cfg.stage_widths();
    let mut x = g.constant(pixels);
    let (mut h, mut w, mut c) = (size, size, CHANNELS);

    let conv = |ctx: &Ctx<'_, '_, '_>,
                g: &mut Graph,
                x: Var,
                name: &str,
                h: usize,
                w: usize,
                cin: usize,
                cout: usize,
                stride: usize| {
        let geom = ConvGeometry {
            batch: b,
            height: h,
            width: w,
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride,
            padding: 1,
        };
        let wt = ctx.leaf(g, &format!("{name}.weight"));
        let bias = ctx.leaf(g, &format!("{name}.bias"));
        let y = g.conv2d(x, wt, geom);
        (g.add_row(y, bias), geom.out_height(), geom.out_width())
    };

    let (y, _, _) = conv(ctx, g, x, "stem.conv", h, w, c, widths[0], 1);
    let y = ctx.norm(g, y, "stem.norm");
    x = g.relu(y);
    c = widths[0];

    let total_blocks: usize = cfg.stage_depths.iter().sum();
    let mut block_idx = 0;
    let mut layerwise = Vec::new();
    for (s, &depth) in cfg.stage_depths.iter().enumerate() {
        if s > 0 {
            let (y, nh, nw) = conv(
                ctx,
                g,
                x,
                &format!("stages.{s}.down.conv"),
                h,
                w,
                c,
                widths[s],
                2,
            );
            let y = ctx.norm(g, y, &format!("stages.{s}.down.norm"));
            x = g.relu(y);
            h = nh;
            w = nw;
            c = widths[s];
        }
        for k in 0..depth {
            let rate = if total_blocks > 1 {
                cfg.drop_path_rate * block_idx as f64 / (total_blocks - 1) as f64
            } else {
                cfg.drop_path_rate
            };
            block_idx += 1;
            let name = |n: &str| format!("stages.{s}.blocks.{k}.{n}");
            let (y, _, _) = conv(ctx, g, x, &name("conv1"), h, w, c, c, 1);
            let y = ctx.norm(g, y, &name("norm1"));
            let y = g.relu(y);
            let (y, _, _) = conv(ctx, g, y, &name("conv2"), h, w, c, c, 1);
            let y = ctx.norm(g, y, &name("norm2"));
            let y = ctx.drop_path(g, y, rate, &vec![h * w; b]);
            let sum = g.add(x, y);
            x = g.relu(sum);
        }
        if ctx.opts.layerwise {
            layerwise.push(g.segment_mean(x, h * w));
        }
    }
    let global = g.segment_mean(x, h * w);
    Ok(EncoderVars {
        global,
        patch_tokens: None,
        patch_index: vec![Vec::new(); b],
        layerwise,
        feature_map: Some((x, h, w)),
    })
}

/// Parameter count of an encoder, computed from its config alone.
pub fn encoder_param_count(cfg: &EncoderConfig) -> usize {
    let mut store = ParamStore::new();
    init_encoder(cfg, &mut store, 0, "encoder");
    store.count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_rows_sum_to_one() {
        let m = grid_interpolation(4, 2);
        for r in 0..m.rows() {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let id = grid_interpolation(3, 3);
        for r in 0..9 {
            assert_eq!(id.get(r, r), 1.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::transformer(2, 30, 4, 8, 32)
            .validate()
            .is_err());
        assert!(EncoderConfig::transformer(2, 32, 4, 5, 32)
            .validate()
            .is_err());
        let mut c = EncoderConfig::transformer(2, 32, 4, 8, 32);
        c.drop_path_rate = 1.0;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::conv(vec![], 64, 32).validate().is_err());
        assert!(EncoderConfig::conv(vec![2, 2], 63, 32).validate().is_err());
        assert!(EncoderConfig::conv(vec![2, 2], 64, 32).validate().is_ok());
    }

    fn run(
        cfg: &EncoderConfig,
        store: &ParamStore,
        img: &Image,
        mask: Option<PatchMask>,
        mode: MaskMode,
    ) -> (Graph, EncoderVars) {
        let masks = [mask];
        let mut g = Graph::new();
        let mut opts = ForwardOptions {
            masks: masks[0].as_ref().map(|_| &masks[..]),
            mask_mode: Some(mode),
            ..Default::default()
        };
        let v = forward_encoder(cfg, store, "encoder", &mut g, &[img], &mut opts).unwrap();
        (g, v)
    }

    #[test]
    fn token_counts_and_masking_modes() {
        let cfg = EncoderConfig::transformer(4, 64, 4, 8, 32);
        let mut store = ParamStore::new();
        init_encoder(&cfg, &mut store, 3, "encoder");
        store
            .value_mut("encoder.mask_token")
            .unwrap()
            .data_mut()
            .fill(0.5);
        let img = crate::data::generate_synthetic_dataset(2, 1, 32, 0)
            .unwrap()
            .records
            .remove(0)
            .image;

        let (g, plain) = run(&cfg, &store, &img, None, MaskMode::Replace);
        assert_eq!(g.value(plain.patch_tokens.unwrap()).rows(), 16);
        assert_eq!(g.value(plain.global).shape(), (1, 64));

        let mask = PatchMask::from_masked(16, vec![1, 5, 9, 13]).unwrap();
        let (g, dropped) = run(&cfg, &store, &img, Some(mask.clone()), MaskMode::Drop);
        assert_eq!(g.value(dropped.patch_tokens.unwrap()).rows(), 12);
        assert_eq!(dropped.patch_row(0, 5), None);
        assert_eq!(dropped.patch_row(0, 6), Some(4));

        let (g2, replaced) = run(&cfg, &store, &img, Some(mask), MaskMode::Replace);
        assert_eq!(g2.value(replaced.patch_tokens.unwrap()).rows(), 16);
        let (g0, plain) = run(&cfg, &store, &img, None, MaskMode::Replace);
        assert_ne!(g2.value(replaced.global), g0.value(plain.global));

        for mode in [MaskMode::Drop, MaskMode::Replace] {
            let (g1, kept) = run(&cfg, &store, &img, Some(PatchMask::none(16)), mode);
            assert_eq!(g1.value(kept.global), g0.value(plain.global));
            assert_eq!(
                g1.value(kept.patch_tokens.unwrap()),
                g0.value(plain.patch_tokens.unwrap())
            );
        }
    }

    #[test]
    fn small_views_use_interpolated_positions() {
        let cfg = EncoderConfig::transformer(1, 16, 2, 4, 16);
        let mut store = ParamStore::new();
        init_encoder(&cfg, &mut store, 0, "encoder");
        let img = Image::new(8, 8);
        let (g, v) = run(&cfg, &store, &img, None, MaskMode::Replace);
        assert_eq!(g.value(v.patch_tokens.unwrap()).rows(), 4);
    }

    #[test]
    fn conv_family_contract() {
        let cfg = EncoderConfig::conv(vec![2, 2], 64, 32);
        let mut store = ParamStore::new();
        init_encoder(&cfg, &mut store, 0, "encoder");
        let img = Image::new(32, 32);
        let (g, v) = run(&cfg, &store, &img, None, MaskMode::Replace);
        assert_eq!(g.value(v.global).shape(), (1, 64));
        assert!(v.patch_tokens.is_none());
        let (_, _, h, w) = v.feature_map.map(|(x, h, w)| ((), x, h, w)).unwrap();
        assert_eq!((h, w), (16, 16));
        let masks = [Some(PatchMask::none(16))];
        let mut g = Graph::new();
        let mut opts = ForwardOptions {
            masks: Some(&masks),
            ..Default::default()
        };
        assert!(forward_encoder(&cfg, &store, "encoder", &mut g, &[&img], &mut opts).is_err());
    }

    #[test]
    fn parameter_counts_are_fixed_by_config() {
        // patch embed 192*64+64, cls 64, mask 64, pos 17*64, 4 blocks, final norm 128
        let block = 2 * 64
            + (64 * 192 + 192)
            + (64 * 64 + 64)
            + 2 * 64
            + (64 * 128 + 128)
            + (128 * 64 + 64);
        let want = 192 * 64 + 64 + 64 + 64 + 17 * 64 + 4 * block + 128;
        assert_eq!(
            encoder_param_count(&EncoderConfig::transformer(4, 64, 4, 8, 32)),
            want
        );
        assert_eq!(
            encoder_param_count(&EncoderConfig::transformer(4, 64, 4, 8, 32)),
            147_584
        );
        // stem 3->32, stage 0: two blocks at 32, down 32->64, stage 1: two blocks at 64
        let conv = |i: usize, o: usize| 9 * i * o + o;
        let want = conv(3, 32)
            + 64
            + 2 * (2 * conv(32, 32) + 4 * 32)
            + conv(32, 64)
            + 128
            + 2 * (2 * conv(64, 64) + 4 * 64);
        assert_eq!(
            encoder_param_count(&EncoderConfig::conv(vec![2, 2], 64, 32)),
            want
        );
    }
}
