//! Base fusion network: two CRB encoders, the saliency-gated feature fusion
//! block, and the decoder/reconstruction path producing a one-channel image.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamSet, SetId};
use crate::tensor::{Conv2dSpec, PoolKind, Tape, Var};

/// How the two encoder outputs are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    /// Gradient-driven saliency gate over the concatenated features.
    Gated,
    /// Plain concatenation followed by a 1×1 conv (ablation).
    Concat,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Gated => "gated",
            FusionKind::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(FusionKind::Gated),
            "concat" => Ok(FusionKind::Concat),
            _ => Err(Error::Config(format!("unknown fusion kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BfnConfig {
    /// CRBs per encoder and in the decoder.
    pub depth: usize,
    /// Encoder feature width.
    pub width: usize,
    /// Decoder width.
    pub dec_width: usize,
    pub slope: f64,
    pub fusion: FusionKind,
}

impl Default for BfnConfig {
    fn default() -> Self {
        BfnConfig {
            depth: 4,
            width: 8,
            dec_width: 16,
            slope: 0.1,
            fusion: FusionKind::Gated,
        }
    }
}

impl BfnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.width == 0 || self.dec_width < 4 {
            return Err(Error::Config("widths too small".into()));
        }
        if !(self.slope >= 0.0 && self.slope < 1.0) {
            return Err(Error::Config(format!("bad lrelu slope {}", self.slope)));
        }
        Ok(())
    }

    /// Input and output width of each encoder CRB.
    pub fn encoder_widths(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|i| (if i == 0 { 1 } else { self.width }, self.width))
            .collect()
    }

    fn decoder_widths(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|i| (if i == 0 { 2 * self.width } else { self.dec_width }, self.dec_width))
            .collect()
    }

    fn rb_widths(&self) -> [usize; 4] {
        let d = self.dec_width;
        [d, d / 2, d / 4, 1]
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("bfn.depth".into(), self.depth.to_string()),
            ("bfn.width".into(), self.width.to_string()),
            ("bfn.dec_width".into(), self.dec_width.to_string()),
            ("bfn.slope".into(), format!("{:?}", self.slope)),
            ("bfn.fusion".into(), self.fusion.as_str().into()),
        ]
    }

    pub fn from_pairs(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let need = |k: &str| get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let num = |k: &str| -> Result<usize> {
            need(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {k}")))
        };
        let cfg = BfnConfig {
            depth: num("bfn.depth")?,
            width: num("bfn.width")?,
            dec_width: num("bfn.dec_width")?,
            slope: need("bfn.slope")?
                .parse()
                .map_err(|_| Error::Format("bad value for bfn.slope".into()))?,
            fusion: FusionKind::parse(&need("bfn.fusion")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which encoder a feature belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Ir,
    Vi,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Ir => "ir",
            Stream::Vi => "vi",
        }
    }
}

pub fn init_crb(init: &mut Init, set: &mut ParamSet, name: &str, cin: usize, cout: usize) -> Result<()> {
    for j in 0..3 {
        let ci = if j == 0 { cin } else { cout };
        init.conv_no_bias(set, &format!("{name}.conv{j}"), ci, cout, 3)?;
        init.batch_norm(set, &format!("{name}.bn{j}"), cout)?;
    }
    if cin != cout {
        init.conv(set, &format!("{name}.skip"), cin, cout, 1)?;
    }
    Ok(())
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params(cfg: &BfnConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut set = ParamSet::new();
    for stream in [Stream::Ir, Stream::Vi] {
        for (i, (cin, cout)) in cfg.encoder_widths().into_iter().enumerate() {
            init_crb(&mut init, &mut set, &format!("{}.crb{i}", stream.as_str()), cin, cout)?;
        }
    }
    let c2 = 2 * cfg.width;
    match cfg.fusion {
        FusionKind::Gated => {
            init.linear(&mut set, "ff.gmp", c2, c2)?;
            init.linear(&mut set, "ff.gap", c2, c2)?;
            init.conv(&mut set, "ff.maxp", c2, c2, 3)?;
            init.conv(&mut set, "ff.meanp", c2, c2, 3)?;
        }
        FusionKind::Concat => init.conv(&mut set, "ff.proj", c2, c2, 1)?,
    }
    for (i, (cin, cout)) in cfg.decoder_widths().into_iter().enumerate() {
        init_crb(&mut init, &mut set, &format!("ffd.crb{i}"), cin, cout)?;
    }
    let rb = cfg.rb_widths();
    for j in 0..2 {
        init.conv_no_bias(&mut set, &format!("rb.conv{j}"), rb[j], rb[j + 1], 3)?;
        init.batch_norm(&mut set, &format!("rb.bn{j}"), rb[j + 1])?;
    }
    init.conv(&mut set, "rb.head", rb[2], rb[3], 3)?;
    Ok(set)
}

/// Conv → BN → LReLU.
pub fn conv_block(ctx: &mut Ctx, set: SetId, conv: &str, bn: &str, x: Var, slope: f64) -> Result<Var> {
    let y = ctx.conv_same(set, conv, x)?;
    let y = ctx.batch_norm(set, bn, y)?;
    ctx.tape.lrelu(y, slope)
}

/// Three conv blocks plus a skip path (identity or 1×1 projection).
pub fn crb_forward(ctx: &mut Ctx, set: SetId, name: &str, x: Var, slope: f64) -> Result<Var> {
    let cin = ctx.tape.shape(x).get(1).copied().unwrap_or(0);
    let w0 = format!("{name}.conv0.weight");
    if ctx.has(set, &w0) {
        let expect = ctx.p(set, &w0).map(|v| ctx.tape.shape(v)[1])?;
        if expect != cin {
            return Err(Error::dim(format!("{name} expects {expect} channels, got {cin}")));
        }
    }
    let mut y = x;
    for j in 0..3 {
        y = conv_block(ctx, set, &format!("{name}.conv{j}"), &format!("{name}.bn{j}"), y, slope)?;
    }
    let skip = if ctx.has(set, &format!("{name}.skip.weight")) {
        ctx.conv(set, &format!("{name}.skip"), x, Conv2dSpec::default())?
    } else {
        x
    };
    ctx.tape.add(y, skip)
}

/// Hook called on each intermediate encoder feature (depth `0..depth-1`).
pub type FeatureHook<'h, 'a> = &'h mut dyn FnMut(&mut Ctx<'a>, Stream, usize, Var) -> Result<Var>;

/// Runs one encoder and returns every CRB output. The hook, when given, may
/// replace each of the first `depth - 1` features before the next CRB sees it.
pub fn encode<'a>(
    ctx: &mut Ctx<'a>,
    set: SetId,
    cfg: &BfnConfig,
    stream: Stream,
    image: Var,
    mut hook: Option<FeatureHook<'_, 'a>>,
) -> Result<Vec<Var>> {
    let c = ctx.tape.shape(image).get(1).copied();
    if ctx.tape.shape(image).len() != 4 || c != Some(1) {
        return Err(Error::dim(format!(
            "encoder wants [B,1,H,W], got {:?}",
            ctx.tape.shape(image)
        )));
    }
    let mut feats = Vec::with_capacity(cfg.depth);
    let mut x = image;
    for i in 0..cfg.depth {
        x = crb_forward(ctx, set, &format!("{}.crb{i}", stream.as_str()), x, cfg.slope)?;
        if i + 1 < cfg.depth {
            if let Some(h) = hook.as_mut() {
                x = h(ctx, stream, i, x)?;
            }
        }
        feats.push(x);
    }
    Ok(feats)
}

/// Saliency-gated fusion: a gate computed from the gradient map of the
/// concatenated features scales those same features.
pub fn ff_fuse(ctx: &mut Ctx, set: SetId, f_ir: Var, f_vi: Var) -> Result<Var> {
    if ctx.tape.shape(f_ir) != ctx.tape.shape(f_vi) {
        return Err(Error::dim(format!(
            "fusion inputs differ: {:?} vs {:?}",
            ctx.tape.shape(f_ir),
            ctx.tape.shape(f_vi)
        )));
    }
    let cat = ctx.tape.concat(&[f_ir, f_vi], 1)?;
    let shape = ctx.tape.shape(cat).to_vec();
    let (b, c2, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let g = ctx.tape.spatial_gradient(cat)?;

    let vector = |ctx: &mut Ctx, kind: PoolKind, name: &str| -> Result<Var> {
        let p = ctx.tape.pool(kind, g)?;
        let p = ctx.tape.reshape(p, &[b, c2])?;
        let p = ctx.linear(set, name, p)?;
        ctx.tape.relu(p)
    };
    let v_max = vector(ctx, PoolKind::GlobalMax, "ff.gmp")?;
    let v_avg = vector(ctx, PoolKind::GlobalAvg, "ff.gap")?;
    let v = ctx.tape.add(v_max, v_avg)?;
    let v = ctx.tape.reshape(v, &[b, c2, 1, 1])?;
    let v = ctx.tape.expand(v, &shape)?;

    let map = |ctx: &mut Ctx, kind: PoolKind, name: &str| -> Result<Var> {
        let p = ctx.tape.pool(kind, g)?;
        let p = ctx.conv_same(set, name, p)?;
        let p = ctx.tape.relu(p)?;
        ctx.tape.upsample_nearest(p, h, w)
    };
    let m_max = map(ctx, PoolKind::Max2d(2), "ff.maxp")?;
    let m_avg = map(ctx, PoolKind::Avg2d(2), "ff.meanp")?;
    let m = ctx.tape.add(m_max, m_avg)?;

    let logits = ctx.tape.mul(v, m)?;
    let gate = ctx.tape.sigmoid(logits)?;
    ctx.tape.mul(gate, cat)
}

fn concat_fuse(ctx: &mut Ctx, set: SetId, f_ir: Var, f_vi: Var) -> Result<Var> {
    let cat = ctx.tape.concat(&[f_ir, f_vi], 1)?;
    ctx.conv(set, "ff.proj", cat, Conv2dSpec::default())
}

/// Decoder CRBs and reconstruction head; output in (0, 1).
pub fn reconstruct(ctx: &mut Ctx, set: SetId, cfg: &BfnConfig, fused: Var) -> Result<Var> {
    let mut x = fused;
    for i in 0..cfg.depth {
        x = crb_forward(ctx, set, &format!("ffd.crb{i}"), x, cfg.slope)?;
    }
    for j in 0..2 {
        x = conv_block(ctx, set, &format!("rb.conv{j}"), &format!("rb.bn{j}"), x, cfg.slope)?;
    }
    let y = ctx.conv_same(set, "rb.head", x)?;
    ctx.tape.sigmoid(y)
}

/// Full fusion forward. `hook` injects into the encoders (see [`encode`]).
pub fn fuse<'a>(
    ctx: &mut Ctx<'a>,
    set: SetId,
    cfg: &BfnConfig,
    ir: Var,
    vi: Var,
    mut hook: Option<FeatureHook<'_, 'a>>,
) -> Result<Var> {
    if ctx.tape.shape(ir) != ctx.tape.shape(vi) {
        return Err(Error::Input(format!(
            "source shapes differ: {:?} vs {:?}",
            ctx.tape.shape(ir),
            ctx.tape.shape(vi)
        )));
    }
    let f_ir = encode(ctx, set, cfg, Stream::Ir, ir, hook.as_mut().map(|h| &mut **h as _))?;
    let f_vi = encode(ctx, set, cfg, Stream::Vi, vi, hook.as_mut().map(|h| &mut **h as _))?;
    let (a, b) = (f_ir[cfg.depth - 1], f_vi[cfg.depth - 1]);
    let fused = match cfg.fusion {
        FusionKind::Gated => ff_fuse(ctx, set, a, b)?,
        FusionKind::Concat => concat_fuse(ctx, set, a, b)?,
    };
    reconstruct(ctx, set, cfg, fused)
}

/// Mean |I_f − max(I_ir, I_vi)|.
pub fn brightness_loss(tape: &mut Tape, fused: Var, ir: Var, vi: Var) -> Result<Var> {
    let target = tape.max(ir, vi)?;
    tape.l1(fused, target)
}

/// Mean |∇I_f − max(∇I_ir, ∇I_vi)| with the Sobel magnitude as ∇.
pub fn gradient_loss(tape: &mut Tape, fused: Var, ir: Var, vi: Var) -> Result<Var> {
    let gf = tape.spatial_gradient(fused)?;
    let gi = tape.spatial_gradient(ir)?;
    let gv = tape.spatial_gradient(vi)?;
    let target = tape.max(gi, gv)?;
    tape.l1(gf, target)
}

/// Gradient term plus `lambda` times the brightness term.
pub fn fusion_loss(tape: &mut Tape, fused: Var, ir: Var, vi: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let g = gradient_loss(tape, fused, ir, vi)?;
    if lambda == 0.0 {
        return Ok(g);
    }
    let b = brightness_loss(tape, fused, ir, vi)?;
    let b = tape.scale(b, lambda)?;
    tape.add(g, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{BnMode, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn small() -> BfnConfig {
        BfnConfig {
            depth: 2,
            width: 4,
            dec_width: 8,
            ..BfnConfig::default()
        }
    }

    #[test]
    fn crb_with_zero_kernels_is_identity() {
        let mut set = ParamSet::new();
        let mut init = Init::new(0);
        init_crb(&mut init, &mut set, "c", 3, 3).unwrap();
        for (name, t) in set.params_mut() {
            if name.contains(".conv") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut ctx = Ctx::new();
        let s = ctx.attach(&set, true, BnMode::Train);
        let x = ctx.input(rand_img(1, &[2, 3, 5, 5]));
        let y = crb_forward(&mut ctx, s, "c", x, 0.1).unwrap();
        assert!(ctx.tape.value(y).bitwise_eq(ctx.tape.value(x)));
    }

    #[test]
    fn crb_rejects_wrong_width() {
        let mut set = ParamSet::new();
        init_crb(&mut Init::new(0), &mut set, "c", 3, 3).unwrap();
        let mut ctx = Ctx::new();
        let s = ctx.attach(&set, true, BnMode::Train);
        let x = ctx.input(rand_img(1, &[1, 2, 5, 5]));
        assert!(matches!(crb_forward(&mut ctx, s, "c", x, 0.1), Err(Error::Dimension(_))));
    }

    #[test]
    fn fuse_shapes_and_range() {
        let cfg = small();
        let set = init_params(&cfg, 5).unwrap();
        for mode in [BnMode::Train, BnMode::Eval] {
            let mut ctx = Ctx::new();
            let s = ctx.attach(&set, false, mode);
            let ir = ctx.input(rand_img(2, &[2, 1, 8, 8]));
            let vi = ctx.input(rand_img(3, &[2, 1, 8, 8]));
            let f = fuse(&mut ctx, s, &cfg, ir, vi, None).unwrap();
            let v = ctx.tape.value(f);
            assert_eq!(v.shape(), &[2, 1, 8, 8]);
            assert!(v.data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let cfg = small();
        let mut set = init_params(&cfg, 5).unwrap();
        for (name, t) in set.params_mut() {
            if name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut ctx = Ctx::new();
        let s = ctx.attach(&set, false, BnMode::Eval);
        let x = ctx.input(Tensor::zeros(&[1, 1, 6, 6]));
        let feats = encode(&mut ctx, s, &cfg, Stream::Ir, x, None).unwrap();
        assert_eq!(feats.len(), 2);
        for f in feats {
            assert!(ctx.tape.value(f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gate_never_amplifies() {
        let set = init_params(&BfnConfig::default(), 1).unwrap();
        let mut ctx = Ctx::new();
        let s = ctx.attach(&set, false, BnMode::Eval);
        let a = ctx.input(rand_img(7, &[1, 8, 6, 6]));
        let b = ctx.input(rand_img(8, &[1, 8, 6, 6]));
        let out = ff_fuse(&mut ctx, s, a, b).unwrap();
        let cat = ctx.tape.concat(&[a, b], 1).unwrap();
        let (o, c) = (ctx.tape.value(out).data(), ctx.tape.value(cat).data());
        assert!(o.iter().zip(c).all(|(o, c)| o.abs() <= c.abs()));
    }

    #[test]
    fn constant_features_give_flat_gate() {
        let set = init_params(&BfnConfig::default(), 1).unwrap();
        let mut ctx = Ctx::new();
        let s = ctx.attach(&set, false, BnMode::Eval);
        let a = ctx.input(Tensor::full(&[1, 8, 6, 6], 0.3));
        let b = ctx.input(Tensor::full(&[1, 8, 6, 6], 0.7));
        let out = ff_fuse(&mut ctx, s, a, b).unwrap();
        let o = ctx.tape.value(out).data();
        for plane in o.chunks(36) {
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    #[test]
    fn loss_hand_values() {
        let mut t = Tape::new();
        let ir = t.constant(Tensor::new(&[1, 1, 2, 2], vec![0.2, 0.8, 0.5, 0.1]).unwrap());
        let vi = t.constant(Tensor::new(&[1, 1, 2, 2], vec![0.6, 0.3, 0.4, 0.9]).unwrap());
        let f = t.constant(Tensor::full(&[1, 1, 2, 2], 0.5));
        let l = brightness_loss(&mut t, f, ir, vi).unwrap();
        assert!((t.value(l).item().unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn fusion_loss_zero_lambda_is_gradient_loss() {
        let mut t = Tape::new();
        let ir = t.constant(rand_img(1, &[1, 1, 5, 5]));
        let vi = t.constant(rand_img(2, &[1, 1, 5, 5]));
        let f = t.constant(rand_img(3, &[1, 1, 5, 5]));
        let a = fusion_loss(&mut t, f, ir, vi, 0.0).unwrap();
        let b = gradient_loss(&mut t, f, ir, vi).unwrap();
        assert_eq!(t.value(a).item().unwrap().to_bits(), t.value(b).item().unwrap().to_bits());
        let same = gradient_loss(&mut t, ir, ir, ir).unwrap();
        assert_eq!(t.value(same).item().unwrap(), 0.0);
    }
}
