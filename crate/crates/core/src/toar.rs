//! Task-oriented regulation: one dynamic-prompt module per (stream, depth)
//! injection point. Each module turns the instruction embedding and pooled
//! image statistics into a per-sample depthwise kernel, filters the feature
//! with it, refines the result and adds it back onto the feature.

use crate::bfn::{self, BfnConfig, Stream};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamSet, SetId};
use crate::tensor::{Conv2dSpec, PoolKind, Var};

/// Which regulator wiring to build. `Full` is the complete module; the rest
/// are the ablated variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Kernel predicted from image statistics only.
    NoInstruction,
    /// Static refinement convs on the feature; no kernel, no text.
    PlainConvs,
    /// Text vector added to the feature before static convs.
    AddText,
    /// Text vector concatenated to the feature before static convs.
    ConcatText,
    /// Kernel predicted from the text vector only.
    NoPooling,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoInstruction => "no-instruction",
            Variant::PlainConvs => "plain-convs",
            Variant::AddText => "add-text",
            Variant::ConcatText => "concat-text",
            Variant::NoPooling => "no-pooling",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "no-instruction" => Variant::NoInstruction,
            "plain-convs" => Variant::PlainConvs,
            "add-text" => Variant::AddText,
            "concat-text" => Variant::ConcatText,
            "no-pooling" => Variant::NoPooling,
            _ => return Err(Error::Config(format!("unknown regulator variant {s:?}"))),
        })
    }

    pub fn uses_text(self) -> bool {
        !matches!(self, Variant::NoInstruction | Variant::PlainConvs)
    }

    fn dynamic(self) -> bool {
        matches!(self, Variant::Full | Variant::NoInstruction | Variant::NoPooling)
    }

    fn pools(self) -> bool {
        matches!(self, Variant::Full | Variant::NoInstruction)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToarConfig {
    pub depth: usize,
    pub width: usize,
    pub text_dim: usize,
    pub kernel: usize,
    /// Hidden width of the kernel predictor.
    pub hidden: usize,
    pub slope: f64,
    pub variant: Variant,
}

impl ToarConfig {
    pub fn for_bfn(bfn: &BfnConfig, text_dim: usize, variant: Variant) -> Self {
        ToarConfig {
            depth: bfn.depth,
            width: bfn.width,
            text_dim,
            kernel: 3,
            hidden: 4 * bfn.width,
            slope: bfn.slope,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.width == 0 || self.text_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("regulator dimensions must be positive, depth >= 2".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Number of injection modules.
    pub fn modules(&self) -> usize {
        2 * (self.depth - 1)
    }

    fn cppb_in(&self) -> usize {
        match self.variant {
            Variant::Full => 3 * self.width,
            Variant::NoInstruction => 2 * self.width,
            Variant::NoPooling => self.width,
            _ => 0,
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("toar.depth".into(), self.depth.to_string()),
            ("toar.width".into(), self.width.to_string()),
            ("toar.text_dim".into(), self.text_dim.to_string()),
            ("toar.kernel".into(), self.kernel.to_string()),
            ("toar.hidden".into(), self.hidden.to_string()),
            ("toar.slope".into(), format!("{:?}", self.slope)),
            ("toar.variant".into(), self.variant.as_str().into()),
        ]
    }

    pub fn from_pairs(get: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let need = |k: &str| get(k).ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let num = |k: &str| -> Result<usize> {
            need(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for {k}")))
        };
        let cfg = ToarConfig {
            depth: num("toar.depth")?,
            width: num("toar.width")?,
            text_dim: num("toar.text_dim")?,
            kernel: num("toar.kernel")?,
            hidden: num("toar.hidden")?,
            slope: need("toar.slope")?
                .parse()
                .map_err(|_| Error::Format("bad value for toar.slope".into()))?,
            variant: Variant::parse(&need("toar.variant")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter prefix of the module at (stream, depth).
pub fn module_name(stream: Stream, depth: usize) -> String {
    format!("{}{depth}", stream.as_str())
}

/// Fresh regulator parameters; the last refinement conv of every module is
/// zero so the regulator starts as an exact no-op.
pub fn init_params(cfg: &ToarConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut set = ParamSet::new();
    let c = cfg.width;
    for stream in [Stream::Ir, Stream::Vi] {
        for i in 0..cfg.depth - 1 {
            let m = module_name(stream, i);
            if cfg.variant.uses_text() {
                init.linear(&mut set, &format!("{m}.adapter.l0"), cfg.text_dim, c)?;
                init.linear(&mut set, &format!("{m}.adapter.l1"), c, c)?;
            }
            if cfg.variant.pools() {
                init.conv(&mut set, &format!("{m}.pre_avg"), c, c, 3)?;
                init.conv(&mut set, &format!("{m}.pre_max"), c, c, 3)?;
            }
            if cfg.variant.dynamic() {
                init.linear(&mut set, &format!("{m}.cppb.l0"), cfg.cppb_in(), cfg.hidden)?;
                let k2 = cfg.kernel * cfg.kernel;
                init.linear(&mut set, &format!("{m}.cppb.l1"), cfg.hidden, c * k2)?;
            }
            let c0 = if cfg.variant == Variant::ConcatText { 2 * c } else { c };
            init.batch_norm(&mut set, &format!("{m}.post.bn0"), c0)?;
            init.conv_no_bias(&mut set, &format!("{m}.post.conv0"), c0, c, 3)?;
            init.batch_norm(&mut set, &format!("{m}.post.bn1"), c)?;
            init.conv_no_bias(&mut set, &format!("{m}.post.conv1"), c, c, 3)?;
            init.batch_norm(&mut set, &format!("{m}.post.bn2"), c)?;
            init.conv_zero(&mut set, &format!("{m}.post.conv2"), c, c, 3)?;
        }
    }
    Ok(set)
}

/// Maps the text embedding `[1, D]` to the image-feature domain `[B, C]`.
pub fn adapter_forward(ctx: &mut Ctx, set: SetId, module: &str, text: Var, batch: usize) -> Result<Var> {
    let h = ctx.linear(set, &format!("{module}.adapter.l0"), text)?;
    let h = ctx.tape.relu(h)?;
    let t = ctx.linear(set, &format!("{module}.adapter.l1"), h)?;
    let c = ctx.tape.shape(t)[1];
    let rows = ctx.tape.shape(t)[0];
    if rows == batch {
        Ok(t)
    } else if rows == 1 {
        ctx.tape.expand(t, &[batch, c])
    } else {
        Err(Error::dim(format!("text rows {rows} do not match batch {batch}")))
    }
}

/// Per-sample depthwise kernels `[B, C, 1, k, k]` from pooled statistics of
/// `feat` and the adapted text vector (either may be absent per variant).
pub fn predict_kernel(
    ctx: &mut Ctx,
    set: SetId,
    cfg: &ToarConfig,
    module: &str,
    feat: Var,
    text: Option<Var>,
) -> Result<Var> {
    let shape = ctx.tape.shape(feat).to_vec();
    if shape.len() != 4 || shape[1] != cfg.width {
        return Err(Error::dim(format!("regulator width {} got feature {shape:?}", cfg.width)));
    }
    let (b, c) = (shape[0], shape[1]);
    let mut parts = Vec::with_capacity(3);
    if cfg.variant.pools() {
        let a = ctx.conv_same(set, &format!("{module}.pre_avg"), feat)?;
        let a = ctx.tape.pool(PoolKind::GlobalAvg, a)?;
        parts.push(ctx.tape.reshape(a, &[b, c])?);
        let m = ctx.conv_same(set, &format!("{module}.pre_max"), feat)?;
        let m = ctx.tape.pool(PoolKind::GlobalMax, m)?;
        parts.push(ctx.tape.reshape(m, &[b, c])?);
    }
    if cfg.variant.uses_text() {
        let t = text.ok_or_else(|| Error::Config("regulator variant needs an instruction".into()))?;
        parts.push(t);
    }
    let z = if parts.len() == 1 {
        parts[0]
    } else {
        ctx.tape.concat(&parts, 1)?
    };
    let h = ctx.linear(set, &format!("{module}.cppb.l0"), z)?;
    let h = ctx.tape.relu(h)?;
    let w = ctx.linear(set, &format!("{module}.cppb.l1"), h)?;
    ctx.tape.reshape(w, &[b, c, 1, cfg.kernel, cfg.kernel])
}

/// Filters each sample's feature with its own kernel (same padding).
pub fn depthwise_per_sample(ctx: &mut Ctx, kernel: Var, feat: Var) -> Result<Var> {
    let shape = ctx.tape.shape(feat).to_vec();
    let ks = ctx.tape.shape(kernel).to_vec();
    if shape.len() != 4 || ks.len() != 5 || ks[0] != shape[0] || ks[1] != shape[1] || ks[3] != ks[4] {
        return Err(Error::dim(format!("kernel {ks:?} does not fit feature {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let k = ks[3];
    let x = ctx.tape.reshape(feat, &[1, b * c, h, w])?;
    let kk = ctx.tape.reshape(kernel, &[b * c, 1, k, k])?;
    let y = ctx.tape.conv2d(x, kk, None, Conv2dSpec::same(k).with_groups(b * c))?;
    ctx.tape.reshape(y, &shape)
}

fn refine(ctx: &mut Ctx, set: SetId, cfg: &ToarConfig, module: &str, x: Var) -> Result<Var> {
    let mut y = x;
    for j in 0..3 {
        y = ctx.batch_norm(set, &format!("{module}.post.bn{j}"), y)?;
        y = ctx.tape.lrelu(y, cfg.slope)?;
        y = ctx.conv_same(set, &format!("{module}.post.conv{j}"), y)?;
    }
    Ok(y)
}

/// The prompt `P` for one feature.
pub fn dynamic_prompt(
    ctx: &mut Ctx,
    set: SetId,
    cfg: &ToarConfig,
    module: &str,
    feat: Var,
    text: Option<Var>,
) -> Result<Var> {
    let shape = ctx.tape.shape(feat).to_vec();
    if shape.len() != 4 || shape[1] != cfg.width {
        return Err(Error::dim(format!("regulator width {} got feature {shape:?}", cfg.width)));
    }
    let b = shape[0];
    let text = match (cfg.variant.uses_text(), text) {
        (true, Some(t)) => Some(adapter_forward(ctx, set, module, t, b)?),
        (true, None) => return Err(Error::Config("regulator variant needs an instruction".into())),
        (false, _) => None,
    };
    let broadcast = |ctx: &mut Ctx, t: Var| -> Result<Var> {
        let t = ctx.tape.reshape(t, &[b, cfg.width, 1, 1])?;
        ctx.tape.expand(t, &shape)
    };
    let x = match cfg.variant {
        Variant::Full | Variant::NoInstruction | Variant::NoPooling => {
            let k = predict_kernel(ctx, set, cfg, module, feat, text)?;
            depthwise_per_sample(ctx, k, feat)?
        }
        Variant::PlainConvs => feat,
        Variant::AddText => {
            let t = broadcast(ctx, text.expect("text checked above"))?;
            ctx.tape.add(feat, t)?
        }
        Variant::ConcatText => {
            let t = broadcast(ctx, text.expect("text checked above"))?;
            ctx.tape.concat(&[feat, t], 1)?
        }
    };
    refine(ctx, set, cfg, module, x)
}

/// Residual injection `P + F`.
pub fn inject(ctx: &mut Ctx, prompt: Var, feat: Var) -> Result<Var> {
    ctx.tape.add(prompt, feat)
}

/// Fusion with every intermediate encoder feature regulated by the same
/// instruction. `text` is the `[1, D]` embedding (ignored by text-free variants).
#[allow(clippy::too_many_arguments)]
pub fn toar_forward<'a>(
    ctx: &mut Ctx<'a>,
    bfn_set: SetId,
    bfn_cfg: &BfnConfig,
    toar_set: SetId,
    cfg: &ToarConfig,
    ir: Var,
    vi: Var,
    text: Option<Var>,
) -> Result<Var> {
    if cfg.depth != bfn_cfg.depth || cfg.width != bfn_cfg.width {
        return Err(Error::Config(format!(
            "regulator built for depth {} width {}, network has {} / {}",
            cfg.depth, cfg.width, bfn_cfg.depth, bfn_cfg.width
        )));
    }
    let mut hook = |ctx: &mut Ctx<'a>, stream: Stream, depth: usize, feat: Var| -> Result<Var> {
        let m = module_name(stream, depth);
        let p = dynamic_prompt(ctx, toar_set, cfg, &m, feat, text)?;
        inject(ctx, p, feat)
    };
    bfn::fuse(ctx, bfn_set, bfn_cfg, ir, vi, Some(&mut hook))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruct::encode_text;
    use crate::tensor::{BnMode, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn cfg(variant: Variant) -> ToarConfig {
        ToarConfig::for_bfn(&BfnConfig::default(), 64, variant)
    }

    fn text(ctx: &mut Ctx, s: &str) -> Var {
        let e = encode_text(s).unwrap();
        ctx.input(Tensor::new(&[1, 64], e.vector).unwrap())
    }

    #[test]
    fn module_count() {
        let c = cfg(Variant::Full);
        assert_eq!(c.modules(), 6);
        let set = init_params(&c, 1).unwrap();
        let mods: std::collections::BTreeSet<_> =
            set.params().map(|(n, _)| n.split('.').next().unwrap().to_string()).collect();
        assert_eq!(mods.len(), 6);
    }

    #[test]
    fn kernel_shape_and_text_sensitivity() {
        let c = cfg(Variant::Full);
        let set = init_params(&c, 2).unwrap();
        let mut ctx = Ctx::new();
        let s = ctx.attach(&set, false, BnMode::Eval);
        let f = ctx.input(rand_t(3, &[2, 8, 6, 6]));
        let mut kernels = Vec::new();
        for instr in ["detect objects", "segment every pixel into classes"] {
            let t = text(&mut ctx, instr);
            let t = adapter_forward(&mut ctx, s, "ir0", t, 2).unwrap();
            let k = predict_kernel(&mut ctx, s, &c, "ir0", f, Some(t)).unwrap();
            assert_eq!(ctx.tape.shape(k), &[2, 8, 1, 3, 3]);
            kernels.push(ctx.tape.value(k).clone());
        }
        assert!(!kernels[0].bitwise_eq(&kernels[1]));
    }

    #[test]
    fn zero_last_layer_means_zero_prompt() {
        for v in [Variant::Full, Variant::NoInstruction, Variant::PlainConvs, Variant::AddText, Variant::ConcatText, Variant::NoPooling] {
            let c = cfg(v);
            let set = init_params(&c, 2).unwrap();
            let mut ctx = Ctx::new();
            let s = ctx.attach(&set, true, BnMode::Train);
            let f = ctx.input(rand_t(3, &[2, 8, 6, 6]));
            let t = text(&mut ctx, "detect objects");
            let p = dynamic_prompt(&mut ctx, s, &c, "vi1", f, Some(t)).unwrap();
            assert!(ctx.tape.value(p).data().iter().all(|&x| x == 0.0), "{v:?}");
            let out = inject(&mut ctx, p, f).unwrap();
            assert_eq!(ctx.tape.value(out).shape(), &[2, 8, 6, 6]);
        }
    }

    #[test]
    fn batch_permutation_permutes_prompt() {
        let c = cfg(Variant::Full);
        let mut set = init_params(&c, 4).unwrap();
        let mut init = Init::new(9);
        *set.param_mut("ir0.post.conv2.weight").unwrap() = init.fan_in(&[8, 8, 3, 3], 72);
        let a = rand_t(5, &[1, 8, 5, 5]);
        let b = rand_t(6, &[1, 8, 5, 5]);
        let cat = |x: &Tensor, y: &Tensor| {
            Tensor::new(&[2, 8, 5, 5], [x.data(), y.data()].concat()).unwrap()
        };
        let run = |input: Tensor| {
            let mut ctx = Ctx::new();
            let s = ctx.attach(&set, false, BnMode::Eval);
            let f = ctx.input(input);
            let t = text(&mut ctx, "highlight the salient object");
            let p = dynamic_prompt(&mut ctx, s, &c, "ir0", f, Some(t)).unwrap();
            ctx.tape.value(p).clone()
        };
        let ab = run(cat(&a, &b));
        let ba = run(cat(&b, &a));
        let half = ab.numel() / 2;
        assert_eq!(&ab.data()[..half], &ba.data()[half..]);
        assert_eq!(&ab.data()[half..], &ba.data()[..half]);
        assert!(ab.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn fresh_regulator_is_identity() {
        let bc = BfnConfig::default();
        let bset = bfn::init_params(&bc, 1).unwrap();
        let c = cfg(Variant::Full);
        let tset = init_params(&c, 2).unwrap();
        let ir = rand_t(7, &[2, 1, 8, 8]);
        let vi = rand_t(8, &[2, 1, 8, 8]);

        let mut ctx = Ctx::new();
        let bs = ctx.attach(&bset, false, BnMode::Eval);
        let (i, v) = (ctx.input(ir.clone()), ctx.input(vi.clone()));
        let plain = bfn::fuse(&mut ctx, bs, &bc, i, v, None).unwrap();
        let plain = ctx.tape.value(plain).clone();

        let mut ctx = Ctx::new();
        let bs = ctx.attach(&bset, false, BnMode::Eval);
        let ts = ctx.attach(&tset, false, BnMode::Eval);
        let (i, v) = (ctx.input(ir), ctx.input(vi));
        let t = text(&mut ctx, "detect objects");
        let out = toar_forward(&mut ctx, bs, &bc, ts, &c, i, v, Some(t)).unwrap();
        assert!(ctx.tape.value(out).bitwise_eq(&plain));
    }

    #[test]
    fn missing_text_is_config_error() {
        let c = cfg(Variant::Full);
        let set = init_params(&c, 2).unwrap();
        let mut ctx = Ctx::new();
        let s = ctx.attach(&set, false, BnMode::Eval);
        let f = ctx.input(rand_t(3, &[1, 8, 4, 4]));
        assert!(matches!(dynamic_prompt(&mut ctx, s, &c, "ir0", f, None), Err(Error::Config(_))));
        let c3 = cfg(Variant::PlainConvs);
        let set3 = init_params(&c3, 2).unwrap();
        let s3 = ctx.attach(&set3, false, BnMode::Eval);
        assert!(dynamic_prompt(&mut ctx, s3, &c3, "ir0", f, None).is_ok());
    }
}
