//! Finite-difference checks for every differentiable op and each composite
//! block, as one named table the CLI and the tests both run.
//!
//! Piecewise-linear ops (ReLU, max, |·| inside Sobel, L1) have kinks. A
//! central difference that straddles one is wrong even when the tape is
//! right, so a coordinate whose central estimate disagrees is re-tested with
//! both one-sided differences and scored by the best of the three.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bfn::{self, BfnConfig, FusionKind};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamSet, SetId};
use crate::tasks::{self, TaskKind, Targets};
use crate::tensor::{BnMode, Conv2dSpec, PoolKind, Tensor, Var, GRAD_CHECK_FLOOR};
use crate::toar::{self, ToarConfig, Variant};

/// Pass threshold on the worst relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const EPS: f64 = 1e-5;

type Block<'f> = &'f dyn Fn(&mut Ctx, SetId, &[Var]) -> Result<Var>;
type Case = fn(u64) -> Result<f64>;

/// Every check, in report order.
pub const CASES: &[(&str, Case)] = &[
    ("conv2d", conv2d),
    ("conv2d_grouped", conv2d_grouped),
    ("linear", linear),
    ("relu", relu),
    ("lrelu", lrelu),
    ("sigmoid", sigmoid),
    ("max_pool2d", |s| pool(s, PoolKind::Max2d(2))),
    ("avg_pool2d", |s| pool(s, PoolKind::Avg2d(2))),
    ("global_max_pool", |s| pool(s, PoolKind::GlobalMax)),
    ("global_avg_pool", |s| pool(s, PoolKind::GlobalAvg)),
    ("upsample_nearest", upsample),
    ("batch_norm_train", batch_norm_train),
    ("batch_norm_eval", batch_norm_eval),
    ("spatial_gradient", spatial_gradient),
    ("add", |s| binary(s, Binary::Add)),
    ("sub", |s| binary(s, Binary::Sub)),
    ("mul", |s| binary(s, Binary::Mul)),
    ("max", |s| binary(s, Binary::Max)),
    ("expand", expand),
    ("concat", concat),
    ("reshape", reshape),
    ("scale", scale),
    ("add_scalar", add_scalar),
    ("sum", sum),
    ("mean", mean),
    ("l1", l1),
    ("mse", mse),
    ("softmax_cross_entropy", softmax_ce),
    ("bce_with_logits", bce),
    ("crb", crb),
    ("ff", ff),
    ("t_dpi", t_dpi),
    ("brightness_loss", |s| fusion_term(s, Term::Brightness)),
    ("gradient_loss", |s| fusion_term(s, Term::Gradient)),
    ("fusion_loss", |s| fusion_term(s, Term::Total)),
    ("task_loss_seg", |s| task(s, TaskKind::Seg)),
    ("task_loss_sod", |s| task(s, TaskKind::Sod)),
    ("task_loss_det", |s| task(s, TaskKind::Det)),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    CASES.iter().map(|(n, _)| *n)
}

/// Worst error of case `name` over `seeds`.
pub fn run(name: &str, seeds: &[u64]) -> Result<f64> {
    let (_, case) = CASES
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Usage(format!("unknown op {name:?}")))?;
    seeds.iter().try_fold(0.0f64, |w, &s| Ok(w.max(case(s)?)))
}

/// Relative error of `d f / d(inputs, params)` against finite differences.
pub fn check_block(inputs: &[Tensor], params: &ParamSet, mode: BnMode, f: Block) -> Result<f64> {
    let mut ctx = Ctx::new();
    let set = ctx.attach(params, true, mode);
    let xs: Vec<Var> = inputs.iter().map(|t| ctx.tape.param(t.clone())).collect();
    let y = f(&mut ctx, set, &xs)?;
    if !ctx.tape.value(y).is_scalar() {
        return Err(Error::Contract("checked block must return a scalar".into()));
    }
    ctx.backward(y)?;
    let mut analytic: Vec<Vec<f64>> = xs
        .iter()
        .zip(inputs)
        .map(|(&x, t)| ctx.tape.grad(x).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let grads = ctx.grads(set);
    drop(ctx);
    analytic.extend(grads.into_iter().map(|(_, g)| g));

    let eval = |inputs: &[Tensor], params: &ParamSet| -> Result<f64> {
        let mut ctx = Ctx::new();
        let set = ctx.attach(params, false, mode);
        let xs: Vec<Var> = inputs.iter().map(|t| ctx.input(t.clone())).collect();
        let y = f(&mut ctx, set, &xs)?;
        ctx.tape.value(y).item()
    };
    // f evaluated with coordinate `j` of slot `slot` shifted by `d`
    let shifted = |slot: usize, j: usize, d: f64| -> Result<f64> {
        if slot < inputs.len() {
            let mut ins = inputs.to_vec();
            ins[slot].data_mut()[j] += d;
            eval(&ins, params)
        } else {
            let mut ps = params.clone();
            let (_, t) = ps.params_mut().nth(slot - inputs.len()).expect("slot in range");
            t.data_mut()[j] += d;
            eval(inputs, &ps)
        }
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR);

    let f0 = eval(inputs, params)?;
    let mut worst = 0.0f64;
    for (slot, a) in analytic.iter().enumerate() {
        for (j, &aj) in a.iter().enumerate() {
            let plus = shifted(slot, j, EPS)?;
            let minus = shifted(slot, j, -EPS)?;
            let mut err = rel(aj, (plus - minus) / (2.0 * EPS));
            if err > TOLERANCE * 1e-2 {
                err = err.min(rel(aj, (plus - f0) / EPS)).min(rel(aj, (f0 - minus) / EPS));
            }
            if !err.is_finite() {
                return Err(Error::Numeric(format!("non-finite comparison at slot {slot} index {j}")));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn tensor_only(inputs: &[Tensor], f: impl Fn(&mut Ctx, &[Var]) -> Result<Var>) -> Result<f64> {
    check_block(inputs, &ParamSet::new(), BnMode::Train, &|ctx, _, xs| f(ctx, xs))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

/// Values with magnitude in [0.05, 1): no coordinate starts near a kink at 0.
fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.05..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces a tensor to a scalar through a fixed random projection, so every
/// output element gets a distinct upstream gradient.
fn project(ctx: &mut Ctx, y: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut r, ctx.tape.shape(y), -1.0, 1.0);
    let w = ctx.input(w);
    let p = ctx.tape.mul(y, w)?;
    ctx.tape.sum(p)
}

fn conv2d(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let ins = [
        uniform(&mut r, &[2, 2, 5, 5], -1.0, 1.0),
        uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5),
        uniform(&mut r, &[3], -0.5, 0.5),
    ];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.conv2d(x[0], x[1], Some(x[2]), Conv2dSpec::same(3))?;
        let z = ctx.tape.conv2d(x[0], x[1], None, Conv2dSpec { stride: 2, padding: 0, groups: 1 })?;
        let a = project(ctx, y, seed)?;
        let b = project(ctx, z, seed + 1)?;
        ctx.tape.add(a, b)
    })
}

fn conv2d_grouped(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let ins = [uniform(&mut r, &[2, 4, 5, 5], -1.0, 1.0), uniform(&mut r, &[4, 2, 3, 3], -0.5, 0.5)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.conv2d(x[0], x[1], None, Conv2dSpec::same(3).with_groups(2))?;
        project(ctx, y, seed)
    })
}

fn linear(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let ins = [
        uniform(&mut r, &[3, 4], -1.0, 1.0),
        uniform(&mut r, &[5, 4], -1.0, 1.0),
        uniform(&mut r, &[5], -1.0, 1.0),
    ];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.linear(x[0], x[1], Some(x[2]))?;
        project(ctx, y, seed)
    })
}

fn relu(seed: u64) -> Result<f64> {
    let ins = [off_zero(&mut rng(seed), &[2, 3, 4, 4])];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.relu(x[0])?;
        project(ctx, y, seed)
    })
}

fn lrelu(seed: u64) -> Result<f64> {
    let ins = [off_zero(&mut rng(seed), &[2, 3, 4, 4])];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.lrelu(x[0], 0.1)?;
        project(ctx, y, seed)
    })
}

fn sigmoid(seed: u64) -> Result<f64> {
    let ins = [uniform(&mut rng(seed), &[2, 3, 4, 4], -4.0, 4.0)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.sigmoid(x[0])?;
        project(ctx, y, seed)
    })
}

fn pool(seed: u64, kind: PoolKind) -> Result<f64> {
    let ins = [uniform(&mut rng(seed), &[2, 3, 6, 6], -1.0, 1.0)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.pool(kind, x[0])?;
        project(ctx, y, seed)
    })
}

fn upsample(seed: u64) -> Result<f64> {
    let ins = [uniform(&mut rng(seed), &[2, 2, 3, 3], -1.0, 1.0)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.upsample_nearest(x[0], 6, 6)?;
        project(ctx, y, seed)
    })
}

fn batch_norm_train(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let ins = [
        uniform(&mut r, &[3, 2, 4, 4], -1.0, 2.0),
        uniform(&mut r, &[2], 0.5, 1.5),
        uniform(&mut r, &[2], -0.5, 0.5),
    ];
    tensor_only(&ins, |ctx, x| {
        let (y, _) = ctx.tape.batch_norm_train(x[0], x[1], x[2])?;
        project(ctx, y, seed)
    })
}

fn batch_norm_eval(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let ins = [
        uniform(&mut r, &[3, 2, 4, 4], -1.0, 2.0),
        uniform(&mut r, &[2], 0.5, 1.5),
        uniform(&mut r, &[2], -0.5, 0.5),
    ];
    let rm: Vec<f64> = (0..2).map(|_| r.random_range(-0.5..0.5)).collect();
    let rv: Vec<f64> = (0..2).map(|_| r.random_range(0.5..2.0)).collect();
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.batch_norm_eval(x[0], x[1], x[2], &rm, &rv)?;
        project(ctx, y, seed)
    })
}

fn spatial_gradient(seed: u64) -> Result<f64> {
    let ins = [uniform(&mut rng(seed), &[2, 2, 5, 5], 0.0, 1.0)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.spatial_gradient(x[0])?;
        project(ctx, y, seed)
    })
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Max,
}

fn binary(seed: u64, op: Binary) -> Result<f64> {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    // keep max away from ties
    let gap = off_zero(&mut r, &[2, 3, 4]);
    let b = Tensor::from_fn(&[2, 3, 4], |i| a.data()[i] + gap.data()[i]);
    tensor_only(&[a, b], |ctx, x| {
        let y = match op {
            Binary::Add => ctx.tape.add(x[0], x[1])?,
            Binary::Sub => ctx.tape.sub(x[0], x[1])?,
            Binary::Mul => ctx.tape.mul(x[0], x[1])?,
            Binary::Max => ctx.tape.max(x[0], x[1])?,
        };
        project(ctx, y, seed)
    })
}

fn expand(seed: u64) -> Result<f64> {
    let ins = [uniform(&mut rng(seed), &[2, 3, 1, 1], -1.0, 1.0)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.expand(x[0], &[2, 3, 4, 5])?;
        project(ctx, y, seed)
    })
}

fn concat(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let ins = [uniform(&mut r, &[2, 1, 3, 3], -1.0, 1.0), uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.concat(&[x[0], x[1]], 1)?;
        project(ctx, y, seed)
    })
}

fn reshape(seed: u64) -> Result<f64> {
    let ins = [uniform(&mut rng(seed), &[2, 3, 4], -1.0, 1.0)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.reshape(x[0], &[6, 4])?;
        project(ctx, y, seed)
    })
}

fn scale(seed: u64) -> Result<f64> {
    let ins = [uniform(&mut rng(seed), &[3, 4], -1.0, 1.0)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.scale(x[0], -1.7)?;
        project(ctx, y, seed)
    })
}

fn add_scalar(seed: u64) -> Result<f64> {
    let ins = [uniform(&mut rng(seed), &[3, 4], -1.0, 1.0)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.add_scalar(x[0], 0.3)?;
        let y = ctx.tape.mul(y, y)?;
        ctx.tape.sum(y)
    })
}

fn sum(seed: u64) -> Result<f64> {
    let ins = [uniform(&mut rng(seed), &[3, 4], -1.0, 1.0)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.mul(x[0], x[0])?;
        ctx.tape.sum(y)
    })
}

fn mean(seed: u64) -> Result<f64> {
    let ins = [uniform(&mut rng(seed), &[3, 4], -1.0, 1.0)];
    tensor_only(&ins, |ctx, x| {
        let y = ctx.tape.mul(x[0], x[0])?;
        ctx.tape.mean(y)
    })
}

fn l1(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let gap = off_zero(&mut r, &[2, 3, 4]);
    let b = Tensor::from_fn(&[2, 3, 4], |i| a.data()[i] + gap.data()[i]);
    tensor_only(&[a, b], |ctx, x| ctx.tape.l1(x[0], x[1]))
}

fn mse(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let ins = [uniform(&mut r, &[2, 3, 4], -1.0, 1.0), uniform(&mut r, &[2, 3, 4], -1.0, 1.0)];
    tensor_only(&ins, |ctx, x| ctx.tape.mse(x[0], x[1]))
}

fn softmax_ce(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let ins = [uniform(&mut r, &[2, 4, 3, 3], -2.0, 2.0)];
    let labels: Vec<usize> = (0..2 * 9).map(|_| r.random_range(0..4)).collect();
    tensor_only(&ins, |ctx, x| ctx.tape.softmax_cross_entropy(x[0], &labels))
}

fn bce(seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let ins = [uniform(&mut r, &[2, 1, 3, 3], -3.0, 3.0)];
    let t = Tensor::from_fn(&[2, 1, 3, 3], |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
    tensor_only(&ins, |ctx, x| ctx.tape.bce_with_logits(x[0], &t))
}

fn small_bfn() -> BfnConfig {
    BfnConfig {
        depth: 2,
        width: 2,
        dec_width: 4,
        fusion: FusionKind::Gated,
        ..BfnConfig::default()
    }
}

fn crb(seed: u64) -> Result<f64> {
    let mut set = ParamSet::new();
    bfn::init_crb(&mut Init::new(seed), &mut set, "c", 2, 3)?;
    let ins = [uniform(&mut rng(seed), &[2, 2, 5, 5], -1.0, 1.0)];
    check_block(&ins, &set, BnMode::Train, &|ctx, s, x| {
        let y = bfn::crb_forward(ctx, s, "c", x[0], 0.1)?;
        project(ctx, y, seed)
    })
}

fn ff(seed: u64) -> Result<f64> {
    let cfg = small_bfn();
    let full = bfn::init_params(&cfg, seed)?;
    let mut set = ParamSet::new();
    for (n, t) in full.params().filter(|(n, _)| n.starts_with("ff.")) {
        set.insert_param(n, t.clone())?;
    }
    let mut r = rng(seed);
    let ins = [uniform(&mut r, &[2, 2, 4, 4], -1.0, 1.0), uniform(&mut r, &[2, 2, 4, 4], -1.0, 1.0)];
    check_block(&ins, &set, BnMode::Train, &|ctx, s, x| {
        let y = bfn::ff_fuse(ctx, s, x[0], x[1])?;
        project(ctx, y, seed)
    })
}

fn t_dpi(seed: u64) -> Result<f64> {
    let cfg = ToarConfig {
        hidden: 6,
        ..ToarConfig::for_bfn(&small_bfn(), 5, Variant::Full)
    };
    let mut set = toar::init_params(&cfg, seed)?;
    // the zero-initialized last conv would hide everything upstream of it
    let mut r = rng(seed);
    for (_, t) in set.params_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let module = toar::module_name(bfn::Stream::Ir, 0);
    let ins = [uniform(&mut r, &[2, 2, 4, 4], -1.0, 1.0), uniform(&mut r, &[1, 5], -1.0, 1.0)];
    check_block(&ins, &set, BnMode::Train, &|ctx, s, x| {
        let p = toar::dynamic_prompt(ctx, s, &cfg, &module, x[0], Some(x[1]))?;
        let y = toar::inject(ctx, p, x[0])?;
        project(ctx, y, seed)
    })
}

#[derive(Clone, Copy)]
enum Term {
    Brightness,
    Gradient,
    Total,
}

fn fusion_term(seed: u64, term: Term) -> Result<f64> {
    let mut r = rng(seed);
    let ins = [
        uniform(&mut r, &[2, 1, 5, 5], 0.0, 1.0),
        uniform(&mut r, &[2, 1, 5, 5], 0.0, 1.0),
        uniform(&mut r, &[2, 1, 5, 5], 0.0, 1.0),
    ];
    tensor_only(&ins, |ctx, x| match term {
        Term::Brightness => bfn::brightness_loss(&mut ctx.tape, x[0], x[1], x[2]),
        Term::Gradient => bfn::gradient_loss(&mut ctx.tape, x[0], x[1], x[2]),
        Term::Total => bfn::fusion_loss(&mut ctx.tape, x[0], x[1], x[2], 0.2),
    })
}

fn task(seed: u64, kind: TaskKind) -> Result<f64> {
    let mut r = rng(seed);
    let (b, h, w) = (2, 4, 4);
    let gts: Vec<crate::data::GroundTruth> = (0..b)
        .map(|_| crate::data::GroundTruth {
            h,
            w,
            seg: (0..h * w).map(|_| r.random_range(0..crate::data::NUM_CLASSES as u8)).collect(),
            sod: (0..h * w).map(|_| r.random_range(0..2u8)).collect(),
            det: (0..h * w).map(|_| r.random_range(0.0..1.0)).collect(),
        })
        .collect();
    let refs: Vec<_> = gts.iter().collect();
    let targets = Targets::from_gts(&refs)?;
    let head = tasks::init_head(kind, 3, seed)?;
    let ins = [uniform(&mut r, &[b, 1, h, w], 0.0, 1.0)];
    check_block(&ins, &head, BnMode::Train, &|ctx, s, x| {
        let logits = tasks::head_forward(ctx, s, x[0])?;
        tasks::task_loss(&mut ctx.tape, kind, logits, &targets)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut n: Vec<_> = names().collect();
        let len = n.len();
        n.sort();
        n.dedup();
        assert_eq!(n.len(), len);
    }

    #[test]
    fn unknown_name_is_usage_error() {
        assert!(matches!(run("nope", &[0]), Err(Error::Usage(_))));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // the tape's |x| gradient is sign(x); a bogus extra term must be caught
        let ins = [uniform(&mut rng(0), &[6], 0.5, 1.0)];
        let good = tensor_only(&ins, |ctx, x| ctx.tape.sum(x[0])).unwrap();
        assert!(good < 1e-9);
        let set = ParamSet::new();
        let bogus = check_block(&ins, &set, BnMode::Train, &|ctx, _, x| {
            // the value ignores x[0] off the tape, so analytic 0 vs numeric 1
            let v = ctx.tape.value(x[0]).data().iter().sum::<f64>();
            Ok(ctx.input(Tensor::scalar(v)))
        })
        .unwrap();
        assert!(bogus > TOLERANCE);
    }
}
