//! Fuses a synthetic pair with a freshly initialized network and scores the
//! result with the fusion loss terms.

use fusewright::bfn::{self, BfnConfig};
use fusewright::data::{generate, Image, SceneSpec};
use fusewright::model::BfnModel;
use fusewright::nn::Ctx;
use fusewright::tensor::BnMode;

fn main() -> fusewright::Result<()> {
    let model = BfnModel::init(BfnConfig::default(), 0)?;
    println!("parameters: {}", model.params.num_params());
    let s = &generate(&SceneSpec::default(), 1)?[0];
    let mut ctx = Ctx::new();
    let set = ctx.attach(&model.params, false, BnMode::Eval);
    let ir = ctx.input(Image::batch(&[&s.ir])?);
    let vi = ctx.input(Image::batch(&[&s.vis])?);
    let f = bfn::fuse(&mut ctx, set, &model.cfg, ir, vi, None)?;
    let g = bfn::gradient_loss(&mut ctx.tape, f, ir, vi)?;
    let b = bfn::brightness_loss(&mut ctx.tape, f, ir, vi)?;
    println!(
        "fused {:?}; gradient loss {:.4}, brightness loss {:.4}",
        ctx.tape.shape(f),
        ctx.tape.value(g).item()?,
        ctx.tape.value(b).item()?
    );
    Ok(())
}
