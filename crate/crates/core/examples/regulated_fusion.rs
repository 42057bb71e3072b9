//! A fresh regulator leaves the fused image bit-for-bit unchanged; once its
//! last layers are nonzero, different instructions give different images.

use fusewright::data::{generate, Image, SceneSpec};
use fusewright::instruct::encode_text;
use fusewright::model::{fuse_tensor, BfnModel, Conditioning, ToarModel};
use fusewright::bfn::BfnConfig;
use fusewright::toar::{ToarConfig, Variant};

fn main() -> fusewright::Result<()> {
    let bfn = BfnModel::init(BfnConfig::default(), 0)?;
    let mut toar = ToarModel::init(ToarConfig::for_bfn(&bfn.cfg, 64, Variant::Full), 1)?;
    let s = &generate(&SceneSpec::default(), 1)?[0];
    let (ir, vis) = (Image::batch(&[&s.ir])?, Image::batch(&[&s.vis])?);
    let seg = encode_text("segment every pixel into classes")?.vector;
    let sod = encode_text("highlight the salient object")?.vector;

    let plain = fuse_tensor(&bfn, None, &ir, &vis)?;
    let steered = fuse_tensor(&bfn, Some(Conditioning { toar: &toar, text: &seg }), &ir, &vis)?;
    println!("fresh regulator is a no-op: {}", plain.bitwise_eq(&steered));

    // stand-in for training: perturb the zero-initialized convs
    for (name, t) in toar.params.params_mut() {
        if name.ends_with("post.conv2.weight") {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * ((i % 7) as f64 - 3.0));
        }
    }
    let a = fuse_tensor(&bfn, Some(Conditioning { toar: &toar, text: &seg }), &ir, &vis)?;
    let b = fuse_tensor(&bfn, Some(Conditioning { toar: &toar, text: &sod }), &ir, &vis)?;
    println!("seg vs sod instruction, max pixel difference {:.2e}", a.max_abs_diff(&b).unwrap_or(0.0));
    Ok(())
}
