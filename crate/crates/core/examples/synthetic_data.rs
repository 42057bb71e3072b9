//! Generates labelled scenes, augments one, and round-trips a split on disk.

use fusewright::data::{self, AugOp, SceneSpec};

fn main() -> fusewright::Result<()> {
    let spec = SceneSpec { seed: 11, ..SceneSpec::default() };
    let samples = data::generate(&spec, 4)?;
    let s = &samples[0];
    let hot = s.gt.seg.iter().filter(|&&c| c == data::CLASS_HOT).count();
    println!("scene 0: {}x{}, {hot} hot pixels, {} salient", s.ir.h, s.ir.w, s.gt.sod.iter().filter(|&&m| m > 0).count());

    let flipped = data::augment(s, &[AugOp::HFlip, AugOp::Rot90], 0)?;
    println!("augmented ir[0,0] {:.3} (was {:.3})", flipped.ir.at(0, 0), s.ir.at(0, 0));

    let dir = tempfile::tempdir().map_err(|e| fusewright::Error::Input(e.to_string()))?;
    let ids = data::write_split(dir.path(), "train", &samples)?;
    let back = data::read_split(dir.path(), "train", true)?;
    println!("wrote {} samples, read back {}; first id {}", ids.len(), back.len(), ids[0]);
    Ok(())
}
