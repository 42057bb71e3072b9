//! Saves a checkpoint, reloads it, saves again and compares digests.

use fusewright::bfn::BfnConfig;
use fusewright::checkpoint::{file_sha256, Checkpoint};
use fusewright::model::BfnModel;

fn main() -> fusewright::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| fusewright::Error::Input(e.to_string()))?;
    let (a, b) = (dir.path().join("a.fwc"), dir.path().join("b.fwc"));
    BfnModel::init(BfnConfig::default(), 5)?.to_checkpoint().save(&a)?;
    let loaded = Checkpoint::load(&a)?;
    let model = BfnModel::from_checkpoint(&loaded)?;
    loaded.save(&b)?;
    println!("depth {} width {}", model.cfg.depth, model.cfg.width);
    println!("{}\n{}", file_sha256(&a)?, file_sha256(&b)?);
    Ok(())
}
