//! Short fusion-network training run with a per-epoch loss printout.

use fusewright::bfn::BfnConfig;
use fusewright::data::{generate, SceneSpec};
use fusewright::train::{epoch_means, train_stage1, TrainConfig};

fn main() -> fusewright::Result<()> {
    let data = generate(&SceneSpec { h: 16, w: 16, seed: 1, ..SceneSpec::default() }, 12)?;
    let cfg = TrainConfig {
        epochs: 4,
        bfn: BfnConfig { depth: 2, width: 4, dec_width: 8, ..BfnConfig::default() },
        ..TrainConfig::default()
    };
    let run = train_stage1(&cfg, &data)?;
    for (epoch, loss) in epoch_means(&run.trace) {
        println!("epoch {epoch} loss {loss:.4}");
    }
    Ok(())
}
