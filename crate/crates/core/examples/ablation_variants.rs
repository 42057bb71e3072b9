//! Builds every ablation model and takes one regulator training step with each.

use fusewright::bfn::BfnConfig;
use fusewright::data::{generate, SceneSpec};
use fusewright::model::{BfnModel, HeadModel};
use fusewright::tasks::TaskKind;
use fusewright::train::{train_stage2, Ablation, TrainConfig};

fn main() -> fusewright::Result<()> {
    let data = generate(&SceneSpec { h: 12, w: 12, ..SceneSpec::default() }, 4)?;
    let bfn_cfg = BfnConfig { depth: 2, width: 4, dec_width: 8, ..BfnConfig::default() };
    let head = HeadModel::init(TaskKind::Seg, 4, 0)?;
    for model in Ablation::ALL {
        let cfg = TrainConfig {
            ablation: model,
            bfn: bfn_cfg.clone(),
            tasks: vec![TaskKind::Seg],
            max_steps: Some(1),
            batch_size: 4,
            ..TrainConfig::default()
        };
        let bfn = BfnModel::init(cfg.bfn_config(), 0)?;
        let run = train_stage2(&cfg, &data, &bfn, std::slice::from_ref(&head))?;
        println!(
            "model {:4} fusion {:6} regulator params {:6} first loss {:.4}",
            model.as_str(),
            bfn.cfg.fusion.as_str(),
            run.model.params.num_params(),
            run.trace[0].loss
        );
    }
    Ok(())
}
