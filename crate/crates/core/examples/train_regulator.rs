//! Fusion network, frozen task heads, then a regulator trained on top of both.

use fusewright::bfn::BfnConfig;
use fusewright::data::{generate, SceneSpec};
use fusewright::model::{evaluate_task, Conditioning};
use fusewright::tasks::TaskKind;
use fusewright::train::{pretrain_heads, task_embeddings, train_stage1, train_stage2, TrainConfig};

fn main() -> fusewright::Result<()> {
    let spec = SceneSpec { h: 16, w: 16, seed: 1, ..SceneSpec::default() };
    let data = generate(&spec, 12)?;
    let held = generate(&SceneSpec { seed: 2, ..spec }, 6)?;
    let cfg = TrainConfig {
        epochs: 3,
        tasks: vec![TaskKind::Seg],
        bfn: BfnConfig { depth: 2, width: 4, dec_width: 8, ..BfnConfig::default() },
        head_width: 8,
        ..TrainConfig::default()
    };
    let bfn = train_stage1(&cfg, &data)?.model;
    let heads: Vec<_> = pretrain_heads(&cfg, &data, &bfn)?.into_iter().map(|r| r.head).collect();
    let run = train_stage2(&cfg, &data, &bfn, &heads)?;
    let emb = &task_embeddings(&cfg)?[0].1;
    let cond = Conditioning { toar: &run.model, text: &emb.vector };
    let before = evaluate_task(&bfn, None, &heads[0], &held, 6)?;
    let after = evaluate_task(&bfn, Some(cond), &heads[0], &held, 6)?;
    println!("seg loss without regulator {:.4}, with {:.4}", before.loss(), after.loss());
    Ok(())
}
