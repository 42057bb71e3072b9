//! Trained-network bundles (config + parameters), their checkpoint mapping,
//! and eval-mode inference.

use crate::bfn::{self, BfnConfig};
use crate::checkpoint::{Checkpoint, Stage};
use crate::data::{Image, Sample};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamSet};
use crate::tasks::{self, TaskKind, TaskScores, Targets};
use crate::tensor::{BnMode, Tensor};
use crate::toar::{self, ToarConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct BfnModel {
    pub cfg: BfnConfig,
    pub params: ParamSet,
}

impl BfnModel {
    pub fn init(cfg: BfnConfig, seed: u64) -> Result<Self> {
        let params = bfn::init_params(&cfg, seed)?;
        Ok(BfnModel { cfg, params })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(Stage::Bfn, self.params.clone()).with_meta(self.cfg.to_pairs())
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_stage(Stage::Bfn)?;
        let cfg = BfnConfig::from_pairs(|k| c.meta(k))?;
        let fresh = bfn::init_params(&cfg, 0)?;
        check_layout(&fresh, &c.params)?;
        Ok(BfnModel {
            cfg,
            params: c.params.clone(),
        })
    }
}

/// Batch-norm running statistics gathered while training on one instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStats {
    pub key: Vec<f64>,
    /// Only the regulator's batch-norm buffers.
    pub buffers: ParamSet,
}

const STATS_PREFIX: &str = "taskstats";

#[derive(Clone, Debug, PartialEq)]
pub struct ToarModel {
    pub cfg: ToarConfig,
    pub params: ParamSet,
    /// Per-instruction statistics. Empty means the shared buffers in `params` are used.
    pub task_stats: Vec<TaskStats>,
}

impl ToarModel {
    pub fn init(cfg: ToarConfig, seed: u64) -> Result<Self> {
        let params = toar::init_params(&cfg, seed)?;
        Ok(ToarModel {
            cfg,
            params,
            task_stats: Vec::new(),
        })
    }

    /// Starts one statistics set per instruction, each a copy of the shared buffers.
    pub fn split_stats(&mut self, keys: &[Vec<f64>]) -> Result<()> {
        let mut buffers = ParamSet::new();
        for (n, t) in self.params.buffers() {
            buffers.insert_buffer(n, t.clone())?;
        }
        self.task_stats = keys
            .iter()
            .map(|k| TaskStats {
                key: k.clone(),
                buffers: buffers.clone(),
            })
            .collect();
        Ok(())
    }

    /// Index of the statistics set whose instruction is closest to `text`.
    pub fn nearest_stats(&self, text: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in self.task_stats.iter().enumerate() {
            let c = crate::instruct::cosine(&s.key, text);
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((i, c));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Parameters with the buffers of statistics set `idx` swapped in.
    pub fn params_with_stats(&self, idx: Option<usize>) -> Result<ParamSet> {
        let mut p = self.params.clone();
        if let Some(s) = idx.and_then(|i| self.task_stats.get(i)) {
            for (n, t) in s.buffers.buffers() {
                *p.buffer_mut(n)? = t.clone();
            }
        }
        Ok(p)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut set = self.params.clone();
        for (i, s) in self.task_stats.iter().enumerate() {
            let key = Tensor::new(&[s.key.len()], s.key.clone()).expect("key length matches");
            set.insert_buffer(format!("{STATS_PREFIX}{i}.key"), key).expect("fresh name");
            for (n, t) in s.buffers.buffers() {
                set.insert_buffer(format!("{STATS_PREFIX}{i}.{n}"), t.clone()).expect("fresh name");
            }
        }
        Checkpoint::new(Stage::Toar, set).with_meta(self.cfg.to_pairs())
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_stage(Stage::Toar)?;
        let cfg = ToarConfig::from_pairs(|k| c.meta(k))?;
        let mut params = ParamSet::new();
        for (n, t) in c.params.params() {
            params.insert_param(n, t.clone())?;
        }
        let mut task_stats: Vec<TaskStats> = Vec::new();
        for (n, t) in c.params.buffers() {
            let Some(rest) = n.strip_prefix(STATS_PREFIX) else {
                params.insert_buffer(n, t.clone())?;
                continue;
            };
            let (idx, field) = rest
                .split_once('.')
                .and_then(|(i, f)| Some((i.parse::<usize>().ok()?, f)))
                .ok_or_else(|| Error::Format(format!("bad statistics entry {n}")))?;
            if field == "key" {
                if idx != task_stats.len() {
                    return Err(Error::Format(format!("statistics set {idx} out of order")));
                }
                task_stats.push(TaskStats {
                    key: t.data().to_vec(),
                    buffers: ParamSet::new(),
                });
            } else {
                let last = task_stats.len().checked_sub(1);
                let s = task_stats
                    .get_mut(idx)
                    .filter(|_| Some(idx) == last)
                    .ok_or_else(|| Error::Format(format!("statistics entry {n} before its key")))?;
                s.buffers.insert_buffer(field, t.clone())?;
            }
        }
        check_layout(&toar::init_params(&cfg, 0)?, &params)?;
        for s in &task_stats {
            if s.key.len() != cfg.text_dim {
                return Err(Error::Format("statistics key does not match the text dimension".into()));
            }
            let shared: Vec<_> = params.buffers().map(|(n, t)| (n, t.shape())).collect();
            let own: Vec<_> = s.buffers.buffers().map(|(n, t)| (n, t.shape())).collect();
            if shared != own {
                return Err(Error::Format("statistics set does not match the regulator buffers".into()));
            }
        }
        Ok(ToarModel { cfg, params, task_stats })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel {
    pub kind: TaskKind,
    pub width: usize,
    pub params: ParamSet,
}

impl HeadModel {
    pub fn init(kind: TaskKind, width: usize, seed: u64) -> Result<Self> {
        Ok(HeadModel {
            kind,
            width,
            params: tasks::init_head(kind, width, seed)?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(Stage::Heads, self.params.clone()).with_meta([
            ("head.kind", self.kind.as_str().to_string()),
            ("head.width", self.width.to_string()),
        ])
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_stage(Stage::Heads)?;
        let kind = TaskKind::parse(&c.meta("head.kind").ok_or_else(|| Error::Format("head checkpoint lacks head.kind".into()))?)
            .map_err(|e| Error::Format(e.to_string()))?;
        let width = c
            .meta("head.width")
            .and_then(|w| w.parse().ok())
            .ok_or_else(|| Error::Format("head checkpoint lacks head.width".into()))?;
        check_layout(&tasks::init_head(kind, width, 0)?, &c.params)?;
        Ok(HeadModel {
            kind,
            width,
            params: c.params.clone(),
        })
    }
}

/// Same names and shapes, in the same order.
fn check_layout(expected: &ParamSet, got: &ParamSet) -> Result<()> {
    let names = |s: &ParamSet| -> Vec<(String, Vec<usize>)> {
        s.params()
            .chain(s.buffers())
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    };
    let (a, b) = (names(expected), names(got));
    if a != b {
        let first = a
            .iter()
            .zip(&b)
            .find(|(x, y)| x != y)
            .map(|(x, _)| x.0.clone())
            .unwrap_or_else(|| "entry count".into());
        return Err(Error::Format(format!("checkpoint layout does not match its config at {first}")));
    }
    Ok(())
}

/// Regulator plus the instruction vector it should follow.
#[derive(Clone, Copy)]
pub struct Conditioning<'a> {
    pub toar: &'a ToarModel,
    pub text: &'a [f64],
}

/// Eval-mode fusion of `[B, 1, H, W]` sources.
pub fn fuse_tensor(bfn: &BfnModel, cond: Option<Conditioning>, ir: &Tensor, vis: &Tensor) -> Result<Tensor> {
    let stats = match cond {
        Some(c) if !c.toar.task_stats.is_empty() && c.text.len() == c.toar.cfg.text_dim => Some(c.toar.params_with_stats(c.toar.nearest_stats(c.text))?),
        _ => None,
    };
    let mut ctx = Ctx::new();
    let bs = ctx.attach(&bfn.params, false, BnMode::Eval);
    let i = ctx.input(ir.clone());
    let v = ctx.input(vis.clone());
    let out = match cond {
        None => bfn::fuse(&mut ctx, bs, &bfn.cfg, i, v, None)?,
        Some(c) => {
            if c.text.len() != c.toar.cfg.text_dim {
                return Err(Error::dim(format!(
                    "instruction vector has {} entries, regulator expects {}",
                    c.text.len(),
                    c.toar.cfg.text_dim
                )));
            }
            let ts = ctx.attach(stats.as_ref().unwrap_or(&c.toar.params), false, BnMode::Eval);
            let t = ctx.input(Tensor::new(&[1, c.text.len()], c.text.to_vec())?);
            toar::toar_forward(&mut ctx, bs, &bfn.cfg, ts, &c.toar.cfg, i, v, Some(t))?
        }
    };
    Ok(ctx.tape.value(out).clone())
}

/// Fuses image pairs in batches of `batch`.
pub fn fuse_images(bfn: &BfnModel, cond: Option<Conditioning>, pairs: &[(&Image, &Image)], batch: usize) -> Result<Vec<Image>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch.max(1)) {
        let irs: Vec<&Image> = chunk.iter().map(|p| p.0).collect();
        let vis: Vec<&Image> = chunk.iter().map(|p| p.1).collect();
        let f = fuse_tensor(bfn, cond, &Image::batch(&irs)?, &Image::batch(&vis)?)?;
        out.extend(Image::unbatch(&f)?);
    }
    Ok(out)
}

/// Head logits and mean task loss for an already fused batch.
pub fn head_eval(head: &HeadModel, fused: &Tensor, targets: &Targets) -> Result<(Tensor, f64)> {
    let mut ctx = Ctx::new();
    let hs = ctx.attach(&head.params, false, BnMode::Eval);
    let f = ctx.input(fused.clone());
    let logits = tasks::head_forward(&mut ctx, hs, f)?;
    let loss = tasks::task_loss(&mut ctx.tape, head.kind, logits, targets)?;
    Ok((ctx.tape.value(logits).clone(), ctx.tape.value(loss).item()?))
}

/// Task metrics of `head` on fused outputs of `samples`.
pub fn evaluate_task(
    bfn: &BfnModel,
    cond: Option<Conditioning>,
    head: &HeadModel,
    samples: &[Sample],
    batch: usize,
) -> Result<TaskScores> {
    let mut scores = TaskScores::default();
    for chunk in samples.chunks(batch.max(1)) {
        let irs: Vec<&Image> = chunk.iter().map(|s| &s.ir).collect();
        let vis: Vec<&Image> = chunk.iter().map(|s| &s.vis).collect();
        let fused = fuse_tensor(bfn, cond, &Image::batch(&irs)?, &Image::batch(&vis)?)?;
        let gts: Vec<_> = chunk.iter().map(|s| &s.gt).collect();
        let (logits, loss) = head_eval(head, &fused, &Targets::from_gts(&gts)?)?;
        scores.add_batch(head.kind, &logits, &gts, loss)?;
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toar::Variant;

    #[test]
    fn checkpoint_mapping_round_trips() {
        let b = BfnModel::init(BfnConfig::default(), 3).unwrap();
        assert_eq!(BfnModel::from_checkpoint(&b.to_checkpoint()).unwrap(), b);
        let t = ToarModel::init(ToarConfig::for_bfn(&b.cfg, 64, Variant::NoPooling), 4).unwrap();
        assert_eq!(ToarModel::from_checkpoint(&t.to_checkpoint()).unwrap(), t);
        let h = HeadModel::init(TaskKind::Seg, 8, 5).unwrap();
        assert_eq!(HeadModel::from_checkpoint(&h.to_checkpoint()).unwrap(), h);
        assert!(matches!(BfnModel::from_checkpoint(&h.to_checkpoint()), Err(Error::Input(_))));
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let b = BfnModel::init(BfnConfig::default(), 3).unwrap();
        let mut c = b.to_checkpoint();
        c.meta.insert("bfn.width".into(), "4".into());
        assert!(matches!(BfnModel::from_checkpoint(&c), Err(Error::Format(_))));
    }

    #[test]
    fn instruction_statistics_select_and_round_trip() {
        let b = BfnModel::init(BfnConfig::default(), 3).unwrap();
        let mut t = ToarModel::init(ToarConfig::for_bfn(&b.cfg, 4, Variant::Full), 4).unwrap();
        t.split_stats(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let name = t.params.buffers().next().unwrap().0.to_string();
        t.task_stats[1].buffers.buffer_mut(&name).unwrap().data_mut()[0] = 7.0;
        assert_eq!(t.nearest_stats(&[0.2, 0.9, 0.1, 0.0]), Some(1));
        assert_eq!(t.nearest_stats(&[0.9, 0.2, 0.1, 0.0]), Some(0));
        assert_eq!(t.params_with_stats(Some(1)).unwrap().buffer(&name).unwrap().data()[0], 7.0);
        assert_ne!(t.params_with_stats(Some(0)).unwrap().buffer(&name).unwrap().data()[0], 7.0);
        let c = t.to_checkpoint();
        let back = ToarModel::from_checkpoint(&c).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_checkpoint().to_bytes(), c.to_bytes());
    }
}
