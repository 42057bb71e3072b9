//! Training drivers: fusion pretraining, head pretraining on plain fused
//! output, and regulator training with everything else frozen.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bfn::{self, BfnConfig, FusionKind};
use crate::checkpoint::Checkpoint;
use crate::data::{random_augment, sample_seed, Image, Sample};
use crate::error::{Error, Result};
use crate::instruct::{self, Embedding};
use crate::model::{BfnModel, HeadModel, ToarModel};
use crate::nn::{Ctx, Optimizer};
use crate::tasks::{self, TaskKind, Targets};
use crate::tensor::{BnMode, Tensor};
use crate::toar::{self, ToarConfig, Variant};

/// Model variants for the ablation study. `Full` is the complete system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    /// Gated fusion replaced by concatenation + 1×1 conv.
    I,
    /// Kernel predicted without the instruction.
    II,
    /// No dynamic prompt module and no instruction: plain convs on the feature.
    III,
    /// Instruction added onto the feature, then convs.
    IV,
    /// Instruction concatenated with the feature, then convs.
    V,
    /// Kernel predicted from the instruction only (no pooled statistics).
    VI,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::I,
        Ablation::II,
        Ablation::III,
        Ablation::IV,
        Ablation::V,
        Ablation::VI,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" | "none" => Ablation::Full,
            "I" => Ablation::I,
            "II" => Ablation::II,
            "III" => Ablation::III,
            "IV" => Ablation::IV,
            "V" => Ablation::V,
            "VI" => Ablation::VI,
            _ => return Err(Error::Config(format!("unknown model {s:?} (full, I..VI)"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::I => "I",
            Ablation::II => "II",
            Ablation::III => "III",
            Ablation::IV => "IV",
            Ablation::V => "V",
            Ablation::VI => "VI",
        }
    }

    pub fn fusion(self) -> FusionKind {
        match self {
            Ablation::I => FusionKind::Concat,
            _ => FusionKind::Gated,
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Ablation::Full | Ablation::I => Variant::Full,
            Ablation::II => Variant::NoInstruction,
            Ablation::III => Variant::PlainConvs,
            Ablation::IV => Variant::AddText,
            Ablation::V => Variant::ConcatText,
            Ablation::VI => Variant::NoPooling,
        }
    }
}

/// The six boolean switches; at most one may be set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub disable_ff: bool,
    pub disable_instructions: bool,
    pub disable_tdpi: bool,
    pub add_text_to_output: bool,
    pub concat_text_features: bool,
    pub disable_gap_gmp: bool,
}

impl AblationFlags {
    pub fn resolve(&self) -> Result<Ablation> {
        let set: Vec<Ablation> = [
            (self.disable_ff, Ablation::I),
            (self.disable_instructions, Ablation::II),
            (self.disable_tdpi, Ablation::III),
            (self.add_text_to_output, Ablation::IV),
            (self.concat_text_features, Ablation::V),
            (self.disable_gap_gmp, Ablation::VI),
        ]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, a)| a)
        .collect();
        match set.as_slice() {
            [] => Ok(Ablation::Full),
            [a] => Ok(*a),
            _ => Err(Error::Config(format!("conflicting ablation flags: {set:?}"))),
        }
    }
}

/// Which part of the system a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainStage {
    Heads,
    Bfn,
    Toar,
}

impl TrainStage {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "0" => Ok(TrainStage::Heads),
            "1" => Ok(TrainStage::Bfn),
            "2" => Ok(TrainStage::Toar),
            _ => Err(Error::Config(format!("stage must be 0, 1 or 2, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub lr_start: f64,
    pub lr_peak: f64,
    /// Fraction of the run spent warming up.
    pub warmup: f64,
    pub toar_lr: f64,
    pub head_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            lr_start: 1e-4,
            lr_peak: 1e-3,
            warmup: 0.2,
            toar_lr: 1e-2,
            head_lr: 5e-3,
        }
    }
}

/// Learning rate at `epoch` of a `total`-epoch run. Fusion pretraining warms
/// up linearly to the peak and decays linearly back to the start value; the
/// other stages use constant rates.
pub fn lr_schedule(stage: TrainStage, epoch: usize, total: usize, s: &Schedule) -> Result<f64> {
    if epoch >= total {
        return Err(Error::Contract(format!("epoch {epoch} outside 0..{total}")));
    }
    Ok(match stage {
        TrainStage::Heads => s.head_lr,
        TrainStage::Toar => s.toar_lr,
        TrainStage::Bfn => {
            // position on the reference 100-epoch axis
            let e = epoch as f64 * 100.0 / total as f64;
            let w = 100.0 * s.warmup;
            if e < w {
                s.lr_start + (s.lr_peak - s.lr_start) * e / w
            } else {
                s.lr_peak - (s.lr_peak - s.lr_start) * (e - w) / (100.0 - w)
            }
        }
    })
}

/// Where a task's instruction vector comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum InstructionSource {
    Text(String),
    File(PathBuf),
}

impl InstructionSource {
    pub fn resolve(&self, dim: usize) -> Result<Embedding> {
        match self {
            InstructionSource::Text(s) => instruct::encode_text_dim(s, dim),
            InstructionSource::File(p) => instruct::import_embedding(p, dim),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            InstructionSource::Text(s) => s.clone(),
            InstructionSource::File(p) => format!("file:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Hard cap on optimizer steps; the schedule is laid over the epochs
    /// those steps span.
    pub max_steps: Option<usize>,
    pub lambda: f64,
    pub schedule: Schedule,
    pub augment: bool,
    pub crop: Option<(usize, usize)>,
    pub bfn: BfnConfig,
    pub head_width: usize,
    pub text_dim: usize,
    pub ablation: Ablation,
    pub tasks: Vec<TaskKind>,
    pub instructions: Vec<(TaskKind, InstructionSource)>,
    /// Last good parameters are written here when a run hits a numeric failure.
    pub abort_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 6,
            max_steps: None,
            lambda: 0.2,
            schedule: Schedule::default(),
            augment: true,
            crop: None,
            bfn: BfnConfig::default(),
            head_width: 16,
            text_dim: instruct::EMBED_DIM,
            ablation: Ablation::Full,
            tasks: vec![TaskKind::Seg, TaskKind::Sod],
            instructions: TaskKind::ALL
                .iter()
                .map(|&k| (k, InstructionSource::Text(k.instruction().into())))
                .collect(),
            abort_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.bfn.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn instruction(&self, kind: TaskKind) -> Result<&InstructionSource> {
        self.instructions
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Config(format!("no instruction configured for {}", kind.as_str())))
    }

    /// Network config with the ablation's fusion choice applied.
    pub fn bfn_config(&self) -> BfnConfig {
        BfnConfig {
            fusion: self.ablation.fusion(),
            ..self.bfn.clone()
        }
    }

    fn plan(&self, n: usize) -> Result<(usize, usize, usize)> {
        if n == 0 {
            return Err(Error::Input("training set is empty".into()));
        }
        let batch = self.batch_size.min(n);
        let per_epoch = n / batch;
        let epochs = match self.max_steps {
            Some(m) => self.epochs.min(m.div_ceil(per_epoch)),
            None => self.epochs,
        };
        Ok((batch, per_epoch, epochs))
    }

    fn total_steps(&self, per_epoch: usize, epochs: usize) -> usize {
        let all = per_epoch * epochs;
        self.max_steps.map_or(all, |m| m.min(all))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::from("epoch,step,loss,lr\n");
    for r in trace {
        s.push_str(&format!("{},{},{:?},{:?}\n", r.epoch, r.step, r.loss, r.lr));
    }
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Mean loss of each epoch.
pub fn epoch_means(trace: &[TraceRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in trace {
        match out.last_mut() {
            Some(last) if last.0 == r.epoch => {
                last.1 += r.loss;
                last.2 += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// Batch iterator: shuffled order per epoch, optional augmentation.
struct Batches {
    rng: ChaCha8Rng,
    batch: usize,
    per_epoch: usize,
    augment: bool,
    crop: Option<(usize, usize)>,
}

impl Batches {
    fn epoch<'s>(&mut self, data: &'s [Sample]) -> Result<Vec<Vec<Sample>>> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::with_capacity(self.per_epoch);
        for s in 0..self.per_epoch {
            let mut b = Vec::with_capacity(self.batch);
            for &i in &order[s * self.batch..(s + 1) * self.batch] {
                let seed: u64 = self.rng.random();
                b.push(if self.augment || self.crop.is_some() {
                    if self.augment {
                        random_augment(&data[i], seed, self.crop)?
                    } else {
                        let c = self.crop.expect("checked");
                        crate::data::augment(&data[i], &[crate::data::AugOp::Crop(c.0, c.1)], seed)?
                    }
                } else {
                    data[i].clone()
                });
            }
            out.push(b);
        }
        Ok(out)
    }
}

fn pair_tensors(batch: &[Sample]) -> Result<(Tensor, Tensor)> {
    let irs: Vec<&Image> = batch.iter().map(|s| &s.ir).collect();
    let vis: Vec<&Image> = batch.iter().map(|s| &s.vis).collect();
    Ok((Image::batch(&irs)?, Image::batch(&vis)?))
}

fn finite_loss(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("loss is {loss} at step {step}")))
    }
}

/// Saves `last_good` to the abort path (if any) and passes the error on.
fn abort(cfg: &TrainConfig, last_good: &Checkpoint, err: Error) -> Error {
    if let (Error::Numeric(msg), Some(p)) = (&err, &cfg.abort_path) {
        return match last_good.save(p) {
            Ok(()) => Error::Numeric(format!("{msg}; last good checkpoint at {}", p.display())),
            Err(e) => Error::Numeric(format!("{msg}; could not save last good checkpoint: {e}")),
        };
    }
    err
}

#[derive(Clone, Debug)]
pub struct Stage1Run {
    pub model: BfnModel,
    pub optimizer: Optimizer,
    pub trace: Vec<TraceRow>,
}

impl Stage1Run {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut c = self.model.to_checkpoint().with_meta(run_meta(cfg, self.trace.last()));
        c.optimizer = Some(self.optimizer.clone());
        c
    }
}

fn run_meta(cfg: &TrainConfig, last: Option<&TraceRow>) -> Vec<(String, String)> {
    vec![
        ("seed".into(), cfg.seed.to_string()),
        ("config_hash".into(), config_hash(cfg)),
        ("epoch".into(), last.map_or(0, |r| r.epoch + 1).to_string()),
        ("steps".into(), last.map_or(0, |r| r.step + 1).to_string()),
        ("ablation".into(), cfg.ablation.as_str().into()),
    ]
}

/// SHA-256 over the debug rendering of the config.
pub fn config_hash(cfg: &TrainConfig) -> String {
    crate::checkpoint::sha256_hex(format!("{cfg:?}").as_bytes())
}

/// Trains the fusion network on the fusion loss alone.
pub fn train_stage1(cfg: &TrainConfig, data: &[Sample]) -> Result<Stage1Run> {
    cfg.validate()?;
    let (batch, per_epoch, epochs) = cfg.plan(data.len())?;
    let total = cfg.total_steps(per_epoch, epochs);
    let mut model = BfnModel::init(cfg.bfn_config(), sample_seed(cfg.seed, 1))?;
    let mut opt = Optimizer::new(&model.params);
    let mut batches = Batches {
        rng: ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 2)),
        batch,
        per_epoch,
        augment: cfg.augment,
        crop: cfg.crop,
    };
    let mut trace = Vec::with_capacity(total);
    let mut step = 0;
    'outer: for epoch in 0..epochs {
        let lr = lr_schedule(TrainStage::Bfn, epoch, epochs, &cfg.schedule)?;
        for b in batches.epoch(data)? {
            if step == total {
                break 'outer;
            }
            let (ir, vi) = pair_tensors(&b)?;
            let result = (|| -> Result<f64> {
                let mut ctx = Ctx::new();
                let s = ctx.attach(&model.params, true, BnMode::Train);
                let i = ctx.input(ir);
                let v = ctx.input(vi);
                let f = bfn::fuse(&mut ctx, s, &model.cfg, i, v, None)?;
                let loss = bfn::fusion_loss(&mut ctx.tape, f, i, v, cfg.lambda)?;
                let value = finite_loss(ctx.tape.value(loss).item()?, step)?;
                ctx.backward(loss)?;
                let grads = ctx.grads(s);
                let updates = ctx.bn_updates(s);
                drop(ctx);
                let mut next = model.params.clone();
                opt.step(&mut next, &grads, lr)?;
                next.apply_bn_updates(&updates)?;
                model.params = next;
                Ok(value)
            })();
            let loss = result.map_err(|e| abort(cfg, &model.to_checkpoint(), e))?;
            log::debug!("stage1 epoch {epoch} step {step} loss {loss:.6}");
            trace.push(TraceRow { epoch, step, loss, lr });
            step += 1;
        }
        if let Some((_, m)) = epoch_means(&trace).last() {
            log::info!("stage1 epoch {epoch} mean loss {m:.6} lr {lr:.2e}");
        }
    }
    Ok(Stage1Run {
        model,
        optimizer: opt,
        trace,
    })
}

#[derive(Clone, Debug)]
pub struct HeadRun {
    pub head: HeadModel,
    pub trace: Vec<TraceRow>,
}

/// Trains one head per configured task on the plain fused output of `bfn`.
pub fn pretrain_heads(cfg: &TrainConfig, data: &[Sample], bfn: &BfnModel) -> Result<Vec<HeadRun>> {
    cfg.validate()?;
    let (batch, per_epoch, epochs) = cfg.plan(data.len())?;
    let total = cfg.total_steps(per_epoch, epochs);
    // the heads see fused images; carry them through augmentation in the ir slot
    let pairs: Vec<(&Image, &Image)> = data.iter().map(|s| (&s.ir, &s.vis)).collect();
    let fused = crate::model::fuse_images(bfn, None, &pairs, batch)?;
    let fused_data: Vec<Sample> = data
        .iter()
        .zip(fused)
        .map(|(s, f)| Sample {
            ir: f.clone(),
            vis: f,
            gt: s.gt.clone(),
            seed: s.seed,
        })
        .collect();
    let mut runs = Vec::new();
    for (ti, &kind) in cfg.tasks.iter().enumerate() {
        let mut head = HeadModel::init(kind, cfg.head_width, sample_seed(cfg.seed, 100 + ti as u64))?;
        let mut opt = Optimizer::new(&head.params);
        let mut batches = Batches {
            rng: ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 200 + ti as u64)),
            batch,
            per_epoch,
            augment: cfg.augment,
            crop: cfg.crop,
        };
        let mut trace = Vec::with_capacity(total);
        let mut step = 0;
        'outer: for epoch in 0..epochs {
            let lr = lr_schedule(TrainStage::Heads, epoch, epochs, &cfg.schedule)?;
            for b in batches.epoch(&fused_data)? {
                if step == total {
                    break 'outer;
                }
                let imgs: Vec<&Image> = b.iter().map(|s| &s.ir).collect();
                let x = Image::batch(&imgs)?;
                let gts: Vec<_> = b.iter().map(|s| &s.gt).collect();
                let targets = Targets::from_gts(&gts)?;
                let result = (|| -> Result<f64> {
                    let mut ctx = Ctx::new();
                    let s = ctx.attach(&head.params, true, BnMode::Train);
                    let xi = ctx.input(x);
                    let logits = tasks::head_forward(&mut ctx, s, xi)?;
                    let loss = tasks::task_loss(&mut ctx.tape, kind, logits, &targets)?;
                    let value = finite_loss(ctx.tape.value(loss).item()?, step)?;
                    ctx.backward(loss)?;
                    let grads = ctx.grads(s);
                    drop(ctx);
                    opt.step(&mut head.params, &grads, lr)?;
                    Ok(value)
                })();
                let loss = result.map_err(|e| abort(cfg, &head.to_checkpoint(), e))?;
                trace.push(TraceRow { epoch, step, loss, lr });
                step += 1;
            }
            if let Some((_, m)) = epoch_means(&trace).last() {
                log::info!("heads {} epoch {epoch} mean loss {m:.6}", kind.as_str());
            }
        }
        runs.push(HeadRun { head, trace });
    }
    Ok(runs)
}

#[derive(Clone, Debug)]
pub struct Stage2Run {
    pub model: ToarModel,
    pub optimizer: Optimizer,
    pub trace: Vec<TraceRow>,
    /// Task drawn for each step.
    pub tasks: Vec<TaskKind>,
    pub instructions: Vec<(TaskKind, String)>,
}

impl Stage2Run {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut c = self.model.to_checkpoint().with_meta(run_meta(cfg, self.trace.last()));
        for (k, s) in &self.instructions {
            c.meta.insert(format!("instruction.{}", k.as_str()), s.clone());
        }
        c.optimizer = Some(self.optimizer.clone());
        c
    }
}

/// Instruction vectors for `cfg.tasks`, checked to be pairwise distinct.
pub fn task_embeddings(cfg: &TrainConfig) -> Result<Vec<(TaskKind, Embedding)>> {
    let embs = cfg
        .tasks
        .iter()
        .map(|&k| Ok((k, cfg.instruction(k)?.resolve(cfg.text_dim)?)))
        .collect::<Result<Vec<_>>>()?;
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            if instruct::cosine(&embs[i].1.vector, &embs[j].1.vector).abs() > 1.0 - 1e-6 {
                return Err(Error::Config(format!(
                    "instructions for {} and {} are collinear",
                    embs[i].0.as_str(),
                    embs[j].0.as_str()
                )));
            }
        }
    }
    Ok(embs)
}

/// Trains only the regulator; the fusion network and heads are read-only.
pub fn train_stage2(cfg: &TrainConfig, data: &[Sample], bfn: &BfnModel, heads: &[HeadModel]) -> Result<Stage2Run> {
    cfg.validate()?;
    if cfg.tasks.is_empty() {
        return Err(Error::Config("no tasks configured".into()));
    }
    let head_for = |k: TaskKind| {
        heads
            .iter()
            .find(|h| h.kind == k)
            .ok_or_else(|| Error::Config(format!("no head for task {}", k.as_str())))
    };
    for &k in &cfg.tasks {
        head_for(k)?;
    }
    let embs = task_embeddings(cfg)?;
    let tcfg = ToarConfig::for_bfn(&bfn.cfg, cfg.text_dim, cfg.ablation.variant());
    let mut model = ToarModel::init(tcfg, sample_seed(cfg.seed, 3))?;
    // one task per batch in train-mode BN: each instruction keeps its own running statistics
    if model.cfg.variant.uses_text() && embs.len() > 1 {
        let keys: Vec<Vec<f64>> = embs.iter().map(|(_, e)| e.vector.clone()).collect();
        model.split_stats(&keys)?;
    }
    let mut opt = Optimizer::new(&model.params);
    let (batch, per_epoch, epochs) = cfg.plan(data.len())?;
    let total = cfg.total_steps(per_epoch, epochs);
    let mut batches = Batches {
        rng: ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 4)),
        batch,
        per_epoch,
        augment: cfg.augment,
        crop: cfg.crop,
    };
    let mut task_rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 5));
    let mut trace = Vec::with_capacity(total);
    let mut drawn = Vec::with_capacity(total);
    let mut step = 0;
    'outer: for epoch in 0..epochs {
        let lr = lr_schedule(TrainStage::Toar, epoch, epochs, &cfg.schedule)?;
        for b in batches.epoch(data)? {
            if step == total {
                break 'outer;
            }
            let ti = task_rng.random_range(0..cfg.tasks.len());
            let kind = cfg.tasks[ti];
            let head = head_for(kind)?;
            let text = &embs[ti].1.vector;
            let (ir, vi) = pair_tensors(&b)?;
            let gts: Vec<_> = b.iter().map(|s| &s.gt).collect();
            let targets = Targets::from_gts(&gts)?;
            let result = (|| -> Result<f64> {
                let mut ctx = Ctx::new();
                let bs = ctx.attach(&bfn.params, false, BnMode::Eval);
                let ts = ctx.attach(&model.params, true, BnMode::Train);
                let hs = ctx.attach(&head.params, false, BnMode::Eval);
                let i = ctx.input(ir);
                let v = ctx.input(vi);
                let t = ctx.input(Tensor::new(&[1, text.len()], text.clone())?);
                let f = toar::toar_forward(&mut ctx, bs, &bfn.cfg, ts, &model.cfg, i, v, Some(t))?;
                let logits = tasks::head_forward(&mut ctx, hs, f)?;
                let loss = tasks::task_loss(&mut ctx.tape, kind, logits, &targets)?;
                let value = finite_loss(ctx.tape.value(loss).item()?, step)?;
                ctx.backward(loss)?;
                let grads = ctx.grads(ts);
                let updates = ctx.bn_updates(ts);
                drop(ctx);
                let mut next = model.params.clone();
                opt.step(&mut next, &grads, lr)?;
                next.apply_bn_updates(&updates)?;
                if let Some(s) = model.task_stats.get(ti) {
                    let mut own = s.buffers.clone();
                    own.apply_bn_updates(&updates)?;
                    model.task_stats[ti].buffers = own;
                }
                model.params = next;
                Ok(value)
            })();
            let loss = result.map_err(|e| abort(cfg, &model.to_checkpoint(), e))?;
            log::debug!("stage2 epoch {epoch} step {step} task {} loss {loss:.6}", kind.as_str());
            trace.push(TraceRow { epoch, step, loss, lr });
            drawn.push(kind);
            step += 1;
        }
        if let Some((_, m)) = epoch_means(&trace).last() {
            log::info!("stage2 epoch {epoch} mean loss {m:.6}");
        }
    }
    let instructions = embs
        .iter()
        .map(|(k, _)| Ok((*k, cfg.instruction(*k)?.describe())))
        .collect::<Result<Vec<_>>>()?;
    Ok(Stage2Run {
        model,
        optimizer: opt,
        trace,
        tasks: drawn,
        instructions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SceneSpec};

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::default();
        assert_eq!(lr_schedule(TrainStage::Bfn, 0, 100, &s).unwrap(), 1e-4);
        assert!((lr_schedule(TrainStage::Bfn, 20, 100, &s).unwrap() - 1e-3).abs() < 1e-18);
        assert!((lr_schedule(TrainStage::Bfn, 10, 100, &s).unwrap() - 5.5e-4).abs() < 1e-15);
        // desk-scale rescaling keeps the shape
        assert!((lr_schedule(TrainStage::Bfn, 6, 30, &s).unwrap() - 1e-3).abs() < 1e-15);
        for e in [0, 7, 999] {
            assert_eq!(lr_schedule(TrainStage::Toar, e, 1000, &s).unwrap(), 1e-2);
        }
        assert!(matches!(lr_schedule(TrainStage::Bfn, 100, 100, &s), Err(Error::Contract(_))));
    }

    #[test]
    fn ablation_flags() {
        assert_eq!(AblationFlags::default().resolve().unwrap(), Ablation::Full);
        let f = AblationFlags {
            disable_gap_gmp: true,
            ..Default::default()
        };
        assert_eq!(f.resolve().unwrap(), Ablation::VI);
        let both = AblationFlags {
            disable_ff: true,
            disable_tdpi: true,
            ..Default::default()
        };
        assert!(matches!(both.resolve(), Err(Error::Config(_))));
    }

    fn tiny() -> (TrainConfig, Vec<Sample>) {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            max_steps: Some(3),
            bfn: BfnConfig {
                depth: 2,
                width: 4,
                dec_width: 8,
                ..BfnConfig::default()
            },
            head_width: 4,
            ..TrainConfig::default()
        };
        let data = generate(&SceneSpec { h: 12, w: 12, ..SceneSpec::default() }, 4).unwrap();
        (cfg, data)
    }

    #[test]
    fn pipeline_runs_and_is_deterministic() {
        let (cfg, data) = tiny();
        let a = train_stage1(&cfg, &data).unwrap();
        let b = train_stage1(&cfg, &data).unwrap();
        assert_eq!(a.trace.len(), 3);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint(&cfg).to_bytes(), b.checkpoint(&cfg).to_bytes());

        let heads: Vec<HeadModel> = pretrain_heads(&cfg, &data, &a.model)
            .unwrap()
            .into_iter()
            .map(|r| r.head)
            .collect();
        assert_eq!(heads.len(), 2);
        let bfn_before = a.model.to_checkpoint().to_bytes();
        let s2 = train_stage2(&cfg, &data, &a.model, &heads).unwrap();
        assert_eq!(a.model.to_checkpoint().to_bytes(), bfn_before);
        assert_eq!(s2.trace.len(), 3);
        assert!(s2.trace.iter().all(|r| r.loss.is_finite() && r.lr == 1e-2));
    }

    #[test]
    fn missing_head_is_config_error() {
        let (cfg, data) = tiny();
        let bfn = BfnModel::init(cfg.bfn.clone(), 0).unwrap();
        let only_seg = vec![HeadModel::init(TaskKind::Seg, 4, 0).unwrap()];
        assert!(matches!(train_stage2(&cfg, &data, &bfn, &only_seg), Err(Error::Config(_))));
    }
}
