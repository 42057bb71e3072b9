//! Small frozen downstream heads over the fused image, their losses, and the
//! task metrics.

use crate::data::{GroundTruth, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, ParamSet, SetId};
use crate::tensor::{sigmoid_value, Tape, Tensor, Var};

/// β² of the F-measure.
pub const FBETA_SQ: f64 = 0.3;
/// Probability threshold for binary masks.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Seg,
    Sod,
    Det,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Seg, TaskKind::Sod, TaskKind::Det];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Seg => "seg",
            TaskKind::Sod => "sod",
            TaskKind::Det => "det",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(TaskKind::Seg),
            "sod" => Ok(TaskKind::Sod),
            "det" => Ok(TaskKind::Det),
            _ => Err(Error::Config(format!("unknown task {s:?} (seg, sod, det)"))),
        }
    }

    pub fn out_channels(self) -> usize {
        match self {
            TaskKind::Seg => NUM_CLASSES,
            TaskKind::Sod | TaskKind::Det => 1,
        }
    }

    /// Default instruction text for the task.
    pub fn instruction(self) -> &'static str {
        match self {
            TaskKind::Seg => "segment every pixel into classes",
            TaskKind::Sod => "highlight the salient object",
            TaskKind::Det => "detect objects",
        }
    }
}

/// Three 3×3 convs with ReLU between, ending in per-task logits.
pub fn init_head(kind: TaskKind, width: usize, seed: u64) -> Result<ParamSet> {
    if width == 0 {
        return Err(Error::Config("head width must be positive".into()));
    }
    let mut init = Init::new(seed);
    let mut set = ParamSet::new();
    init.conv(&mut set, "conv0", 1, width, 3)?;
    init.conv(&mut set, "conv1", width, width, 3)?;
    init.conv(&mut set, "conv2", width, kind.out_channels(), 3)?;
    Ok(set)
}

pub fn head_forward(ctx: &mut Ctx, set: SetId, fused: Var) -> Result<Var> {
    let s = ctx.tape.shape(fused);
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::dim(format!("heads take [B,1,H,W], got {s:?}")));
    }
    let x = ctx.conv_same(set, "conv0", fused)?;
    let x = ctx.tape.relu(x)?;
    let x = ctx.conv_same(set, "conv1", x)?;
    let x = ctx.tape.relu(x)?;
    ctx.conv_same(set, "conv2", x)
}

/// Batched labels in the layout the losses expect.
#[derive(Clone, Debug)]
pub struct Targets {
    pub seg: Vec<usize>,
    pub sod: Tensor,
    pub det: Tensor,
}

impl Targets {
    pub fn from_gts(gts: &[&GroundTruth]) -> Result<Self> {
        let first = gts.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let (h, w) = (first.h, first.w);
        if gts.iter().any(|g| (g.h, g.w) != (h, w)) {
            return Err(Error::Input("labels in one batch differ in size".into()));
        }
        let b = gts.len();
        let seg = gts.iter().flat_map(|g| g.seg.iter().map(|&c| c as usize)).collect();
        let sod = gts.iter().flat_map(|g| g.sod.iter().map(|&m| m as f64)).collect();
        let det = gts.iter().flat_map(|g| g.det.iter().copied()).collect();
        Ok(Targets {
            seg,
            sod: Tensor::new(&[b, 1, h, w], sod)?,
            det: Tensor::new(&[b, 1, h, w], det)?,
        })
    }
}

/// Pixelwise softmax CE (seg), BCE on logits (sod), or MSE between the
/// sigmoid heatmap and the target heatmap (det).
pub fn task_loss(tape: &mut Tape, kind: TaskKind, logits: Var, targets: &Targets) -> Result<Var> {
    match kind {
        TaskKind::Seg => tape.softmax_cross_entropy(logits, &targets.seg),
        TaskKind::Sod => tape.bce_with_logits(logits, &targets.sod),
        TaskKind::Det => {
            let p = tape.sigmoid(logits)?;
            let t = tape.constant(targets.det.clone());
            tape.mse(p, t)
        }
    }
}

/// Per-pixel argmax over channels of `[B, K, H, W]`; ties go to the lower class.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u8>> {
    let (b, k, h, w) = logits.dims4()?;
    let plane = h * w;
    let x = logits.data();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if x[(bi * k + c) * plane + p] > x[(bi * k + best) * plane + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

pub fn probabilities(logits: &Tensor) -> Vec<f64> {
    logits.data().iter().map(|&v| sigmoid_value(v)).collect()
}

/// Mean IoU over the classes present in prediction or ground truth.
pub fn metric_miou(pred: &[u8], gt: &[u8], classes: usize) -> f64 {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[g] += 1;
        }
    }
    let present: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    if present.is_empty() {
        return 1.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

/// Mean absolute error between a saliency map in `[0, 1]` and a binary mask.
pub fn metric_mae(pred: &[f64], gt: &[u8]) -> f64 {
    pred.iter()
        .zip(gt)
        .map(|(&p, &g)| (p - g as f64).abs())
        .sum::<f64>()
        / pred.len().max(1) as f64
}

/// F-measure of the thresholded map; 1 when both masks are empty.
pub fn metric_fbeta(pred: &[f64], gt: &[u8], beta_sq: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= MASK_THRESHOLD, g > 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall)
}

/// Accumulates per-image metrics for one task.
#[derive(Clone, Debug, Default)]
pub struct TaskScores {
    pub images: usize,
    pub loss_sum: f64,
    pub miou_sum: f64,
    pub mae_sum: f64,
    pub fbeta_sum: f64,
    pub heat_mse_sum: f64,
}

impl TaskScores {
    /// Adds a batch given head logits; `loss` is that batch's mean loss.
    pub fn add_batch(&mut self, kind: TaskKind, logits: &Tensor, gts: &[&GroundTruth], loss: f64) -> Result<()> {
        let (b, _, h, w) = logits.dims4()?;
        if b != gts.len() {
            return Err(Error::dim("logit batch does not match labels"));
        }
        let plane = h * w;
        self.loss_sum += loss * b as f64;
        match kind {
            TaskKind::Seg => {
                let pred = argmax_classes(logits)?;
                for (i, g) in gts.iter().enumerate() {
                    self.miou_sum += metric_miou(&pred[i * plane..(i + 1) * plane], &g.seg, NUM_CLASSES);
                }
            }
            TaskKind::Sod => {
                let p = probabilities(logits);
                for (i, g) in gts.iter().enumerate() {
                    let pi = &p[i * plane..(i + 1) * plane];
                    self.mae_sum += metric_mae(pi, &g.sod);
                    self.fbeta_sum += metric_fbeta(pi, &g.sod, FBETA_SQ);
                }
            }
            TaskKind::Det => {
                let p = probabilities(logits);
                for (i, g) in gts.iter().enumerate() {
                    let pi = &p[i * plane..(i + 1) * plane];
                    self.heat_mse_sum +=
                        pi.iter().zip(&g.det).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / plane as f64;
                }
            }
        }
        self.images += b;
        Ok(())
    }

    fn mean(&self, v: f64) -> f64 {
        v / self.images.max(1) as f64
    }

    pub fn loss(&self) -> f64 {
        self.mean(self.loss_sum)
    }

    pub fn miou(&self) -> f64 {
        self.mean(self.miou_sum)
    }

    pub fn mae(&self) -> f64 {
        self.mean(self.mae_sum)
    }

    pub fn fbeta(&self) -> f64 {
        self.mean(self.fbeta_sum)
    }

    pub fn heat_mse(&self) -> f64 {
        self.mean(self.heat_mse_sum)
    }

    /// `key=value` pairs relevant to `kind`.
    pub fn pairs(&self, kind: TaskKind) -> Vec<(&'static str, f64)> {
        let mut v = vec![("loss", self.loss())];
        match kind {
            TaskKind::Seg => v.push(("miou", self.miou())),
            TaskKind::Sod => {
                v.push(("mae", self.mae()));
                v.push(("fbeta", self.fbeta()));
            }
            TaskKind::Det => v.push(("heat_mse", self.heat_mse())),
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::BnMode;

    #[test]
    fn head_shapes() {
        for kind in TaskKind::ALL {
            let set = init_head(kind, 4, 1).unwrap();
            let mut ctx = Ctx::new();
            let s = ctx.attach(&set, false, BnMode::Eval);
            let x = ctx.input(Tensor::full(&[2, 1, 32, 32], 0.5));
            let y = head_forward(&mut ctx, s, x).unwrap();
            assert_eq!(ctx.tape.shape(y), &[2, kind.out_channels(), 32, 32]);
        }
    }

    #[test]
    fn saturated_seg_loss_vanishes() {
        let mut t = Tape::new();
        let targets: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let logits = Tensor::from_fn(&[1, 4, 4, 4], |i| {
            let (c, p) = (i / 16, i % 16);
            if p % 4 == c {
                20.0
            } else {
                0.0
            }
        });
        let l = t.constant(logits);
        let loss = t.softmax_cross_entropy(l, &targets).unwrap();
        assert!(t.value(loss).item().unwrap() < 1e-8);
    }

    #[test]
    fn sod_and_det_closed_forms() {
        let gt = GroundTruth {
            h: 2,
            w: 2,
            seg: vec![0; 4],
            sod: vec![1; 4],
            det: vec![0.5; 4],
        };
        let targets = Targets::from_gts(&[&gt]).unwrap();
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let l = task_loss(&mut t, TaskKind::Sod, z, &targets).unwrap();
        assert!((t.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);
        let l = task_loss(&mut t, TaskKind::Det, z, &targets).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn metric_identities() {
        let gt = vec![0u8, 1, 2, 3, 1, 1, 0, 2];
        assert_eq!(metric_miou(&gt, &gt, 4), 1.0);
        let mask = vec![1u8, 0, 1, 0];
        let p: Vec<f64> = mask.iter().map(|&m| m as f64).collect();
        assert_eq!(metric_mae(&p, &mask), 0.0);
        assert_eq!(metric_fbeta(&p, &mask, FBETA_SQ), 1.0);
        let inv: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
        assert_eq!(metric_mae(&inv, &mask), 1.0);
        let inv_u8: Vec<u8> = mask.iter().map(|m| 1 - m).collect();
        assert_eq!(metric_miou(&inv_u8, &mask, 2), 0.0);
        assert_eq!(metric_fbeta(&[0.0; 4], &[0; 4], FBETA_SQ), 1.0);
    }

    #[test]
    fn half_overlap_iou_is_one_third() {
        // two 8-pixel masks on a 4x4 grid sharing 4 pixels
        let a: Vec<u8> = (0..16).map(|i| u8::from(i < 8)).collect();
        let b: Vec<u8> = (0..16).map(|i| u8::from((4..12).contains(&i))).collect();
        let (mut inter, mut union) = (0, 0);
        for (x, y) in a.iter().zip(&b) {
            inter += (x & y) as usize;
            union += (x | y) as usize;
        }
        assert_eq!(inter as f64 / union as f64, 1.0 / 3.0);
        // the foreground-class IoU inside the mean matches the count
        let fg_only = metric_miou(&a, &b, 2) * 2.0 - 4.0 / 12.0;
        assert!((fg_only - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::full(&[1, 3, 1, 2], 1.0);
        assert_eq!(argmax_classes(&t).unwrap(), vec![0, 0]);
    }

    #[test]
    fn metrics_ignore_pixel_order() {
        let gt = vec![0u8, 1, 1, 0, 1, 0];
        let p = vec![0.2, 0.9, 0.4, 0.6, 0.8, 0.1];
        let perm = [5, 3, 1, 0, 4, 2];
        let gp: Vec<u8> = perm.iter().map(|&i| gt[i]).collect();
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        assert_eq!(metric_mae(&p, &gt), metric_mae(&pp, &gp));
        assert_eq!(metric_fbeta(&p, &gt, FBETA_SQ), metric_fbeta(&pp, &gp, FBETA_SQ));
    }
}
