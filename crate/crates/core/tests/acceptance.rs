//! Desk-scale acceptance run. Prints one `criterion` line per check.
//!
//! The process exits 0 even when a check is red so the regular test run
//! stays usable; set `FW_ACCEPT_STRICT=1` to turn any FAIL into exit 1.

use std::fs;
use std::path::Path;
use std::time::Instant;

use fusewright::bfn;
use fusewright::checkpoint::{file_sha256, sha256_hex, Checkpoint};
use fusewright::cli::main_with;
use fusewright::data::{self, Image, Sample, SceneSpec};
use fusewright::gradsuite;
use fusewright::metrics;
use fusewright::model::{evaluate_task, fuse_images, BfnModel, Conditioning, HeadModel, ToarModel};
use fusewright::nn::Ctx;
use fusewright::tasks::{metric_fbeta, metric_mae, metric_miou, TaskKind};
use fusewright::tensor::BnMode;
use fusewright::toar::ToarConfig;
use fusewright::train::{
    pretrain_heads, task_embeddings, train_stage1, train_stage2, Ablation, Stage2Run, TrainConfig,
};
use fusewright::{Error, Result};

/// Scene generator seed; the held-out split is derived from it.
const DATA_SEED: u64 = 1;
/// Seed for every training run below.
const SEED: u64 = 8;
const STAGE1_STEPS: usize = 200;
const HEAD_STEPS: usize = 300;
const STAGE2_STEPS: usize = 300;
const ABLATION_STEPS: usize = 50;
const SPECIFICITY_SEEDS: [u64; 3] = [1, 2, 3];

struct Row {
    id: usize,
    pass: bool,
}

fn kv(pairs: &[(&str, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn scenes() -> Result<(Vec<Sample>, Vec<Sample>)> {
    let spec = SceneSpec { seed: DATA_SEED, ..SceneSpec::default() };
    let train = data::generate(&spec, 64)?;
    let held = data::generate(&SceneSpec { seed: data::sample_seed(DATA_SEED, u64::MAX), ..spec }, 32)?;
    Ok((train, held))
}

/// Desk settings: 200 steps cannot follow the 100-epoch reference schedule,
/// so stage 1 runs it at ten times the rate (same shape).
fn base_cfg() -> TrainConfig {
    let mut c = TrainConfig { seed: SEED, ..TrainConfig::default() };
    c.schedule.lr_start = 1e-3;
    c.schedule.lr_peak = 1e-2;
    c
}

fn c1_gradients() -> Result<(bool, String)> {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let mut worst = (0.0f64, "");
    for (name, case) in gradsuite::CASES {
        for &s in &seeds {
            let e = case(s)?;
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    let dt = secs(t);
    let pass = worst.0 < gradsuite::TOLERANCE && dt < 60.0;
    Ok((
        pass,
        kv(&[
            ("cases", gradsuite::CASES.len().to_string()),
            ("seeds", seeds.len().to_string()),
            ("worst_rel_err", format!("{:.3e}", worst.0)),
            ("worst_case", worst.1.into()),
            ("secs", format!("{dt:.1}")),
        ]),
    ))
}

fn fuse_cli(args: &[&str]) -> Result<()> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("fusewright").chain(args.iter().copied());
    match main_with(argv, &mut out, &mut err) {
        0 => Ok(()),
        c => Err(Error::Input(format!("fuse exited {c}: {}", String::from_utf8_lossy(&err).trim()))),
    }
}

fn c2_identity(dir: &Path, bfn: &BfnModel) -> Result<(bool, String)> {
    let t = Instant::now();
    let toar = ToarModel::init(ToarConfig::for_bfn(&bfn.cfg, 64, Ablation::Full.variant()), 77)?;
    let (bp, tp) = (dir.join("c2_bfn.fwc"), dir.join("c2_toar.fwc"));
    bfn.to_checkpoint().save(&bp)?;
    toar.to_checkpoint().save(&tp)?;
    let pairs = data::generate(&SceneSpec { seed: 2024, ..SceneSpec::default() }, 20)?;
    let mut same = 0;
    for (i, s) in pairs.iter().enumerate() {
        let (ir, vis) = (dir.join(format!("c2_{i}_ir.pgm")), dir.join(format!("c2_{i}_vis.pgm")));
        data::write_image(&ir, &s.ir)?;
        data::write_image(&vis, &s.vis)?;
        let (a, b) = (dir.join(format!("c2_{i}_a.pgm")), dir.join(format!("c2_{i}_b.pgm")));
        let p = |x: &Path| x.to_str().unwrap().to_string();
        fuse_cli(&["fuse", "--bfn", &p(&bp), "--ir", &p(&ir), "--vis", &p(&vis), "--out", &p(&a)])?;
        fuse_cli(&[
            "fuse", "--bfn", &p(&bp), "--ir", &p(&ir), "--vis", &p(&vis), "--out", &p(&b), "--toar", &p(&tp),
            "--instruction", "find the hottest object",
        ])?;
        let read = |x: &Path| fs::read(x).map_err(|e| Error::Input(format!("{}: {e}", x.display())));
        same += usize::from(read(&a)? == read(&b)?);
    }
    let dt = secs(t);
    Ok((
        same == pairs.len() && dt < 10.0,
        kv(&[("identical", format!("{same}/{}", pairs.len())), ("secs", format!("{dt:.1}"))]),
    ))
}

/// Eval-mode fusion loss terms over `samples`: (total, gradient, brightness).
fn fusion_losses(model: &BfnModel, samples: &[Sample], lambda: f64) -> Result<(f64, f64, f64)> {
    let irs: Vec<&Image> = samples.iter().map(|s| &s.ir).collect();
    let vis: Vec<&Image> = samples.iter().map(|s| &s.vis).collect();
    let mut ctx = Ctx::new();
    let set = ctx.attach(&model.params, false, BnMode::Eval);
    let i = ctx.input(Image::batch(&irs)?);
    let v = ctx.input(Image::batch(&vis)?);
    let out = bfn::fuse(&mut ctx, set, &model.cfg, i, v, None)?;
    let g = bfn::gradient_loss(&mut ctx.tape, out, i, v)?;
    let b = bfn::brightness_loss(&mut ctx.tape, out, i, v)?;
    let (g, b) = (ctx.tape.value(g).item()?, ctx.tape.value(b).item()?);
    Ok((g + lambda * b, g, b))
}

fn c3_stage1(train: &[Sample]) -> Result<(bool, String, BfnModel, Checkpoint)> {
    let cfg = TrainConfig { max_steps: Some(STAGE1_STEPS), ..base_cfg() };
    let t = Instant::now();
    let run = train_stage1(&cfg, train)?;
    let dt = secs(t);
    let initial = run.trace[0].loss;
    let (last, g, b) = fusion_losses(&run.model, train, cfg.lambda)?;
    let ratio = initial / last;
    let pass = run.trace.len() == STAGE1_STEPS && ratio >= 5.0 && b < 0.05 && dt < 120.0;
    let detail = kv(&[
        ("steps", run.trace.len().to_string()),
        ("initial_loss", f(initial)),
        ("final_loss", f(last)),
        ("ratio", format!("{ratio:.2}")),
        ("final_gradient_term", f(g)),
        ("brightness_residual", f(b)),
        ("secs", format!("{dt:.1}")),
    ]);
    let ck = run.checkpoint(&cfg);
    Ok((pass, detail, run.model, ck))
}

fn heads_for(cfg: &TrainConfig, train: &[Sample], bfn: &BfnModel) -> Result<Vec<HeadModel>> {
    let hc = TrainConfig { max_steps: Some(HEAD_STEPS), ..cfg.clone() };
    Ok(pretrain_heads(&hc, train, bfn)?.into_iter().map(|r| r.head).collect())
}

fn head(heads: &[HeadModel], kind: TaskKind) -> &HeadModel {
    heads.iter().find(|h| h.kind == kind).expect("head trained")
}

fn embedding(cfg: &TrainConfig, kind: TaskKind) -> Result<Vec<f64>> {
    Ok(task_embeddings(cfg)?.into_iter().find(|(k, _)| *k == kind).expect("task configured").1.vector)
}

/// Held-out task scores of `head` with `run`'s regulator following `text`.
fn steered(bfn: &BfnModel, run: &Stage2Run, text: &[f64], head: &HeadModel, held: &[Sample]) -> Result<fusewright::tasks::TaskScores> {
    evaluate_task(bfn, Some(Conditioning { toar: &run.model, text }), head, held, 8)
}

fn c4_freeze(dir: &Path, bfn: &BfnModel, heads: &[HeadModel], train: &[Sample]) -> Result<(bool, String)> {
    let paths: Vec<_> = (0..=heads.len()).map(|i| dir.join(format!("c4_{i}.fwc"))).collect();
    bfn.to_checkpoint().save(&paths[0])?;
    for (h, p) in heads.iter().zip(&paths[1..]) {
        h.to_checkpoint().save(p)?;
    }
    let before: Vec<String> = paths.iter().map(|p| file_sha256(p)).collect::<Result<_>>()?;
    let b2 = BfnModel::from_checkpoint(&Checkpoint::load(&paths[0])?)?;
    let h2: Vec<HeadModel> =
        paths[1..].iter().map(|p| HeadModel::from_checkpoint(&Checkpoint::load(p)?)).collect::<Result<_>>()?;
    let cfg = TrainConfig { max_steps: Some(STAGE2_STEPS), ..base_cfg() };
    train_stage2(&cfg, train, &b2, &h2)?;
    let after: Vec<String> = paths.iter().map(|p| file_sha256(p)).collect::<Result<_>>()?;
    // the in-memory models handed to training must serialize to the same bytes
    let mut mem = vec![sha256_hex(&b2.to_checkpoint().to_bytes())];
    mem.extend(h2.iter().map(|h| sha256_hex(&h.to_checkpoint().to_bytes())));
    let pass = before == after && before == mem;
    Ok((pass, kv(&[("checkpoints", before.len().to_string()), ("unchanged", pass.to_string())])))
}

fn c5_adaptation(bfn: &BfnModel, heads: &[HeadModel], train: &[Sample], held: &[Sample]) -> Result<(bool, String)> {
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in [TaskKind::Seg, TaskKind::Sod] {
        let cfg = TrainConfig { tasks: vec![kind], max_steps: Some(STAGE2_STEPS), ..base_cfg() };
        let h = head(heads, kind);
        let t = Instant::now();
        let base = evaluate_task(bfn, None, h, held, 8)?;
        let run = train_stage2(&cfg, train, bfn, heads)?;
        let tuned = steered(bfn, &run, &embedding(&cfg, kind)?, h, held)?;
        let dt = secs(t);
        let (b, a, need) = match kind {
            TaskKind::Seg => (base.loss(), tuned.loss(), 0.30),
            _ => (base.mae(), tuned.mae(), 0.20),
        };
        let gain = (b - a) / b;
        pass &= gain >= need && dt < 300.0;
        let k = kind.as_str();
        let metric = if kind == TaskKind::Seg { "loss" } else { "mae" };
        parts.push(kv(&[
            (&format!("{k}_base_{metric}"), f(b)),
            (&format!("{k}_tuned_{metric}"), f(a)),
            (&format!("{k}_gain"), format!("{gain:.3}")),
            (&format!("{k}_secs"), format!("{dt:.1}")),
        ]));
    }
    Ok((pass, parts.join(" ")))
}

fn c6_specificity(bfn: &BfnModel, heads: &[HeadModel], train: &[Sample], held: &[Sample]) -> Result<(bool, String)> {
    let mut wins = 0;
    let mut parts = Vec::new();
    for s in SPECIFICITY_SEEDS {
        let cfg = TrainConfig { seed: s, max_steps: Some(STAGE2_STEPS), ..base_cfg() };
        let run = train_stage2(&cfg, train, bfn, heads)?;
        let (seg_txt, sod_txt) = (embedding(&cfg, TaskKind::Seg)?, embedding(&cfg, TaskKind::Sod)?);
        let hs = head(heads, TaskKind::Seg);
        let hd = head(heads, TaskKind::Sod);
        let seg_match = steered(bfn, &run, &seg_txt, hs, held)?.loss();
        let seg_swap = steered(bfn, &run, &sod_txt, hs, held)?.loss();
        let sod_match = steered(bfn, &run, &sod_txt, hd, held)?.mae();
        let sod_swap = steered(bfn, &run, &seg_txt, hd, held)?.mae();
        let ok = seg_match < seg_swap && sod_match < sod_swap;
        wins += usize::from(ok);
        parts.push(format!(
            "seed{s}=seg:{:.4}<{:.4},mae:{:.4}<{:.4}:{}",
            seg_match, seg_swap, sod_match, sod_swap, if ok { "ok" } else { "no" }
        ));
    }
    parts.insert(0, format!("wins={wins}/{}", SPECIFICITY_SEEDS.len()));
    Ok((wins == SPECIFICITY_SEEDS.len(), parts.join(" ")))
}

fn c7_metrics(held: &[Sample]) -> Result<(bool, String)> {
    let x = &held[0].vis;
    let mi = metrics::q_mi(x, x, x)?;
    let mi_err = (mi - 2.0 * metrics::entropy(x)).abs();
    let ce = metrics::q_ce(x, x, x)?.abs();
    let (a, b) = metrics::edge_test_pair();
    let self_abf = metrics::q_abf(&a, &a, &a)?.min(metrics::q_abf(&b, &b, &b)?);
    let constant = Image::filled(a.h, a.w, 0.5);
    let abf_const = metrics::q_abf(&constant, &a, &b)?;
    let gt = &held[0].gt;
    let sod: Vec<f64> = gt.sod.iter().map(|&m| m as f64).collect();
    let exact = metric_miou(&gt.seg, &gt.seg, data::NUM_CLASSES) == 1.0
        && metric_mae(&sod, &gt.sod) == 0.0
        && metric_fbeta(&sod, &gt.sod, 0.3) == 1.0;
    let pass = mi_err < 1e-9 && ce < 1e-9 && self_abf >= 0.99 && abf_const < 0.05 && exact;
    Ok((
        pass,
        kv(&[
            ("q_mi_err", format!("{mi_err:.2e}")),
            ("q_ce_self", format!("{ce:.2e}")),
            ("q_abf_self", f(self_abf)),
            ("q_abf_constant", f(abf_const)),
            ("task_identities", exact.to_string()),
        ]),
    ))
}

fn c8_ablation(bfn: &BfnModel, heads: &[HeadModel], train: &[Sample], held: &[Sample]) -> Result<(bool, String)> {
    let mut losses = Vec::new();
    for m in Ablation::ALL {
        let cfg = TrainConfig { ablation: m, tasks: vec![TaskKind::Seg], max_steps: Some(ABLATION_STEPS), ..base_cfg() };
        let own;
        let (b, hs): (&BfnModel, &[HeadModel]) = if m.fusion() == bfn.cfg.fusion {
            (bfn, heads)
        } else {
            // a different fusion block needs its own stage-1 network and heads
            let s1 = TrainConfig { max_steps: Some(STAGE1_STEPS), ..cfg.clone() };
            let nb = train_stage1(&s1, train)?.model;
            let nh = heads_for(&cfg, train, &nb)?;
            own = (nb, nh);
            (&own.0, &own.1)
        };
        let run = train_stage2(&cfg, train, b, hs)?;
        let loss = steered(b, &run, &embedding(&cfg, TaskKind::Seg)?, head(hs, TaskKind::Seg), held)?.loss();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("model {} seg loss {loss}", m.as_str())));
        }
        losses.push((m, loss));
    }
    let full = losses[0].1;
    let pass = losses[1..].iter().all(|&(_, l)| full <= l);
    let parts: Vec<String> = losses.iter().map(|(m, l)| format!("{}={:.5}", m.as_str(), l)).collect();
    Ok((pass, format!("seg_loss {}", parts.join(" "))))
}

fn c9_determinism(dir: &Path, train: &[Sample], ck: &Checkpoint) -> Result<(bool, String)> {
    let cfg = TrainConfig { max_steps: Some(20), ..base_cfg() };
    let a = train_stage1(&cfg, train)?;
    let b = train_stage1(&cfg, train)?;
    let same_trace = a.trace == b.trace;
    let same_ck = a.checkpoint(&cfg).to_bytes() == b.checkpoint(&cfg).to_bytes();

    let p1 = dir.join("c9_a.fwc");
    let p2 = dir.join("c9_b.fwc");
    ck.save(&p1)?;
    Checkpoint::load(&p1)?.save(&p2)?;
    let ck_round = file_sha256(&p1)? == file_sha256(&p2)?;

    let (q1, q2) = (dir.join("c9_a.pgm"), dir.join("c9_b.pgm"));
    data::write_image(&q1, &train[0].vis)?;
    data::write_image(&q2, &data::read_image(&q1)?)?;
    let pgm_round = file_sha256(&q1)? == file_sha256(&q2)?;

    let fused = fuse_images(&a.model, None, &[(&train[0].ir, &train[0].vis)], 1)?;
    let again = fuse_images(&b.model, None, &[(&train[0].ir, &train[0].vis)], 1)?;
    let same_fuse = fused == again;
    let pass = same_trace && same_ck && ck_round && pgm_round && same_fuse;
    Ok((
        pass,
        kv(&[
            ("trace", same_trace.to_string()),
            ("checkpoint", same_ck.to_string()),
            ("fused", same_fuse.to_string()),
            ("checkpoint_round_trip", ck_round.to_string()),
            ("pgm_round_trip", pgm_round.to_string()),
        ]),
    ))
}

fn record(rows: &mut Vec<Row>, id: usize, name: &str, r: Result<(bool, String)>) {
    let (pass, detail) = match r {
        Ok(x) => x,
        Err(e) => (false, format!("error={:?}", e.to_string())),
    };
    println!("criterion {id} {} name={name} {detail}", if pass { "PASS" } else { "FAIL" });
    rows.push(Row { id, pass });
}

fn main() {
    fusewright::cli::init_threads().expect("thread pool");
    let dir = tempfile::tempdir().expect("temp dir");
    let mut rows = Vec::new();
    let (train, held) = scenes().expect("scenes");

    record(&mut rows, 1, "gradient_suite", c1_gradients());

    let fresh = BfnModel::init(base_cfg().bfn_config(), 5).expect("init");
    record(&mut rows, 2, "identity_at_init", c2_identity(dir.path(), &fresh));

    let stage1 = c3_stage1(&train);
    let (bfn, ck) = match stage1 {
        Ok((pass, detail, model, ck)) => {
            record(&mut rows, 3, "stage1_training", Ok((pass, detail)));
            (model, ck)
        }
        Err(e) => {
            record(&mut rows, 3, "stage1_training", Err(e));
            let m = fresh.clone();
            let ck = m.to_checkpoint();
            (m, ck)
        }
    };

    let heads = heads_for(&base_cfg(), &train, &bfn);
    match heads {
        Ok(heads) => {
            record(&mut rows, 4, "freeze_contract", c4_freeze(dir.path(), &bfn, &heads, &train));
            record(&mut rows, 5, "task_adaptation", c5_adaptation(&bfn, &heads, &train, &held));
            record(&mut rows, 6, "instruction_specificity", c6_specificity(&bfn, &heads, &train, &held));
            record(&mut rows, 7, "metric_oracles", c7_metrics(&held));
            record(&mut rows, 8, "ablation_ordering", c8_ablation(&bfn, &heads, &train, &held));
        }
        Err(e) => {
            for (id, name) in [(4, "freeze_contract"), (5, "task_adaptation"), (6, "instruction_specificity")] {
                record(&mut rows, id, name, Err(Error::Numeric(format!("head pretraining failed: {e}"))));
            }
            record(&mut rows, 7, "metric_oracles", c7_metrics(&held));
            record(&mut rows, 8, "ablation_ordering", Err(Error::Numeric("head pretraining failed".into())));
        }
    }
    record(&mut rows, 9, "determinism_serialization", c9_determinism(dir.path(), &train, &ck));

    let failed: Vec<String> = rows.iter().filter(|r| !r.pass).map(|r| r.id.to_string()).collect();
    println!(
        "acceptance passed={}/{} failed=[{}]",
        rows.len() - failed.len(),
        rows.len(),
        failed.join(",")
    );
    if !failed.is_empty() && std::env::var("FW_ACCEPT_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
