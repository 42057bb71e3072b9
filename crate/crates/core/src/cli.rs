//! Command-line front end. Output is plain `name key=value ...` lines.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{file_sha256, Checkpoint};
use crate::config::{Pairs, Settings};
use crate::data::{self, Image, Sample};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::instruct;
use crate::metrics;
use crate::model::{self, BfnModel, Conditioning, HeadModel, ToarModel};
use crate::tasks::TaskKind;
use crate::train::{self, TraceRow, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "fusewright", version, about = "Task-conditioned infrared/visible image fusion")]
pub struct Cli {
    /// Flat key=value config file; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic train/test splits.
    GenData(GenData),
    /// Train heads (0), the fusion network (1) or the regulator (2).
    Train(TrainCmd),
    /// Fuse one image pair.
    Fuse(Fuse),
    /// Fusion metrics over a dataset split.
    EvalFusion(EvalFusion),
    /// Task metrics of a frozen head on fused outputs.
    EvalTask(EvalTask),
    /// Finite-difference gradient checks.
    Gradcheck(Gradcheck),
    /// Train and evaluate one ablation model end to end.
    Ablate(Ablate),
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct Hyper {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated task list, e.g. `seg,sod`.
    #[arg(long)]
    pub tasks: Option<String>,
    /// `TASK=TEXT`, repeatable.
    #[arg(long = "instruction", value_name = "TASK=TEXT")]
    pub instructions: Vec<String>,
    /// `TASK=PATH` to an exported embedding, repeatable.
    #[arg(long = "embedding", value_name = "TASK=PATH")]
    pub embeddings: Vec<String>,
    #[arg(long)]
    pub disable_ff: bool,
    #[arg(long)]
    pub disable_instructions: bool,
    #[arg(long)]
    pub disable_tdpi: bool,
    #[arg(long)]
    pub add_text_to_output: bool,
    #[arg(long)]
    pub concat_text_features: bool,
    #[arg(long)]
    pub disable_gap_gmp: bool,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[arg(long, value_parser = ["0", "1", "2"])]
    pub stage: String,
    /// Dataset root written by gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bfn: Option<PathBuf>,
    /// Head checkpoint, repeatable.
    #[arg(long = "head")]
    pub heads: Vec<PathBuf>,
    /// Ablation model (full, I..VI).
    #[arg(long)]
    pub model: Option<String>,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Args, Debug, Default)]
pub struct Steering {
    #[arg(long)]
    pub toar: Option<PathBuf>,
    #[arg(long, conflicts_with = "embedding")]
    pub instruction: Option<String>,
    #[arg(long)]
    pub embedding: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Fuse {
    #[arg(long)]
    pub bfn: PathBuf,
    #[arg(long)]
    pub ir: PathBuf,
    #[arg(long)]
    pub vis: PathBuf,
    /// Output image path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub steer: Steering,
}

#[derive(Args, Debug)]
pub struct EvalFusion {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, required_unless_present = "fused")]
    pub bfn: Option<PathBuf>,
    /// Directory of precomputed `<id>.pgm` fused images instead of a model.
    #[arg(long, conflicts_with = "bfn")]
    pub fused: Option<PathBuf>,
    #[command(flatten)]
    pub steer: Steering,
}

#[derive(Args, Debug)]
pub struct EvalTask {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub bfn: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[command(flatten)]
    pub steer: Steering,
}

#[derive(Args, Debug)]
pub struct Gradcheck {
    /// `all` or one op name.
    #[arg(long, default_value = "all")]
    pub ops: String,
    /// Number of consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
}

#[derive(Args, Debug)]
pub struct Ablate {
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse a trained fusion network (must match the model's fusion kind).
    #[arg(long)]
    pub bfn: Option<PathBuf>,
    #[arg(long = "head")]
    pub heads: Vec<PathBuf>,
    #[command(flatten)]
    pub hyper: Hyper,
}

/// Parses `args` (program name first) and runs the command, writing report
/// lines to `out`. Returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            let _ = writeln!(err, "error: {line}");
            return Error::Usage(String::new()).exit_code();
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Caps worker threads from `FW_THREADS` (default 1).
pub fn init_threads() -> Result<()> {
    let n = match std::env::var("FW_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("FW_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    init_threads()?;
    let mut o = Pairs::new();
    if let Some(s) = cli.seed {
        o.insert("seed".into(), s.to_string());
    }
    match &cli.command {
        Command::GenData(c) => {
            set(&mut o, "n_train", c.n_train);
            set(&mut o, "n_test", c.n_test);
            gen_data(&settings(cli, o)?, &c.out, out)
        }
        Command::Train(c) => {
            hyper_pairs(&mut o, &c.hyper, c.model.as_deref(), c.data.as_ref());
            let s = settings(cli, o)?;
            train_cmd(&s, &c.stage, c.bfn.as_deref(), &c.heads, &c.out, out)
        }
        Command::Fuse(c) => fuse_cmd(&settings(cli, o)?, c, out),
        Command::EvalFusion(c) => eval_fusion(&settings(cli, o)?, c, out),
        Command::EvalTask(c) => eval_task(&settings(cli, o)?, c, out),
        Command::Gradcheck(c) => {
            let s = settings(cli, o)?;
            let seeds: Vec<u64> = (0..c.seeds).map(|i| s.train.seed + i).collect();
            let ok = gradcheck_report(gradsuite::CASES, &c.ops, &seeds, out)?;
            if ok {
                Ok(())
            } else {
                Err(Error::Numeric(format!("gradient check above {:e}", gradsuite::TOLERANCE)))
            }
        }
        Command::Ablate(c) => {
            hyper_pairs(&mut o, &c.hyper, Some(&c.model), c.data.as_ref());
            let s = settings(cli, o)?;
            ablate(&s, c.bfn.as_deref(), &c.heads, &c.out, out)
        }
    }
}

fn set<T: ToString>(o: &mut Pairs, k: &str, v: Option<T>) {
    if let Some(v) = v {
        o.insert(k.into(), v.to_string());
    }
}

fn hyper_pairs(o: &mut Pairs, h: &Hyper, model: Option<&str>, data: Option<&PathBuf>) {
    set(o, "epochs", h.epochs);
    set(o, "max_steps", h.max_steps);
    set(o, "batch_size", h.batch_size);
    set(o, "lambda", h.lambda);
    set(o, "tasks", h.tasks.clone());
    set(o, "model", model);
    set(o, "data", data.map(|d| d.display().to_string()));
    for (on, k) in [
        (h.disable_ff, "disable_ff"),
        (h.disable_instructions, "disable_instructions"),
        (h.disable_tdpi, "disable_tdpi"),
        (h.add_text_to_output, "add_text_to_output"),
        (h.concat_text_features, "concat_text_features"),
        (h.disable_gap_gmp, "disable_gap_gmp"),
    ] {
        if on {
            o.insert(k.into(), "true".into());
        }
    }
    for (prefix, list) in [("instruction", &h.instructions), ("embedding", &h.embeddings)] {
        for item in list {
            match item.split_once('=') {
                Some((task, v)) => o.insert(format!("{prefix}.{}", task.trim()), v.to_string()),
                // invalid key makes from_pairs fail with a config error
                None => o.insert(format!("{prefix}.<missing TASK=>{item}"), String::new()),
            };
        }
    }
}

fn settings(cli: &Cli, overrides: Pairs) -> Result<Settings> {
    Settings::resolve(cli.config.as_deref(), &overrides)
}

fn data_root(s: &Settings) -> Result<&Path> {
    s.data
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset given (--data or data = ...)".into()))
}

fn gen_data(s: &Settings, root: &Path, out: &mut dyn Write) -> Result<()> {
    let train = data::generate(&s.scene, s.n_train)?;
    let test_spec = data::SceneSpec {
        seed: data::sample_seed(s.scene.seed, u64::MAX),
        ..s.scene.clone()
    };
    let test = data::generate(&test_spec, s.n_test)?;
    data::write_split(root, "train", &train)?;
    data::write_split(root, "test", &test)?;
    line(
        out,
        "gen-data",
        &[
            ("seed", s.scene.seed.to_string()),
            ("n_train", s.n_train.to_string()),
            ("n_test", s.n_test.to_string()),
            ("height", s.scene.h.to_string()),
            ("width", s.scene.w.to_string()),
            ("out", root.display().to_string()),
        ],
    )
}

/// Writes `name k=v k=v`.
pub fn line(out: &mut dyn Write, name: &str, kv: &[(&str, String)]) -> Result<()> {
    let mut s = name.to_string();
    for (k, v) in kv {
        s.push(' ');
        s.push_str(k);
        s.push('=');
        s.push_str(v);
    }
    writeln!(out, "{s}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn load_bfn(p: &Path) -> Result<BfnModel> {
    BfnModel::from_checkpoint(&Checkpoint::load(p)?)
}

fn load_heads(paths: &[PathBuf]) -> Result<Vec<HeadModel>> {
    paths
        .iter()
        .map(|p| HeadModel::from_checkpoint(&Checkpoint::load(p)?))
        .collect()
}

fn load_samples(root: &Path, split: &str, labels: bool) -> Result<Vec<Sample>> {
    let v = data::read_split(root, split, labels)?;
    if v.is_empty() {
        return Err(Error::Input(format!("split {split} under {} is empty", root.display())));
    }
    Ok(v.into_iter().map(|(_, s)| s).collect())
}

fn report_trace(out: &mut dyn Write, what: &str, trace: &[TraceRow]) -> Result<()> {
    for (e, m) in train::epoch_means(trace) {
        let lr = trace.iter().find(|r| r.epoch == e).map_or(0.0, |r| r.lr);
        line(out, "epoch", &[("run", what.into()), ("epoch", e.to_string()), ("loss", f(m)), ("lr", format!("{lr:e}"))])?;
    }
    Ok(())
}

fn save_ckpt(out: &mut dyn Write, c: &Checkpoint, path: &Path) -> Result<()> {
    c.save(path)?;
    line(
        out,
        "checkpoint",
        &[("path", path.display().to_string()), ("sha256", file_sha256(path)?)],
    )
}

fn with_abort(cfg: &TrainConfig, dir: &Path) -> TrainConfig {
    TrainConfig {
        abort_path: Some(dir.join("last_good.fwc")),
        ..cfg.clone()
    }
}

fn train_cmd(s: &Settings, stage: &str, bfn: Option<&Path>, heads: &[PathBuf], dir: &Path, out: &mut dyn Write) -> Result<()> {
    let stage = train::TrainStage::parse(stage)?;
    let cfg = with_abort(&s.train, dir);
    let samples = load_samples(data_root(s)?, "train", true)?;
    line(
        out,
        "train",
        &[
            ("stage", format!("{}", stage as u8)),
            ("seed", cfg.seed.to_string()),
            ("model", cfg.ablation.as_str().into()),
            ("config_hash", train::config_hash(&s.train)),
            ("n", samples.len().to_string()),
        ],
    )?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let need_bfn = || -> Result<BfnModel> {
        let p = bfn.ok_or_else(|| Error::Config("this stage needs --bfn".into()))?;
        load_bfn(p)
    };
    match stage {
        train::TrainStage::Bfn => {
            let run = train::train_stage1(&cfg, &samples)?;
            report_trace(out, "bfn", &run.trace)?;
            train::write_trace(&dir.join("stage1_loss.csv"), &run.trace)?;
            save_ckpt(out, &run.checkpoint(&s.train), &dir.join("bfn.fwc"))
        }
        train::TrainStage::Heads => {
            let b = need_bfn()?;
            for r in train::pretrain_heads(&cfg, &samples, &b)? {
                let k = r.head.kind.as_str();
                report_trace(out, &format!("head_{k}"), &r.trace)?;
                train::write_trace(&dir.join(format!("stage0_loss_{k}.csv")), &r.trace)?;
                save_ckpt(out, &r.head.to_checkpoint(), &dir.join(format!("head_{k}.fwc")))?;
            }
            Ok(())
        }
        train::TrainStage::Toar => {
            let b = need_bfn()?;
            let hs = load_heads(heads)?;
            let run = train::train_stage2(&cfg, &samples, &b, &hs)?;
            report_trace(out, "toar", &run.trace)?;
            train::write_trace(&dir.join("stage2_loss.csv"), &run.trace)?;
            save_ckpt(out, &run.checkpoint(&s.train), &dir.join("toar.fwc"))
        }
    }
}

/// Loaded regulator and the instruction vector it will follow.
struct Steer {
    toar: ToarModel,
    text: Vec<f64>,
    label: String,
}

fn steering(st: &Steering) -> Result<Option<Steer>> {
    let Some(p) = &st.toar else {
        if st.instruction.is_some() || st.embedding.is_some() {
            return Err(Error::Config("--instruction/--embedding given without --toar".into()));
        }
        return Ok(None);
    };
    let toar = ToarModel::from_checkpoint(&Checkpoint::load(p)?)?;
    let dim = toar.cfg.text_dim;
    let (emb, label) = match (&st.instruction, &st.embedding) {
        (Some(t), None) => (instruct::encode_text_dim(t, dim)?, t.clone()),
        (None, Some(e)) => (instruct::import_embedding(e, dim)?, format!("file:{}", e.display())),
        _ => return Err(Error::Config("--toar needs --instruction or --embedding".into())),
    };
    Ok(Some(Steer {
        toar,
        text: emb.vector,
        label,
    }))
}

impl Steer {
    fn cond(&self) -> Conditioning<'_> {
        Conditioning {
            toar: &self.toar,
            text: &self.text,
        }
    }
}

fn fuse_cmd(s: &Settings, c: &Fuse, out: &mut dyn Write) -> Result<()> {
    let bfn = load_bfn(&c.bfn)?;
    let steer = steering(&c.steer)?;
    let ir = data::read_image(&c.ir)?;
    let vis = data::read_image(&c.vis)?;
    if (ir.h, ir.w) != (vis.h, vis.w) {
        return Err(Error::Input(format!(
            "source sizes differ: {}x{} vs {}x{}",
            ir.h, ir.w, vis.h, vis.w
        )));
    }
    let fused = model::fuse_images(&bfn, steer.as_ref().map(Steer::cond), &[(&ir, &vis)], 1)?;
    data::write_image(&c.out, &fused[0])?;
    line(
        out,
        "fuse",
        &[
            ("seed", s.train.seed.to_string()),
            ("toar", steer.is_some().to_string()),
            ("out", c.out.display().to_string()),
            ("sha256", file_sha256(&c.out)?),
        ],
    )
}

fn eval_fusion(s: &Settings, c: &EvalFusion, out: &mut dyn Write) -> Result<()> {
    let items = data::read_split(&c.dir, &c.split, false)?;
    if items.is_empty() {
        return Err(Error::Input(format!("split {} under {} is empty", c.split, c.dir.display())));
    }
    let fused: Vec<Image> = match (&c.bfn, &c.fused) {
        (_, Some(dir)) => {
            if c.steer.toar.is_some() {
                return Err(Error::Config("--toar has no effect with --fused".into()));
            }
            items
                .iter()
                .map(|(id, _)| data::read_image(&dir.join(format!("{id}.pgm"))))
                .collect::<Result<_>>()?
        }
        (Some(b), None) => {
            let bfn = load_bfn(b)?;
            let steer = steering(&c.steer)?;
            let pairs: Vec<(&Image, &Image)> = items.iter().map(|(_, s)| (&s.ir, &s.vis)).collect();
            model::fuse_images(&bfn, steer.as_ref().map(Steer::cond), &pairs, 8)?
        }
        (None, None) => return Err(Error::Usage("eval-fusion needs --bfn or --fused".into())),
    };
    line(
        out,
        "eval-fusion",
        &[
            ("seed", s.train.seed.to_string()),
            ("split", c.split.clone()),
            ("n", items.len().to_string()),
        ],
    )?;
    let mut sum = [0.0; 3];
    for ((id, smp), fz) in items.iter().zip(&fused) {
        let sc = metrics::fusion_scores(fz, &smp.ir, &smp.vis)?;
        sum[0] += sc.q_ce;
        sum[1] += sc.q_mi;
        sum[2] += sc.q_abf;
        line(
            out,
            "pair",
            &[("id", id.clone()), ("q_ce", f(sc.q_ce)), ("q_mi", f(sc.q_mi)), ("q_abf", f(sc.q_abf))],
        )?;
    }
    let n = items.len() as f64;
    line(
        out,
        "mean",
        &[("q_ce", f(sum[0] / n)), ("q_mi", f(sum[1] / n)), ("q_abf", f(sum[2] / n))],
    )
}

fn eval_task(s: &Settings, c: &EvalTask, out: &mut dyn Write) -> Result<()> {
    let kind = TaskKind::parse(&c.task).map_err(|e| Error::Usage(e.to_string()))?;
    let bfn = load_bfn(&c.bfn)?;
    let head = HeadModel::from_checkpoint(&Checkpoint::load(&c.head)?)?;
    if head.kind != kind {
        return Err(Error::Config(format!(
            "--task {} but the head was trained for {}",
            kind.as_str(),
            head.kind.as_str()
        )));
    }
    let steer = steering(&c.steer)?;
    let samples = load_samples(&c.dir, &c.split, true)?;
    let scores = model::evaluate_task(&bfn, steer.as_ref().map(Steer::cond), &head, &samples, 8)?;
    let mut kv = vec![
        ("task", kind.as_str().to_string()),
        ("seed", s.train.seed.to_string()),
        ("split", c.split.clone()),
        ("n", samples.len().to_string()),
    ];
    if let Some(st) = &steer {
        kv.push(("instruction", format!("{:?}", st.label)));
    }
    kv.extend(scores.pairs(kind).into_iter().map(|(k, v)| (k, f(v))));
    line(out, "eval-task", &kv)
}

/// Runs `ops` (`all` or one name) over `seeds`; returns whether all passed.
pub fn gradcheck_report(
    cases: &[(&str, fn(u64) -> Result<f64>)],
    ops: &str,
    seeds: &[u64],
    out: &mut dyn Write,
) -> Result<bool> {
    let chosen: Vec<_> = if ops == "all" {
        cases.iter().collect()
    } else {
        let c: Vec<_> = cases.iter().filter(|(n, _)| *n == ops).collect();
        if c.is_empty() {
            return Err(Error::Usage(format!("unknown op {ops:?}")));
        }
        c
    };
    let mut failed = 0;
    for (name, case) in &chosen {
        let worst = seeds.iter().try_fold(0.0f64, |w, &s| Ok::<_, Error>(w.max(case(s)?)))?;
        let ok = worst < gradsuite::TOLERANCE;
        failed += usize::from(!ok);
        line(
            out,
            "gradcheck",
            &[
                ("op", name.to_string()),
                ("worst_rel_err", format!("{worst:.3e}")),
                ("status", if ok { "ok" } else { "FAIL" }.into()),
            ],
        )?;
    }
    line(
        out,
        "summary",
        &[
            ("ops", chosen.len().to_string()),
            ("seeds", seeds.len().to_string()),
            ("failed", failed.to_string()),
            ("tolerance", format!("{:e}", gradsuite::TOLERANCE)),
        ],
    )?;
    Ok(failed == 0)
}

fn ablate(s: &Settings, bfn: Option<&Path>, heads: &[PathBuf], dir: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = with_abort(&s.train, dir);
    let root = data_root(s)?;
    let samples = load_samples(root, "train", true)?;
    let held = load_samples(root, "test", true)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = cfg.ablation;
    line(
        out,
        "ablate",
        &[("model", m.as_str().into()), ("seed", cfg.seed.to_string()), ("config_hash", train::config_hash(&s.train))],
    )?;
    let bfn = match bfn {
        Some(p) => {
            let b = load_bfn(p)?;
            if b.cfg.fusion != m.fusion() {
                return Err(Error::Config(format!(
                    "model {} needs a {} fusion network, checkpoint has {}",
                    m.as_str(),
                    m.fusion().as_str(),
                    b.cfg.fusion.as_str()
                )));
            }
            b
        }
        None => {
            let run = train::train_stage1(&cfg, &samples)?;
            report_trace(out, "bfn", &run.trace)?;
            save_ckpt(out, &run.checkpoint(&s.train), &dir.join("bfn.fwc"))?;
            run.model
        }
    };
    let heads = if heads.is_empty() {
        let runs = train::pretrain_heads(&cfg, &samples, &bfn)?;
        for r in &runs {
            save_ckpt(out, &r.head.to_checkpoint(), &dir.join(format!("head_{}.fwc", r.head.kind.as_str())))?;
        }
        runs.into_iter().map(|r| r.head).collect()
    } else {
        load_heads(heads)?
    };
    let run = train::train_stage2(&cfg, &samples, &bfn, &heads)?;
    report_trace(out, "toar", &run.trace)?;
    train::write_trace(&dir.join("stage2_loss.csv"), &run.trace)?;
    save_ckpt(out, &run.checkpoint(&s.train), &dir.join("toar.fwc"))?;
    for (kind, emb) in train::task_embeddings(&cfg)? {
        let head = heads.iter().find(|h| h.kind == kind).expect("checked by train_stage2");
        let cond = Conditioning {
            toar: &run.model,
            text: &emb.vector,
        };
        let base = model::evaluate_task(&bfn, None, head, &held, 8)?;
        let tuned = model::evaluate_task(&bfn, Some(cond), head, &held, 8)?;
        let mut kv = vec![("model".to_string(), m.as_str().to_string()), ("task".into(), kind.as_str().into())];
        kv.extend(base.pairs(kind).into_iter().map(|(k, v)| (format!("base_{k}"), f(v))));
        kv.extend(tuned.pairs(kind).into_iter().map(|(k, v)| (k.to_string(), f(v))));
        let kv: Vec<(&str, String)> = kv.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        line(out, "result", &kv)?;
    }
    Ok(())
}
