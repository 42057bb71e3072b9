//! Flat `key = value` configuration. Command-line flags are folded in as
//! overrides on the same keys, so a file and a command line never disagree
//! about what a setting means.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::bfn::FusionKind;
use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::tasks::TaskKind;
use crate::train::{Ablation, AblationFlags, InstructionSource, TrainConfig};

pub type Pairs = IndexMap<String, String>;

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse(text: &str) -> Result<Pairs> {
    let mut out = Pairs::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

pub fn load(path: &Path) -> Result<Pairs> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    parse(&text)
}

/// Everything a command can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub scene: SceneSpec,
    /// Samples generated per `gen-data` split.
    pub n_train: usize,
    pub n_test: usize,
    pub data: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            train: TrainConfig::default(),
            scene: SceneSpec::default(),
            n_train: 64,
            n_test: 32,
            data: None,
        }
    }
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{k}: cannot parse {v:?}")))
}

fn flag(k: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{k}: expected a boolean, got {v:?}"))),
    }
}

fn crop(k: &str, v: &str) -> Result<Option<(usize, usize)>> {
    if v == "none" {
        return Ok(None);
    }
    let (h, w) = v
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("{k}: expected HxW or none, got {v:?}")))?;
    Ok(Some((num(k, h)?, num(k, w)?)))
}

impl Settings {
    /// Applies `pairs` on top of the defaults. Unknown keys are rejected.
    pub fn from_pairs(pairs: &Pairs) -> Result<Self> {
        let mut s = Settings::default();
        let mut flags = AblationFlags::default();
        let mut model: Option<Ablation> = None;
        let t = &mut s.train;
        for (k, v) in pairs {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "seed" => {
                    t.seed = num(k, v)?;
                    s.scene.seed = t.seed;
                }
                "epochs" => t.epochs = num(k, v)?,
                "batch_size" => t.batch_size = num(k, v)?,
                "max_steps" => t.max_steps = if v == "none" { None } else { Some(num(k, v)?) },
                "lambda" => t.lambda = num(k, v)?,
                "lr_start" => t.schedule.lr_start = num(k, v)?,
                "lr_peak" => t.schedule.lr_peak = num(k, v)?,
                "warmup" => t.schedule.warmup = num(k, v)?,
                "toar_lr" => t.schedule.toar_lr = num(k, v)?,
                "head_lr" => t.schedule.head_lr = num(k, v)?,
                "augment" => t.augment = flag(k, v)?,
                "crop" => t.crop = crop(k, v)?,
                "depth" => t.bfn.depth = num(k, v)?,
                "width" => t.bfn.width = num(k, v)?,
                "dec_width" => t.bfn.dec_width = num(k, v)?,
                "slope" => t.bfn.slope = num(k, v)?,
                "fusion" => t.bfn.fusion = FusionKind::parse(v)?,
                "head_width" => t.head_width = num(k, v)?,
                "text_dim" => t.text_dim = num(k, v)?,
                "model" => model = Some(Ablation::parse(v)?),
                "disable_ff" => flags.disable_ff = flag(k, v)?,
                "disable_instructions" => flags.disable_instructions = flag(k, v)?,
                "disable_tdpi" => flags.disable_tdpi = flag(k, v)?,
                "add_text_to_output" => flags.add_text_to_output = flag(k, v)?,
                "concat_text_features" => flags.concat_text_features = flag(k, v)?,
                "disable_gap_gmp" => flags.disable_gap_gmp = flag(k, v)?,
                "tasks" => {
                    t.tasks = v
                        .split(',')
                        .map(|x| TaskKind::parse(x.trim()))
                        .collect::<Result<Vec<_>>>()?;
                }
                "data" => s.data = Some(PathBuf::from(v)),
                "n_train" => s.n_train = num(k, v)?,
                "n_test" => s.n_test = num(k, v)?,
                "scene.h" => s.scene.h = num(k, v)?,
                "scene.w" => s.scene.w = num(k, v)?,
                "scene.min_objects" => s.scene.min_objects = num(k, v)?,
                "scene.max_objects" => s.scene.max_objects = num(k, v)?,
                "scene.noise_ir" => s.scene.noise_ir = num(k, v)?,
                "scene.noise_vis" => s.scene.noise_vis = num(k, v)?,
                _ => {
                    let source = if let Some(task) = k.strip_prefix("instruction.") {
                        (task, InstructionSource::Text(v.to_string()))
                    } else if let Some(task) = k.strip_prefix("embedding.") {
                        (task, InstructionSource::File(PathBuf::from(v)))
                    } else {
                        return Err(Error::Config(format!("unknown key {k:?}")));
                    };
                    let kind = TaskKind::parse(source.0)?;
                    t.instructions.retain(|(k, _)| *k != kind);
                    t.instructions.push((kind, source.1));
                }
            }
        }
        let from_flags = flags.resolve()?;
        t.ablation = match (model, from_flags) {
            (None, a) => a,
            (Some(m), Ablation::Full) => m,
            (Some(m), a) if m == a => a,
            (Some(m), a) => {
                return Err(Error::Config(format!(
                    "model {} conflicts with ablation flag for model {}",
                    m.as_str(),
                    a.as_str()
                )))
            }
        };
        s.train.validate()?;
        s.scene.validate()?;
        Ok(s)
    }

    /// File pairs (if any) overridden by `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &Pairs) -> Result<Self> {
        let mut pairs = match file {
            Some(p) => load(p)?,
            None => Pairs::new(),
        };
        for (k, v) in overrides {
            pairs.insert(k.clone(), v.clone());
        }
        Self::from_pairs(&pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_junk() {
        let p = parse("# header\nseed = 4\n\nepochs=2 # inline\n").unwrap();
        assert_eq!(p.get("seed").unwrap(), "4");
        assert_eq!(p.get("epochs").unwrap(), "2");
        assert!(matches!(parse("seed 4"), Err(Error::Config(_))));
        assert!(matches!(parse("a=1\na=2"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.cfg");
        fs::write(&f, "seed = 4\nlambda = 0.5\ninstruction.seg = paint classes\n").unwrap();
        let mut o = Pairs::new();
        o.insert("seed".into(), "9".into());
        let s = Settings::resolve(Some(&f), &o).unwrap();
        assert_eq!(s.train.seed, 9);
        assert_eq!(s.train.lambda, 0.5);
        assert_eq!(
            s.train.instruction(TaskKind::Seg).unwrap(),
            &InstructionSource::Text("paint classes".into())
        );
    }

    #[test]
    fn ablation_keys() {
        let p = parse("disable_tdpi = true").unwrap();
        assert_eq!(Settings::from_pairs(&p).unwrap().train.ablation, Ablation::III);
        let p = parse("model = IV\ndisable_tdpi = true").unwrap();
        assert!(matches!(Settings::from_pairs(&p), Err(Error::Config(_))));
        let p = parse("bogus = 1").unwrap();
        assert!(matches!(Settings::from_pairs(&p), Err(Error::Config(_))));
        let p = parse("lambda = -1").unwrap();
        assert!(matches!(Settings::from_pairs(&p), Err(Error::Config(_))));
    }
}
