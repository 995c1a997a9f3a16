//! Run configuration: a plain `key=value` file with optional `[split]`,
//! `[pretrain]` and `[finetune]` sections, overridden by command-line flags.
//!
//! Top-level training keys (`dim`, `tau`, `loss`, ...) apply to both stages;
//! a stage section overrides them regardless of order. A top-level `seed`
//! seeds the split and both stages. Relative paths in a file are resolved
//! against the file's directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cdr_core::eval::{ScoreFn, DEFAULT_KS};
use cdr_core::graph::SplitSpec;
use cdr_core::model::train::PipelineConfig;
use cdr_core::model::{LossKind, Negatives, TrainConfig, Variant};
use sha2::{Digest, Sha256};

use crate::error::{invalid, CliResult};

const HASH_FORMAT: &str = "cdr-config-v1";

/// Which stage temperature a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepStage {
    Pretrain,
    Finetune,
    Both,
}

impl SweepStage {
    pub fn name(self) -> &'static str {
        match self {
            SweepStage::Pretrain => "pretrain",
            SweepStage::Finetune => "finetune",
            SweepStage::Both => "both",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(SweepStage::Pretrain),
            "finetune" => Some(SweepStage::Finetune),
            "both" => Some(SweepStage::Both),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataPaths {
    /// Tuple-object interactions; absent means no interactions at all.
    pub tuple_object: Option<PathBuf>,
    pub member_object: Option<PathBuf>,
    pub tuple_member: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataPaths,
    pub out: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub split: SplitSpec,
    pub pipeline: PipelineConfig,
    pub ks: Vec<usize>,
    /// Train without tuple interactions and evaluate on the test split.
    pub cold_start: bool,
    pub score: ScoreFn,
    /// Log per-pair losses of the first stage for the correlation analysis.
    pub correlation: bool,
    /// Temperatures for `ablate --sweep`.
    pub taus: Vec<f64>,
    pub sweep_stage: SweepStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataPaths {
                tuple_object: None,
                member_object: None,
                tuple_member: None,
            },
            out: None,
            variants: vec![Variant::Cdr],
            split: SplitSpec::default(),
            pipeline: PipelineConfig::default(),
            ks: DEFAULT_KS.to_vec(),
            cold_start: false,
            score: ScoreFn::Cosine,
            correlation: true,
            taus: vec![0.3, 1.0, 2.0, 3.8],
            sweep_stage: SweepStage::Both,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub tau_pretrain: Option<f64>,
    pub tau_finetune: Option<f64>,
    pub dim: Option<usize>,
    pub k: Option<String>,
    pub out: Option<PathBuf>,
    pub negatives: Option<String>,
    pub loss: Option<String>,
}

struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

fn read_entries(path: &Path) -> CliResult<Vec<Entry>> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut section = String::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            if !["split", "pretrain", "finetune"].contains(&section.as_str()) {
                return Err(invalid(format!("{}:{}: unknown section [{section}]", path.display(), i + 1)));
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(invalid(format!("{}:{}: expected key=value, found {line:?}", path.display(), i + 1)));
        };
        let key = key.trim();
        let (sec, key) = match key.split_once('.') {
            Some((s, k)) if section.is_empty() => (s.to_string(), k.to_string()),
            _ => (section.clone(), key.to_string()),
        };
        out.push(Entry {
            section: sec,
            key,
            value: value.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

fn parse_num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid number {value:?}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid boolean {value:?}")),
    }
}

pub fn parse_list<T>(value: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse).collect()
}

pub fn parse_variants(value: &str) -> Result<Vec<Variant>, String> {
    parse_list(value, |s| Variant::parse(s).ok_or_else(|| format!("unknown variant {s:?}")))
}

pub fn parse_ks(value: &str) -> Result<Vec<usize>, String> {
    parse_list(value, parse_num::<usize>)
}

fn parse_negatives(value: &str) -> Result<Negatives, String> {
    Negatives::parse(value).ok_or_else(|| format!("negatives must be `full` or `sampled:N`, got {value:?}"))
}

fn parse_loss(value: &str) -> Result<LossKind, String> {
    LossKind::parse(value).ok_or_else(|| format!("loss must be cd, origin, mse or ce, got {value:?}"))
}

/// Returns `Ok(false)` when `key` is not a training key.
fn set_stage_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool, String> {
    match key {
        "dim" => cfg.dim = parse_num(value)?,
        "tau" => cfg.tau = parse_num(value)?,
        "learning_rate" | "lr" => cfg.learning_rate = parse_num(value)?,
        "batch_size" => cfg.batch_size = parse_num(value)?,
        "patience" => cfg.patience = parse_num(value)?,
        "seed" => cfg.seed = parse_num(value)?,
        "negatives" => cfg.negatives = parse_negatives(value)?,
        "loss" => cfg.loss = parse_loss(value)?,
        "max_epochs" => cfg.max_epochs = parse_num(value)?,
        "valid_k" => cfg.valid_k = parse_num(value)?,
        "plateau_tolerance" => cfg.plateau_tolerance = parse_num(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_split_key(spec: &mut SplitSpec, key: &str, value: &str) -> Result<bool, String> {
    match key {
        "train" => spec.train = parse_num(value)?,
        "test" => spec.test = parse_num(value)?,
        "valid" => spec.valid = parse_num(value)?,
        "seed" => spec.seed = parse_num(value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Defaults, then the file (if any), then the flags; finally validated.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let entries = read_entries(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        // top level first so that sections win whatever the file order
        let (top, sections): (Vec<&Entry>, Vec<&Entry>) = entries.iter().partition(|e| e.section.is_empty());
        for e in top.into_iter().chain(sections) {
            self.apply_entry(e, base)
                .map_err(|m| invalid(format!("{}:{}: {}: {m}", path.display(), e.line, e.key)))?;
        }
        Ok(())
    }

    fn apply_entry(&mut self, e: &Entry, base: &Path) -> Result<(), String> {
        let v = e.value.as_str();
        let known = match e.section.as_str() {
            "split" => set_split_key(&mut self.split, &e.key, v)?,
            "pretrain" => set_stage_key(&mut self.pipeline.pretrain, &e.key, v)?,
            "finetune" => set_stage_key(&mut self.pipeline.finetune, &e.key, v)?,
            "" => self.apply_top_key(&e.key, v, base)?,
            other => return Err(format!("unknown section {other:?}")),
        };
        if known {
            Ok(())
        } else {
            Err("unknown key".into())
        }
    }

    fn apply_top_key(&mut self, key: &str, v: &str, base: &Path) -> Result<bool, String> {
        let path = |v: &str| Some(base.join(v));
        match key {
            "tuple_object" => self.data.tuple_object = if v.is_empty() { None } else { path(v) },
            "member_object" => self.data.member_object = path(v),
            "tuple_member" => self.data.tuple_member = path(v),
            "out" => self.out = path(v),
            "variant" | "variants" => self.variants = parse_variants(v)?,
            "k" | "ks" => self.ks = parse_ks(v)?,
            "cold_start" => self.cold_start = parse_bool(v)?,
            "score" => self.score = ScoreFn::parse(v).ok_or_else(|| format!("score must be cosine or dot, got {v:?}"))?,
            "correlation" => self.correlation = parse_bool(v)?,
            "taus" => self.taus = parse_list(v, parse_num::<f64>)?,
            "sweep_stage" => {
                self.sweep_stage = SweepStage::parse(v).ok_or_else(|| format!("sweep_stage must be pretrain, finetune or both, got {v:?}"))?
            }
            "seed" => {
                let seed: u64 = parse_num(v)?;
                self.split.seed = seed;
                self.pipeline.pretrain.seed = seed;
                self.pipeline.finetune.seed = seed;
            }
            _ => {
                let a = set_stage_key(&mut self.pipeline.pretrain, key, v)?;
                set_stage_key(&mut self.pipeline.finetune, key, v)?;
                return Ok(a);
            }
        }
        Ok(true)
    }

    fn apply_overrides(&mut self, o: &Overrides) -> CliResult<()> {
        let flag = |name: &'static str| move |m: String| invalid(format!("--{name}: {m}"));
        if let Some(v) = &o.variant {
            self.variants = parse_variants(v).map_err(flag("variant"))?;
        }
        if let Some(seed) = o.seed {
            self.split.seed = seed;
            self.pipeline.pretrain.seed = seed;
            self.pipeline.finetune.seed = seed;
        }
        if let Some(t) = o.tau_pretrain {
            self.pipeline.pretrain.tau = t;
        }
        if let Some(t) = o.tau_finetune {
            self.pipeline.finetune.tau = t;
        }
        if let Some(d) = o.dim {
            self.pipeline.pretrain.dim = d;
            self.pipeline.finetune.dim = d;
        }
        if let Some(k) = &o.k {
            self.ks = parse_ks(k).map_err(flag("k"))?;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        if let Some(n) = &o.negatives {
            let n = parse_negatives(n).map_err(flag("negatives"))?;
            self.pipeline.pretrain.negatives = n;
            self.pipeline.finetune.negatives = n;
        }
        if let Some(l) = &o.loss {
            let l = parse_loss(l).map_err(flag("loss"))?;
            self.pipeline.pretrain.loss = l;
            self.pipeline.finetune.loss = l;
        }
        Ok(())
    }

    fn validate(&self) -> CliResult<()> {
        if self.variants.is_empty() {
            return Err(invalid("empty variant list"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(invalid("K list must be non-empty and hold positive cut-offs"));
        }
        if self.taus.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(invalid("sweep temperatures must be positive"));
        }
        self.split.validate()?;
        for (stage, c) in [("pretrain", &self.pipeline.pretrain), ("finetune", &self.pipeline.finetune)] {
            c.validate().map_err(|e| invalid(format!("[{stage}] {e}")))?;
        }
        Ok(())
    }

    /// The output directory; every command that writes needs one.
    pub fn out_dir(&self) -> CliResult<&Path> {
        self.out.as_deref().ok_or_else(|| invalid("no output directory: set `out` in the config or pass --out"))
    }

    /// The member-side files must be configured and present; the
    /// interaction file is optional but must exist when named.
    pub fn check_inputs(&self) -> CliResult<()> {
        let need = |name: &str, p: &Option<PathBuf>| -> CliResult<()> {
            let p = p.as_ref().ok_or_else(|| invalid(format!("no `{name}` file configured")))?;
            if !p.is_file() {
                return Err(invalid(format!("{name} file not found: {}", p.display())));
            }
            Ok(())
        };
        need("member_object", &self.data.member_object)?;
        need("tuple_member", &self.data.tuple_member)?;
        if let Some(p) = &self.data.tuple_object {
            if !p.is_file() {
                return Err(invalid(format!("tuple_object file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    /// The single variant that `train`/`evaluate` operate on.
    pub fn single_variant(&self) -> CliResult<Variant> {
        match self.variants[..] {
            [v] => Ok(v),
            _ => Err(invalid(format!(
                "this command runs one variant, {} given (use `ablate` for several)",
                self.variants.len()
            ))),
        }
    }

    /// Width of the embedding table `variant` produces under this config.
    pub fn expected_dim(&self, variant: Variant) -> usize {
        match variant {
            Variant::CdrP => self.pipeline.pretrain.dim,
            Variant::CdrF => self.pipeline.finetune.dim,
            // the fine-tuning table starts as a copy of the first stage's
            // table and is concatenated with it
            _ => 2 * self.pipeline.pretrain.dim,
        }
    }

    /// Canonical text of everything that influences training: data
    /// contents, split and both stage configurations. Paths, output
    /// location and evaluation settings are left out.
    pub fn canonical(&self) -> CliResult<String> {
        let mut s = format!("format={HASH_FORMAT}\n");
        for (name, p) in [
            ("tuple_object", &self.data.tuple_object),
            ("member_object", &self.data.member_object),
            ("tuple_member", &self.data.tuple_member),
        ] {
            let digest = match p {
                Some(p) => {
                    let bytes = fs::read(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
                    hex::encode(Sha256::digest(&bytes))
                }
                None => "none".into(),
            };
            let _ = writeln!(s, "data.{name}={digest}");
        }
        let sp = &self.split;
        let _ = writeln!(s, "split.train={}\nsplit.test={}\nsplit.valid={}\nsplit.seed={}", sp.train, sp.test, sp.valid, sp.seed);
        let _ = writeln!(s, "cold_start={}", self.cold_start);
        for (stage, c) in [("pretrain", &self.pipeline.pretrain), ("finetune", &self.pipeline.finetune)] {
            for (k, v) in stage_fields(c) {
                let _ = writeln!(s, "{stage}.{k}={v}");
            }
        }
        Ok(s)
    }

    /// Hash of the canonical text plus scope lines (the variant of a run,
    /// or the variant list of an ablation).
    pub fn hash(&self, scope: &[(&str, String)]) -> CliResult<String> {
        let mut text = self.canonical()?;
        for (k, v) in scope {
            let _ = writeln!(text, "{k}={v}");
        }
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn run_hash(&self, variant: Variant) -> CliResult<String> {
        self.hash(&[("variant", variant.name().to_string())])
    }

    /// The resolved configuration as a file `--config` accepts.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "tuple_object={}", path(&self.data.tuple_object));
        if self.data.member_object.is_some() {
            let _ = writeln!(s, "member_object={}", path(&self.data.member_object));
        }
        if self.data.tuple_member.is_some() {
            let _ = writeln!(s, "tuple_member={}", path(&self.data.tuple_member));
        }
        if self.out.is_some() {
            let _ = writeln!(s, "out={}", path(&self.out));
        }
        let join = |v: Vec<String>| v.join(",");
        let _ = writeln!(s, "variants={}", join(self.variants.iter().map(|v| v.name().to_string()).collect()));
        let _ = writeln!(s, "k={}", join(self.ks.iter().map(|k| k.to_string()).collect()));
        let _ = writeln!(s, "cold_start={}", self.cold_start);
        let _ = writeln!(s, "score={}", self.score.name());
        let _ = writeln!(s, "correlation={}", self.correlation);
        let _ = writeln!(s, "taus={}", join(self.taus.iter().map(|t| t.to_string()).collect()));
        let _ = writeln!(s, "sweep_stage={}", self.sweep_stage.name());
        let sp = &self.split;
        let _ = writeln!(s, "\n[split]\ntrain={}\ntest={}\nvalid={}\nseed={}", sp.train, sp.test, sp.valid, sp.seed);
        for (stage, c) in [("pretrain", &self.pipeline.pretrain), ("finetune", &self.pipeline.finetune)] {
            let _ = writeln!(s, "\n[{stage}]");
            for (k, v) in stage_fields(c) {
                if !k.starts_with("binarize") {
                    let _ = writeln!(s, "{k}={v}");
                }
            }
        }
        s
    }
}

fn stage_fields(c: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("dim", c.dim.to_string()),
        ("tau", c.tau.to_string()),
        ("learning_rate", c.learning_rate.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("patience", c.patience.to_string()),
        ("seed", c.seed.to_string()),
        ("negatives", c.negatives.to_string()),
        ("loss", c.loss.name().to_string()),
        ("binarize_c", c.binarize_c.to_string()),
        ("binarize_d", c.binarize_d.to_string()),
        ("max_epochs", c.max_epochs.to_string()),
        ("valid_k", c.valid_k.to_string()),
        ("plateau_tolerance", c.plateau_tolerance.to_string()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn sections_override_top_level_in_any_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "run.conf",
            "[pretrain]\ntau = 3.8\n\n# shared\n[finetune]\ndim=8\n",
        );
        // a later top-level key must not undo the section value
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, format!("tau=2\ndim=16\nseed=7\npretrain.patience=3\n{text}")).unwrap();
        let cfg = RunConfig::resolve(Some(&p), &Overrides::default()).unwrap();
        assert_eq!(cfg.pipeline.pretrain.tau, 3.8);
        assert_eq!(cfg.pipeline.finetune.tau, 2.0);
        assert_eq!(cfg.pipeline.pretrain.dim, 16);
        assert_eq!(cfg.pipeline.finetune.dim, 8);
        assert_eq!(cfg.split.seed, 7);
        assert_eq!(cfg.pipeline.finetune.seed, 7);
        assert_eq!(cfg.pipeline.pretrain.patience, 3);
        assert_eq!(cfg.pipeline.finetune.patience, 10);
    }

    #[test]
    fn flags_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run.conf", "dim=16\nvariant=CDR-P\nk=5\nout=runs/a\n");
        let o = Overrides {
            dim: Some(32),
            tau_finetune: Some(0.3),
            variant: Some("cdr,w/o-c".into()),
            k: Some("10,20".into()),
            negatives: Some("sampled:50".into()),
            loss: Some("mse".into()),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(Some(&p), &o).unwrap();
        assert_eq!(cfg.pipeline.pretrain.dim, 32);
        assert_eq!(cfg.pipeline.finetune.tau, 0.3);
        assert_eq!(cfg.pipeline.pretrain.tau, 1.0);
        assert_eq!(cfg.variants, vec![Variant::Cdr, Variant::WithoutC]);
        assert_eq!(cfg.ks, vec![10, 20]);
        assert_eq!(cfg.pipeline.finetune.negatives, Negatives::Sampled(50));
        assert_eq!(cfg.pipeline.pretrain.loss, LossKind::Mse);
        assert_eq!(cfg.out.unwrap(), dir.path().join("runs/a"));
    }

    #[test]
    fn bad_lines_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "run.conf", "dim=4\n\nbogus=1\n");
        let e = RunConfig::resolve(Some(&p), &Overrides::default()).unwrap_err();
        assert!(e.to_string().contains("run.conf:3: bogus: unknown key"), "{e}");
        let p = write(dir.path(), "tau.conf", "[pretrain]\ntau=-1\n");
        let e = RunConfig::resolve(Some(&p), &Overrides::default()).unwrap_err();
        assert!(e.to_string().contains("tau must be positive"), "{e}");
        let p = write(dir.path(), "nokv.conf", "just text\n");
        assert!(RunConfig::resolve(Some(&p), &Overrides::default()).unwrap_err().to_string().contains("nokv.conf:1"));
    }

    #[test]
    fn empty_variant_list_is_rejected() {
        let o = Overrides {
            variant: Some(" , ".into()),
            ..Overrides::default()
        };
        let e = RunConfig::resolve(None, &o).unwrap_err();
        assert_eq!(e.kind, crate::error::Kind::Validation);
        assert!(e.to_string().contains("empty variant list"));
    }

    #[test]
    fn render_parses_back_to_the_same_config() {
        let dir = tempfile::tempdir().unwrap();
        let o = Overrides {
            tau_pretrain: Some(3.8),
            seed: Some(11),
            negatives: Some("sampled:7".into()),
            out: Some(dir.path().join("o")),
            ..Overrides::default()
        };
        let mut cfg = RunConfig::resolve(None, &o).unwrap();
        cfg.data.member_object = Some(dir.path().join("x.tsv"));
        cfg.data.tuple_member = Some(dir.path().join("z.tsv"));
        cfg.pipeline.finetune.learning_rate = 0.1 + 0.2;
        let p = write(dir.path(), "resolved.conf", &cfg.render());
        assert_eq!(RunConfig::resolve(Some(&p), &Overrides::default()).unwrap(), cfg);
    }

    #[test]
    fn hash_tracks_data_and_training_but_not_output() {
        let dir = tempfile::tempdir().unwrap();
        let x = write(dir.path(), "x.tsv", "0\t0\n");
        let z = write(dir.path(), "z.tsv", "0\t0\n");
        let mut cfg = RunConfig::default();
        cfg.data.member_object = Some(x.clone());
        cfg.data.tuple_member = Some(z);
        let h = cfg.run_hash(Variant::Cdr).unwrap();
        assert_eq!(h.len(), 64);
        let mut moved = cfg.clone();
        moved.out = Some(dir.path().join("elsewhere"));
        moved.ks = vec![5];
        assert_eq!(moved.run_hash(Variant::Cdr).unwrap(), h);
        assert_ne!(cfg.run_hash(Variant::CdrP).unwrap(), h);
        let mut hot = cfg.clone();
        hot.pipeline.pretrain.tau = 3.8;
        assert_ne!(hot.run_hash(Variant::Cdr).unwrap(), h);
        fs::write(&x, "0\t0\n1\t0\n").unwrap();
        assert_ne!(cfg.run_hash(Variant::Cdr).unwrap(), h);
    }

    #[test]
    fn expected_dim_follows_the_variant() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.expected_dim(Variant::Cdr), 128);
        assert_eq!(cfg.expected_dim(Variant::CdrP), 64);
        assert_eq!(cfg.expected_dim(Variant::CdrF), 64);
        assert_eq!(cfg.expected_dim(Variant::CdrR), 128);
    }
}
