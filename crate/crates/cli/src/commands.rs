use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cdr_core::eval::{correlation_from_stats, evaluate, render_table, EvalReport, PairStat};
use cdr_core::graph::{load_graph, write_relation, InteractionSplit, Relation, TripartiteGraph, UniverseCounts};
use cdr_core::metrics::{build_member_metrics, build_tuple_metrics, export_metrics_stamped};
use cdr_core::model::checkpoint::{load_embeddings, load_state, save_embeddings, save_state, Manifest};
use cdr_core::model::train::{run_variant_with, StageHook, TrainState};
use cdr_core::model::Variant;
use cdr_core::pipeline::{run_and_evaluate, stage_one_pair_stats, Experiment, RunOptions};
use cdr_core::synth::{community_graph, CommunityShape};
use cdr_core::Error as CoreError;
use serde_json::json;

use crate::config::{RunConfig, SweepStage};
use crate::error::{invalid, CliError, CliResult, Context};
use crate::layout::{json_line, manifest_text, read_stamp, stamp, write_text, RunDir, HASH_KEY};

/// The input graph and, when it has tuple interactions, its split.
struct Data {
    graph: TripartiteGraph,
    experiment: Option<Experiment>,
}

fn load_data(cfg: &RunConfig) -> CliResult<Data> {
    cfg.check_inputs()?;
    let x = cfg.data.member_object.as_deref().expect("checked");
    let z = cfg.data.tuple_member.as_deref().expect("checked");
    let graph = load_graph(cfg.data.tuple_object.as_deref(), x, z).context("loading the input graph")?;
    let experiment = if graph.y().is_empty() {
        log::warn!("no tuple interactions: only member-data variants can train, nothing can be evaluated");
        None
    } else {
        Some(Experiment::new(graph.clone(), &cfg.split).context("splitting tuple interactions")?)
    };
    Ok(Data { graph, experiment })
}

impl Data {
    /// What the model may see: the training split, or no interactions in
    /// the cold-start setting.
    fn training_graph(&self, cold_start: bool) -> CliResult<TripartiteGraph> {
        match &self.experiment {
            Some(exp) => Ok(exp.training_graph(cold_start)?),
            None => Ok(self.graph.clone()),
        }
    }

    fn experiment(&self) -> CliResult<&Experiment> {
        self.experiment
            .as_ref()
            .ok_or_else(|| invalid("evaluation needs tuple interactions, but the tuple_object data is empty or not configured"))
    }
}

fn counts_lines(g: &TripartiteGraph) -> Vec<(&'static str, String)> {
    vec![
        ("tuples", g.n_tuples().to_string()),
        ("members", g.n_members().to_string()),
        ("objects", g.n_objects().to_string()),
        ("tuple_object_edges", g.y().edge_count().to_string()),
        ("member_object_edges", g.x().edge_count().to_string()),
        ("tuple_member_edges", g.z().edge_count().to_string()),
    ]
}

fn split_parts(split: &InteractionSplit) -> [(&'static str, &Relation); 4] {
    [
        ("train", &split.train),
        ("test", &split.test),
        ("valid", &split.valid),
        ("discarded", &split.discarded),
    ]
}

/// Writes the split files, each led by the hash stamp and a `#counts` record.
fn write_splits(dir: &RunDir, data: &Data, hash: &str) -> CliResult<()> {
    let Some(exp) = &data.experiment else { return Ok(()) };
    let header = data.graph.counts().header();
    for (part, rel) in split_parts(&exp.split) {
        let mut text = format!("{}{header}\n", stamp(hash));
        for (t, o) in rel.edges() {
            let _ = writeln!(text, "{t}\t{o}");
        }
        write_text(&dir.split(part), &text)?;
    }
    Ok(())
}

fn write_config(dir: &RunDir, cfg: &RunConfig, hash: &str) -> CliResult<()> {
    write_text(&dir.config(), &format!("{}{}", stamp(hash), cfg.render()))
}

fn hash_manifest(hash: &str) -> Manifest {
    Manifest::from([(HASH_KEY.to_string(), hash.to_string())])
}

fn export_stage_metrics(dir: &RunDir, data: &Data, hash: &str, stages: &[&str]) -> CliResult<Vec<String>> {
    let stamps = hash_manifest(hash);
    let mut written = Vec::new();
    for &stage in stages {
        let set = match stage {
            "pretrain" => build_member_metrics(&data.graph).context("building member metrics")?,
            _ => {
                let Some(exp) = &data.experiment else {
                    log::warn!("no tuple interactions: skipping fine-tuning metrics");
                    continue;
                };
                build_tuple_metrics(&exp.split.train).context("building tuple-interaction metrics")?
            }
        };
        let path = dir.metrics(stage);
        export_metrics_stamped(&set, &path, &stamps)?;
        written.push(format!("{stage}: {} consistency entries -> {}", set.nnz(), path.display()));
    }
    Ok(written)
}

pub fn preprocess(cfg: &RunConfig) -> CliResult<()> {
    let dir = RunDir::new(cfg.out_dir()?);
    let data = load_data(cfg)?;
    let hash = cfg.hash(&[])?;
    write_config(&dir, cfg, &hash)?;
    write_splits(&dir, &data, &hash)?;
    let written = export_stage_metrics(&dir, &data, &hash, &["pretrain", "finetune"])?;

    let mut entries = vec![("format", "cdr-preprocess-v1".to_string()), (HASH_KEY, hash.clone())];
    entries.extend(counts_lines(&data.graph));
    entries.push(("split_seed", cfg.split.seed.to_string()));
    if let Some(exp) = &data.experiment {
        for (part, rel) in split_parts(&exp.split) {
            entries.push((part, rel.edge_count().to_string()));
        }
    }
    write_text(&dir.manifest(), &manifest_text(&entries))?;

    for (k, v) in counts_lines(&data.graph) {
        println!("{k:<20} {v}");
    }
    for line in written {
        println!("{line}");
    }
    println!("config_hash {hash}");
    Ok(())
}

pub fn export(cfg: &RunConfig, stage: &str) -> CliResult<()> {
    let stages: &[&str] = match stage {
        "pretrain" => &["pretrain"],
        "finetune" => &["finetune"],
        "both" => &["pretrain", "finetune"],
        other => return Err(invalid(format!("--stage must be pretrain, finetune or both, got {other:?}"))),
    };
    let dir = RunDir::new(cfg.out_dir()?);
    let data = load_data(cfg)?;
    let hash = cfg.hash(&[])?;
    for line in export_stage_metrics(&dir, &data, &hash, stages)? {
        println!("{line}");
    }
    Ok(())
}

/// Saves optimiser state after epochs, resumes from it, and can stop a run
/// early to simulate an interruption.
struct CheckpointHook<'a> {
    dir: &'a RunDir,
    hash: &'a str,
    resume: bool,
    every: usize,
    stop_after: Option<usize>,
    epochs: usize,
    resumed: Vec<String>,
}

impl StageHook for CheckpointHook<'_> {
    fn resume(&mut self, stage: &str) -> cdr_core::Result<Option<TrainState>> {
        let path = self.dir.state(stage);
        if !self.resume || !path.join("state.json").is_file() {
            return Ok(None);
        }
        let (_, manifest) = load_embeddings(&path.join("current"))?;
        if manifest.get(HASH_KEY).map(String::as_str) != Some(self.hash) {
            return Err(CoreError::InvalidConfig(format!(
                "saved state in {} was written under a different configuration",
                path.display()
            )));
        }
        let state = load_state(&path)?;
        log::info!("{stage}: resuming after epoch {}", state.epoch);
        self.resumed.push(stage.to_string());
        Ok(Some(state))
    }

    fn after_epoch(&mut self, stage: &str, state: &TrainState) -> cdr_core::Result<bool> {
        self.epochs += 1;
        let stop = self.stop_after.is_some_and(|n| self.epochs >= n);
        if stop || state.finished || state.epoch % self.every == 0 {
            save_state(state, &self.dir.state(stage), &hash_manifest(self.hash))?;
        }
        Ok(!stop)
    }
}

pub struct TrainFlags {
    pub resume: bool,
    pub checkpoint_every: usize,
    pub stop_after_epochs: Option<usize>,
}

pub fn train(cfg: &RunConfig, flags: &TrainFlags) -> CliResult<()> {
    let variant = cfg.single_variant()?;
    if flags.checkpoint_every == 0 {
        return Err(invalid("--checkpoint-every must be at least 1"));
    }
    let dir = RunDir::new(cfg.out_dir()?);
    let data = load_data(cfg)?;
    let hash = cfg.run_hash(variant)?;
    let train_graph = data.training_graph(cfg.cold_start)?;
    let valid = match (&data.experiment, cfg.cold_start) {
        (Some(exp), false) => exp.valid_task(),
        _ => None,
    };
    if valid.is_none() {
        log::info!("no validation split: early stopping on the training loss");
    }

    write_config(&dir, cfg, &hash)?;
    write_splits(&dir, &data, &hash)?;
    let state_root = dir.root().join("checkpoints").join("state");
    if !flags.resume && state_root.is_dir() {
        fs::remove_dir_all(&state_root).map_err(|e| CliError::runtime(anyhow::anyhow!("{}: {e}", state_root.display())))?;
    }

    let mut hook = CheckpointHook {
        dir: &dir,
        hash: &hash,
        resume: flags.resume,
        every: flags.checkpoint_every,
        stop_after: flags.stop_after_epochs,
        epochs: 0,
        resumed: Vec::new(),
    };
    let run = match run_variant_with(&train_graph, variant, &cfg.pipeline, valid.as_ref(), &mut hook) {
        Err(e @ CoreError::Interrupted { .. }) => {
            return Err(CliError::runtime(anyhow::anyhow!(
                "{e}; state saved under {}, rerun with --resume",
                state_root.display()
            )))
        }
        other => other.context(format!("training {variant}"))?,
    };

    let mut extra = hash_manifest(&hash);
    extra.insert("variant".into(), variant.name().into());
    extra.insert("seed".into(), cfg.pipeline.pretrain.seed.to_string());
    save_embeddings(&run.embeddings, &dir.final_checkpoint(), &extra)?;
    for outcome in &run.stages {
        save_embeddings(&outcome.embeddings, &dir.stage_checkpoint(&outcome.stage), &extra)?;
    }

    let mut log = String::new();
    for outcome in &run.stages {
        for rec in &outcome.log {
            log.push_str(&json_line(serde_json::to_value(rec).expect("plain record"), &hash));
        }
    }
    write_text(&dir.train_log(), &log)?;

    if cfg.correlation {
        let stats = stage_one_pair_stats(&train_graph, &run).context("computing per-pair losses")?;
        write_pair_stats(&dir.pair_losses(), &stats, &hash)?;
    }

    let provenance = json!({
        HASH_KEY: hash,
        "variant": variant.name(),
        "seed": cfg.pipeline.pretrain.seed,
        "split_seed": cfg.split.seed,
        "cold_start": cfg.cold_start,
        "resumed_stages": hook.resumed,
        "run": run.provenance,
        "config": cfg.render(),
    });
    write_text(&dir.provenance(), &(serde_json::to_string_pretty(&provenance).expect("plain JSON") + "\n"))?;

    let mut entries = vec![
        ("format", "cdr-run-v1".to_string()),
        (HASH_KEY, hash.clone()),
        ("variant", variant.name().to_string()),
        ("seed", cfg.pipeline.pretrain.seed.to_string()),
        ("split_seed", cfg.split.seed.to_string()),
    ];
    entries.extend(counts_lines(&data.graph));
    entries.push(("embedding_dim", run.embeddings.dim().to_string()));
    write_text(&dir.manifest(), &manifest_text(&entries))?;

    for s in &run.provenance.stages {
        println!(
            "{:<9} {} data: {} epochs, best epoch {}{}",
            s.stage,
            s.data,
            s.epochs_run,
            s.best_epoch,
            if s.stopped_early { ", stopped early" } else { "" }
        );
    }
    println!("checkpoint {}", dir.final_checkpoint().display());
    println!("config_hash {hash}");
    Ok(())
}

const PAIR_HEADER: &str = "# anchor\tpositive\tc\td\td_mass\tloss";

fn write_pair_stats(path: &Path, stats: &[PairStat], hash: &str) -> CliResult<()> {
    let mut text = stamp(hash);
    text.push_str(PAIR_HEADER);
    text.push('\n');
    for s in stats {
        let _ = writeln!(text, "{}\t{}\t{}\t{}\t{}\t{}", s.anchor, s.positive, s.c, s.d, s.d_mass, s.loss);
    }
    write_text(path, &text)
}

fn read_pair_stats(path: &Path) -> CliResult<Vec<PairStat>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::runtime(anyhow::anyhow!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || invalid(format!("{}:{}: malformed per-pair loss record", path.display(), i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        out.push(PairStat {
            anchor: int(f[0])?,
            positive: int(f[1])?,
            c: num(f[2])?,
            d: num(f[3])?,
            d_mass: num(f[4])?,
            loss: num(f[5])?,
        });
    }
    Ok(out)
}

pub struct EvalFlags {
    pub checkpoint: Option<PathBuf>,
    pub allow_hash_mismatch: bool,
}

pub fn evaluate_cmd(cfg: &RunConfig, flags: &EvalFlags) -> CliResult<()> {
    let variant = cfg.single_variant()?;
    let dir = RunDir::new(cfg.out_dir()?);
    let ckpt = flags.checkpoint.clone().unwrap_or_else(|| dir.final_checkpoint());
    if !ckpt.join("manifest.txt").is_file() {
        return Err(invalid(format!("no checkpoint at {} (run `cdr train` first)", ckpt.display())));
    }
    let (table, manifest) = load_embeddings(&ckpt)?;
    let expected = cfg.expected_dim(variant);
    if table.dim() != expected {
        return Err(CoreError::DimensionMismatch(format!(
            "checkpoint {} has dim {}, but {variant} under this config produces dim {expected}",
            ckpt.display(),
            table.dim()
        ))
        .into());
    }
    let hash = cfg.run_hash(variant)?;
    match manifest.get(HASH_KEY) {
        Some(h) if *h == hash => {}
        found => {
            let found = found.map(String::as_str).unwrap_or("none");
            if !flags.allow_hash_mismatch {
                return Err(invalid(format!(
                    "checkpoint config hash {found} does not match this config ({hash}); pass --allow-hash-mismatch to evaluate anyway"
                )));
            }
            log::warn!("config hash mismatch overridden: checkpoint {found}, config {hash}");
        }
    }

    let data = load_data(cfg)?;
    let exp = data.experiment()?;
    let task = exp.test_task().context("building the test task")?;
    let metrics = evaluate(&task, &table, &cfg.ks, cfg.score).context("ranking the test split")?;

    let pair_log = dir.pair_losses();
    let correlation = if pair_log.is_file() {
        if read_stamp(&pair_log)?.as_deref() == Some(hash.as_str()) {
            Some(correlation_from_stats(&read_pair_stats(&pair_log)?)?)
        } else {
            log::warn!("{} belongs to another configuration; no correlation block", pair_log.display());
            None
        }
    } else {
        None
    };
    let report = EvalReport {
        label: variant.name().to_string(),
        recommendees: task.recommendees().len(),
        metrics,
        correlation,
        config_hash: Some(hash.clone()),
    };
    write_text(&dir.report("report.jsonl"), &report.to_jsonl())?;
    let table_text = render_table(std::slice::from_ref(&report));
    write_text(&dir.report("table.txt"), &format!("{}{table_text}", stamp(&hash)))?;
    print!("{table_text}");
    if let Some(c) = &report.correlation {
        let r = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
        println!("correlation over {} pairs: r_c {} r_d {} r_d_mass {}", c.pairs, r(c.r_c), r(c.r_d), r(c.r_d_mass));
    }
    Ok(())
}

/// One ablation job: a variant, optionally with a swept temperature.
struct Job {
    label: String,
    variant: Variant,
    tau: Option<f64>,
    cfg: RunConfig,
}

fn ablation_jobs(cfg: &RunConfig, sweep: bool) -> Vec<Job> {
    let mut jobs = Vec::new();
    for &variant in &cfg.variants {
        if !sweep {
            jobs.push(Job {
                label: variant.name().to_string(),
                variant,
                tau: None,
                cfg: cfg.clone(),
            });
            continue;
        }
        for &tau in &cfg.taus {
            let mut c = cfg.clone();
            if cfg.sweep_stage != SweepStage::Finetune {
                c.pipeline.pretrain.tau = tau;
            }
            if cfg.sweep_stage != SweepStage::Pretrain {
                c.pipeline.finetune.tau = tau;
            }
            jobs.push(Job {
                label: format!("{} tau={tau}", variant.name()),
                variant,
                tau: Some(tau),
                cfg: c,
            });
        }
    }
    jobs
}

pub fn ablate(cfg: &RunConfig, sweep: bool) -> CliResult<()> {
    let dir = RunDir::new(cfg.out_dir()?);
    let data = load_data(cfg)?;
    let exp = data.experiment()?;
    let names: Vec<&str> = cfg.variants.iter().map(|v| v.name()).collect();
    let mut scope = vec![("variants", names.join(","))];
    if sweep {
        let taus: Vec<String> = cfg.taus.iter().map(|t| t.to_string()).collect();
        scope.push(("taus", taus.join(",")));
        scope.push(("sweep_stage", cfg.sweep_stage.name().to_string()));
    }
    let hash = cfg.hash(&scope)?;
    write_config(&dir, cfg, &hash)?;

    let opts = RunOptions {
        ks: cfg.ks.clone(),
        cold_start: cfg.cold_start,
        correlation: cfg.correlation,
        score_fn: cfg.score,
    };
    let jobs = ablation_jobs(cfg, sweep);
    let mut reports = Vec::new();
    let mut jsonl = String::new();
    let mut series = String::new();
    let mut failures = Vec::new();
    for job in &jobs {
        let run_hash = job.cfg.run_hash(job.variant)?;
        log::info!("running {}", job.label);
        match run_and_evaluate(exp, job.variant, &job.cfg.pipeline, &opts) {
            Ok(out) => {
                let mut report = out.report;
                report.label = job.label.clone();
                report.config_hash = Some(run_hash.clone());
                jsonl.push_str(&report.to_jsonl());
                if let Some(tau) = job.tau {
                    for m in &report.metrics {
                        let rec = json!({
                            "record": "sweep",
                            "variant": job.variant.name(),
                            "stage": cfg.sweep_stage.name(),
                            "tau": tau,
                            "k": m.k,
                            "recall": m.recall,
                            "precision": m.precision,
                            "ndcg": m.ndcg,
                            "f1": m.f1,
                        });
                        series.push_str(&json_line(rec, &run_hash));
                    }
                }
                reports.push(report);
            }
            Err(e) => {
                log::error!("{}: {e}", job.label);
                let rec = json!({"record": "failure", "label": job.label, "error": e.to_string()});
                jsonl.push_str(&json_line(rec, &run_hash));
                failures.push((job.label.clone(), e.to_string()));
            }
        }
    }

    let mut table = render_table(&reports);
    for (label, err) in &failures {
        let _ = writeln!(table, "{label}: failed: {err}");
    }
    let name = if sweep { "sweep" } else { "ablate" };
    write_text(&dir.report(&format!("{name}.jsonl")), &jsonl)?;
    write_text(&dir.report(&format!("{name}_table.txt")), &format!("{}{table}", stamp(&hash)))?;
    if sweep {
        write_text(&dir.report("sweep_series.jsonl"), &series)?;
    }
    print!("{table}");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::runtime(anyhow::anyhow!("{} of {} runs failed", failures.len(), jobs.len())))
    }
}

pub fn generate(out: &Path, seed: u64, shape: &str) -> CliResult<()> {
    let shape = match shape {
        "mafengwo" => CommunityShape::mafengwo(),
        "small" => CommunityShape {
            counts: UniverseCounts {
                tuples: 120,
                members: 400,
                objects: 100,
            },
            y_edges: 600,
            x_edges: 2400,
            z_edges: 480,
            communities: 6,
            locality: 0.85,
        },
        other => return Err(invalid(format!("--shape must be small or mafengwo, got {other:?}"))),
    };
    let g = community_graph(seed, &shape)?;
    let counts = g.counts();
    fs::create_dir_all(out).map_err(|e| CliError::runtime(anyhow::anyhow!("{}: {e}", out.display())))?;
    for (name, rel) in [("tuple_object.tsv", g.y()), ("member_object.tsv", g.x()), ("tuple_member.tsv", g.z())] {
        write_relation(rel, &out.join(name), Some(counts))?;
    }
    let conf = "# synthetic community graph\n\
                tuple_object=tuple_object.tsv\n\
                member_object=member_object.tsv\n\
                tuple_member=tuple_member.tsv\n\
                out=run\n\
                variant=CDR\n\n\
                [pretrain]\ntau=3.8\n\n\
                [finetune]\ntau=1\n";
    write_text(&out.join("run.conf"), conf)?;
    for (k, v) in counts_lines(&g) {
        println!("{k:<20} {v}");
    }
    println!("wrote {}", out.display());
    Ok(())
}
