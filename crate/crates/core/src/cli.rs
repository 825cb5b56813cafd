//! Command-line surface: experiment configuration, the corpus → base →
//! memorized pipeline, and one function per subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointMeta, Manifest};
use crate::corpus::{ingest_bytes, ingest_corpus, synthetic_lines, CorpusSplits, IngestOptions, SplitSizes};
use crate::erasers::{
    classify_collapse, erase, induce_memorization, Collapse, EraseMethod, EraseOutcome, EraseRunConfig,
    ErasedModel, MemorizeConfig, RunRecord, StopReason,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::{self, MetricReport, MetricSettings};
use crate::model::{attention_pattern, ModelConfig, ModelParameters, Vocabulary};
use crate::rng;
use crate::selection::{mask_batch_indices, select_blocks, selection_records, write_jsonl};
use crate::train::{train_lm, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpus {
    pub count: usize,
    pub line_len: usize,
    pub lexicon: usize,
    /// Probability of taking a word's preferred successor.
    pub follow: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            count: 5500,
            line_len: 40,
            lexicon: 1000,
            follow: 0.0,
            seed: 1,
        }
    }
}

/// A newline-delimited file when `path` is set, generated text otherwise.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSource {
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticCorpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub splits: IngestOptions,
    pub model: ModelConfig,
    pub base: TrainConfig,
    pub memorize: MemorizeConfig,
    pub erase: EraseRunConfig,
    /// Settings for `evaluate` and final reports.
    pub metrics: MetricSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSource::default(),
            splits: IngestOptions {
                sizes: SplitSizes {
                    forget: 50,
                    retain: 5000,
                    validation: 40,
                },
                seed: 1,
                ..IngestOptions::default()
            },
            model: ModelConfig::default(),
            base: TrainConfig {
                epochs: 2,
                lr: 3e-3,
                batch_size: 16,
                ..TrainConfig::default()
            },
            memorize: MemorizeConfig {
                max_epochs: 300,
                replay_per_epoch: 100,
                ..MemorizeConfig::default()
            },
            erase: EraseRunConfig {
                lr: 2.5e-3,
                ..EraseRunConfig::default()
            },
            metrics: MetricSettings::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `key.path=value` override.
fn apply_set(tree: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad key {key:?}")));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*p))
            .ok_or_else(|| Error::Config(format!("unknown config section {p:?} in {key:?}")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{key:?} does not name a field")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, then the TOML file, then `--set` overrides, then `--seed`.
    pub fn load(path: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut tree = toml::Value::try_from(Self::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, toml::Value::Table(file));
        }
        for s in sets {
            apply_set(&mut tree, s)?;
        }
        let mut cfg: Self = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(root) = seed {
            cfg.reseed(root);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces every component seed by a named substream of `root`.
    pub fn reseed(&mut self, root: u64) {
        self.corpus.synthetic.seed = rng::derive(root, "corpus");
        self.splits.seed = rng::derive(root, rng::SPLIT);
        self.model.seed = rng::derive(root, rng::INIT);
        self.base.seed = rng::derive(root, "base-order");
        self.memorize.seed = rng::derive(root, "memorize-order");
        self.erase.seed = rng::derive(root, rng::MASK_BATCH);
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("corpus".to_string(), self.corpus.synthetic.seed),
            ("split".to_string(), self.splits.seed),
            ("init".to_string(), self.model.seed),
            ("base".to_string(), self.base.seed),
            ("memorize".to_string(), self.memorize.seed),
            ("erase".to_string(), self.erase.seed),
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(p) = &self.corpus.path {
            if !p.is_file() {
                return bad(format!("corpus file {} does not exist", p.display()));
            }
        } else {
            let s = &self.corpus.synthetic;
            if s.count == 0 || s.line_len == 0 || s.lexicon == 0 {
                return bad("synthetic corpus needs count, line_len and lexicon ≥ 1".into());
            }
            if !(0.0..=1.0).contains(&s.follow) {
                return bad(format!("corpus.synthetic.follow must lie in [0, 1], got {}", s.follow));
            }
        }
        let sp = &self.splits;
        if sp.sizes.forget == 0 || sp.sizes.validation == 0 {
            return bad("splits need at least one forget and one validation sequence".into());
        }
        if !(sp.prefix_ratio > 0.0 && sp.prefix_ratio < 1.0) {
            return bad(format!("splits.prefix_ratio must lie in (0, 1), got {}", sp.prefix_ratio));
        }
        if sp.max_tokens > self.model.context_len {
            return bad(format!(
                "splits.max_tokens {} exceeds the model context {}",
                sp.max_tokens, self.model.context_len
            ));
        }
        self.model.validate()?;
        if self.base.batch_size == 0 || !(self.base.lr >= 0.0 && self.base.lr.is_finite()) {
            return bad("base needs batch_size ≥ 1 and a finite lr ≥ 0".into());
        }
        let m = &self.memorize;
        if m.batch_size == 0 || !(m.lr > 0.0 && m.lr.is_finite()) || !(0.0..=1.0).contains(&m.target_ma) {
            return bad("memorize needs batch_size ≥ 1, lr > 0 and target_ma in [0, 1]".into());
        }
        self.erase.validate()?;
        if self.metrics.gen_len == 0 {
            return bad("metrics.gen_len must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn corpus_lines(&self) -> Vec<String> {
        let s = &self.corpus.synthetic;
        synthetic_lines(s.count, s.line_len, s.lexicon, s.follow, s.seed)
    }

    pub fn splits(&self) -> Result<CorpusSplits> {
        match &self.corpus.path {
            Some(p) => ingest_corpus(p, &self.splits),
            None => ingest_bytes(self.corpus_lines().join("\n").as_bytes(), &self.splits),
        }
    }

    /// Fresh initialization trained on the retain split.
    pub fn train_base(&self, splits: &CorpusSplits, exec: Execution) -> Result<ModelParameters> {
        let mut p = ModelParameters::init(&self.model)?;
        let losses = train_lm(&mut p, &splits.retain, &self.base, exec)?;
        log::info!("base training losses {losses:?}");
        Ok(p)
    }

    /// Trains `base` until the forget split is memorized. Returns the model
    /// and the per-epoch forget MA.
    pub fn memorize(
        &self,
        base: &ModelParameters,
        forget: &[crate::corpus::ForgetSequence],
        splits: &CorpusSplits,
        exec: Execution,
    ) -> Result<(ModelParameters, Vec<f64>)> {
        let mut p = base.clone();
        let history = induce_memorization(&mut p, forget, &splits.retain, &self.memorize, exec)?;
        Ok((p, history))
    }

    /// Final report for any model state.
    pub fn report<M: crate::model::LanguageModel>(
        &self,
        model: &M,
        splits: &CorpusSplits,
        exec: Execution,
    ) -> Result<MetricReport> {
        metrics::evaluate(
            model,
            &splits.forget,
            &splits.validation,
            &splits.utility_prompts(),
            &self.metrics,
            exec,
        )
    }
}

/// What `erase` and `sweep-k` leave behind for `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub method: EraseMethod,
    pub k: usize,
    pub stop: StopReason,
    pub epochs: usize,
    pub baseline_ppl: f64,
    pub ppl_ratio: f64,
    pub collapse: Option<Collapse>,
    pub report: MetricReport,
    pub log: Vec<RunRecord>,
}

impl RunSummary {
    pub fn new(label: &str, cfg: &EraseRunConfig, outcome: &EraseOutcome, report: MetricReport) -> Self {
        let ppl_ratio = report.ppl / outcome.baseline_ppl;
        let collapse = if outcome.stop == StopReason::NonFinite {
            Some(Collapse::NonFinite)
        } else {
            classify_collapse(report.rep_2, ppl_ratio)
        };
        Self {
            label: label.to_string(),
            method: cfg.method,
            k: cfg.k,
            stop: outcome.stop,
            epochs: outcome.last().epoch,
            baseline_ppl: outcome.baseline_ppl,
            ppl_ratio,
            collapse,
            report,
            log: outcome.log.clone(),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "emso", version, about = "Erase verbatim memorization from a toy transformer")]
pub struct Cli {
    /// TOML experiment config; missing keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set erase.lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root seed; every component seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Disable the thread pool.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic corpus as newline-delimited text.
    GenCorpus,
    /// Train a fresh model on the retain split.
    TrainBase,
    /// Continue training until the forget split is memorized.
    Memorize {
        #[arg(long)]
        base: PathBuf,
    },
    /// Score blocks and print the selection mask.
    Select {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: Option<EraseMethod>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Run one eraser and write the updated checkpoint and logs.
    Erase {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: Option<EraseMethod>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        /// Memorization model for TA and CD; trained on the fly when absent.
        #[arg(long)]
        memo: Option<PathBuf>,
    },
    /// Write a metric report for a checkpoint.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the configured selective eraser once per k.
    SweepK {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        values: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Export attention patterns for one forget-set prefix.
    AttnDump {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Compare erase runs; collapsed models are left out of the ranking.
    Report {
        /// Summary files or directories holding `summary-*.json`.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Also write (label, epoch, MA, perplexity ratio) rows.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::TrainBase => "train-base",
            Command::Memorize { .. } => "memorize",
            Command::Select { .. } => "select",
            Command::Erase { .. } => "erase",
            Command::Evaluate { .. } => "evaluate",
            Command::SweepK { .. } => "sweep-k",
            Command::AttnDump { .. } => "attn-dump",
            Command::Report { .. } => "report",
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    exec: Execution,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest(&self, command: &str) -> Result<Manifest> {
        let mut m = Manifest::new(command, &self.cfg)?;
        m.seeds = self.cfg.seeds();
        if let Some(p) = &self.cfg.corpus.path {
            m.add_input(p)?;
        }
        Ok(m)
    }

    fn load(&self, path: &Path, manifest: &mut Manifest) -> Result<(ModelParameters, CheckpointMeta)> {
        let (p, meta) = checkpoint::load(path)?;
        if &meta.config != p.config() || meta.config.vocab_size != Vocabulary::SIZE {
            return Err(Error::Checkpoint(format!("{}: unexpected vocabulary", path.display())));
        }
        manifest.add_input(path)?;
        Ok((p, meta))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(&mut f, records)?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn gen_corpus(ctx: &Ctx) -> Result<()> {
    let path = ctx.path("corpus.txt");
    write_text(&path, &(ctx.cfg.corpus_lines().join("\n") + "\n"))?;
    let mut m = ctx.manifest("gen-corpus")?;
    m.add_output(&path)?;
    m.write(&ctx.path("gen-corpus.manifest.json"))?;
    println!("{}", path.display());
    Ok(())
}

fn train_base(ctx: &Ctx) -> Result<()> {
    let mut m = ctx.manifest("train-base")?;
    let splits = ctx.cfg.splits()?;
    let p = ctx.cfg.train_base(&splits, ctx.exec)?;
    let mut meta = CheckpointMeta::new(p.config());
    meta.lineage = vec!["init".into(), "train-base".into()];
    meta.seeds = ctx.cfg.seeds();
    let path = ctx.path("base.umlb");
    checkpoint::save(&path, &p, &meta)?;
    m.add_output(&path)?;
    m.write(&ctx.path("train-base.manifest.json"))?;
    println!(
        "{} validation perplexity {:.3}",
        path.display(),
        metrics::perplexity(&p, &splits.validation, ctx.exec)?
    );
    Ok(())
}

fn memorize(ctx: &Ctx, base: &Path) -> Result<()> {
    let mut m = ctx.manifest("memorize")?;
    let (p, mut meta) = ctx.load(base, &mut m)?;
    let splits = ctx.cfg.splits()?;
    let (p, history) = ctx.cfg.memorize(&p, &splits.forget, &splits, ctx.exec)?;
    meta.lineage.push("memorize".into());
    meta.seeds.insert("memorize".into(), ctx.cfg.memorize.seed);
    let path = ctx.path("memorized.umlb");
    checkpoint::save(&path, &p, &meta)?;
    write_json(&ctx.path("memorize-history.json"), &history)?;
    m.add_output(&path)?;
    m.write(&ctx.path("memorize.manifest.json"))?;
    println!("{} after {} epochs, forget MA {:.4}", path.display(), history.len(), history.last().copied().unwrap_or(0.0));
    Ok(())
}

fn select(ctx: &Ctx, model: &Path, method: Option<EraseMethod>, k: Option<usize>) -> Result<()> {
    let mut m = ctx.manifest("select")?;
    let (p, _) = ctx.load(model, &mut m)?;
    let method = method.unwrap_or(ctx.cfg.erase.method);
    let rule = method
        .selection_rule()
        .ok_or_else(|| Error::InvalidArgument(format!("{method} does not select blocks")))?;
    let k = k.unwrap_or(ctx.cfg.erase.k);
    let splits = ctx.cfg.splits()?;
    let seed = ctx.cfg.erase.seed;
    let idx = mask_batch_indices(splits.forget.len(), ctx.cfg.erase.batch_size, seed);
    let batch: Vec<_> = idx.iter().map(|&i| &splits.forget[i]).collect();
    let (mask, scores) = select_blocks(&p, &batch, rule, k, seed, ctx.exec)?;
    let path = ctx.path(&format!("select-{}.jsonl", method.name()));
    write_records(&path, &selection_records(0, &scores, &mask))?;
    m.add_output(&path)?;
    m.write(&ctx.path(&format!("select-{}.manifest.json", method.name())))?;
    println!("{}", mask.labels().join(" "));
    Ok(())
}

/// Runs one eraser on `original` and writes its artifacts under `label`.
fn erase_and_write(
    ctx: &Ctx,
    original: &ModelParameters,
    meta: &CheckpointMeta,
    memo: Option<&ModelParameters>,
    cfg: &EraseRunConfig,
    label: &str,
    manifest: &mut Manifest,
) -> Result<RunSummary> {
    let splits = ctx.cfg.splits()?;
    let outcome = erase(original, &splits, memo, cfg, ctx.exec)?;
    let report = ctx.cfg.report(&outcome.model, &splits, ctx.exec)?;
    let summary = RunSummary::new(label, cfg, &outcome, report);

    let ckpt = ctx.path(&format!("erased-{label}.umlb"));
    let params = outcome.model.params();
    let unchanged = params.flatten().iter().map(|v| v.to_bits()).eq(original.flatten().iter().map(|v| v.to_bits()));
    let mut out_meta = meta.clone();
    if !unchanged || matches!(outcome.model, ErasedModel::Contrastive(_)) {
        out_meta.lineage.push(format!("erase {}", cfg.method));
        out_meta.seeds.insert("erase".into(), cfg.seed);
    }
    checkpoint::save(&ckpt, params, &out_meta)?;
    let files = [
        (format!("run-log-{label}.jsonl"), None),
        (format!("report-{label}.json"), Some(summary.report.to_json()?)),
        (format!("summary-{label}.json"), Some(serde_json::to_string_pretty(&summary)?)),
    ];
    for (name, body) in &files {
        let path = ctx.path(name);
        match body {
            Some(text) => write_text(&path, text)?,
            None => write_records(&path, &outcome.log)?,
        }
        manifest.add_output(&path)?;
    }
    if !outcome.selection.is_empty() {
        let path = ctx.path(&format!("selection-{label}.jsonl"));
        write_records(&path, &outcome.selection)?;
        manifest.add_output(&path)?;
    }
    manifest.add_output(&ckpt)?;
    Ok(summary)
}

fn print_summary(s: &RunSummary) {
    println!(
        "{}: {} epochs ({:?}), MA {:.4}, EL3 {:.4}, perplexity ratio {:.3}{}",
        s.label,
        s.epochs,
        s.stop,
        s.report.ma,
        s.report.el_3,
        s.ppl_ratio,
        s.collapse.map(|c| format!(", collapse: {c:?}")).unwrap_or_default()
    );
}

#[allow(clippy::too_many_arguments)]
fn erase_cmd(
    ctx: &Ctx,
    model: &Path,
    method: Option<EraseMethod>,
    k: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    tau: Option<f64>,
    memo: Option<&Path>,
) -> Result<()> {
    let mut cfg = ctx.cfg.erase.clone();
    cfg.method = method.unwrap_or(cfg.method);
    cfg.k = k.unwrap_or(cfg.k);
    cfg.max_epochs = epochs.unwrap_or(cfg.max_epochs);
    cfg.lr = lr.unwrap_or(cfg.lr);
    cfg.tau = tau.unwrap_or(cfg.tau);
    cfg.validate()?;
    let mut m = Manifest::new("erase", &(&ctx.cfg, &cfg))?;
    m.seeds = ctx.cfg.seeds();
    let (p, meta) = ctx.load(model, &mut m)?;
    let memo = memo.map(|path| ctx.load(path, &mut m).map(|x| x.0)).transpose()?;
    let summary = erase_and_write(ctx, &p, &meta, memo.as_ref(), &cfg, cfg.method.name(), &mut m)?;
    m.write(&ctx.path(&format!("erase-{}.manifest.json", cfg.method.name())))?;
    print_summary(&summary);
    Ok(())
}

fn evaluate(ctx: &Ctx, model: &Path) -> Result<()> {
    let mut m = ctx.manifest("evaluate")?;
    let (p, _) = ctx.load(model, &mut m)?;
    let splits = ctx.cfg.splits()?;
    let report = ctx.cfg.report(&p, &splits, ctx.exec)?;
    let path = ctx.path(&format!("report-{}.json", stem(model)));
    let json = report.to_json()?;
    write_text(&path, &json)?;
    m.add_output(&path)?;
    m.write(&ctx.path(&format!("evaluate-{}.manifest.json", stem(model))))?;
    println!("{json}");
    Ok(())
}

fn sweep_k(ctx: &Ctx, model: &Path, values: &[usize], epochs: Option<usize>) -> Result<()> {
    if values.is_empty() || values.contains(&0) {
        return Err(Error::Config("sweep-k needs k values ≥ 1".into()));
    }
    let mut cfg = ctx.cfg.erase.clone();
    if cfg.method.selection_rule().is_none() {
        return Err(Error::Config(format!("sweep-k needs a selective method, not {}", cfg.method)));
    }
    cfg.max_epochs = epochs.unwrap_or(cfg.max_epochs);
    let mut m = Manifest::new("sweep-k", &(&ctx.cfg, values, cfg.max_epochs))?;
    m.seeds = ctx.cfg.seeds();
    let (p, meta) = ctx.load(model, &mut m)?;
    for &k in values {
        cfg.k = k;
        let summary = erase_and_write(ctx, &p, &meta, None, &cfg, &format!("k{k}"), &mut m)?;
        print_summary(&summary);
    }
    m.write(&ctx.path("sweep-k.manifest.json"))?;
    Ok(())
}

#[derive(Serialize)]
struct HeadPattern {
    layer: usize,
    head: usize,
    /// Prefix positions the last query attends to most, strongest first.
    top_keys: Vec<(usize, String, f32)>,
    pattern: Vec<Vec<f32>>,
}

#[derive(Serialize)]
struct AttentionDump {
    index: usize,
    text: String,
    tokens: Vec<u32>,
    heads: Vec<HeadPattern>,
}

fn attn_dump(ctx: &Ctx, model: &Path, index: usize, layer: Option<usize>) -> Result<()> {
    let mut m = ctx.manifest("attn-dump")?;
    let (p, _) = ctx.load(model, &mut m)?;
    let splits = ctx.cfg.splits()?;
    let seq = splits
        .forget
        .get(index)
        .ok_or_else(|| Error::InvalidArgument(format!("forget set has {} sequences", splits.forget.len())))?;
    let tokens = seq.prefix().to_vec();
    let layers: Vec<usize> = match layer {
        Some(l) if l >= p.config().n_layers => {
            return Err(Error::InvalidArgument(format!("model has {} layers", p.config().n_layers)))
        }
        Some(l) => vec![l],
        None => (0..p.config().n_layers).collect(),
    };
    let vocab = Vocabulary;
    let mut heads = Vec::new();
    for &l in &layers {
        for h in 0..p.config().n_heads {
            let a = attention_pattern(&p, &tokens, l, h)?;
            let pattern: Vec<Vec<f32>> = (0..tokens.len()).map(|r| a.row(r).to_vec()).collect();
            let mut last: Vec<(usize, f32)> = pattern[tokens.len() - 1].iter().copied().enumerate().collect();
            last.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            let top_keys = last
                .into_iter()
                .take(5)
                .map(|(i, w)| (i, vocab.decode_lossy(&tokens[i..i + 1]), w))
                .collect();
            heads.push(HeadPattern { layer: l, head: h, top_keys, pattern });
        }
    }
    let dump = AttentionDump {
        index,
        text: vocab.decode_lossy(&tokens),
        tokens,
        heads,
    };
    let path = ctx.path(&format!("attn-{}-{index}.json", stem(model)));
    write_json(&path, &dump)?;
    m.add_output(&path)?;
    m.write(&ctx.path("attn-dump.manifest.json"))?;
    println!("{}", path.display());
    Ok(())
}

/// One row of the comparison grid. Ranks are 1-based and absent for
/// collapsed models.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedRow {
    pub summary: RunSummary,
    pub erasure_rank: Option<usize>,
    pub utility_rank: Option<usize>,
    pub overall_rank: Option<usize>,
}

/// Competition ranks (ties share the better rank) of `score`, lower first.
fn ranks(scores: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .map(|s| 1 + scores.iter().filter(|o| o.total_cmp(s).is_lt()).count())
        .collect()
}

fn mean_ranks(columns: &[Vec<f64>]) -> Vec<f64> {
    let rs: Vec<Vec<usize>> = columns.iter().map(|c| ranks(c)).collect();
    (0..columns[0].len())
        .map(|i| rs.iter().map(|r| r[i] as f64).sum::<f64>() / rs.len() as f64)
        .collect()
}

/// Erasure ranks use EL3, MA and EMatch; utility ranks use perplexity,
/// Rep2 and Div3. Collapsed models are listed but never ranked.
pub fn rank_runs(summaries: Vec<RunSummary>) -> Vec<RankedRow> {
    let ok: Vec<usize> = (0..summaries.len()).filter(|&i| summaries[i].collapse.is_none()).collect();
    let col = |f: &dyn Fn(&MetricReport) -> f64| ok.iter().map(|&i| f(&summaries[i].report)).collect::<Vec<_>>();
    let mut rows: Vec<RankedRow> = summaries
        .iter()
        .cloned()
        .map(|summary| RankedRow {
            summary,
            erasure_rank: None,
            utility_rank: None,
            overall_rank: None,
        })
        .collect();
    if ok.is_empty() {
        return rows;
    }
    let erasure = ranks(&mean_ranks(&[col(&|r| r.el_3), col(&|r| r.ma), col(&|r| r.ematch_mean)]));
    let utility = ranks(&mean_ranks(&[col(&|r| r.ppl), col(&|r| r.rep_2), col(&|r| -r.div_3)]));
    let overall = ranks(
        &erasure
            .iter()
            .zip(&utility)
            .map(|(e, u)| (e + u) as f64 / 2.0)
            .collect::<Vec<_>>(),
    );
    for (j, &i) in ok.iter().enumerate() {
        rows[i].erasure_rank = Some(erasure[j]);
        rows[i].utility_rank = Some(utility[j]);
        rows[i].overall_rank = Some(overall[j]);
    }
    rows
}

pub fn render_report(rows: &[RankedRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>7} {:>7} {:>7} {:>8} {:>7} {:>7} {:>7}  {:>4} {:>4} {:>4}  collapse",
        "run", "EL3", "MA", "EMatch", "PPL", "ratio", "Rep2", "Div3", "Er", "Ut", "All"
    );
    let rank = |r: Option<usize>| r.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
    for row in rows {
        let s = &row.summary;
        let r = &s.report;
        let _ = writeln!(
            out,
            "{:<14} {:>7.4} {:>7.4} {:>7.2} {:>8.3} {:>7.3} {:>7.4} {:>7.4}  {:>4} {:>4} {:>4}  {}",
            s.label,
            r.el_3,
            r.ma,
            r.ematch_mean,
            r.ppl,
            s.ppl_ratio,
            r.rep_2,
            r.div_3,
            rank(row.erasure_rank),
            rank(row.utility_rank),
            rank(row.overall_rank),
            s.collapse.map(|c| format!("{c:?}")).unwrap_or_else(|| "-".into())
        );
    }
    out
}

fn summary_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("summary-") && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else if input.is_file() {
            files.push(input.clone());
        } else {
            return Err(Error::InvalidArgument(format!("{} does not exist", input.display())));
        }
    }
    if files.is_empty() {
        return Err(Error::InvalidArgument("no summary-*.json files found".into()));
    }
    Ok(files)
}

fn report(ctx: &Ctx, inputs: &[PathBuf], csv: Option<&Path>) -> Result<()> {
    let mut m = ctx.manifest("report")?;
    let mut summaries = Vec::new();
    for f in summary_files(inputs)? {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        summaries.push(serde_json::from_str::<RunSummary>(&text)?);
        m.add_input(&f)?;
    }
    let table = render_report(&rank_runs(summaries.clone()));
    let path = ctx.path("report.txt");
    write_text(&path, &table)?;
    m.add_output(&path)?;
    if let Some(csv) = csv {
        let mut text = String::from("label,epoch,ma,ppl_ratio\n");
        for s in &summaries {
            for r in &s.log {
                let _ = writeln!(text, "{},{},{},{}", s.label, r.epoch, r.ma, r.ppl_ratio);
            }
        }
        write_text(csv, &text)?;
        m.add_output(csv)?;
    }
    m.write(&ctx.path("report.manifest.json"))?;
    print!("{table}");
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    let ctx = Ctx {
        cfg,
        out: cli.out_dir,
        exec,
    };
    log::info!("{} → {}", cli.command.name(), ctx.out.display());
    match &cli.command {
        Command::GenCorpus => gen_corpus(&ctx),
        Command::TrainBase => train_base(&ctx),
        Command::Memorize { base } => memorize(&ctx, base),
        Command::Select { model, method, k } => select(&ctx, model, *method, *k),
        Command::Erase {
            model,
            method,
            k,
            epochs,
            lr,
            tau,
            memo,
        } => erase_cmd(&ctx, model, *method, *k, *epochs, *lr, *tau, memo.as_deref()),
        Command::Evaluate { model } => evaluate(&ctx, model),
        Command::SweepK { model, values, epochs } => sweep_k(&ctx, model, values, *epochs),
        Command::AttnDump { model, index, layer } => attn_dump(&ctx, model, *index, *layer),
        Command::Report { inputs, csv } => report(&ctx, inputs, csv.as_deref()),
    }
}

/// Parses `std::env::args`, runs, and maps errors to exit code 1 (argument
/// errors exit with clap's code 2).
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
