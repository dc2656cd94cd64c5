use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use icdst::eval::{self, EvalReport};
use icdst::lm::{CompletionBackend, EchoBackend, HttpBackend, ScriptedBackend};
use icdst::ontology::Ontology;
use icdst::pipeline::{
    self, gold_echo_script, load_dialogues, run_repeated, sample_pool, save_dialogues,
    step_prompt, DialogueRecord, Retriever, RunConfig, TurnStep,
};
use icdst::prompt::{render_context_within, PromptExample};
use icdst::retrieval::{
    export_pairs, import_embeddings, import_pairs, mine_contrastive_pairs,
    ExemplarPool, HashingEmbedder, MineConfig,
};
use icdst::state::StateChange;

#[derive(Parser)]
#[command(name = "icdst", version, about = "In-context dialogue state tracking")]
struct Cli {
    /// Ontology TOML; defaults to the bundled MultiWOZ schema.
    #[arg(long, global = true, env = "ICDST_ONTOLOGY")]
    ontology: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and normalize a dialogue file.
    Ingest {
        input: PathBuf,
        /// Write the normalized dialogues here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a selection pool from training dialogues.
    SamplePool {
        #[arg(long)]
        train: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "prev_state_plus_turn", value_parser = serde_enum::<icdst::prompt::Representation>)]
        representation: icdst::prompt::Representation,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach externally computed vectors to a pool.
    EmbedImport {
        #[arg(long)]
        pool: PathBuf,
        /// Lines of `{id, vector}`.
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mine positive and negative exemplars for retriever training.
    MinePairs {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        neighbor_frac: f64,
        #[arg(long, default_value_t = 0.05)]
        select_frac: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flatten mined pairs into (anchor, positive, negative) text triples.
    ExportPairs {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        /// Tab-separated output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Show the top exemplars for an ad-hoc query.
    Retrieve {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        query: String,
        /// Gold change as a JSON object, for the oracle retriever.
        #[arg(long, default_value = "{}")]
        gold: String,
        #[arg(long, default_value = "embedding", value_parser = serde_enum::<pipeline::RetrieverKind>)]
        retriever: pipeline::RetrieverKind,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the prompt for one test turn, conditioned on gold states.
    Prompt {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dialogue: String,
        #[arg(long)]
        turn: usize,
    },
    /// Track a test set with a language model and score it.
    Run {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = ["http", "scripted", "echo"])]
        backend: Option<String>,
        /// Scripted completions, one `{prompt_sha256, completion}` per line.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Text returned by the echo backend.
        #[arg(long)]
        echo_text: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
        #[command(flatten)]
        outputs: Outputs,
    },
    /// Re-score a saved trace.
    Score {
        /// Trace written by an earlier run.
        input: PathBuf,
        #[command(flatten)]
        outputs: Outputs,
    },
    /// Copy the top exemplar's change instead of querying a model.
    CopyBaseline {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        outputs: Outputs,
    },
    /// Write a script that answers every prompt of a run with the gold SQL.
    ScriptGold {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct Outputs {
    /// JSON report; printed to stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-turn JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Per-turn tab-separated table.
    #[arg(long)]
    table: Option<PathBuf>,
}

/// Flags mirroring [`RunConfig`]. A config file may set any of them; flags
/// given on the command line win.
#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    /// Training dialogues to sample the pool from.
    #[arg(long)]
    train: Option<PathBuf>,
    /// A pre-built pool; takes precedence over `--train`.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    pool_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, alias = "k-exemplars")]
    k: Option<usize>,
    #[arg(long, alias = "retriever-kind", value_parser = serde_enum::<pipeline::RetrieverKind>)]
    retriever: Option<pipeline::RetrieverKind>,
    #[arg(long, value_parser = serde_enum::<icdst::prompt::Representation>)]
    representation: Option<icdst::prompt::Representation>,
    #[arg(long, value_parser = serde_enum::<icdst::prompt::PromptFormat>)]
    format: Option<icdst::prompt::PromptFormat>,
    #[arg(long, value_parser = serde_enum::<pipeline::Conditioning>)]
    conditioning: Option<pipeline::Conditioning>,
    #[arg(long, value_parser = serde_enum::<icdst::sql::MultiDomainStyle>)]
    multi_domain_style: Option<icdst::sql::MultiDomainStyle>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, value_parser = serde_enum::<icdst::prompt::ExemplarOrder>)]
    exemplar_order: Option<icdst::prompt::ExemplarOrder>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    max_completion_units: Option<u32>,
}

/// Parses a snake_case enum through its serde representation.
fn serde_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

/// Keys a config file may set besides the [`RunConfig`] fields.
const FILE_ONLY_KEYS: [&str; 11] = [
    "test", "train", "pool", "backend", "script", "echo_text", "repeats", "report", "trace",
    "table", "k",
];

#[derive(Default)]
struct FileSettings {
    cfg: RunConfig,
    extra: toml::Table,
}

impl FileSettings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
        let mut extra = toml::Table::new();
        for key in FILE_ONLY_KEYS {
            if let Some(v) = table.remove(key) {
                extra.insert(key.to_string(), v);
            }
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .with_context(|| format!("parsing {}", path.display()))?;
        if let Some(k) = extra.get("k").and_then(|v| v.as_integer()) {
            cfg.k_exemplars = k as usize;
        }
        Ok(Self { cfg, extra })
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.extra.get(key).and_then(|v| v.as_str()).map(PathBuf::from)
    }

    fn string(&self, key: &str) -> Option<String> {
        self.extra.get(key).and_then(|v| v.as_str()).map(str::to_string)
    }
}

struct Resolved {
    cfg: RunConfig,
    file: FileSettings,
    test: Option<PathBuf>,
    train: Option<PathBuf>,
    pool: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<Resolved> {
        let file = FileSettings::load(self.config.as_deref())?;
        let mut cfg = file.cfg.clone();
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$field = v;
                }
            };
        }
        set!(pool_fraction => pool_fraction);
        set!(seed => seed);
        set!(k => k_exemplars);
        set!(retriever => retriever_kind);
        set!(representation => representation);
        set!(format => format);
        set!(conditioning => conditioning);
        set!(multi_domain_style => multi_domain_style);
        set!(budget => budget);
        set!(exemplar_order => exemplar_order);
        set!(parallelism => parallelism);
        set!(max_completion_units => max_completion_units);
        cfg.validate()?;
        Ok(Resolved {
            test: self.test.clone().or_else(|| file.path("test")),
            train: self.train.clone().or_else(|| file.path("train")),
            pool: self.pool.clone().or_else(|| file.path("pool")),
            cfg,
            file,
        })
    }
}

impl Resolved {
    fn test_set(&self, ont: &Ontology) -> Result<Vec<DialogueRecord>> {
        let path = self.test.as_ref().context("--test is required")?;
        Ok(load_dialogues(path, ont)?)
    }

    fn exemplar_pool(&self, ont: &Ontology) -> Result<ExemplarPool> {
        if let Some(path) = &self.pool {
            return Ok(ExemplarPool::load(path)?);
        }
        if let Some(path) = &self.train {
            let train = load_dialogues(path, ont)?;
            return Ok(sample_pool(
                &train,
                self.cfg.pool_fraction,
                self.cfg.seed,
                self.cfg.representation,
                ont,
            )?);
        }
        bail!("either --pool or --train is required")
    }

    fn retriever(&self, ont: &Ontology) -> Result<Retriever> {
        Ok(Retriever::new(self.cfg.retriever_kind, self.exemplar_pool(ont)?, self.cfg.seed)?)
    }
}

fn write_outputs(outputs: &Outputs, file: &FileSettings, report: &EvalReport, traces: &[eval::TurnTrace]) -> Result<()> {
    let report_path = outputs.report.clone().or_else(|| file.path("report"));
    match report_path {
        Some(path) => report.write_json(&path)?,
        None => println!("{}", serde_json::to_string_pretty(report)?),
    }
    if let Some(path) = outputs.trace.clone().or_else(|| file.path("trace")) {
        eval::write_trace(traces, &path)?;
    }
    if let Some(path) = outputs.table.clone().or_else(|| file.path("table")) {
        let out = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        eval::write_turn_table(traces, out)?;
    }
    Ok(())
}

fn backend(kind: &str, script: Option<PathBuf>, echo_text: Option<String>, cfg: &RunConfig) -> Result<Box<dyn CompletionBackend>> {
    Ok(match kind {
        "http" => Box::new(HttpBackend::from_env()?.with_parallelism(cfg.parallelism)),
        "scripted" => {
            let path = script.context("--script is required for the scripted backend")?;
            Box::new(ScriptedBackend::load(&path)?)
        }
        "echo" => Box::new(EchoBackend::new(echo_text.unwrap_or_default())),
        other => bail!("unknown backend `{other}`"),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let ont = match &cli.ontology {
        Some(path) => Ontology::load(path)?,
        None => Ontology::multiwoz(),
    };

    match cli.command {
        Command::Ingest { input, out } => {
            let dialogues = load_dialogues(&input, &ont)?;
            let turns: usize = dialogues.iter().map(|d| d.turns.len()).sum();
            println!("{} dialogues, {turns} turns", dialogues.len());
            if let Some(out) = out {
                save_dialogues(&dialogues, &out)?;
            }
        }
        Command::SamplePool {
            train,
            fraction,
            seed,
            representation,
            out,
        } => {
            let dialogues = load_dialogues(&train, &ont)?;
            let pool = sample_pool(&dialogues, fraction, seed, representation, &ont)?;
            pool.save(&out)?;
            println!("{} exemplars", pool.len());
        }
        Command::EmbedImport { pool, vectors, out } => {
            let pool = import_embeddings(&ExemplarPool::load(&pool)?, &vectors)?;
            pool.save(&out)?;
            println!("{} vectors of dimension {}", pool.len(), pool.embedding_dim().unwrap_or(0));
        }
        Command::MinePairs {
            pool,
            neighbor_frac,
            select_frac,
            out,
        } => {
            let mut pool = ExemplarPool::load(&pool)?;
            if pool.embedding_dim().is_none() {
                pool = pool.with_embeddings(&HashingEmbedder::default())?;
            }
            let cfg = MineConfig {
                neighbor_frac,
                select_frac,
                ..MineConfig::default()
            };
            let pairs = mine_contrastive_pairs(&pool, &cfg)?;
            export_pairs(&pairs, &out)?;
            println!(
                "{} queries, {} neighbors, {} positives and negatives each",
                pairs.entries.len(),
                cfg.neighbors(pool.len()),
                cfg.selected(pool.len())
            );
        }
        Command::ExportPairs { pairs, pool, out } => {
            let pairs = import_pairs(&pairs)?;
            let pool = ExemplarPool::load(&pool)?;
            let text = |id: &str| -> Result<String> {
                pool.records()
                    .iter()
                    .find(|r| r.id == id)
                    .map(|r| r.context_text.clone())
                    .with_context(|| format!("pair references unknown exemplar {id}"))
            };
            let mut w = csv::WriterBuilder::new()
                .delimiter(b'\t')
                .from_path(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            w.write_record(["anchor", "positive", "negative"])?;
            let mut rows = 0;
            for e in &pairs.entries {
                let anchor = text(&e.query_id)?;
                for (p, n) in e.positives.iter().zip(&e.negatives) {
                    w.write_record([anchor.as_str(), &text(p)?, &text(n)?])?;
                    rows += 1;
                }
            }
            w.flush()?;
            println!("{rows} triples");
        }
        Command::Retrieve {
            pool,
            query,
            gold,
            retriever,
            k,
            seed,
        } => {
            let gold: StateChange = serde_json::from_str(&gold).context("parsing --gold")?;
            let r = Retriever::new(retriever, ExemplarPool::load(&pool)?, seed)?;
            let hits = r.retrieve(&query, &gold, "query", 0, k)?;
            let mut out = std::io::stdout().lock();
            for (rank, i) in hits.into_iter().enumerate() {
                let rec = r.pool().get(i);
                writeln!(out, "{}\t{}\t{}", rank + 1, rec.id, serde_json::to_string(&rec.change)?)?;
            }
        }
        Command::Prompt { run, dialogue, turn } => {
            let res = run.resolve()?;
            let test = res.test_set(&ont)?;
            let d = test
                .iter()
                .find(|d| d.id == dialogue)
                .with_context(|| format!("no dialogue {dialogue}"))?;
            if turn >= d.turns.len() {
                bail!("dialogue {dialogue} has {} turns", d.turns.len());
            }
            let retriever = res.retriever(&ont)?;
            let ctx = d.turn_context(turn, d.gold_prev_state(turn), res.cfg.representation);
            let test_context = render_context_within(&ctx, &ont, res.cfg.context_units());
            let hits = retriever.retrieve(&test_context, &d.gold_changes[turn], &d.id, turn, res.cfg.k_exemplars)?;
            let step = TurnStep {
                dialogue_id: &d.id,
                turn,
                test_context,
                exemplars: hits
                    .into_iter()
                    .map(|i| PromptExample {
                        context: retriever.pool().get(i).context_text.clone(),
                        change: retriever.pool().get(i).change.clone(),
                    })
                    .collect(),
                gold_change: &d.gold_changes[turn],
            };
            print!("{}", step_prompt(&step, &res.cfg, &ont)?);
        }
        Command::Run {
            run,
            backend: kind,
            script,
            echo_text,
            repeats,
            outputs,
        } => {
            let res = run.resolve()?;
            let kind = kind.or_else(|| res.file.string("backend")).unwrap_or_else(|| "http".into());
            let script = script.or_else(|| res.file.path("script"));
            let echo_text = echo_text.or_else(|| res.file.string("echo_text"));
            let repeats = repeats
                .or_else(|| res.file.extra.get("repeats").and_then(|v| v.as_integer()).map(|v| v as usize))
                .unwrap_or(1);
            let lm = backend(&kind, script, echo_text, &res.cfg)?;
            let test = res.test_set(&ont)?;
            if repeats > 1 {
                let train_path = res.train.as_ref().context("--repeats needs --train to resample the pool")?;
                let train = load_dialogues(train_path, &ont)?;
                let summary = run_repeated(&train, &test, &res.cfg, &ont, lm.as_ref(), repeats)?;
                let text = serde_json::to_string_pretty(&summary)?;
                match outputs.report.clone().or_else(|| res.file.path("report")) {
                    Some(path) => fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
                    None => println!("{text}"),
                }
            } else {
                let retriever = res.retriever(&ont)?;
                let out = pipeline::run_experiment(&test, &res.cfg, &ont, &retriever, lm.as_ref())?;
                write_outputs(&outputs, &res.file, &out.report, &out.traces)?;
            }
        }
        Command::Score { input, outputs } => {
            let traces = eval::read_trace(&input)?;
            let report = eval::score(&traces, &ont);
            write_outputs(&outputs, &FileSettings::default(), &report, &traces)?;
        }
        Command::CopyBaseline { run, outputs } => {
            let res = run.resolve()?;
            let test = res.test_set(&ont)?;
            let retriever = res.retriever(&ont)?;
            let out = pipeline::copy_baseline(&test, &res.cfg, &ont, &retriever)?;
            write_outputs(&outputs, &res.file, &out.report, &out.traces)?;
        }
        Command::ScriptGold { run, out } => {
            let res = run.resolve()?;
            let test = res.test_set(&ont)?;
            let retriever = res.retriever(&ont)?;
            let script = gold_echo_script(&test, &res.cfg, &ont, &retriever)?;
            script.save(&out)?;
            println!("{} prompts", script.len());
        }
    }
    Ok(())
}
