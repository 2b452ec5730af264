use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use domainsim::experiment::{run_grid, write_outcome, GridConfig};
use domainsim::files;
use domainsim::plan::{run_plan, Plan};
use domainsim::probe::{classify, load_ensemble, ProbeRequest, SessionStore, DEFAULT_K};
use domainsim::server::{serve, AppState};
use domainsim_core::datasets::{build_qa_intermediate_pairs, generate_synthetic, make_splits, question_set, PairSource, SyntheticSpec};
use domainsim_core::evaluation::{aggregate, compare_conditions, evaluate, test_fingerprint, EnsembleReport};
use domainsim_core::probe::{replay, ProbeResult, SessionStep};
use domainsim_core::tokenizer::Vocabulary;
use log::{info, warn};

#[derive(Parser)]
#[command(name = "domainsim", version, about = "Intermediate-task transfer experiments for question similarity")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and split datasets.
    #[command(subcommand)]
    Data(DataCommand),
    /// Run a training plan.
    Train {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip stages whose checkpoints already match the plan.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the split models of a run directory on a test set.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
    /// Compare ensemble reports of different conditions.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
    },
    /// Run a learning-curve grid.
    Curve {
        #[arg(long)]
        grid: PathBuf,
        /// Output directory; defaults to runs/<grid file stem>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads, 0 for one per core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Do not write the per-condition ensembles.
        #[arg(long)]
        no_checkpoints: bool,
    },
    /// Classify pairs with an ensemble.
    #[command(subcommand)]
    Probe(ProbeCommand),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Turn a QA corpus into balanced intermediate pairs.
    MakeQa {
        #[arg(long = "in")]
        input: PathBuf,
        /// Final-task pair files whose questions must not appear.
        #[arg(long)]
        exclude: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic corpora from a spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write k train/validation/test splits sharing one test set.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.15, 0.15])]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build a vocabulary from pair files and text files.
    Vocab {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EnsembleArgs {
    /// Directory holding vocab.txt and split-<i> models.
    #[arg(long, env = "DOMAINSIM_RUN_DIR")]
    run_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Serve the probe API and the console.
    Serve {
        #[command(flatten)]
        ensemble: EnsembleArgs,
        #[arg(long, default_value_t = 7340)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
        /// Defaults to <run-dir>/sessions.
        #[arg(long)]
        sessions: Option<PathBuf>,
        /// Static files served under /.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Classify one pair and print the result as JSON.
    Ask {
        #[command(flatten)]
        ensemble: EnsembleArgs,
        #[arg(long)]
        q1: String,
        #[arg(long)]
        q2: String,
        #[arg(long)]
        expected: Option<u8>,
    },
    /// Re-run an exported session log and report steps whose verdicts changed.
    Replay {
        #[command(flatten)]
        ensemble: EnsembleArgs,
        #[arg(long)]
        session: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Data(cmd) => data(cmd),
        Command::Train { plan, out, resume } => {
            let plan = Plan::load(&plan)?;
            let ckpts = run_plan(&plan, &out, resume, &mut |e| println!("{}", serde_json::to_string(e).expect("event serializes")))?;
            info!("{} stages done, checkpoints in {}", ckpts.len(), out.display());
            Ok(())
        }
        Command::Eval { run_dir, test, out, k, batch } => eval(&run_dir, &test, out.as_deref(), k, batch),
        Command::Compare { reports } => {
            let reports = reports.iter().map(|p| files::read_json::<EnsembleReport>(p)).collect::<Result<Vec<_>, _>>()?;
            print!("{}", compare_conditions(&reports)?.render_text());
            Ok(())
        }
        Command::Curve { grid, out, threads, no_checkpoints } => {
            let out = out.unwrap_or_else(|| Path::new("runs").join(grid.file_stem().unwrap_or_default()));
            let config = GridConfig::load(&grid)?;
            let outcome = run_grid(&config, threads, !no_checkpoints)?;
            write_outcome(&out, &outcome)?;
            print!("{}", outcome.report.render_text());
            info!("report written to {}", out.display());
            Ok(())
        }
        Command::Probe(cmd) => probe(cmd),
    }
}

fn data(cmd: DataCommand) -> Result<()> {
    match cmd {
        DataCommand::MakeQa { input, exclude, seed, out } => {
            let (records, report) = files::ingest_qa_corpus(&input)?;
            for r in &report.rejected {
                warn!("{}:{}: {}", input.display(), r.line, r.message);
            }
            let mut exclusion = std::collections::BTreeSet::new();
            for p in &exclude {
                exclusion.extend(question_set(&files::load_pairs_strict(p, PairSource::External)?));
            }
            let qa = build_qa_intermediate_pairs(&records, &exclusion, seed);
            files::write_jsonl(&out, &qa.pairs)?;
            info!(
                "{} records ({} duplicates dropped) -> {} pairs; skipped {} singleton-category, {} excluded, {} without a distinct answer",
                records.len(),
                report.duplicates,
                qa.pairs.len(),
                qa.skipped.singleton_category,
                qa.skipped.excluded,
                qa.skipped.no_distinct_answer
            );
            Ok(())
        }
        DataCommand::Synth { spec, out_dir } => {
            let spec: SyntheticSpec = files::read_json(&spec)?;
            let corpus = generate_synthetic(&spec)?;
            std::fs::create_dir_all(&out_dir).with_context(|| out_dir.display().to_string())?;
            files::write_jsonl(&out_dir.join("qa.jsonl"), &corpus.qa)?;
            files::write_jsonl(&out_dir.join("qq.jsonl"), &corpus.qq)?;
            files::write_jsonl(&out_dir.join("final.jsonl"), &corpus.final_pairs)?;
            info!("{} QA records, {} QQ pairs, {} final pairs in {}", corpus.qa.len(), corpus.qq.len(), corpus.final_pairs.len(), out_dir.display());
            Ok(())
        }
        DataCommand::Split { input, k, fractions, seed, out_dir } => {
            let [a, b, c] = fractions[..] else { bail!("--fractions takes three values") };
            let pairs = files::load_pairs_strict(&input, PairSource::External)?;
            let splits = make_splits(&pairs, k, [a, b, c], seed)?;
            for (i, s) in splits.iter().enumerate() {
                let dir = out_dir.join(format!("split-{i}"));
                std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
                files::write_jsonl(&dir.join("train.jsonl"), &s.train)?;
                files::write_jsonl(&dir.join("validation.jsonl"), &s.validation)?;
                files::write_jsonl(&dir.join("test.jsonl"), &s.test)?;
            }
            info!("{k} splits of {} pairs, {} test pairs each, in {}", pairs.len(), splits[0].test.len(), out_dir.display());
            Ok(())
        }
        DataCommand::Vocab { inputs, min_count, out } => {
            let mut lines = Vec::new();
            for p in &inputs {
                if p.extension().is_some_and(|x| x == "jsonl") {
                    lines.extend(files::corpus_lines(&files::load_pairs_strict(p, PairSource::External)?));
                } else {
                    lines.extend(files::read_lines(p)?);
                }
            }
            let vocab = Vocabulary::build(&lines, min_count)?;
            files::save_vocab(&out, &vocab)?;
            info!("{} tokens written to {}", vocab.size(), out.display());
            Ok(())
        }
    }
}

fn eval(run_dir: &Path, test: &Path, out: Option<&Path>, k: usize, batch: usize) -> Result<()> {
    let handle = load_ensemble(run_dir, k)?;
    let e = &handle.ensemble;
    let pairs = files::load_pairs_strict(test, PairSource::External)?;
    let results = e.members.iter().enumerate().map(|(i, m)| evaluate(m, &e.vocab, &pairs, i, e.max_len, batch)).collect::<Result<Vec<_>, _>>()?;
    let train_size = handle.report.as_ref().and_then(|r| r.train_size);
    let report = aggregate(&e.condition, train_size, test_fingerprint(&pairs), results)?;
    let threshold = domainsim_core::probe::default_threshold(report.k());
    let c = report.consistency(threshold)?;
    println!("{}: {}", report.condition, report.rendered);
    println!("{} consistent errors, {} consistent correct of {} (threshold {threshold}/{})", c.consistent_errors.len(), c.consistent_correct.len(), c.n, c.k);
    if let Some(out) = out {
        files::write_json(out, &report)?;
    }
    Ok(())
}

fn probe(cmd: ProbeCommand) -> Result<()> {
    match cmd {
        ProbeCommand::Serve { ensemble, port, host, sessions, static_dir } => {
            let handle = load_ensemble(&ensemble.run_dir, ensemble.k)?;
            let store = SessionStore::open(&sessions.unwrap_or_else(|| ensemble.run_dir.join("sessions")))?;
            if !host.is_loopback() {
                warn!("binding to {host}: the probe service has no authentication");
            }
            let state = Arc::new(AppState { handle: Arc::new(handle), store });
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, static_dir, SocketAddr::new(host, port)))?;
            Ok(())
        }
        ProbeCommand::Ask { ensemble, q1, q2, expected } => {
            let handle = load_ensemble(&ensemble.run_dir, ensemble.k)?;
            let r: ProbeResult = classify(&handle, &ProbeRequest { q1, q2, expected, note: None })?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(())
        }
        ProbeCommand::Replay { ensemble, session } => {
            let handle = load_ensemble(&ensemble.run_dir, ensemble.k)?;
            let steps: Vec<SessionStep> = files::read_jsonl(&session)?;
            let changed = replay(&handle.ensemble, &steps)?;
            if changed.is_empty() {
                println!("{} steps replayed, all verdicts identical", steps.len());
                Ok(())
            } else {
                bail!("verdicts changed at steps {changed:?}")
            }
        }
    }
}
