use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sqlf::audit::gradient_audit;
use sqlf::clf::{evaluate, Classifier, GbtModel};
use sqlf::config::PipelineConfig;
use sqlf::gan::{synth_conditional, GanModel};
use sqlf::io::ingest::write_queries;
use sqlf::io::{desk_corpus, ingest_csv, Checkpoint, LabeledQuery};
use sqlf::metrics::decode_to_tokens;
use sqlf::pipeline::{run_pipeline, RunOptions};
use sqlf::tensor::Tensor;
use sqlf::text::{embed_batch, tokenize, EmbeddingTable, TokenSequence, TokenizeOptions};
use sqlf::unet::{generate_unet, UNetParams};
use sqlf::vae::{encode_dataset, VaeParams};
use sqlf::{Error, Result};

#[derive(Parser)]
#[command(name = "sqlf", version, about = "Synthetic SQL-injection data generation and detection")]
struct Cli {
    /// TOML configuration layered over the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration before the file and overrides.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Default)]
    profile: Profile,
    /// Master seed; every stage seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding artifacts, manifest and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Last stage to run.
    #[arg(long, global = true)]
    stage: Option<String>,
    /// Reuse completed stages recorded in the run directory.
    #[arg(long, global = true)]
    resume: bool,
    /// Worker threads for grid cells (1 gives the reproducible mode).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `section.key=value` override; may repeat.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Default,
    Desk,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Unet,
    Cwgan,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled labelled corpus as CSV.
    GenCorpus {
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Ingest labelled CSV files into the run directory.
    Ingest {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
    },
    /// Print the tokens of QUERY, or tokenize the run's corpus.
    Tokenize { query: Option<String> },
    /// Train the subword token embedding.
    TrainEmbed,
    /// Train the VAE and export latent features.
    TrainVae,
    /// Encode a labelled CSV to latent rows with the run's models.
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train the U-Net and draw its synthetic rows.
    TrainUnet,
    /// Train the conditional WGAN-GP and draw its synthetic rows.
    TrainCwgan,
    /// Draw synthetic queries from a trained generator as labelled CSV.
    Synth {
        #[arg(long, value_enum)]
        source: Source,
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Class to condition on (cwgan only); both when omitted.
        #[arg(long)]
        class: Option<u8>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compare synthetic rows with real ones (MSE, R², BLEU, cosine...).
    Quality,
    /// Label synthetic rows by PCA and 2-means.
    PseudoLabel,
    /// Cross-validate every (p1, p2) mixing cell against real-only data.
    Grid,
    /// Train the final classifier (runs every earlier stage as needed).
    TrainClf,
    /// Score a labelled CSV with the run's final classifier.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run every stage, or up to --stage.
    Pipeline,
    /// Finite-difference audit of every operation and loss.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let base = match cli.profile {
        Profile::Default => PipelineConfig::default(),
        Profile::Desk => PipelineConfig::desk(),
        Profile::Tiny => PipelineConfig::tiny(),
    };
    let mut c = match &cli.config {
        Some(p) => PipelineConfig::load(p, &base)?,
        None => base,
    };
    for o in &cli.overrides {
        c.set(o)?;
    }
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.paths.out = o.clone();
    }
    Ok(c)
}

fn run_until(config: &PipelineConfig, stage: &str) -> Result<()> {
    let run = run_pipeline(
        config,
        &RunOptions {
            resume: true,
            until: Some(stage.to_string()),
        },
    )?;
    for s in &run.manifest.stages {
        let how = if s.disabled {
            "disabled"
        } else if s.reused {
            "reused"
        } else {
            "ran"
        };
        println!("{:<9} {how:<8} {:>8.1}s", s.name, s.seconds);
    }
    Ok(())
}

fn load_ckpt(dir: &Path, name: &str) -> Result<Checkpoint> {
    Checkpoint::load(&dir.join(name))
}

fn tokenize_all(queries: &[LabeledQuery], config: &PipelineConfig) -> Result<Vec<TokenSequence>> {
    let opts = TokenizeOptions {
        url_decode: config.corpus.url_decode,
    };
    queries.iter().map(|q| tokenize(&q.query, opts)).collect()
}

/// Latent rows of a labelled CSV under the run's embedding and VAE.
fn encode_csv(dir: &Path, input: &Path, config: &PipelineConfig) -> Result<(Tensor, Vec<u8>)> {
    let report = ingest_csv(input, &config.corpus.schema)?;
    if !report.skipped.is_empty() {
        eprintln!("skipped {} malformed rows", report.skipped.len());
    }
    let table = EmbeddingTable::from_checkpoint(&load_ckpt(dir, "embedding.ckpt")?)?;
    let vae = VaeParams::from_checkpoint(&load_ckpt(dir, "vae.ckpt")?)?;
    let seqs = tokenize_all(&report.queries, config)?;
    let z = encode_dataset(&embed_batch(&seqs, &table), &vae)?;
    Ok((z, report.queries.iter().map(|q| q.label).collect()))
}

fn write_synth_csv(path: &Path, vectors: &Tensor, labels: &[u8], table: &EmbeddingTable, config: &PipelineConfig) -> Result<()> {
    let decoded = decode_to_tokens(vectors, table)?;
    let rows: Vec<LabeledQuery> = decoded
        .into_iter()
        .zip(labels)
        .map(|(t, &label)| LabeledQuery { query: t.join(" "), label })
        .collect();
    write_queries(std::fs::File::create(path)?, &rows, &config.corpus.schema)
}

fn execute(cli: &Cli) -> Result<()> {
    let mut config = build_config(cli)?;
    let dir = config.paths.out.clone();
    let stage_cmd = |config: &PipelineConfig, stage: &str| run_until(config, stage);
    match &cli.command {
        Command::GenCorpus { n, output } => {
            let corpus = desk_corpus(*n, config.stage_seed("ingest"));
            write_queries(std::fs::File::create(output)?, &corpus, &config.corpus.schema)?;
            println!("wrote {} queries to {}", corpus.len(), output.display());
        }
        Command::Ingest { input } => {
            config.paths.inputs = input.clone();
            stage_cmd(&config, "ingest")?;
        }
        Command::Tokenize { query: Some(q) } => {
            let seq = tokenize(q, TokenizeOptions { url_decode: config.corpus.url_decode })?;
            for t in seq.content() {
                println!("{:?}\t{}", t.kind, t.text);
            }
        }
        Command::Tokenize { query: None } => stage_cmd(&config, "tokenize")?,
        Command::TrainEmbed => stage_cmd(&config, "embed")?,
        Command::TrainVae => stage_cmd(&config, "vae")?,
        Command::TrainUnet => stage_cmd(&config, "unet")?,
        Command::TrainCwgan => stage_cmd(&config, "cwgan")?,
        Command::Quality => stage_cmd(&config, "quality")?,
        Command::PseudoLabel => stage_cmd(&config, "pseudo")?,
        Command::Grid => stage_cmd(&config, "grid")?,
        Command::TrainClf => stage_cmd(&config, "final")?,
        Command::Pipeline => {
            let run = run_pipeline(
                &config,
                &RunOptions {
                    resume: cli.resume,
                    until: cli.stage.clone(),
                },
            )?;
            println!("{}", serde_json::to_string_pretty(&run.summary())?);
        }
        Command::Encode { input, output } => {
            let (z, y) = encode_csv(&dir, input, &config)?;
            let mut w = csv::Writer::from_path(output)?;
            let mut header = vec!["label".to_string()];
            header.extend((0..z.shape()[1]).map(|j| format!("z{j}")));
            w.write_record(&header)?;
            for (i, l) in y.iter().enumerate() {
                let mut rec = vec![l.to_string()];
                rec.extend(z.row(i).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            println!("encoded {} rows", y.len());
        }
        Command::Synth { source, n, class, output } => {
            let table = EmbeddingTable::from_checkpoint(&load_ckpt(&dir, "embedding.ckpt")?)?;
            let seed = config.stage_seed("synth");
            match source {
                Source::Unet => {
                    let params = UNetParams::from_checkpoint(&load_ckpt(&dir, "unet.ckpt")?)?;
                    let seqs: Vec<TokenSequence> = serde_json::from_slice(&std::fs::read(dir.join("tokens.json"))?)?;
                    let labels: Vec<u8> = sqlf::io::ingest::ingest_reader(
                        std::fs::File::open(dir.join("corpus.csv"))?,
                        &config.corpus.schema,
                    )?
                    .queries
                    .iter()
                    .map(|q| q.label)
                    .collect();
                    let x = embed_batch(&seqs, &table);
                    let (g, src) = generate_unet(&x, &params, config.synth.noise_sigma, *n, seed)?;
                    let y: Vec<u8> = src.iter().map(|&s| labels[s]).collect();
                    write_synth_csv(output, &g, &y, &table, &config)?;
                }
                Source::Cwgan => {
                    let model = GanModel::from_checkpoint(&load_ckpt(&dir, "cwgan.ckpt")?)?;
                    let vae = VaeParams::from_checkpoint(&load_ckpt(&dir, "vae.ckpt")?)?;
                    let plan: Vec<(u8, usize)> = match class {
                        Some(c) if *c > 1 => return Err(Error::InvalidArgument(format!("class must be 0 or 1, got {c}"))),
                        Some(c) => vec![(*c, *n)],
                        None => vec![(0, n - n / 2), (1, n / 2)],
                    };
                    let mut parts = Vec::new();
                    let mut y = Vec::new();
                    for (c, k) in plan {
                        let (x, l) = synth_conditional(k, c, &model.generator, sqlf::rng::mix_seed(seed, u64::from(c)))?;
                        parts.push(vae.decode(&x)?);
                        y.extend(l);
                    }
                    let refs: Vec<&Tensor> = parts.iter().collect();
                    let flat = Tensor::stack_rows(&refs)?;
                    let seq = flat.reshape(&[y.len(), sqlf::text::SEQ_LEN, table.dim()])?;
                    write_synth_csv(output, &seq, &y, &table, &config)?;
                }
            }
            println!("wrote {n} synthetic queries to {}", output.display());
        }
        Command::Evaluate { input, output } => {
            let (z, y) = encode_csv(&dir, input, &config)?;
            let model = GbtModel::from_checkpoint(&load_ckpt(&dir, "final_gbt.ckpt")?)?;
            let report = evaluate(&model as &dyn Classifier, &z, &y)?;
            print!("{}", report.classification_report());
            if let Some(p) = output {
                std::fs::write(p, serde_json::to_vec_pretty(&report)?)?;
            }
        }
        Command::Gradcheck { instances } => {
            let report = gradient_audit(*instances, config.seed)?;
            let mut failed = 0;
            for e in &report {
                let mark = if e.passed() { "ok" } else { "FAIL" };
                println!("{:<22} {:>10.3e} < {:.0e}  {mark}", e.name, e.max_rel_error, e.tolerance);
                failed += usize::from(!e.passed());
            }
            if failed > 0 {
                return Err(Error::NonFinite {
                    context: format!("{failed} gradient checks above tolerance"),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" })).init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
