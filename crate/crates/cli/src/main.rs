use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segmental::cache::EmbeddingCache;
use segmental::config::{Preset, RunConfig};
use segmental::corpus::{load_corpus, write_corpus, Corpus};
use segmental::eval::{evaluate, DEFAULT_TOLERANCE_MS};
use segmental::output::{self, to_json, write_file};
use segmental::pipeline::{chain_metrics, embed_corpus, initial_reference_set, run_pipeline};
use segmental::rng::{rng_from, stream_seed};
use segmental::segmenter::{run_sampler, SamplerConfig};
use segmental::synth::{generate, SynthSpec};
use segmental::{Error, ErrorKind, Result};

/// Unsupervised word segmentation and clustering of speech features.
#[derive(Parser)]
#[command(name = "segmental", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with ground truth.
    Synth {
        /// JSON generator spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: embed, sample, refine, repeat.
    Run(RunArgs),
    /// Score a decode file against the corpus ground truth.
    Eval {
        #[arg(long)]
        decode: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE_MS)]
        tolerance_ms: f64,
    },
    /// Train the embedding on a random reference set and cache every candidate.
    Embed(RunArgs),
    /// Run the sampler on an existing cache.
    Segment {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        cache: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// constrained or unconstrained.
    #[arg(long, default_value = "unconstrained")]
    preset: String,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; required so every run is reproducible.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(Preset::parse(&self.preset)?, self.config.as_deref())?;
        cfg.pipeline.seed = self.seed;
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(c) = self.chains {
            cfg.pipeline.sampler.chains = c;
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        if let Some(i) = self.iterations {
            cfg.pipeline.iterations = i;
        }
        cfg.validate()?;
        if cfg.manifest.is_none() || cfg.output_dir.is_none() {
            return Err(Error::Config("a manifest and an output directory are required".into()));
        }
        if let Some(n) = cfg.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        }
        Ok(cfg)
    }
}

/// Loads the corpus and writes the resolved config into the output directory.
fn prepare(cfg: &RunConfig) -> Result<(Corpus, PathBuf)> {
    let out = cfg.output_dir.clone().expect("checked by resolve");
    let corpus = load_corpus(cfg.manifest.as_deref().expect("checked by resolve"))?;
    write_file(&out.join("config.json"), cfg.to_json() + "\n")?;
    Ok((corpus, out))
}

fn cmd_synth(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: SynthSpec = match spec {
        Some(p) => output::read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = generate(&spec)?;
    let manifest = write_corpus(&corpus, out)?;
    write_file(&out.join("synth_spec.json"), to_json(&spec))?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let (corpus, out) = prepare(&cfg)?;
    let results = run_pipeline(&corpus, &cfg.pipeline, |r| {
        let dir = output::write_iteration(&out, r)?;
        log::info!("iteration {} written to {}", r.iteration, dir.display());
        Ok(())
    })?;
    let table = output::summary_table(&results);
    write_file(&out.join("summary.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_eval(decode: &Path, manifest: &Path, out: &Path, tolerance_ms: f64) -> Result<()> {
    let corpus = load_corpus(manifest)?;
    let decoded = output::read_decode(decode)?;
    let (report, mapping) = evaluate(&decoded, &corpus, tolerance_ms)?;
    write_file(&out.join("metrics.json"), to_json(&report))?;
    write_file(&out.join("mapping.csv"), mapping.to_csv())?;
    print!("{}", to_json(&report));
    Ok(())
}

fn cmd_embed(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let (corpus, out) = prepare(&cfg)?;
    let p = &cfg.pipeline;
    let mut rng = rng_from(stream_seed(p.seed, "reference", 1));
    let reference = initial_reference_set(&corpus, p.embed.n_ref, &p.constraints, &mut rng)?;
    let (model, cache) = embed_corpus(&corpus, &reference, p, stream_seed(p.seed, "cache", 1))?;
    write_file(&out.join("refset.json"), to_json(&reference))?;
    cache.write(&out.join("cache.bin"))?;
    println!(
        "{} candidates embedded in {} dimensions (sigma_e {:.6})",
        cache.total_entries(),
        cache.dim,
        model.sigma_e.unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_segment(args: &RunArgs, cache_path: &Path) -> Result<()> {
    let cfg = args.resolve()?;
    let (corpus, out) = prepare(&cfg)?;
    let p = &cfg.pipeline;
    let cache = EmbeddingCache::read(cache_path, &corpus)?;
    let hyper = p.gmm.hyper(cache.dim)?;
    let sampler_config = SamplerConfig {
        master_seed: stream_seed(p.seed, "sampler", 1),
        ..p.sampler.clone()
    };
    let result = run_sampler(&cache, &hyper, &sampler_config)?;
    let metrics = chain_metrics(&result, &corpus, p.boundary_tolerance_ms)?;
    output::write_sampler(&out, &result, metrics.as_deref())?;
    for c in &result.chains {
        println!(
            "chain {}: {} components occupied, final log score {:.3}",
            c.chain,
            c.model.occupied(),
            c.final_log_score()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Synth { spec, seed, out } => cmd_synth(spec.as_deref(), *seed, out),
        Command::Run(args) => cmd_run(args),
        Command::Eval {
            decode,
            manifest,
            out,
            tolerance_ms,
        } => cmd_eval(decode, manifest, out, *tolerance_ms),
        Command::Embed(args) => cmd_embed(args),
        Command::Segment { run, cache } => cmd_segment(run, cache),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
