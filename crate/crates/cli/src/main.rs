use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use tesn::config::RunConfig;
use tesn::models::{load_extractor, save_extractor, save_mlp};
use tesn::pipeline::{
    dim_sweep, embed_dataset, fit_predictors, prepare, run_benchmark, sweep_csv, sweep_svg, train_extractor,
    EvalReport,
};
use tesn::preprocess::{parse_kpi_log, write_kpi_log, Normalization, SequenceDataset};
use tesn::synthdata::generate_stream;
use tesn::Error;

/// Environment variable naming the default output root.
const OUTPUT_ENV: &str = "TESN_OUTPUT_DIR";
const NORMALIZATION_FILE: &str = "normalization.json";

#[derive(Parser)]
#[command(name = "tesn", version, about = "H-score Transformer-ESN embeddings for cellular KPI series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: $TESN_OUTPUT_DIR/<command>, else <output_dir>/<command>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct DataArg {
    /// Saved dataset directory (from `preprocess`); overrides the config's data source.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic KPI log.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 600_000.0)]
        duration_ms: f64,
        /// Overrides the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Turn a KPI log into a saved windowed dataset.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Stage one: fit and freeze the extractor on the training split.
    TrainExtractor {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Write embeddings of every sample as CSV.
    Embed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        extractor: PathBuf,
    },
    /// Stage two: fit per-target regressors on a frozen extractor's embeddings.
    TrainPredictor {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        extractor: PathBuf,
    },
    /// Run every configured condition and seed and write the evaluation report.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Repeat the H-score Transformer-ESN protocol across embedding sizes.
    SweepDim {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Print a saved evaluation report.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

struct Failure {
    module: &'static str,
    error: Error,
}

trait At<T> {
    fn at(self, module: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<Error>> At<T> for Result<T, E> {
    fn at(self, module: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            module,
            error: e.into(),
        })
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    tune_allocator();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}: {}", f.error.class(), f.module, f.error);
            ExitCode::from(1)
        }
    }
}

/// Training allocates and frees many large tensors; keeping them on the
/// heap instead of fresh mappings avoids most of the page-fault cost.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    /// Input name to SHA-256, written as `provenance.json`.
    provenance: BTreeMap<String, String>,
}

impl Ctx {
    fn new(common: &Common, command: &str) -> Outcome<Self> {
        let mut provenance = BTreeMap::new();
        let cfg = match &common.config {
            Some(path) => {
                let bytes = fs::read(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
                    .at("config")?;
                provenance.insert("config".into(), sha256_hex(&bytes));
                let text = String::from_utf8(bytes)
                    .map_err(|_| Error::Config(format!("{} is not UTF-8", path.display())))
                    .at("config")?;
                RunConfig::from_toml(&text).at("config")?
            }
            None => RunConfig::default(),
        };
        let out = match &common.out {
            Some(p) => p.clone(),
            None => std::env::var_os(OUTPUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| cfg.output_dir.clone())
                .join(command),
        };
        fs::create_dir_all(&out).at("cli")?;
        Ok(Self { cfg, out, provenance })
    }

    fn dataset(&mut self, arg: &DataArg) -> Outcome<SequenceDataset> {
        let ds = match &arg.data {
            Some(dir) => SequenceDataset::load(dir).at("preprocess")?.0,
            None => self.cfg.dataset().at("synthdata")?,
        };
        self.provenance.insert("dataset".into(), ds.digest());
        eprintln!("dataset: {} samples of {}x{}", ds.len(), ds.seq_len(), tesn::kpi::K);
        Ok(ds)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Outcome {
        fs::write(self.out.join(name), contents).at("cli")
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Outcome {
        let text = serde_json::to_string_pretty(value).at("cli")? + "\n";
        self.write(name, text)
    }

    /// Echoes the resolved config and the input hashes.
    fn finish(&self) -> Outcome {
        self.write("config.toml", self.cfg.to_toml().at("config")?)?;
        self.write_json("provenance.json", &self.provenance)?;
        eprintln!("wrote {}", self.out.display());
        Ok(())
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Synth {
            common,
            duration_ms,
            seed,
        } => {
            let mut ctx = Ctx::new(&common, "synth")?;
            if let Some(s) = seed {
                ctx.cfg.data.synth.seed = s;
            }
            let records = generate_stream(&ctx.cfg.data.synth, &ctx.cfg.data.marginals, duration_ms).at("synthdata")?;
            let mut buf = Vec::new();
            write_kpi_log(&mut buf, &records, &ctx.cfg.data.columns).at("preprocess")?;
            ctx.provenance.insert("kpi_log.csv".into(), sha256_hex(&buf));
            ctx.write("kpi_log.csv", buf)?;
            eprintln!("{} records", records.len());
            ctx.finish()
        }
        Command::Preprocess { common, input } => {
            let mut ctx = Ctx::new(&common, "preprocess")?;
            let bytes = fs::read(&input).at("preprocess")?;
            ctx.provenance.insert("input".into(), sha256_hex(&bytes));
            let log = parse_kpi_log(&input, &ctx.cfg.data.columns).at("preprocess")?;
            let (ds, report) = tesn::preprocess::run(&log.records, &ctx.cfg.preprocess).at("preprocess")?;
            ds.save(&ctx.out.join("dataset"), &ctx.provenance).at("preprocess")?;
            ctx.write_json("preprocess_report.json", &report)?;
            eprintln!(
                "{} records ({} without timestamp dropped) -> {} samples",
                log.records.len(),
                log.dropped_rows,
                ds.len()
            );
            ctx.finish()
        }
        Command::TrainExtractor { common, data } => {
            let mut ctx = Ctx::new(&common, "train-extractor")?;
            let ds = ctx.dataset(&data)?;
            let prepared = prepare(&ds, ctx.cfg.train.train_fraction).at("pipeline")?;
            let start = Instant::now();
            let (f, history) = train_extractor(&prepared.train, &ctx.cfg.train.extractor, &ctx.cfg.train).at("pipeline")?;
            eprintln!(
                "H-score {:.6} -> {:.6} in {:.1}s",
                history.initial,
                history.last,
                start.elapsed().as_secs_f64()
            );
            save_extractor(&f, &ctx.out.join("extractor")).at("models")?;
            ctx.write_json(&format!("extractor/{NORMALIZATION_FILE}"), &prepared.norm)?;
            ctx.write_json("history.json", &history)?;
            ctx.finish()
        }
        Command::Embed {
            common,
            data,
            extractor,
        } => {
            let mut ctx = Ctx::new(&common, "embed")?;
            let f = load_extractor(&extractor, None).at("models")?;
            let norm = read_normalization(&extractor)?;
            let ds = ctx.dataset(&data)?.denormalized().normalized_with(&norm).at("preprocess")?;
            let emb = embed_dataset(&f, &ds).at("pipeline")?;
            let n = emb.shape()[1];
            let mut csv = (0..n).map(|i| format!("e{i}")).collect::<Vec<_>>().join(",") + "\n";
            for row in emb.data().chunks(n) {
                csv += &row.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",");
                csv.push('\n');
            }
            ctx.write("embeddings.csv", csv)?;
            eprintln!("{} embeddings of width {n}", ds.len());
            ctx.finish()
        }
        Command::TrainPredictor {
            common,
            data,
            extractor,
        } => {
            let mut ctx = Ctx::new(&common, "train-predictor")?;
            let f = load_extractor(&extractor, None).at("models")?;
            let norm = read_normalization(&extractor)?;
            let ds = ctx.dataset(&data)?;
            let prepared = prepare(&ds, ctx.cfg.train.train_fraction).at("pipeline")?;
            if prepared.norm != norm {
                return Err(Error::Contract(
                    "the extractor was trained on a different split or dataset (normalization differs)".into(),
                ))
                .at("pipeline");
            }
            let fitted = fit_predictors(&f, &prepared, &ctx.cfg.train).at("pipeline")?;
            let mut metrics = BTreeMap::new();
            for p in &fitted {
                save_mlp(&p.mlp, &ctx.out.join(p.target.name())).at("models")?;
                println!("{}: mse {:.6e} pearson {:.4}", p.target, p.metrics.mse, p.metrics.pearson);
                metrics.insert(p.target.name(), p.metrics);
            }
            ctx.write_json("metrics.json", &metrics)?;
            ctx.finish()
        }
        Command::Benchmark { common, data, seeds } => {
            let mut ctx = Ctx::new(&common, "benchmark")?;
            if let Some(s) = seeds {
                ctx.cfg.seeds = s;
                ctx.cfg.validate().at("config")?;
            }
            let ds = ctx.dataset(&data)?;
            let report = run_benchmark(&ds, &ctx.cfg.train, &ctx.cfg.seeds, &ctx.cfg.conditions).at("pipeline")?;
            ctx.write("report.json", report.to_json().at("pipeline")?)?;
            ctx.write("report.csv", report.to_csv())?;
            let timings: BTreeMap<_, _> = report.timings.iter().cloned().collect();
            ctx.write_json("timings.json", &timings)?;
            print!("{}", render_text(&report));
            ctx.finish()
        }
        Command::SweepDim {
            common,
            data,
            dims,
            seeds,
        } => {
            let mut ctx = Ctx::new(&common, "sweep-dim")?;
            if let Some(d) = dims {
                ctx.cfg.sweep_dims = d;
            }
            if let Some(s) = seeds {
                ctx.cfg.seeds = s;
            }
            ctx.cfg.validate().at("config")?;
            let ds = ctx.dataset(&data)?;
            let table = dim_sweep(&ds, &ctx.cfg.sweep_dims, &ctx.cfg.train, &ctx.cfg.seeds).at("pipeline")?;
            let csv = sweep_csv(&table);
            ctx.write("sweep.csv", &csv)?;
            ctx.write_json("sweep.json", &table)?;
            ctx.write("sweep.svg", sweep_svg(&table))?;
            print!("{csv}");
            ctx.finish()
        }
        Command::Report { input, format } => {
            let text = fs::read_to_string(&input).at("cli")?;
            let report: EvalReport = serde_json::from_str(&text).at("cli")?;
            match format {
                Format::Text => print!("{}", render_text(&report)),
                Format::Csv => print!("{}", report.to_csv()),
                Format::Json => print!("{}", report.to_json().at("cli")?),
            }
            Ok(())
        }
    }
}

fn read_normalization(extractor_dir: &Path) -> Outcome<Normalization> {
    let path = extractor_dir.join(NORMALIZATION_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))
        .at("models")?;
    serde_json::from_str(&text).at("models")
}

fn render_text(report: &EvalReport) -> String {
    let mut out = format!(
        "regime {} | train {} / test {} samples | seeds {:?}\n{:<18} {:<20} {:>14} {:>9} {:>6}\n",
        report.regime,
        report.samples.train,
        report.samples.test,
        report.seeds,
        "condition",
        "target",
        "median mse",
        "pearson",
        "ok"
    );
    for c in &report.cells {
        let ok = c.seeds.iter().filter(|s| s.error.is_none()).count();
        let mse = c.mse.map_or("-".into(), |v| format!("{v:.6e}"));
        let r = c.pearson.map_or("-".into(), |v| format!("{v:.4}"));
        out += &format!(
            "{:<18} {:<20} {mse:>14} {r:>9} {:>6}\n",
            c.condition.name(),
            c.target.name(),
            format!("{ok}/{}", c.seeds.len())
        );
        for s in c.seeds.iter().filter_map(|s| s.error.as_ref().map(|e| (s.seed, e))) {
            out += &format!("    seed {}: {}\n", s.0, s.1);
        }
    }
    out
}
