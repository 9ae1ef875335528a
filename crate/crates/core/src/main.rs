use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use bktlstm::bkt::{self, BktParams, GridSpec};
use bktlstm::dataset::{self, ColumnMap, Dataset};
use bktlstm::difficulty::{DifficultyTable, MIN_SUPPORT};
use bktlstm::eval::{self, EvalReport, ModelSpec, PipelineConfig};
use bktlstm::features::{build_sequences, Encoder, FeatureMask};
use bktlstm::predictor::{self, CellKind, RnnConfig};
use bktlstm::profile::{self, KMeansInit};
use bktlstm::synth::{self, SynthConfig};
use bktlstm::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bktlstm",
    version,
    about = "Knowledge tracing with BKT mastery, ability profiles and problem difficulty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and clean a raw log, write the canonical file and a summary.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a dataset from the BKT generative process.
    Synth(SynthArgs),
    /// Fit per-skill BKT parameters on every student.
    FitBkt {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the ability model and label every (student, interval).
    Cluster {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute problem difficulty bins.
    Difficulty {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train BKT-LSTM on every student and write a checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// Ablation variant 1..=4.
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
        variant: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate one or all models.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        /// bkt-lstm, bkt, birt, pfa, dkt or all.
        #[arg(long, default_value = "bkt-lstm")]
        model: String,
        /// BKT-LSTM ablation variant 1..=4.
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
        variant: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate BKT-LSTM variants 1..=4.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Serialize)]
struct DataArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Column preset: canonical, assist2009, assist2014, algebra2005.
    #[arg(long, default_value = "canonical")]
    preset: String,
}

#[derive(Args, Serialize)]
struct PipelineArgs {
    #[arg(long, default_value_t = dataset::DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = profile::DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = profile::DEFAULT_CLUSTERS)]
    clusters: usize,
    /// Farthest-point k-means seeding instead of random distinct vectors.
    #[arg(long)]
    farthest_point: bool,
    #[arg(long, default_value_t = 200)]
    hidden: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// gated or simple.
    #[arg(long, default_value = "gated")]
    cell: String,
    #[arg(long, default_value_t = 5.0)]
    max_grad_norm: f64,
    #[arg(long, default_value_t = 0.05)]
    grid_step: f64,
    #[arg(long, default_value_t = 0.30)]
    g_max: f64,
    #[arg(long, default_value_t = 0.30)]
    s_max: f64,
    /// Leave the skill one-hot out of the BKT-LSTM input.
    #[arg(long)]
    no_skill_input: bool,
    /// Record test-fold AUC after every epoch.
    #[arg(long)]
    track_validation: bool,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig> {
        if self.window == 0 || self.clusters == 0 || self.folds == 0 {
            return Err(Error::InvalidArgument(
                "window, clusters and folds must be positive".into(),
            ));
        }
        let cell: CellKind = self.cell.parse()?;
        let grid = GridSpec {
            g_max: self.g_max,
            s_max: self.s_max,
            ..GridSpec::with_step(self.grid_step)
        };
        grid.validate()?;
        let rnn = RnnConfig {
            hidden_size: self.hidden,
            learning_rate: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            dropout_rate: self.dropout,
            cell,
            seed: self.seed,
            max_grad_norm: self.max_grad_norm,
            ..RnnConfig::default()
        };
        rnn.validate()?;
        Ok(PipelineConfig {
            folds: self.folds,
            seed: self.seed,
            window: self.window,
            clusters: self.clusters,
            kmeans_init: if self.farthest_point {
                KMeansInit::FarthestPoint
            } else {
                KMeansInit::Random
            },
            grid,
            rnn,
            track_validation: self.track_validation,
            ..PipelineConfig::default()
        })
    }

    fn mask(&self, variant: u8) -> FeatureMask {
        FeatureMask {
            skill: !self.no_skill_input,
            ..FeatureMask::variant(variant)
        }
    }
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    students: usize,
    #[arg(long, default_value_t = 5)]
    skills: usize,
    #[arg(long, default_value_t = 50)]
    attempts: usize,
    #[arg(long, default_value_t = 50)]
    problems_per_skill: usize,
    #[arg(long, default_value_t = 0.3)]
    l0: f64,
    #[arg(long, default_value_t = 0.2)]
    t: f64,
    #[arg(long, default_value_t = 0.15)]
    g: f64,
    #[arg(long, default_value_t = 0.1)]
    s: f64,
    /// Logit shift of the easiest bin relative to the middle; 0 disables.
    #[arg(long, default_value_t = 0.0)]
    difficulty_strength: f64,
    /// Standard deviation of the per-student logit offset.
    #[arg(long, default_value_t = 0.0)]
    ability_spread: f64,
    #[arg(long, default_value_t = dataset::DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    config: C,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

fn digest(path: &Path) -> Result<Artifact> {
    let bytes = fs::read(path)?;
    let hash = Sha256::digest(&bytes);
    Ok(Artifact {
        path: path.display().to_string(),
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// Output directory with a record of every file written into it.
struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn write(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> Result<()>,
    ) -> Result<()> {
        let path = self.root.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn write_str(&mut self, name: &str, text: &str) -> Result<()> {
        self.write(name, |w| Ok(w.write_all(text.as_bytes())?))
    }

    fn finish<C: Serialize>(self, command: &str, config: C, inputs: &[&Path]) -> Result<()> {
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
            outputs: self
                .written
                .iter()
                .map(|name| {
                    let mut a = digest(&self.root.join(name))?;
                    a.path = name.clone();
                    Ok(a)
                })
                .collect::<Result<_>>()?,
        };
        let file = File::create(self.root.join("manifest.json"))?;
        serde_json::to_writer_pretty(file, &manifest)?;
        Ok(())
    }
}

fn load(args: &DataArgs) -> Result<Dataset> {
    let columns = ColumnMap::preset(&args.preset)?;
    let file = File::open(&args.dataset)?;
    let (raw, report) = dataset::load_interactions(file, &columns)?;
    if report.malformed > 0 {
        eprintln!("warning: skipped {} malformed rows", report.malformed);
    }
    Ok(dataset::clean(&raw))
}

fn write_reports(out: &mut OutDir, reports: &[EvalReport]) -> Result<()> {
    let text = eval::render_text(reports);
    print!("{text}");
    out.write_str("report.txt", &text)?;
    out.write_str("report.csv", &eval::render_rows(reports))?;
    out.write("report.json", |w| {
        Ok(serde_json::to_writer_pretty(w, reports)?)
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { data, out } => {
            let columns = ColumnMap::preset(&data.preset)?;
            let (raw, report) = dataset::load_interactions(File::open(&data.dataset)?, &columns)?;
            let cleaned = dataset::clean(&raw);
            let summary = cleaned.summary();
            println!("{summary}");
            let mut dir = OutDir::create(&out)?;
            dir.write("cleaned.csv", |w| cleaned.write_canonical(w))?;
            dir.write_str(
                "summary.json",
                &serde_json::to_string_pretty(
                    &serde_json::json!({ "summary": summary, "ingest": report }),
                )?,
            )?;
            dir.finish("ingest", &data, &[&data.dataset])
        }
        Command::Synth(args) => {
            let config = SynthConfig {
                students: args.students,
                skills: args.skills,
                attempts: args.attempts,
                problems_per_skill: args.problems_per_skill,
                params: BktParams::new(args.l0, args.t, args.g, args.s)?,
                difficulty_strength: args.difficulty_strength,
                ability_spread: args.ability_spread,
                seed: args.seed,
            };
            let generated = synth::generate(&config)?;
            println!("{}", generated.dataset.summary());
            let mut dir = OutDir::create(&args.out)?;
            dir.write("dataset.csv", |w| generated.dataset.write_canonical(w))?;
            dir.write("truth.csv", |w| synth::write_truth(&config, &generated, w))?;
            dir.finish("synth", &config, &[])
        }
        Command::FitBkt {
            data,
            pipeline,
            out,
        } => {
            let config = pipeline.config()?;
            let d = load(&data)?;
            let report = bkt::fit_all(&d, &config.grid)?;
            let mut dir = OutDir::create(&out)?;
            dir.write("bkt_models.csv", |w| {
                bkt::write_models(&report, &d.skill_index, w)
            })?;
            println!(
                "fitted {} skills ({} fallback)",
                report.models.len(),
                report.fallback.len()
            );
            dir.finish("fit-bkt", config.grid, &[&data.dataset])
        }
        Command::Cluster {
            data,
            pipeline,
            out,
        } => {
            let config = pipeline.config()?;
            let d = load(&data)?;
            let model = profile::fit_profiles(
                &d,
                config.window,
                config.clusters,
                config.seed,
                config.kmeans_init,
            )?;
            let labels = profile::profiles(&d, &model, config.window)?;
            let mut dir = OutDir::create(&out)?;
            dir.write("centroids.csv", |w| {
                profile::write_centroids(&model, &d.skill_index, w)
            })?;
            dir.write("profiles.csv", |w| profile::write_profiles(&labels, w))?;
            println!(
                "{} centroids after {} iterations, objective {:.4}",
                model.k(),
                model.iterations,
                model.objective_trace.last().copied().unwrap_or(0.0)
            );
            dir.finish("cluster", &config, &[&data.dataset])
        }
        Command::Difficulty { data, out } => {
            let d = load(&data)?;
            let table = DifficultyTable::compute(&d, MIN_SUPPORT);
            let mut dir = OutDir::create(&out)?;
            dir.write("difficulty.csv", |w| table.write(&d.problem_index, w))?;
            println!(
                "{} problems binned, {} below support",
                table.levels.len(),
                table.support.len() - table.levels.len()
            );
            dir.finish("difficulty", &data, &[&data.dataset])
        }
        Command::Train {
            data,
            pipeline,
            variant,
            out,
        } => {
            let config = pipeline.config()?;
            let mask = pipeline.mask(variant);
            let d = load(&data)?;
            let models = bkt::fit_all(&d, &config.grid)?;
            let ability = profile::fit_profiles(
                &d,
                config.window,
                config.clusters,
                config.seed,
                config.kmeans_init,
            )?;
            let table = DifficultyTable::compute(&d, MIN_SUPPORT);
            let seqs = build_sequences(
                &d,
                &bkt::mastery_features(&d, &models),
                &profile::profile_sequence(&d, &ability, config.window)?,
                &table.bins(&d),
            )?;
            let encoded = Encoder::new(d.n_skills(), ability.n_labels(), mask).encode_all(&seqs)?;
            let (model, report) = predictor::train(&config.rnn, d.n_skills(), &encoded, &[])?;
            println!(
                "trained {} epochs in {:.1}s, final loss {:.4}",
                report.epoch_loss.len(),
                report.wall_seconds,
                report.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
            let mut dir = OutDir::create(&out)?;
            dir.write("checkpoint.json", |w| {
                predictor::save_checkpoint(&config.rnn, &model, w)
            })?;
            dir.write("train_loss.csv", |w| {
                writeln!(w, "epoch,loss")?;
                for (e, l) in report.epoch_loss.iter().enumerate() {
                    writeln!(w, "{e},{l:.17e}")?;
                }
                Ok(())
            })?;
            dir.write("bkt_models.csv", |w| {
                bkt::write_models(&models, &d.skill_index, w)
            })?;
            dir.write("centroids.csv", |w| {
                profile::write_centroids(&ability, &d.skill_index, w)
            })?;
            dir.write("difficulty.csv", |w| table.write(&d.problem_index, w))?;
            dir.finish("train", (&config, mask), &[&data.dataset])
        }
        Command::Evaluate {
            data,
            pipeline,
            model,
            variant,
            out,
        } => {
            let config = pipeline.config()?;
            let specs: Vec<ModelSpec> = ModelSpec::parse(&model)?
                .into_iter()
                .map(|s| match s {
                    ModelSpec::BktLstm(_) => ModelSpec::BktLstm(pipeline.mask(variant)),
                    other => other,
                })
                .collect();
            let d = load(&data)?;
            let mut dir = OutDir::create(&out)?;
            let reports = specs
                .iter()
                .map(|&s| eval::cross_validate(&d, s, &config))
                .collect::<Result<Vec<_>>>()?;
            write_reports(&mut dir, &reports)?;
            dir.finish("evaluate", (&config, &specs), &[&data.dataset])
        }
        Command::Ablate {
            data,
            pipeline,
            out,
        } => {
            let config = pipeline.config()?;
            let d = load(&data)?;
            let mut dir = OutDir::create(&out)?;
            let reports = (1..=4u8)
                .map(|v| eval::cross_validate(&d, ModelSpec::BktLstm(pipeline.mask(v)), &config))
                .collect::<Result<Vec<_>>>()?;
            write_reports(&mut dir, &reports)?;
            dir.finish("ablate", &config, &[&data.dataset])
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::UnknownPreset { .. } | Error::InvalidArgument(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
