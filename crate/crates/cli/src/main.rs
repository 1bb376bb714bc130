use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use masktune::config::{KvConfig, RunConfig};
use masktune::data::BiasedSplits;
use masktune::io::{self, MetricRow};
use masktune::linreg;
use masktune::masking::{self, RandomMaskMode};
use masktune::pipeline::{self, TestScores};
use masktune::saliency;
use masktune::selective::{self, CoveragePoint};
use masktune::trainer::{self, TrainedModel};

#[derive(Parser)]
#[command(name = "masktune", version, about = "Saliency-masked finetuning experiments on biased digits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Any config key can also be given
/// as a trailing `--key value` pair.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Flat `key = value` config file (a run's config.txt replays it).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Reduced pool and epoch budget.
    #[arg(long)]
    desk_scale: bool,
    /// mean, mean+Ksigma, global-mean, topk:K or soft.
    #[arg(long)]
    policy: Option<String>,
    /// Comma-separated coverage targets.
    #[arg(long)]
    coverage: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    accumulative: Option<bool>,
    /// xgradcam or gradcam.
    #[arg(long)]
    cam: Option<String>,
    /// Further `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    rest: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the biased splits and store them as MTCK files.
    SynthData(Common),
    /// Train the initial model.
    TrainErm(Common),
    /// Build the saliency-masked training set for a model.
    Mask {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// One epoch of finetuning on a masked training set.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        masked: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train, mask, finetune and evaluate in one go.
    Masktune(Common),
    /// Repeated masking rounds starting from a model (trained here if omitted).
    Iterate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy of a model on validation and both test sets.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Abstention thresholds on the validation split.
    SelectiveCalibrate {
        #[arg(long)]
        initial: PathBuf,
        #[arg(long = "final")]
        finetuned: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Coverage and selective error on both test sets.
    SelectiveEval {
        #[arg(long)]
        initial: PathBuf,
        #[arg(long = "final")]
        finetuned: PathBuf,
        /// gammas.json from selective-calibrate; recalibrated when omitted.
        #[arg(long)]
        gammas: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Check the masked-feature regression identities on random instances.
    VerifyTheory(Common),
    /// Collect run summaries into one table.
    Report {
        /// Run directories to include.
        runs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut kv = match &self.config {
            Some(p) => KvConfig::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => KvConfig::new(),
        };
        let mut set = |k: &str, v: String| kv.set(k, v);
        if let Some(s) = self.seed {
            set("seed", s.to_string())?;
        }
        if let Some(d) = &self.out_dir {
            set("out_dir", d.display().to_string())?;
        }
        if self.desk_scale {
            set("desk_scale", "true".into())?;
        }
        if let Some(p) = &self.policy {
            set("policy", p.clone())?;
        }
        if let Some(c) = &self.coverage {
            set("coverage", c.clone())?;
        }
        if let Some(i) = self.iterations {
            set("iterations", i.to_string())?;
        }
        if let Some(a) = self.accumulative {
            set("accumulative", a.to_string())?;
        }
        if let Some(c) = &self.cam {
            set("cam", c.clone())?;
        }
        kv.apply_overrides(&self.rest)?;
        Ok(RunConfig::from_kv(&kv)?)
    }
}

#[derive(Serialize, Deserialize)]
struct SummaryRow {
    method: String,
    test_original: f64,
    test_biased: f64,
}

struct RunDir {
    path: PathBuf,
    run: RunConfig,
    command: &'static str,
}

impl RunDir {
    fn create(command: &'static str, run: RunConfig) -> Result<Self> {
        let stamp = SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs();
        fs::create_dir_all(&run.out_dir)?;
        let base = run.out_dir.join(format!("{command}-{stamp}-seed{}", run.seed));
        let mut path = base.clone();
        let mut k = 1;
        while path.exists() {
            path = PathBuf::from(format!("{}-{k}", base.display()));
            k += 1;
        }
        fs::create_dir(&path)?;
        fs::write(path.join("config.txt"), run.to_kv().to_string())?;
        Ok(RunDir { path, run, command })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn manifest(&self, inputs: serde_json::Value, outputs: &[&str]) -> Result<()> {
        let config: serde_json::Map<String, serde_json::Value> =
            self.run.to_kv().iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
        let m = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "container_format": masktune::container::VERSION,
            "sidecar_format": io::SIDECAR_VERSION,
            "created_unix": SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs(),
            "config": config,
            "inputs": inputs,
            "outputs": outputs,
        });
        fs::write(self.file("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    fn metrics(&self, rows: &[MetricRow]) -> Result<()> {
        io::write_metrics(fs::File::create(self.file("metrics.csv"))?, rows)?;
        Ok(())
    }

    fn summary(&self, rows: &[SummaryRow]) -> Result<()> {
        fs::write(self.file("summary.json"), serde_json::to_string_pretty(rows)?)?;
        Ok(())
    }
}

fn splits_for(run: &RunConfig) -> Result<BiasedSplits> {
    let dir = pipeline::mnist_dir(&run.data_dir);
    let (train, test) = pipeline::load_mnist(&dir)?;
    Ok(pipeline::build_splits(run, &train, &test)?)
}

fn summary_row(method: &str, s: &TestScores) -> SummaryRow {
    SummaryRow {
        method: method.into(),
        test_original: s.original.accuracy,
        test_biased: s.biased.accuracy,
    }
}

fn print_scores(label: &str, s: &TestScores) {
    println!(
        "{label:<12} original {:.4}  biased {:.4}",
        s.original.accuracy, s.biased.accuracy
    );
}

fn train(run: &RunConfig, splits: &BiasedSplits) -> Result<TrainedModel> {
    let spec = pipeline::network_for(run, splits)?;
    Ok(trainer::train_erm_with(&spec, &splits.train, &run.hyper, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.4}  lr {}",
            r.epoch, r.train_loss, r.train_acc, r.lr
        )
    })?)
}

fn dump_examples(dir: &RunDir, model: &TrainedModel, splits: &BiasedSplits, masked: &masking::MaskedDataset) -> Result<()> {
    let shown = splits.train.len().min(8);
    for i in 0..shown {
        let map = saliency::cam(&model.spec, &model.params.weights, splits.train.image(i), dir.run.masking.method)?;
        io::write_pgm(&dir.file(&format!("heatmap_{i}.pgm")), &map)?;
        io::write_ppm(&dir.file(&format!("masked_{i}.ppm")), &masked.dataset, i)?;
    }
    Ok(())
}

fn gammas_for(run: &RunConfig, init: &TrainedModel, fin: &TrainedModel, splits: &BiasedSplits) -> Result<Vec<(f64, f64)>> {
    let val = ensemble(init, fin, &splits.val)?;
    run.coverage
        .iter()
        .map(|&c| Ok((c, selective::calibrate_gamma(&val.scores, c)?)))
        .collect()
}

fn ensemble(init: &TrainedModel, fin: &TrainedModel, ds: &masktune::data::LabeledDataset) -> Result<selective::EnsembleScores> {
    let a = trainer::predict_logits(&init.spec, &init.params.weights, ds)?;
    let b = trainer::predict_logits(&fin.spec, &fin.params.weights, ds)?;
    Ok(selective::ensemble_scores(&a, &b, init.spec.num_classes)?)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::SynthData(c) => {
            let dir = RunDir::create("synth-data", c.run_config()?)?;
            let s = splits_for(&dir.run)?;
            for (name, ds) in [
                ("train", &s.train),
                ("val", &s.val),
                ("test_original", &s.test_original),
                ("test_biased", &s.test_biased),
            ] {
                ds.save(&dir.file(&format!("{name}.mtck")))?;
                println!("{name:<14} {} samples, class counts {:?}", ds.len(), ds.class_counts(2));
            }
            for i in 0..s.train.len().min(8) {
                io::write_ppm(&dir.file(&format!("train_{i}.ppm")), &s.train, i)?;
            }
            dir.manifest(json!({}), &["train.mtck", "val.mtck", "test_original.mtck", "test_biased.mtck"])?;
            println!("{}", dir.path.display());
        }
        Command::TrainErm(c) => {
            let dir = RunDir::create("train-erm", c.run_config()?)?;
            let s = splits_for(&dir.run)?;
            let erm = train(&dir.run, &s)?;
            io::save_model(&dir.file("erm.ckpt"), &erm)?;
            let mut rows = MetricRow::from_history(&erm);
            let (scores, eval) = pipeline::eval_rows("erm", &erm, &s)?;
            rows.extend(eval);
            dir.metrics(&rows)?;
            print_scores("erm", &scores);
            dir.summary(&[summary_row("erm", &scores)])?;
            dir.manifest(json!({}), &["erm.ckpt", "metrics.csv", "summary.json"])?;
            println!("{}", dir.path.display());
        }
        Command::Mask { model, common } => {
            let dir = RunDir::create("mask", common.run_config()?)?;
            let s = splits_for(&dir.run)?;
            let m = io::load_model(&model)?;
            let masked = masking::build_masked_dataset(&m.spec, &m.params.weights, &s.train, &dir.run.masking)?;
            io::save_masked(&dir.file("masked.mtck"), &masked, &dir.run.masking)?;
            dump_examples(&dir, &m, &s, &masked)?;
            println!("mean masked area {:.2} px", masked.masks.mean_masked_area());
            dir.manifest(json!({ "model": model }), &["masked.mtck", "masked.mtck.json"])?;
            println!("{}", dir.path.display());
        }
        Command::Finetune { model, masked, common } => {
            let dir = RunDir::create("finetune", common.run_config()?)?;
            let s = splits_for(&dir.run)?;
            let m = io::load_model(&model)?;
            let data = masktune::data::LabeledDataset::load(&masked)?;
            let tuned = trainer::finetune_masked(&m, &data, dir.run.finetune_lr)?;
            io::save_model(&dir.file("final.ckpt"), &tuned)?;
            let mut rows = MetricRow::from_history(&tuned);
            let (scores, eval) = pipeline::eval_rows("masktune", &tuned, &s)?;
            rows.extend(eval);
            dir.metrics(&rows)?;
            print_scores("masktune", &scores);
            dir.summary(&[summary_row("masktune", &scores)])?;
            dir.manifest(json!({ "model": model, "masked": masked }), &["final.ckpt", "metrics.csv"])?;
            println!("{}", dir.path.display());
        }
        Command::Masktune(c) => {
            let dir = RunDir::create("masktune", c.run_config()?)?;
            let s = splits_for(&dir.run)?;
            let erm = train(&dir.run, &s)?;
            let out = pipeline::masktune_from(&dir.run, &s, erm)?;
            let (_, rand) = pipeline::random_mask_baseline(&out.erm, &s, RandomMaskMode::RandomWindow, dir.run.seed)?;
            io::save_model(&dir.file("erm.ckpt"), &out.erm)?;
            io::save_masked(&dir.file("masked.mtck"), &out.masked, &dir.run.masking)?;
            io::save_model(&dir.file("final.ckpt"), &out.finetuned)?;
            dump_examples(&dir, &out.erm, &s, &out.masked)?;
            dir.metrics(&out.metrics)?;
            print_scores("erm", &out.erm_scores);
            print_scores("randmask", &rand);
            print_scores("masktune", &out.scores);
            dir.summary(&[
                summary_row("erm", &out.erm_scores),
                summary_row("randmask", &rand),
                summary_row("masktune", &out.scores),
            ])?;
            dir.manifest(json!({}), &["erm.ckpt", "masked.mtck", "final.ckpt", "metrics.csv", "summary.json"])?;
            println!("{}", dir.path.display());
        }
        Command::Iterate { model, common } => {
            let dir = RunDir::create("iterate", common.run_config()?)?;
            let s = splits_for(&dir.run)?;
            let erm = match &model {
                Some(p) => io::load_model(p)?,
                None => train(&dir.run, &s)?,
            };
            let out = pipeline::iterate(&dir.run, &s, &erm)?;
            for r in &out.outcome.records {
                println!(
                    "iteration {}  kept {:.4}  masked-train acc {:.4}",
                    r.iteration, r.kept_fraction, r.masked_train_accuracy
                );
            }
            if out.outcome.stopped_early {
                println!("stopped early: masked training accuracy fell below {}", dir.run.stop_floor);
            }
            io::save_model(&dir.file("final.ckpt"), &out.outcome.model)?;
            dir.metrics(&out.metrics)?;
            fs::write(dir.file("iterations.json"), serde_json::to_string_pretty(&out.outcome.records)?)?;
            let label = format!(
                "{}-{}x",
                if dir.run.accumulative { "accumulative" } else { "independent" },
                out.outcome.records.len()
            );
            print_scores(&label, &out.scores);
            dir.summary(&[summary_row(&label, &out.scores)])?;
            dir.manifest(json!({ "model": model }), &["final.ckpt", "metrics.csv", "iterations.json"])?;
            println!("{}", dir.path.display());
        }
        Command::Eval { model, common } => {
            let dir = RunDir::create("eval", common.run_config()?)?;
            let s = splits_for(&dir.run)?;
            let m = io::load_model(&model)?;
            let (scores, rows) = pipeline::eval_rows("eval", &m, &s)?;
            dir.metrics(&rows)?;
            print_scores("model", &scores);
            let label = model.display().to_string();
            dir.summary(&[summary_row(&label, &scores)])?;
            dir.manifest(json!({ "model": model }), &["metrics.csv", "summary.json"])?;
        }
        Command::SelectiveCalibrate { initial, finetuned, common } => {
            let dir = RunDir::create("selective-calibrate", common.run_config()?)?;
            let s = splits_for(&dir.run)?;
            let (a, b) = (io::load_model(&initial)?, io::load_model(&finetuned)?);
            let gammas = gammas_for(&dir.run, &a, &b, &s)?;
            let val = ensemble(&a, &b, &s.val)?;
            let rows: Vec<_> = gammas
                .iter()
                .map(|&(c, g)| {
                    let cov = selective::selective_eval(&val, &s.val.labels, g).map(|r| r.coverage);
                    cov.map(|cov| json!({ "target": c, "gamma": g, "val_coverage": cov }))
                })
                .collect::<std::result::Result<_, _>>()?;
            fs::write(dir.file("gammas.json"), serde_json::to_string_pretty(&rows)?)?;
            for r in &rows {
                println!("{r}");
            }
            dir.manifest(json!({ "initial": initial, "final": finetuned }), &["gammas.json"])?;
        }
        Command::SelectiveEval { initial, finetuned, gammas, common } => {
            let dir = RunDir::create("selective-eval", common.run_config()?)?;
            let s = splits_for(&dir.run)?;
            let (a, b) = (io::load_model(&initial)?, io::load_model(&finetuned)?);
            let table: Vec<(f64, f64)> = match &gammas {
                Some(p) => {
                    let v: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(p)?)?;
                    v.iter()
                        .map(|r| match (r["target"].as_f64(), r["gamma"].as_f64()) {
                            (Some(t), Some(g)) => Ok((t, g)),
                            _ => bail!("{}: malformed entry {r}", p.display()),
                        })
                        .collect::<Result<_>>()?
                }
                None => gammas_for(&dir.run, &a, &b, &s)?,
            };
            for (name, ds) in [("test_original", &s.test_original), ("test_biased", &s.test_biased)] {
                let ens = ensemble(&a, &b, ds)?;
                let points: Vec<CoveragePoint> = table
                    .iter()
                    .map(|&(t, g)| {
                        Ok(CoveragePoint {
                            target: t,
                            report: selective::selective_eval(&ens, &ds.labels, g)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                selective::write_curve_csv(fs::File::create(dir.file(&format!("coverage_{name}.csv")))?, &points)?;
                let abstained: Vec<_> = points
                    .iter()
                    .map(|p| json!({ "target": p.target, "abstained": p.report.abstained }))
                    .collect();
                fs::write(dir.file(&format!("abstained_{name}.json")), serde_json::to_string(&abstained)?)?;
                for p in &points {
                    let err = p.report.selective_error.map_or("undefined".to_string(), |e| format!("{e:.4}"));
                    println!("{name:<14} target {:.2}  coverage {:.4}  error {err}", p.target, p.report.coverage);
                }
            }
            dir.manifest(
                json!({ "initial": initial, "final": finetuned, "gammas": gammas }),
                &["coverage_test_original.csv", "coverage_test_biased.csv"],
            )?;
        }
        Command::VerifyTheory(c) => {
            let dir = RunDir::create("verify-theory", c.run_config()?)?;
            let r = &dir.run;
            let report = linreg::verify_sweep(r.seed, r.trials, r.n, r.d, r.tol, r.delta)?;
            fs::write(dir.file("theory.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "{} trials: {} consistent+agree, {} perturbed+disagree, {} norm checks held, {} violations",
                report.trials,
                report.consistent_and_agree,
                report.inconsistent_and_disagree,
                report.complexity_holds,
                report.violations.len()
            );
            dir.manifest(json!({}), &["theory.json"])?;
            if !report.violations.is_empty() {
                bail!("{} violations, see {}", report.violations.len(), dir.file("theory.json").display());
            }
        }
        Command::Report { runs, out_dir } => {
            let out = out_dir.unwrap_or_else(|| PathBuf::from("runs"));
            fs::create_dir_all(&out)?;
            let mut csv = String::from("run,method,test_original,test_biased\n");
            for r in &runs {
                let rows: Vec<SummaryRow> = read_summary(r)?;
                for row in rows {
                    csv.push_str(&format!(
                        "{},{},{:?},{:?}\n",
                        r.display(),
                        row.method,
                        row.test_original,
                        row.test_biased
                    ));
                }
            }
            let path = out.join("report.csv");
            fs::write(&path, &csv)?;
            print!("{csv}");
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn read_summary(run: &Path) -> Result<Vec<SummaryRow>> {
    let p = run.join("summary.json");
    let bytes = fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
