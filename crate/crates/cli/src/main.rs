//! Command-line surface of the depthbins pipeline: training, evaluation,
//! gradient verification, relative-improvement reporting, and dataset export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depthbins::config::RunConfig;
use depthbins::datagen::make_dataset;
use depthbins::error::{Error, Result};
use depthbins::formats::{
    export_dataset, read_metrics_csv, write_metrics_csv,
};
use depthbins::metrics::{mri_datasets, mri_metrics, MetricRecord};
use depthbins::train::{evaluate, train, Model};
use depthbins::verify::run_standard_checks;

#[derive(Parser)]
#[command(name = "depthbins", version, about = "Metric depth with attractor-refined adaptive bins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines (flat keys, `#` comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Direct overrides; every config key is addressable, e.g.
    /// `--set opt.steps=800 --set model.head=naive`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn build(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg.merge_str(&text)?;
        }
        for assignment in &self.sets {
            let Some((key, value)) = assignment.split_once('=') else {
                return Err(Error::Config(format!(
                    "--set expects KEY=VALUE, got '{assignment}'"
                )));
            };
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured training stages and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint output path (overrides out.checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a generated split and write the metrics CSV.
    Eval {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Metrics CSV output path (overrides out.metrics).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluation-scope overrides (`eval.*` and `out.*` keys only).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Verify reverse-mode gradients against central finite differences.
    GradCheck {
        /// Random configurations per checked operation.
        #[arg(long, default_value_t = 100)]
        configs: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Mean relative improvement between two metrics CSVs.
    Mri {
        /// Reference scores (the baseline).
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Target scores (the contender).
        #[arg(long)]
        target: PathBuf,
        /// `datasets`: one metric across datasets; `metrics`: the
        /// (delta1, rel, rmse) triple per dataset.
        #[arg(long, default_value = "datasets")]
        mode: String,
        /// Metric column for datasets mode: rel, rmse, log10, delta1..3.
        #[arg(long, default_value = "rel")]
        metric: String,
    },
    /// Generate a synthetic dataset as ZDM files plus a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0.5)]
        indoor_fraction: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
}

fn run_train(config: ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = config.build(RunConfig::default())?;
    if let Some(path) = out {
        cfg.out_checkpoint = path.display().to_string();
    }
    cfg.validate()?;
    let (model, report) = train(cfg.clone())?;
    for (stage, trace) in [("pretrain", &report.pretrain_trace), ("finetune", &report.finetune_trace)] {
        if trace.is_empty() {
            continue;
        }
        let stride = (trace.len() / 10).max(1);
        for (step, loss) in trace.iter().enumerate() {
            if step % stride == 0 || step + 1 == trace.len() {
                println!("{stage} step {step} loss {loss:.6}");
            }
        }
    }
    for (head, ratio) in model.heads.iter().zip(model.head_param_ratios()) {
        println!("head {} parameters: {:.2}% of backbone", head.domain, ratio * 100.0);
    }
    let path = PathBuf::from(&cfg.out_checkpoint);
    model.save(&path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}

fn run_eval(ckpt: PathBuf, out: Option<PathBuf>, sets: Vec<String>) -> Result<()> {
    let mut model = Model::load(&ckpt)?;
    for assignment in &sets {
        let Some((key, value)) = assignment.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got '{assignment}'")));
        };
        let key = key.trim();
        if !(key.starts_with("eval.") || key.starts_with("out.")) {
            return Err(Error::Config(format!(
                "eval only accepts eval.* / out.* overrides, got '{key}'"
            )));
        }
        model.config.set(key, value.trim())?;
    }
    let outcome = evaluate(&model)?;
    let path = out.unwrap_or_else(|| PathBuf::from(&model.config.out_metrics));
    write_metrics_csv(&path, &outcome.rows)?;
    for (name, r) in &outcome.rows {
        println!(
            "{name}: delta1={:.4} delta2={:.4} delta3={:.4} rel={:.4} rmse={:.4} log10={:.4}",
            r.delta1, r.delta2, r.delta3, r.rel, r.rmse, r.log10
        );
    }
    if let Some(acc) = outcome.routing_accuracy {
        println!("routing accuracy: {acc:.6}");
    }
    println!("metrics written to {}", path.display());
    Ok(())
}

fn run_grad_check(configs: usize, seed: u64, tolerance: f64) -> Result<()> {
    let reports = run_standard_checks(configs, seed)?;
    let mut failed = false;
    for r in &reports {
        let ok = r.passes(tolerance);
        failed |= !ok;
        println!(
            "{:<26} configs={:<4} max_rel_err={:.3e}  {}",
            r.name,
            r.configs,
            r.max_rel_err,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed {
        return Err(Error::Numeric(format!(
            "gradient check exceeded tolerance {tolerance}"
        )));
    }
    Ok(())
}

fn metric_column(record: &MetricRecord, metric: &str) -> Result<(f64, bool)> {
    Ok(match metric {
        "rel" => (record.rel, true),
        "rmse" => (record.rmse, true),
        "log10" => (record.log10, true),
        "delta1" => (record.delta1, false),
        "delta2" => (record.delta2, false),
        "delta3" => (record.delta3, false),
        other => return Err(Error::Config(format!("unknown metric '{other}'"))),
    })
}

fn run_mri(reference: PathBuf, target: PathBuf, mode: String, metric: String) -> Result<()> {
    let ref_rows = read_metrics_csv(&reference)?;
    let tgt_rows = read_metrics_csv(&target)?;
    let missing: Vec<&str> = ref_rows
        .iter()
        .map(|(n, _)| n.as_str())
        .filter(|n| !tgt_rows.iter().any(|(m, _)| m == n))
        .chain(
            tgt_rows
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| !ref_rows.iter().any(|(m, _)| m == n)),
        )
        .collect();
    if !missing.is_empty() {
        return Err(Error::Contract(format!(
            "dataset rows do not match; missing from one side: {}",
            missing.join(", ")
        )));
    }
    match mode.as_str() {
        "datasets" => {
            let mut refs = Vec::new();
            let mut tgts = Vec::new();
            let mut lowers = Vec::new();
            for (name, r) in &ref_rows {
                let (rv, lower) = metric_column(r, &metric)?;
                let t = &tgt_rows.iter().find(|(n, _)| n == name).expect("matched").1;
                let (tv, _) = metric_column(t, &metric)?;
                let ri = if lower { (rv - tv) / rv } else { (tv - rv) / rv };
                println!("{name}: RI({metric}) = {:+.2}%", ri * 100.0);
                refs.push(rv);
                tgts.push(tv);
                lowers.push(lower);
            }
            let mri = mri_datasets(&refs, &tgts, &lowers)?;
            println!("mRI_D({metric}) = {:+.1}%", mri * 100.0);
        }
        "metrics" => {
            for (name, r) in &ref_rows {
                let t = &tgt_rows.iter().find(|(n, _)| n == name).expect("matched").1;
                let mri = mri_metrics(r, t)?;
                println!("{name}: mRI_theta = {:+.1}%", mri * 100.0);
            }
        }
        other => return Err(Error::Config(format!("unknown mri mode '{other}'"))),
    }
    Ok(())
}

fn run_gen_data(
    out: PathBuf,
    samples: usize,
    indoor_fraction: f64,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<()> {
    let data = make_dataset(samples, indoor_fraction, seed, height, width)?;
    export_dataset(&out, &data)?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out } => run_train(config, out),
        Command::Eval { ckpt, out, sets } => run_eval(ckpt, out, sets),
        Command::GradCheck { configs, seed, tolerance } => {
            run_grad_check(configs, seed, tolerance)
        }
        Command::Mri { reference, target, mode, metric } => {
            run_mri(reference, target, mode, metric)
        }
        Command::GenData { out, samples, indoor_fraction, seed, height, width } => {
            run_gen_data(out, samples, indoor_fraction, seed, height, width)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e);
            ExitCode::FAILURE
        }
    }
}
