//! Command-line surface. Exit status 0 on success, 1 on usage errors
//! (unknown flags, malformed configuration), 2 on runtime failures.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use stmformer_core::model::Variant;

use crate::baselines::baselines;
use crate::bundle::{generate_dataset, DatasetBundle};
use crate::checkpoint;
use crate::checks::{full_model_check, module_checks, CheckResult};
use crate::config::{GenConfig, KvConfig, RunConfig};
use crate::data::preprocess;
use crate::error::{HarnessError, Result};
use crate::experiment::{ablate, build_model};
use crate::report::{write_csv, write_losses, ReportRows};
use crate::split::Part;
use crate::train::{evaluate, train, TrainStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "stmformer", version, about = "Synthetic microservice telemetry and spatio-temporal forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset bundle from a key=value generator config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        /// Per-update loss curve (CSV).
        #[arg(long)]
        losses: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: Part,
    },
    /// Train and evaluate ablation variants under one budget.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Variant key (full, no-imm, no-smm, no-tmm-tb, no-tmm-pca,
        /// no-adjacency) or `all`; repeatable.
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Also check the assembled model.
        #[arg(long)]
        full: bool,
    },
    /// Persistence and linear baselines.
    Baselines {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: Part,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run_cli<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                HarnessError::Parse { .. } | HarnessError::Config(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_kv(KvConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn print_report(out: &mut dyn Write, label: &str, r: &crate::metrics::MetricsReport) {
    let m = &r.overall;
    let _ = writeln!(out, "{label}: mae={:.6} mse={:.6} rmse={:.6} {}", m.mae, m.mse, m.rmse, r.note);
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Generate { config, out: dir } => {
            let cfg = GenConfig::from_kv(KvConfig::load(&config)?)?;
            let bundle = generate_dataset(&cfg)?;
            bundle.write(&dir)?;
            let _ = writeln!(out, "wrote {} windows to {}", cfg.samples, dir.display());
            Ok(EXIT_OK)
        }
        Command::Train {
            data,
            config,
            ckpt,
            losses,
        } => {
            let run = run_config(config.as_deref())?;
            let bundle = DatasetBundle::load(&data, !run.model.ablation.no_adjacency)?;
            let prepared = preprocess(&bundle)?;
            let model = build_model(&run, &bundle)?;
            let every = (run.train.updates / 10).max(1);
            let mut outcome = train(model, &prepared.train, &bundle.deployment, &run.train, |u, l| {
                if u % every == 0 || u == 1 {
                    let _ = writeln!(out, "update {u}: loss {l:.6}");
                }
            })?;
            if let Some(p) = &losses {
                write_losses(p, &outcome.losses)?;
            }
            checkpoint::round_to_storage(&mut outcome.model);
            let val = evaluate(&outcome.model, &prepared.val, &bundle.deployment, Some(&prepared.normalizer))?;
            let meta = vec![
                ("val.mae".to_string(), val.overall.mae.to_string()),
                ("val.mse".to_string(), val.overall.mse.to_string()),
                ("val.rmse".to_string(), val.overall.rmse.to_string()),
            ];
            checkpoint::save(&ckpt, &run, &outcome.model, &meta)?;
            match outcome.status {
                TrainStatus::Completed => {
                    print_report(out, "val", &val);
                    Ok(EXIT_OK)
                }
                TrainStatus::Diverged { update } => Err(HarnessError::NonFiniteLoss { update }),
            }
        }
        Command::Evaluate {
            data,
            ckpt,
            report,
            split,
        } => {
            let ck = checkpoint::load(&ckpt)?;
            let bundle = DatasetBundle::load(&data, !ck.run.model.ablation.no_adjacency)?;
            let prepared = preprocess(&bundle)?;
            let c = &bundle.config;
            let mc = ck.model.config();
            if (mc.t, mc.n, mc.c) != (c.t, c.n, c.c) {
                return Err(HarnessError::Checkpoint {
                    path: ckpt,
                    msg: format!("extents {}x{}x{} do not match data {}x{}x{}", mc.t, mc.n, mc.c, c.t, c.n, c.c),
                });
            }
            let r = evaluate(&ck.model, prepared.part(split), &bundle.deployment, Some(&prepared.normalizer))?;
            print_report(out, split.name(), &r);
            write_csv(
                &report,
                &[ReportRows {
                    model: ck.run.variant.key(),
                    split: split.name(),
                    report: &r,
                }],
            )?;
            Ok(EXIT_OK)
        }
        Command::Ablate {
            data,
            variants,
            config,
            report,
        } => {
            let mut list = Vec::new();
            for v in &variants {
                if v == "all" {
                    list.extend(Variant::ALL);
                } else {
                    list.push(Variant::parse(v).map_err(|e| HarnessError::config(e.to_string()))?);
                }
            }
            let run = run_config(config.as_deref())?;
            let results = ablate(&data, &list, &run, |_, _, _| {})?;
            for r in &results {
                print_report(out, r.variant.label(), &r.test);
            }
            if let Some(p) = report {
                let rows: Vec<ReportRows<'_>> = results
                    .iter()
                    .map(|r| ReportRows {
                        model: r.variant.label(),
                        split: "test",
                        report: &r.test,
                    })
                    .collect();
                write_csv(&p, &rows)?;
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck { full } => {
            let mut results: Vec<CheckResult> = module_checks()?;
            if full {
                results.push(full_model_check()?);
            }
            let mut ok = true;
            for r in &results {
                ok &= r.passed();
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                let _ = writeln!(
                    out,
                    "{:<16} max rel error {:.3e} (< {:.0e}) over {} coordinates: {verdict}",
                    r.name, r.max_rel_error, r.tolerance, r.coordinates
                );
            }
            Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Baselines { data, report, split } => {
            let bundle = DatasetBundle::load(&data, false)?;
            let prepared = preprocess(&bundle)?;
            let reports = baselines(&prepared.train, prepared.part(split), Some(&prepared.normalizer))?;
            for (name, r) in &reports {
                print_report(out, name, r);
            }
            let rows: Vec<ReportRows<'_>> = reports
                .iter()
                .map(|(name, r)| ReportRows {
                    model: name,
                    split: split.name(),
                    report: r,
                })
                .collect();
            write_csv(&report, &rows)?;
            Ok(EXIT_OK)
        }
    }
}
