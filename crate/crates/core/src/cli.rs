//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::ablate::{results_csv, run_grid, write_csv_atomic, AblationGrid};
use crate::block::AdapterConfig;
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::diagnostics::{
    audit_model, audit_params, cka_matrix, erf_map_model, expert_activation_map, random_probes, ArchSpec, ErfLayer,
};
use crate::error::{Error, Result};
use crate::optim::OptimState;
use crate::router::GateHead;
use crate::task::{make_batch, EVAL_OFFSET};
use crate::train::train;

#[derive(Debug, Parser)]
#[command(name = "adaroute", version, about = "Routed shared-expert adapters on a frozen toy backbone")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON run config; writes report.csv and a checkpoint.
    Train {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diagnostics on a saved checkpoint.
    Diag {
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: DiagKind,
        #[arg(long, default_value = "G1", value_parser = parse_head)]
        head: GateHead,
        /// Stage index; the ERF defaults to the last stage.
        #[arg(long)]
        stage: Option<usize>,
        #[arg(long, default_value_t = 16)]
        probes: usize,
        /// Output directory, `<checkpoint>/../diag` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of an ablation grid and write one CSV.
    Ablate {
        grid: PathBuf,
        /// CSV path, `<base output_dir>/ablation.csv` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form trainable-parameter audit of an architecture.
    Audit {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(ArchSpec::NAMES))]
        arch: String,
        /// Adapter config JSON; toy defaults or full-scale settings otherwise.
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print default configurations.
    Config {
        #[arg(long)]
        print_defaults: bool,
        /// Print the toy-scale ablation grid instead.
        #[arg(long)]
        print_grid: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DiagKind {
    Cka,
    Erf,
    ExpertMap,
    Audit,
}

fn parse_head(s: &str) -> std::result::Result<GateHead, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Diag {
            checkpoint,
            kind,
            head,
            stage,
            probes,
            out,
        } => cmd_diag(&checkpoint, kind, head, stage, probes, out),
        Command::Ablate { grid, out } => cmd_ablate(&grid, out),
        Command::Audit { arch, adapter, csv } => cmd_audit(&arch, adapter.as_deref(), csv.as_deref()),
        Command::Config {
            print_defaults,
            print_grid,
        } => {
            if print_grid {
                println!("{}", serde_json::to_string_pretty(&AblationGrid::toy_study()).expect("grid serializes"));
            } else if print_defaults {
                println!("{}", RunConfig::default().to_json());
            } else {
                return Err(Error::config("config: pass --print-defaults or --print-grid"));
            }
            Ok(())
        }
    }
}

pub fn cmd_train(path: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::from_file(path)?;
    cfg.apply_env()?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let mut model = cfg.build_model()?;
    let mut optim = OptimState::new();
    let report = train(&mut model, &mut optim, &cfg.task, &cfg.train, cfg.data_seed(), cfg.train.steps)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report.write_csv(&dir.join("report.csv"))?;
    save_checkpoint(&dir.join("checkpoint"), &model, Some(&optim), Some(&cfg))?;
    match report.final_metric() {
        Some(m) => println!("trained {} steps, final metric {m:.4}, artifacts in {}", cfg.train.steps, dir.display()),
        None => println!("trained {} steps, artifacts in {}", cfg.train.steps, dir.display()),
    }
    Ok(())
}

fn probe_geometry(ck: &Checkpoint) -> (usize, usize, u64) {
    let channels = ck.model.config.in_channels;
    match &ck.config {
        Some(c) => (channels, c.task.image_size, c.seed),
        None => (channels, 16, 0),
    }
}

pub fn cmd_diag(
    ckpt: &Path,
    kind: DiagKind,
    head: GateHead,
    stage: Option<usize>,
    n_probes: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let out = out.unwrap_or_else(|| {
        ckpt.parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join("diag")
    });
    let (channels, size, seed) = probe_geometry(&ck);
    let g = &ck.model;
    match kind {
        DiagKind::Cka => {
            let m = cka_matrix(g, &random_probes(n_probes, channels, size, seed))?;
            write(&out.join("cka.csv"), m.to_csv())?;
        }
        DiagKind::Erf => {
            let s = stage.unwrap_or(g.config.depths.len() - 1);
            let map = erf_map_model(g, &random_probes(n_probes, channels, size, seed), ErfLayer::Stage(s))?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            map.write(&out.join(format!("erf_s{s}")))?;
        }
        DiagKind::ExpertMap => {
            let s = stage.unwrap_or(0);
            // Held-out task images when the run config is known.
            let images = match &ck.config {
                Some(c) => make_batch(&c.task, c.data_seed(), EVAL_OFFSET, n_probes)?
                    .samples
                    .into_iter()
                    .map(|x| x.input)
                    .collect(),
                None => random_probes(n_probes, channels, size, seed),
            };
            let map = expert_activation_map(g, &images, head, s)?;
            write(&out.join(format!("expert_map_{head}_s{s}.csv")), map.to_csv())?;
        }
        DiagKind::Audit => {
            let a = audit_model(g);
            write(&out.join("audit.txt"), a.render())?;
            write(&out.join("audit.csv"), a.to_csv())?;
        }
    }
    println!("wrote {kind:?} diagnostics to {}", out.display());
    Ok(())
}

pub fn cmd_ablate(path: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut grid = AblationGrid::from_file(path)?;
    grid.base.apply_env()?;
    let n = grid.cells()?.len();
    let out = out.unwrap_or_else(|| grid.base.output_dir.join("ablation.csv"));
    log::info!("running {n} ablation cells");
    let rows = run_grid(&grid)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_csv_atomic(&out, &results_csv(&rows))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

pub fn cmd_audit(arch: &str, adapter: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    let spec = ArchSpec::named(arch)?;
    let acfg = match adapter {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: p.to_path_buf(),
                source: e,
            })?
        }
        None if arch == "toy" => AdapterConfig::default(),
        None => AdapterConfig::full_scale(),
    };
    let audit = audit_params(&spec, &acfg)?;
    print!("{}", audit.render());
    if let Some(p) = csv {
        write(p, audit.to_csv())?;
    }
    Ok(())
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_diag_options() {
        let cli = Cli::try_parse_from(["adaroute", "diag", "ck", "--kind", "expert-map", "--head", "GB", "--stage", "1"]).unwrap();
        match cli.command {
            Command::Diag { kind, head, stage, probes, .. } => {
                assert_eq!(kind, DiagKind::ExpertMap);
                assert_eq!(head, GateHead::GB);
                assert_eq!(stage, Some(1));
                assert_eq!(probes, 16);
            }
            _ => panic!("wrong command"),
        }
    }

    #[test]
    fn bad_arguments_exit_2() {
        assert_eq!(main_with_args(["adaroute", "diag", "ck", "--kind", "saliency"]), 2);
        assert_eq!(main_with_args(["adaroute", "audit", "--arch", "vit-b"]), 2);
        assert_eq!(main_with_args(["adaroute", "train", "/nonexistent/cfg.json"]), 2);
        assert_eq!(main_with_args(["adaroute", "config"]), 2);
    }
}
