//! Command-line interface.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::driver::{em_fit, FitConfig, TraceRow};
use crate::error::{Error, Result};
use crate::io::{self, IngestOptions, SyntheticSpec, Vocab};
use crate::model::{self, Modality};
use crate::selection;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(name = "mmfa", version, about = "Multimodal factor analysis fitted by EM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic data directory from a spec file
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model to a data directory
    Fit {
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        k: usize,
        /// Parameter checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration objective trace to write
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Print the held-out perplexity of a fitted model
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
    },
    /// Choose the factor count by held-out perplexity
    SelectK {
        #[command(flatten)]
        fit: FitArgs,
        /// Comma-separated factor counts
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<usize>,
    },
    /// List the objects with the largest loadings on one factor
    Topk {
        #[arg(long)]
        model: PathBuf,
        /// 1-based factor index
        #[arg(long)]
        factor: usize,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, env = "MMFA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated subset of pois, gaus, mult, vmf
    #[arg(long, value_delimiter = ',', value_parser = parse_modality)]
    pub modalities: Option<Vec<Modality>>,
    /// Drop words with a smaller total count
    #[arg(long, default_value_t = 0)]
    pub word_threshold: u64,
}

fn parse_modality(s: &str) -> std::result::Result<Modality, String> {
    Modality::parse(s).ok_or_else(|| format!("unknown modality `{s}` (expected pois, gaus, mult or vmf)"))
}

impl FitArgs {
    fn config(&self, k: usize) -> FitConfig {
        FitConfig {
            modalities: self.modalities.as_ref().map(|m| m.iter().copied().collect::<BTreeSet<_>>()),
            ..FitConfig::new(k).with_seed(self.seed).with_max_iters(self.max_iters).with_tol(self.tol)
        }
    }

    fn load(&self) -> Result<io::Ingested> {
        let ingested = io::ingest(&self.data, &IngestOptions { word_threshold: self.word_threshold, objects: None })?;
        if !ingested.dropped_words.is_empty() {
            log::warn!("{} words dropped below count {}", ingested.dropped_words.len(), self.word_threshold);
        }
        let report = model::validate_dataset(&ingested.dataset);
        if let Some(v) = report.first() {
            return Err(Error::Invalid(v.to_string()));
        }
        Ok(ingested)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    io::write_csv(path, |w| {
        w.write_record(["iteration", "objective", "pois", "gaus", "mult", "vmf", "wall_time"])?;
        for r in trace {
            w.write_record([
                r.iteration.to_string(),
                r.objective.to_string(),
                fmt_opt(r.pois),
                fmt_opt(r.gaus),
                fmt_opt(r.mult),
                fmt_opt(r.vmf),
                r.wall_time.to_string(),
            ])?;
        }
        Ok(())
    })
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out: dir } => {
            let spec = SyntheticSpec::load(&spec)?;
            let (dataset, truth) = io::generate(&spec)?;
            io::write_dataset(&dataset, &Vocab::for_dataset(&dataset), &dir)?;
            let mut cp = Checkpoint::new(dataset.dims(spec.dims.factors), &truth);
            cp.object_ids = Some(dataset.object_ids.clone());
            cp.save(&dir.join(io::TRUTH_FILE))?;
            writeln!(out, "wrote {} objects to {}", dataset.objects(), dir.display()).map_err(out_err)?;
        }
        Command::Fit { fit, k, out: model_path, trace } => {
            let ingested = fit.load()?;
            let data = &ingested.dataset;
            let result = match em_fit(data, &fit.config(k)) {
                Ok(r) => r,
                Err(e) => {
                    if let (Error::Fit { partial_trace, .. }, Some(path)) = (&e, &trace) {
                        write_trace(path, partial_trace)?;
                    }
                    return Err(e);
                }
            };
            let mut cp = Checkpoint::new(data.dims(k), &result.params);
            cp.object_ids = Some(data.object_ids.clone());
            cp.object_mean_counts = Some(data.mean_counts());
            cp.modalities = Some(result.modalities.clone());
            cp.save(&model_path)?;
            if let Some(path) = trace {
                write_trace(&path, &result.trace)?;
            }
            let d = &result.diagnostics;
            let last = result.trace.last().map_or(f64::NAN, |r| r.objective);
            writeln!(
                out,
                "{} after {} iterations, objective {last}",
                if d.converged { "converged" } else { "stopped" },
                d.iterations
            )
            .map_err(out_err)?;
            if d.clip_events + d.vmf_fallbacks + d.loading_nonconverged > 0 {
                log::warn!(
                    "{} exponent clips, {} vMF fallbacks, {} loading rows short of tolerance",
                    d.clip_events,
                    d.vmf_fallbacks,
                    d.loading_nonconverged
                );
            }
        }
        Command::Evaluate { model, heldout } => {
            let cp = Checkpoint::load(&model)?;
            let params = cp.params()?;
            let objects = cp.object_ids.clone();
            let ingested = io::ingest(&heldout, &IngestOptions { word_threshold: 0, objects })?;
            let p = selection::perplexity(&params, &ingested.dataset.counts)?;
            writeln!(out, "{p}").map_err(out_err)?;
        }
        Command::SelectK { fit, grid } => {
            let ingested = fit.load()?;
            let (best, table) = selection::select_k(&ingested.dataset, &grid, &fit.config(grid[0]))?;
            writeln!(out, "k,perplexity").map_err(out_err)?;
            for row in &table {
                writeln!(out, "{},{}", row.k, row.perplexity).map_err(out_err)?;
            }
            writeln!(out, "best_k,{best}").map_err(out_err)?;
        }
        Command::Topk { model, factor, top } => {
            let cp = Checkpoint::load(&model)?;
            let params = cp.params()?;
            let p = params.objects();
            let ids = cp.object_ids.clone().unwrap_or_else(|| (0..p).map(|i| i.to_string()).collect());
            let means = cp.object_mean_counts.clone().unwrap_or_else(|| vec![0.0; p]);
            let ranked = selection::rank_objects(&params.loadings, &ids, &means, factor, top)?;
            writeln!(out, "rank\tobject_id\tloading\tmean_count").map_err(out_err)?;
            for r in ranked {
                writeln!(out, "{}\t{}\t{:.6}\t{:.4}", r.rank, r.object_id, r.loading, r.mean_count).map_err(out_err)?;
            }
        }
    }
    Ok(())
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
