//! Command-line surface. Every subcommand starts from [`RunConfig`]
//! (defaults, or `--config`), applies its flags on top and validates the
//! result before touching any file.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::clustering::{cluster, ClusterMethod};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{read_field, read_labels, write_field, write_labels, Dtype};
use crate::losses::gradcheck::{run_gradcheck, GradCheckConfig};
use crate::metrics::{average_precision, evaluate};
use crate::optim::run_optimization;
use crate::sampling::subsample_objects;
use crate::synth::{blob_field, generate, SceneSpec, Shape};
use crate::types::Supervision;

#[derive(Debug, Parser)]
#[command(name = "emseg", version, about = "Pixel-embedding instance segmentation at desk scale")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a ground-truth label image of non-overlapping blobs.
    Gen(GenArgs),
    /// Optimize an embedding field against a label image.
    Optimize(OptimizeArgs),
    /// Turn an embedding field into instance labels.
    Cluster(ClusterArgs),
    /// Score a predicted label image against ground truth.
    Eval(EvalArgs),
    /// Compare analytic loss gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Time clustering methods on synthetic blob fields.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 48)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub instances: usize,
    #[arg(long, default_value_t = 5.0)]
    pub radius_min: f64,
    #[arg(long, default_value_t = 7.0)]
    pub radius_max: f64,
    #[arg(long, default_value_t = 2.0)]
    pub gap: f64,
    #[arg(long, default_value = "disk")]
    pub shape: Shape,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Supervision>,
    /// Fraction of instances kept as positive labels (sparse mode).
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum_m: Option<f64>,
    #[arg(long)]
    pub kernel_t: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub out_field: Option<PathBuf>,
    #[arg(long)]
    pub out_gfield: Option<PathBuf>,
    #[arg(long)]
    pub history_csv: Option<PathBuf>,
    /// Value type stored in the field files: f32 or f64.
    #[arg(long, default_value = "f64", value_parser = parse_dtype)]
    pub dtype: Dtype,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long)]
    pub gfield: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<ClusterMethod>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub min_size: Option<usize>,
    #[arg(long)]
    pub t_iou: Option<f64>,
    /// Comma-separated long-range strides, e.g. "3,9,27".
    #[arg(long, value_parser = parse_offsets)]
    pub offsets: Option<Offsets>,
    #[arg(long)]
    pub merge_delta_d: Option<f64>,
    #[arg(long)]
    pub fill_noise: bool,
    #[arg(long)]
    pub largest_is_background: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 3)]
    pub instances: usize,
    /// full, sparse, or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
    #[arg(long, default_value_t = 1e-4)]
    pub h: f64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated HxWxC field sizes.
    #[arg(long, default_value = "128x128x16")]
    pub sizes: String,
    #[arg(long, default_value = "mws,meanshift")]
    pub methods: String,
    #[arg(long, default_value_t = 8)]
    pub instances: usize,
    /// Standard deviation of each blob's embeddings around its center.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long)]
    pub out_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Offsets(pub Vec<i64>);

fn parse_offsets(s: &str) -> std::result::Result<Offsets, String> {
    s.split(',')
        .map(|t| t.trim().parse::<i64>().map_err(|e| format!("bad offset {t:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Offsets)
}

fn parse_dtype(s: &str) -> std::result::Result<Dtype, String> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(format!("unknown dtype {other:?}, expected f32 or f64")),
    }
}

/// Parses "HxWxC".
pub fn parse_size(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.trim().split('x').collect();
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("bad size {s:?}, expected HxWxC")))?;
    match dims[..] {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok((h, w, c)),
        _ => Err(Error::InvalidConfig(format!("bad size {s:?}, expected HxWxC"))),
    }
}

fn required<'a>(path: &'a Option<PathBuf>, flag: &str, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::InvalidConfig(format!("missing --{flag} (or `{key}` in the config)")))
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Cli {
    /// Configuration after loading `--config` and applying every flag.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        set(&mut cfg.seed, self.seed);
        match &self.command {
            Command::Gen(a) => {
                if a.out.is_some() {
                    cfg.labels = a.out.clone();
                }
            }
            Command::Optimize(a) => {
                set(&mut cfg.mode, a.mode);
                set(&mut cfg.p, a.p);
                set(&mut cfg.steps, a.steps);
                set(&mut cfg.lr, a.lr);
                set(&mut cfg.momentum_m, a.momentum_m);
                set(&mut cfg.kernel_t, a.kernel_t);
                set(&mut cfg.channels, a.channels);
                set(&mut cfg.labels, a.labels.clone().map(Some));
                set(&mut cfg.field, a.out_field.clone().map(Some));
                set(&mut cfg.gfield, a.out_gfield.clone().map(Some));
            }
            Command::Cluster(a) => {
                set(&mut cfg.method, a.method);
                set(&mut cfg.bandwidth, a.bandwidth);
                set(&mut cfg.min_size, a.min_size);
                set(&mut cfg.t_iou, a.t_iou);
                set(&mut cfg.offsets, a.offsets.clone().map(|o| o.0));
                set(&mut cfg.merge_delta_d, a.merge_delta_d.map(Some));
                cfg.fill_noise |= a.fill_noise;
                cfg.largest_is_background |= a.largest_is_background;
                set(&mut cfg.field, a.field.clone().map(Some));
                set(&mut cfg.gfield, a.gfield.clone().map(Some));
                set(&mut cfg.out, a.out.clone().map(Some));
            }
            Command::Eval(a) => {
                set(&mut cfg.out, a.pred.clone().map(Some));
                set(&mut cfg.labels, a.gt.clone().map(Some));
            }
            Command::Gradcheck(_) | Command::Bench(_) => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sizes the global rayon pool from `EMSEG_THREADS` (unset or 0 = one
/// thread per core).
pub fn init_threads() -> Result<()> {
    let threads = match std::env::var("EMSEG_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidConfig(format!("EMSEG_THREADS must be an integer, got {v:?}")))?,
        Err(_) => 0,
    };
    // a pool that already exists (repeated calls in one process) is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.effective_config()?;
    if cli.print_config {
        out.write_all(cfg.to_toml()?.as_bytes())?;
        return Ok(());
    }
    match &cli.command {
        Command::Gen(a) => run_gen(a, &cfg, out),
        Command::Optimize(a) => run_optimize(a, &cfg, out),
        Command::Cluster(_) => run_cluster(&cfg, out),
        Command::Eval(a) => run_eval(a, &cfg, out),
        Command::Gradcheck(a) => run_gradcheck_cmd(a, &cfg, out),
        Command::Bench(a) => run_bench(a, &cfg, out),
    }
}

fn run_gen(a: &GenArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let spec = SceneSpec {
        height: a.height,
        width: a.width,
        n_instances: a.instances,
        radius_min: a.radius_min,
        radius_max: a.radius_max,
        min_gap: a.gap,
        shape: a.shape,
        seed: cfg.seed(),
    };
    let path = required(&cfg.labels, "out", "labels")?;
    let labels = generate(&spec)?;
    write_labels(path, &labels)?;
    writeln!(out, "wrote {} ({}x{}, {} instances)", path.display(), a.height, a.width, labels.num_instances())?;
    Ok(())
}

#[derive(Serialize)]
struct HistoryRow {
    step: usize,
    l_var: f64,
    l_dist: f64,
    l_reg: f64,
    l_obj: f64,
    l_u_dist: f64,
    l_u_con: f64,
    total: f64,
}

fn run_optimize(a: &OptimizeArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let field_path = required(&cfg.field, "out-field", "field")?;
    let labels = read_labels(required(&cfg.labels, "labels", "labels")?)?;
    let train = match cfg.mode {
        Supervision::Full if cfg.p < 1.0 => {
            return Err(Error::InvalidConfig(format!(
                "p = {} needs --mode sparse; full supervision keeps every instance",
                cfg.p
            )))
        }
        Supervision::Full => labels,
        Supervision::Sparse => subsample_objects(&labels, cfg.p, cfg.seed())?,
    };
    let state = run_optimization(
        &train,
        cfg.channels,
        &cfg.loss_config(),
        &cfg.schedule(),
        &cfg.sampling_spec(),
        cfg.mode,
        cfg.seed(),
    )?;
    write_field(field_path, &state.field_f, a.dtype)?;
    if let Some(g) = &cfg.gfield {
        write_field(g, &state.field_g, a.dtype)?;
    }
    if let Some(path) = &a.history_csv {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        for (step, b) in state.history.iter().enumerate() {
            w.serialize(HistoryRow {
                step,
                l_var: b.l_var,
                l_dist: b.l_dist,
                l_reg: b.l_reg,
                l_obj: b.l_obj,
                l_u_dist: b.l_u_dist,
                l_u_con: b.l_u_con,
                total: b.total,
            })
            .map_err(csv_error)?;
        }
        w.flush()?;
    }
    let last = state.history.last().map_or(f64::NAN, |b| b.total);
    writeln!(out, "mode {} steps {} final_total {last}", cfg.mode, state.step)?;
    Ok(())
}

fn run_cluster(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let field = read_field(required(&cfg.field, "field", "field")?)?;
    let gfield = cfg.gfield.as_ref().map(read_field).transpose()?;
    let path = required(&cfg.out, "out", "out")?;
    let pred = cluster(&field, gfield.as_ref(), &cfg.cluster_params(), cfg.seed())?;
    write_labels(path, &pred)?;
    writeln!(out, "method {} instances {}", cfg.method, pred.num_instances())?;
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    sbd: f64,
    abs_dic: f64,
    arand: f64,
    #[serde(rename = "ap@0.5")]
    ap50: f64,
    map: f64,
}

fn run_eval(a: &EvalArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let pred = read_labels(required(&cfg.out, "pred", "out")?)?;
    let gt = read_labels(required(&cfg.labels, "gt", "labels")?)?;
    let report = evaluate(&pred, &gt, &cfg.thresholds)?;
    let ap50 = match report.ap_at(0.5) {
        Some(v) => v,
        None => average_precision(&pred, &gt, &[0.5])?.1,
    };
    let row = EvalRow {
        sbd: report.sbd,
        abs_dic: report.abs_dic,
        arand: report.arand,
        ap50,
        map: report.map_score,
    };
    let bytes = csv_bytes(std::slice::from_ref(&row))?;
    if let Some(path) = &a.out_csv {
        std::fs::write(path, &bytes)?;
    }
    out.write_all(&bytes)?;
    Ok(())
}

#[derive(Serialize)]
struct GradRow {
    mode: String,
    trial: usize,
    max_rel_err: Option<f64>,
    compared: usize,
    min_hinge_gap: f64,
}

fn run_gradcheck_cmd(a: &GradcheckArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let modes = match a.mode.as_str() {
        "both" => vec![Supervision::Full, Supervision::Sparse],
        m => vec![Supervision::from_str(m)?],
    };
    let loss = cfg.loss_config();
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    let mut passed = true;
    for mode in modes {
        let gc = GradCheckConfig {
            height: a.height,
            width: a.width,
            channels: a.channels,
            instances: a.instances,
            mode,
            h: a.h,
            trials: a.trials,
            seed: cfg.seed(),
            tolerance: a.tolerance,
            ..GradCheckConfig::default()
        };
        let report = run_gradcheck(&gc, &loss)?;
        worst = worst.max(report.max_rel_err);
        passed &= report.passed();
        rows.extend(report.trials.iter().map(|t| GradRow {
            mode: mode.to_string(),
            trial: t.trial,
            max_rel_err: t.max_rel_err,
            compared: t.compared,
            min_hinge_gap: t.min_hinge_gap,
        }));
        writeln!(
            out,
            "# {mode}: max_rel_err {:.3e}, {} of {} trials excluded at hinge boundaries",
            report.max_rel_err,
            report.excluded(),
            report.trials.len()
        )?;
    }
    out.write_all(&csv_bytes(&rows)?)?;
    if passed {
        writeln!(out, "PASS max_rel_err < {:e}", a.tolerance)?;
        Ok(())
    } else {
        writeln!(out, "FAIL max_rel_err = {worst:e} >= {:e}", a.tolerance)?;
        Err(Error::Domain(format!("gradient check failed: max_rel_err {worst:e}")))
    }
}

#[derive(Serialize)]
struct BenchRow {
    height: usize,
    width: usize,
    channels: usize,
    method: String,
    repeat: usize,
    instances: usize,
    seconds: f64,
}

fn run_bench(a: &BenchArgs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let methods: Vec<ClusterMethod> =
        a.methods.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for size in a.sizes.split(',') {
        let (h, w, c) = parse_size(size)?;
        let side = h.min(w) as f64;
        let spec = SceneSpec {
            height: h,
            width: w,
            n_instances: a.instances,
            radius_min: side / 16.0,
            radius_max: side / 10.0,
            seed: cfg.seed(),
            ..SceneSpec::default()
        };
        let labels = generate(&spec)?;
        let field = blob_field(&labels, c, 2.0, a.noise, cfg.seed().derive(1))?;
        for &method in &methods {
            let params = crate::clustering::ClusterParams { method, ..cfg.cluster_params() };
            for repeat in 0..a.repeats {
                let start = Instant::now();
                let pred = cluster(&field, Some(&field), &params, cfg.seed())?;
                let seconds = start.elapsed().as_secs_f64();
                rows.push(BenchRow {
                    height: h,
                    width: w,
                    channels: c,
                    method: method.to_string(),
                    repeat,
                    instances: pred.num_instances(),
                    seconds,
                });
            }
        }
    }
    let bytes = csv_bytes(&rows)?;
    if let Some(path) = &a.out_csv {
        std::fs::write(path, &bytes)?;
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Encode(format!("csv: {other:?}")),
    }
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| Error::Encode(format!("csv: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("emseg").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let cli = parse(&["cluster", "--method", "hdbscan", "--min-size", "200", "--offsets", "3,9", "--fill-noise"]);
        let cfg = cli.effective_config().unwrap();
        assert_eq!(cfg.method, ClusterMethod::Hdbscan);
        assert_eq!(cfg.min_size, 200);
        assert_eq!(cfg.offsets, vec![3, 9]);
        assert!(cfg.fill_noise && !cfg.largest_is_background);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let cli = parse(&["optimize", "--kernel-t", "0.99"]);
        assert!(matches!(cli.effective_config(), Err(Error::InvalidConfig(_))));
        assert!(Cli::try_parse_from(["emseg", "cluster", "--method", "kmeans"]).is_err());
        assert!(Cli::try_parse_from(["emseg", "cluster", "--offsets", "3,x"]).is_err());
    }

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("128x64x16").unwrap(), (128, 64, 16));
        assert!(parse_size("128x64").is_err());
        assert!(parse_size("0x4x4").is_err());
    }

    #[test]
    fn print_config_echoes_toml() {
        let cli = parse(&["--print-config", "--seed", "7", "cluster", "--min-size", "200"]);
        let mut buf = Vec::new();
        run(&cli, &mut buf).unwrap();
        let cfg = RunConfig::from_toml(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(cfg.min_size, 200);
        assert_eq!(cfg.seed, 7);
    }
}
