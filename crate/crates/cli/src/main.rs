mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};

use rsbnn_core::data::{
    self, append_csv, benchmark, generate_channels, generate_labels, load_beam_labels, load_blackbox, load_dataset,
    load_dual_labels, save_beam_labels, save_blackbox, save_dataset, save_dual_labels, BlackboxModel, ChannelParams,
    Dataset, Scheme,
};
use rsbnn_core::rsbnn::{load_model, save_model, train, Learner, TrainConfig, TrainHistory, UnfoldConfig, UnfoldModel};
use rsbnn_core::{fp_hfpi_solve, HfpiConfig, SystemConfig};

/// Rate-splitting beamforming: FP-HFPI solver, RS-BNN training and benchmarks.
///
/// Every subcommand also reads `--config <file>` with `flag=value` lines;
/// flags given on the command line override the file.
#[derive(Parser)]
#[command(name = "rsbnn", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a channel dataset.
    GenData(GenData),
    /// Solve every sample with FP-HFPI and store dual and beamformer labels.
    Labels(LabelsCmd),
    /// Solve every sample and write a per-sample report.
    Solve(Solve),
    /// Train the unfolded network.
    Train(TrainCmd),
    /// Train the dense black-box baseline.
    TrainBlackbox(TrainBlackbox),
    /// Compare schemes on a dataset and append the results to a CSV file.
    Bench(Bench),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    k: usize,
    #[arg(long)]
    nt: usize,
    #[arg(long)]
    snr_db: f64,
    #[arg(long)]
    samples: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Cell radius in meters.
    #[arg(long, default_value_t = 100.0)]
    radius: f64,
    /// Path-loss reference distance in meters.
    #[arg(long, default_value_t = 30.0)]
    d0: f64,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    /// Minimum user distance in meters.
    #[arg(long, default_value_t = 1.0)]
    min_distance: f64,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 0.1)]
    rho: f64,
    #[arg(long, default_value_t = 1e-5)]
    inner_tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    outer_tol: f64,
    #[arg(long, default_value_t = 500)]
    max_inner: usize,
    #[arg(long, default_value_t = 2000)]
    max_outer: usize,
}

impl SolverArgs {
    fn config(&self) -> HfpiConfig {
        HfpiConfig {
            rho: self.rho,
            inner_tol: self.inner_tol,
            outer_tol: self.outer_tol,
            max_inner: self.max_inner,
            max_outer: self.max_outer,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct LabelsCmd {
    #[arg(long)]
    data: PathBuf,
    /// Dual labels.
    #[arg(long)]
    out: PathBuf,
    /// Beamformer labels for train-blackbox [default: <out>.p]
    #[arg(long)]
    out_p: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct Solve {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "fp-hfpi")]
    algo: String,
    #[arg(long)]
    report: PathBuf,
    /// Add a wall-time column (the report is then no longer reproducible).
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 1000)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 50)]
    sup_epochs: usize,
    #[arg(long, default_value_t = 150)]
    unsup_epochs: usize,
    #[arg(long, default_value_t = 7)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    validation_fraction: f64,
    /// Per-epoch losses as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            learning_rate: self.lr,
            supervised_epochs: self.sup_epochs,
            unsupervised_epochs: self.unsup_epochs,
            patience: self.patience,
            seed: self.seed,
            validation_fraction: self.validation_fraction,
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    model_out: PathBuf,
    #[arg(long, default_value_t = 5)]
    layers: usize,
    #[arg(long, default_value_t = 512)]
    hidden: usize,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Stop gradients at the auxiliary variables.
    #[arg(long)]
    detach_aux: bool,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct TrainBlackbox {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    labels_p: PathBuf,
    #[arg(long)]
    model_out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct Bench {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "fp-hfpi")]
    schemes: Vec<String>,
    /// `scheme=path` pairs, or bare paths taken in the order of the learned
    /// schemes in --schemes.
    #[arg(long, value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn gen_data(a: &GenData) -> Result<()> {
    let cfg = SystemConfig::from_snr_db(a.nt, a.k, a.snr_db)?;
    let params = ChannelParams {
        cell_radius: a.radius,
        ref_distance: a.d0,
        pathloss_exponent: a.alpha,
        min_distance: a.min_distance,
    };
    let d = generate_channels(&cfg, &params, a.samples, a.seed)?;
    save_dataset(&d, &a.out)?;
    eprintln!("wrote {} samples to {}", d.len(), a.out.display());
    Ok(())
}

fn labels(a: &LabelsCmd) -> Result<()> {
    let d = load(&a.data)?;
    let set = generate_labels(&d, &a.solver.config())?;
    let out_p = a.out_p.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".p");
        p.into()
    });
    save_dual_labels(&set.duals, &a.out)?;
    save_beam_labels(&set.beams, &out_p)?;
    eprintln!(
        "labelled {} of {} samples ({} excluded); duals in {}, beamformers in {}",
        d.len() - set.excluded,
        d.len(),
        set.excluded,
        a.out.display(),
        out_p.display()
    );
    Ok(())
}

fn solve(a: &Solve) -> Result<()> {
    if a.algo != "fp-hfpi" {
        bail!("unknown algorithm {:?} (only fp-hfpi)", a.algo);
    }
    let d = load(&a.data)?;
    let cfg = d.system_config()?;
    let hcfg = a.solver.config();
    let mut w = csv::Writer::from_path(&a.report).with_context(|| format!("creating {}", a.report.display()))?;
    let mut header = vec![
        "sample",
        "sum_rate",
        "common_rate",
        "outer_iters",
        "mean_inner_iters",
        "inner_capped",
        "converged",
    ];
    if a.timing {
        header.push("wall_time_s");
    }
    w.write_record(&header)?;
    let mut total = 0.0;
    for (i, s) in d.samples.iter().enumerate() {
        let sol = fp_hfpi_solve(&cfg, s, &hcfg).with_context(|| format!("sample {i}"))?;
        let diag = &sol.diagnostics;
        total += sol.rates.sum_rate;
        let mut rec = vec![
            i.to_string(),
            sol.rates.sum_rate.to_string(),
            sol.rates.common_rate.to_string(),
            diag.outer_iters.to_string(),
            diag.mean_inner_iters().to_string(),
            diag.inner_capped.to_string(),
            diag.converged.to_string(),
        ];
        if a.timing {
            rec.push(diag.wall_time.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    eprintln!("mean sum rate {:.4} bit/s/Hz over {} samples", total / d.len() as f64, d.len());
    Ok(())
}

fn write_history(path: &Path, h: &TrainHistory) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["phase", "epoch", "train_loss", "validation_loss", "validation_sr"])?;
    for e in &h.epochs {
        w.write_record([
            e.phase.name().to_string(),
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.validation_loss.to_string(),
            e.validation_sr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn report(h: &TrainHistory, args: &TrainArgs) -> Result<()> {
    for e in &h.epochs {
        eprintln!(
            "{:>12} epoch {:>3}: train loss {:.6}, validation loss {:.6}, validation SR {:.4}",
            e.phase.name(),
            e.epoch,
            e.train_loss,
            e.validation_loss,
            e.validation_sr
        );
    }
    for p in &h.early_stops {
        eprintln!("{} phase stopped early", p.name());
    }
    if let Some(path) = &args.history {
        write_history(path, h)?;
    }
    Ok(())
}

fn fit<M: Learner>(model: &mut M, d: &Dataset, labels: &[Option<M::Label>], args: &TrainArgs) -> Result<()> {
    let cfg = d.system_config()?;
    let n = labels.iter().filter(|l| l.is_some()).count();
    eprintln!("training on {} samples ({} labelled)", d.len(), n);
    let history = train(model, &cfg, &d.samples, labels, &args.config())?;
    report(&history, args)
}

fn train_unfolded(a: &TrainCmd) -> Result<()> {
    let d = load(&a.data)?;
    let labels = load_dual_labels(&a.labels).with_context(|| format!("loading labels {}", a.labels.display()))?;
    labels.key.check(&d)?;
    let config = UnfoldConfig {
        num_layers: a.layers,
        hidden_dim: a.hidden,
        epsilon: a.epsilon,
        detach_aux: a.detach_aux,
    };
    let cfg = d.system_config()?;
    let mut model = UnfoldModel::new(cfg.num_users, cfg.num_tx_antennas, config, a.train.seed)?;
    fit(&mut model, &d, &labels.labels, &a.train)?;
    save_model(&model, &a.model_out)?;
    eprintln!("saved model to {}", a.model_out.display());
    Ok(())
}

fn train_blackbox(a: &TrainBlackbox) -> Result<()> {
    let d = load(&a.data)?;
    let labels = load_beam_labels(&a.labels_p).with_context(|| format!("loading labels {}", a.labels_p.display()))?;
    labels.key.check(&d)?;
    let cfg = d.system_config()?;
    let mut model = BlackboxModel::new(cfg.num_users, cfg.num_tx_antennas, a.train.seed)?;
    fit(&mut model, &d, &labels.beams, &a.train)?;
    save_blackbox(&model, &a.model_out)?;
    eprintln!("saved model to {}", a.model_out.display());
    Ok(())
}

fn canonical_scheme(name: &str) -> Result<&'static str> {
    Ok(match name.trim() {
        "fp-hfpi" => "fp-hfpi",
        "rs-bnn" => "rs-bnn",
        "blackbox" | "blackbox-mlp" => data::blackbox::SCHEME_NAME,
        other => bail!("unknown scheme {other:?} (expected fp-hfpi, rs-bnn or blackbox-mlp)"),
    })
}

/// Pairs every learned scheme with its model path.
fn model_paths(schemes: &[&'static str], models: &[String]) -> Result<Vec<(&'static str, PathBuf)>> {
    let learned: Vec<&'static str> = schemes.iter().copied().filter(|s| *s != "fp-hfpi").collect();
    let mut out = Vec::new();
    let mut bare = Vec::new();
    for m in models.iter().filter(|m| !m.trim().is_empty()) {
        match m.split_once('=') {
            Some((s, p)) => out.push((canonical_scheme(s)?, PathBuf::from(p))),
            None => bare.push(PathBuf::from(m)),
        }
    }
    let unassigned: Vec<&'static str> = learned.iter().copied().filter(|s| !out.iter().any(|(o, _)| o == s)).collect();
    if bare.len() > unassigned.len() {
        bail!("{} model paths given for {} learned schemes", bare.len() + out.len(), learned.len());
    }
    out.extend(unassigned.iter().copied().zip(bare));
    for s in &learned {
        if !out.iter().any(|(o, _)| o == s) {
            bail!("scheme {s} needs a model file (--models {s}=<path>)");
        }
    }
    out.retain(|(s, _)| learned.contains(s));
    Ok(out)
}

fn bench(a: &Bench) -> Result<()> {
    let schemes: Vec<&'static str> = a.schemes.iter().map(|s| canonical_scheme(s)).collect::<Result<_>>()?;
    let paths = model_paths(&schemes, &a.models)?;
    for (_, p) in &paths {
        if !p.is_file() {
            bail!("model file {} does not exist", p.display());
        }
    }
    let d = load(&a.data)?;
    let mut runs = Vec::new();
    for s in &schemes {
        let path = paths.iter().find(|(o, _)| o == s).map(|(_, p)| p.as_path());
        runs.push(match (*s, path) {
            ("fp-hfpi", _) => Scheme::FpHfpi(a.solver.config()),
            ("rs-bnn", Some(p)) => Scheme::RsBnn(load_model(p).with_context(|| format!("loading {}", p.display()))?),
            (_, Some(p)) => Scheme::Blackbox(load_blackbox(p).with_context(|| format!("loading {}", p.display()))?),
            (s, None) => bail!("scheme {s} needs a model file"),
        });
    }
    let rows = benchmark(&d, &runs)?;
    for r in &rows {
        eprintln!(
            "{:>13}: mean SR {:.4} (std {:.4}), mean time {:.3e} s, median {:.3e} s, {}",
            r.scheme, r.mean_sr, r.std_sr, r.mean_time_s, r.median_time_s, r.extra
        );
    }
    append_csv(&a.out, &rows)?;
    Ok(())
}

fn main() -> Result<()> {
    let args = config::expand_args(&Cli::command(), std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Labels(a) => labels(a),
        Command::Solve(a) => solve(a),
        Command::Train(a) => train_unfolded(a),
        Command::TrainBlackbox(a) => train_blackbox(a),
        Command::Bench(a) => bench(a),
    }
}
