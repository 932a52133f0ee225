//! Sum-rate and timing comparison of the solver and the learned schemes.
//!
//! Timing is wall clock around one call per sample on the calling thread;
//! the first [`WARMUP`] samples are left out of the timing (but not of the
//! sum rate).

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::hfpi::{fp_hfpi_solve, HfpiConfig};
use crate::model::{rate_report, BeamMatrix, ChannelSample, SystemConfig};
use crate::rsbnn::{unfold_forward, UnfoldModel};

use super::blackbox::{BlackboxModel, SCHEME_NAME as BLACKBOX_NAME};
use super::channel::Dataset;

pub const WARMUP: usize = 3;
pub const SCHEMA_LINE: &str = "# rsbnn-bench schema 1";
pub const COLUMNS: [&str; 9] = [
    "scheme",
    "K",
    "N_t",
    "snr_db",
    "mean_sr",
    "std_sr",
    "mean_time_s",
    "median_time_s",
    "extra",
];

pub enum Scheme {
    FpHfpi(HfpiConfig),
    RsBnn(UnfoldModel),
    Blackbox(BlackboxModel),
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::FpHfpi(_) => "fp-hfpi",
            Scheme::RsBnn(_) => "rs-bnn",
            Scheme::Blackbox(_) => BLACKBOX_NAME,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub scheme: String,
    pub num_users: usize,
    pub num_tx_antennas: usize,
    pub snr_db: f64,
    pub mean_sr: f64,
    pub std_sr: f64,
    pub mean_time_s: f64,
    pub median_time_s: f64,
    pub extra: String,
}

impl BenchRow {
    fn record(&self) -> [String; 9] {
        [
            self.scheme.clone(),
            self.num_users.to_string(),
            self.num_tx_antennas.to_string(),
            self.snr_db.to_string(),
            self.mean_sr.to_string(),
            self.std_sr.to_string(),
            self.mean_time_s.to_string(),
            self.median_time_s.to_string(),
            self.extra.clone(),
        ]
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Runs `scheme` on every sample.
pub fn run_scheme(scheme: &Scheme, cfg: &SystemConfig, samples: &[ChannelSample]) -> Result<BenchRow> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to benchmark"));
    }
    let mut rates = Vec::with_capacity(samples.len());
    let mut times = Vec::with_capacity(samples.len());
    let (mut outer, mut inner, mut converged) = (0.0, 0.0, 0);
    for ch in samples {
        let (beams, dt): (BeamMatrix, f64) = match scheme {
            Scheme::FpHfpi(hcfg) => {
                let (sol, dt) = timed(|| fp_hfpi_solve(cfg, ch, hcfg))?;
                outer += sol.diagnostics.outer_iters as f64;
                inner += sol.diagnostics.mean_inner_iters();
                converged += sol.diagnostics.converged as usize;
                (sol.beams, dt)
            }
            Scheme::RsBnn(model) => {
                let (trace, dt) = timed(|| unfold_forward(model, cfg, ch))?;
                (trace.output().clone(), dt)
            }
            Scheme::Blackbox(model) => timed(|| model.infer(cfg, ch))?,
        };
        rates.push(rate_report(cfg, ch, &beams)?.sum_rate);
        times.push(dt);
    }
    let n = samples.len();
    let timed_part = if n > WARMUP { &times[WARMUP..] } else { &times[..] };
    let (mean_sr, std_sr) = mean_std(&rates);
    let extra = match scheme {
        Scheme::FpHfpi(_) => format!(
            "mean_outer={:.2};mean_inner={:.2};converged={converged}/{n}",
            outer / n as f64,
            inner / n as f64
        ),
        Scheme::RsBnn(m) => format!("layers={};hidden={}", m.config.num_layers, m.config.hidden_dim),
        Scheme::Blackbox(m) => format!("dense;hidden={}", m.hidden_dim),
    };
    Ok(BenchRow {
        scheme: scheme.name().to_string(),
        num_users: cfg.num_users,
        num_tx_antennas: cfg.num_tx_antennas,
        snr_db: cfg.snr_db,
        mean_sr,
        std_sr,
        mean_time_s: mean_std(timed_part).0,
        median_time_s: median(timed_part),
        extra,
    })
}

pub fn benchmark(dataset: &Dataset, schemes: &[Scheme]) -> Result<Vec<BenchRow>> {
    let cfg = dataset.system_config()?;
    schemes.iter().map(|s| run_scheme(s, &cfg, &dataset.samples)).collect()
}

/// Appends `rows` to `path`.  A new or empty file first gets the schema line
/// and the header; an existing file must start with both.
pub fn append_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let header = COLUMNS.join(",");
    let fresh = match std::fs::File::open(path) {
        Ok(f) => {
            let mut lines = BufReader::new(f).lines();
            match lines.next().transpose().map_err(|e| Error::io(path, e))? {
                None => true,
                Some(first) => {
                    let second = lines.next().transpose().map_err(|e| Error::io(path, e))?;
                    if first != SCHEMA_LINE || second.as_deref() != Some(header.as_str()) {
                        return Err(Error::invalid(format!(
                            "{} is not a benchmark file of this schema (expected first line {SCHEMA_LINE:?})",
                            path.display()
                        )));
                    }
                    false
                }
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => true,
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(file, "{SCHEMA_LINE}").map_err(|e| Error::io(path, e))?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let to_err = |e: csv::Error| Error::invalid(format!("writing {}: {e}", path.display()));
    if fresh {
        w.write_record(COLUMNS).map_err(to_err)?;
    }
    for row in rows {
        w.write_record(row.record()).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows of a benchmark file written by [`append_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body = text
        .strip_prefix(SCHEMA_LINE)
        .ok_or_else(|| Error::invalid(format!("{} lacks the schema line", path.display())))?;
    let mut r = csv::Reader::from_reader(body.trim_start().as_bytes());
    let bad = |e: &dyn std::fmt::Display| Error::invalid(format!("{}: {e}", path.display()));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(&e))?;
        if rec.len() != COLUMNS.len() {
            return Err(bad(&format!("expected {} columns, got {}", COLUMNS.len(), rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(&e));
        let int = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(&e));
        rows.push(BenchRow {
            scheme: rec[0].to_string(),
            num_users: int(1)?,
            num_tx_antennas: int(2)?,
            snr_db: num(3)?,
            mean_sr: num(4)?,
            std_sr: num(5)?,
            mean_time_s: num(6)?,
            median_time_s: num(7)?,
            extra: rec[8].to_string(),
        });
    }
    Ok(rows)
}
