//! Command-line front end.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;
use qweight_core::metrics::{storage_bits_actual, BitReport};
use qweight_core::{quantize_layer, CalibrationVector, QuantConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::{bench, container, io, pipeline, report, synth, verify};

#[derive(Debug, Parser)]
#[command(name = "qweight", version, about = "Mixed 2/4-bit weight quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct QuantArgs {
    /// Fraction of input channels kept at 4 bits.
    #[arg(long, default_value_t = 0.25)]
    pub alpha: f64,
    #[arg(long, default_value_t = 16)]
    pub g1: usize,
    #[arg(long, default_value_t = 16)]
    pub g2: usize,
    #[arg(long, default_value_t = 4)]
    pub n2: u32,
    /// Fraction of all weights stored as sparse outliers.
    #[arg(long, default_value_t = 0.002)]
    pub outlier_ratio: f64,
}

impl From<&QuantArgs> for QuantConfig {
    fn from(a: &QuantArgs) -> Self {
        QuantConfig {
            alpha: a.alpha,
            g1: a.g1,
            g2: a.g2,
            n2: a.n2,
            outlier_ratio: a.outlier_ratio,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write seeded Gaussian weights as raw little-endian f32.
    Synth {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = synth::DEFAULT_SIGMA)]
        sigma: f32,
        /// Fraction of weights replaced by large planted outliers.
        #[arg(long, default_value_t = 0.0)]
        planted: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize a weight file (or seeded synthetic weights) into a container.
    Quantize {
        /// Raw f32 weights, row-major. Synthetic weights when omitted.
        weights: Option<PathBuf>,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[command(flatten)]
        quant: QuantArgs,
        /// Per-channel calibration values, raw f32. Identity when omitted.
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a container against the original weights.
    Verify { packed: PathBuf, weights: PathBuf },
    /// Multiply a container by an activation vector.
    Matvec {
        packed: PathBuf,
        activation: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time sequential and pipelined products and write the CSV.
    Bench {
        packed: PathBuf,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV path. Standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write range, error and bit reports as CSV.
    Report {
        packed: PathBuf,
        weights: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    VerificationFailed,
}

pub fn print_bits<W: Write>(mut out: W, r: &BitReport) -> std::io::Result<()> {
    writeln!(out, "formula_bit_1order   {:.6}", r.formula_bit_1order)?;
    writeln!(out, "formula_bit_2order   {:.6}", r.formula_bit_2order)?;
    writeln!(out, "formula_bit_mixed    {:.8}", r.formula_bit_mixed)?;
    writeln!(out, "outlier_overhead_bit {:.6}", r.outlier_overhead_bit)?;
    writeln!(out, "actual_container_bit {:.6}", r.actual_container_bit)?;
    for c in &r.components {
        writeln!(out, "  {:<16} {:.6}", c.name, r.component_bit(c))?;
    }
    Ok(())
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Synth { rows, cols, seed, sigma, planted, out } => {
            let mut w = synth::gaussian(rows, cols, sigma, seed)?;
            if planted > 0.0 {
                let count = (planted * (rows * cols) as f64).round() as usize;
                w = synth::plant_outliers(&w, count, 20.0 * sigma, None, seed ^ 0x9e37_79b9)?.0;
            }
            io::write_f32(&out, w.data())?;
            info!("wrote {rows}x{cols} weights to {}", out.display());
        }
        Command::Quantize { weights, rows, cols, quant, calib, seed, out } => {
            let w = match &weights {
                Some(p) => io::load_weights(p, rows, cols)?,
                None => {
                    writeln!(stdout, "weights: synthetic gaussian, seed {seed}").map_err(stdout_err)?;
                    synth::gaussian(rows, cols, synth::DEFAULT_SIGMA, seed)?
                }
            };
            let h = match &calib {
                Some(p) => io::load_calibration(p, cols)?,
                None => {
                    writeln!(stdout, "calibration: identity").map_err(stdout_err)?;
                    CalibrationVector::identity(cols)
                }
            };
            let layer = quantize_layer(&w, &h, &QuantConfig::from(&quant))?;
            container::write(&out, &layer)?;
            writeln!(
                stdout,
                "wrote {} ({} outliers, {} 4-bit channels)",
                out.display(),
                layer.outliers().nnz(),
                layer.plan().n4()
            )
            .map_err(stdout_err)?;
            print_bits(&mut stdout, &storage_bits_actual(&layer)).map_err(stdout_err)?;
        }
        Command::Verify { packed, weights } => {
            let bytes = std::fs::read(&packed).map_err(|e| Error::io(&packed, e))?;
            let h = container::read_header(&bytes)?;
            let w = io::load_weights(
                &weights,
                h.config.out_channels as usize,
                h.config.in_channels as usize,
            )?;
            let report = verify::verify(&bytes, &w)?;
            for c in &report.checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                writeln!(stdout, "{status} {}: {}", c.name, c.detail).map_err(stdout_err)?;
            }
            if !report.passed() {
                return Ok(Outcome::VerificationFailed);
            }
        }
        Command::Matvec { packed, activation, workers, out } => {
            let layer = container::read(&packed)?;
            let x = io::read_f32(&activation)?;
            let r = pipeline::matvec_pipelined(&layer, &x, workers)?;
            io::write_f32(&out, &r.y)?;
            info!("matvec {} rows in {} ns", r.y.len(), r.wall_ns);
        }
        Command::Bench { packed, workers, reps, seed, out } => {
            let layer = container::read(&packed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f32> = (0..layer.in_channels()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = bench::bench_matvec(&layer, &x, reps, workers)?;
            match &out {
                Some(p) => {
                    let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
                    r.write_csv(f)?;
                }
                None => r.write_csv(&mut stdout)?,
            }
            info!(
                "pipelined/sequential {:.3}, {:.0} rows/s, {} bytes touched",
                r.ratio(),
                r.rows_per_second(),
                r.bytes_touched
            );
        }
        Command::Report { packed, weights, bins, out } => {
            let layer = container::read(&packed)?;
            let w = io::load_weights(&weights, layer.rows(), layer.in_channels())?;
            for p in report::write_all(&out, &w, &layer, bins)? {
                writeln!(stdout, "wrote {}", p.display()).map_err(stdout_err)?;
            }
        }
    }
    Ok(Outcome::Success)
}
