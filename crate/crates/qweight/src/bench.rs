//! Wall-time comparison of the sequential and pipelined products.

use std::io::Write;

use qweight_core::metrics::storage_bits_actual;
use qweight_core::PackedLayer;

use crate::error::{Error, Result};
use crate::pipeline::{matvec_pipelined, matvec_sequential, MatvecResult};

pub const CSV_HEADER: [&str; 11] = [
    "rows", "cols", "avg_bit", "workers", "mode", "wall_ns", "stage1_ns", "stage2_ns", "stage3_ns",
    "stage4_ns", "gflops",
];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub rows: usize,
    pub cols: usize,
    pub avg_bit: f64,
    pub workers: usize,
    pub mode: &'static str,
    pub wall_ns: u64,
    pub stage_ns: [u64; 4],
    pub gflops: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub sequential: BenchRow,
    pub pipelined: BenchRow,
    /// Packed payload bytes plus activation and output bytes.
    pub bytes_touched: u64,
    pub repetitions: usize,
}

impl BenchReport {
    /// Pipelined over sequential wall time.
    pub fn ratio(&self) -> f64 {
        self.pipelined.wall_ns as f64 / self.sequential.wall_ns as f64
    }

    /// Rows produced per second by the pipelined path.
    pub fn rows_per_second(&self) -> f64 {
        self.pipelined.rows as f64 * 1e9 / self.pipelined.wall_ns as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in [&self.sequential, &self.pipelined] {
            w.write_record([
                r.rows.to_string(),
                r.cols.to_string(),
                format!("{:.6}", r.avg_bit),
                r.workers.to_string(),
                r.mode.to_string(),
                r.wall_ns.to_string(),
                r.stage_ns[0].to_string(),
                r.stage_ns[1].to_string(),
                r.stage_ns[2].to_string(),
                r.stage_ns[3].to_string(),
                format!("{:.6}", r.gflops),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn row_of(layer: &PackedLayer, avg_bit: f64, mode: &'static str, r: &MatvecResult) -> BenchRow {
    let flops = 2.0 * layer.rows() as f64 * layer.in_channels() as f64;
    let s = r.stages;
    BenchRow {
        rows: layer.rows(),
        cols: layer.in_channels(),
        avg_bit,
        workers: r.workers,
        mode,
        wall_ns: r.wall_ns,
        stage_ns: [s.preload_ns, s.decode_ns, s.overlap_ns, s.reduce_ns],
        gflops: flops / r.wall_ns.max(1) as f64,
    }
}

/// Runs both paths `repetitions` times, interleaved, and keeps the fastest
/// run of each.
pub fn bench_matvec(layer: &PackedLayer, x: &[f32], repetitions: usize, workers: usize) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::Input("bench needs at least one repetition".into()));
    }
    let report = storage_bits_actual(layer);
    let mut best_seq: Option<MatvecResult> = None;
    let mut best_pipe: Option<MatvecResult> = None;
    for _ in 0..repetitions {
        let s = matvec_sequential(layer, x)?;
        let p = matvec_pipelined(layer, x, workers)?;
        if s.y != p.y {
            return Err(Error::Input("pipelined result differs from the sequential one".into()));
        }
        if best_seq.as_ref().is_none_or(|b| s.wall_ns < b.wall_ns) {
            best_seq = Some(s);
        }
        if best_pipe.as_ref().is_none_or(|b| p.wall_ns < b.wall_ns) {
            best_pipe = Some(p);
        }
    }
    let avg_bit = report.actual_container_bit;
    let bytes_touched = report.total_bits() / 8 + 4 * (layer.rows() + layer.in_channels()) as u64;
    Ok(BenchReport {
        sequential: row_of(layer, avg_bit, "sequential", &best_seq.unwrap()),
        pipelined: row_of(layer, avg_bit, "pipelined", &best_pipe.unwrap()),
        bytes_touched,
        repetitions,
    })
}
