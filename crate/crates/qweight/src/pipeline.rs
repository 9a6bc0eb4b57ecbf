//! Timed matrix-vector products: the sequential reference and a row-parallel
//! path that decodes the next row while the current one accumulates.

use std::time::Instant;

use qweight_core::engine::{dot_row, permute_activation, RowCodes, RowDecoder};
use qweight_core::{matvec_oracle, Accumulation, PackedLayer};

use crate::error::{Error, Result};

/// Nanoseconds spent per stage, summed over workers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageTimes {
    /// Second-order parameter loads.
    pub preload_ns: u64,
    /// Scale dequantization and code unpacking of the next row.
    pub decode_ns: u64,
    /// First-order dequantization of the next row interleaved with the dot
    /// product of the current one. The two share a loop, so they are timed
    /// together.
    pub overlap_ns: u64,
    /// Outlier terms and the final store.
    pub reduce_ns: u64,
}

impl StageTimes {
    pub fn total(&self) -> u64 {
        self.preload_ns + self.decode_ns + self.overlap_ns + self.reduce_ns
    }

    fn add(&mut self, o: &StageTimes) {
        self.preload_ns += o.preload_ns;
        self.decode_ns += o.decode_ns;
        self.overlap_ns += o.overlap_ns;
        self.reduce_ns += o.reduce_ns;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatvecResult {
    pub y: Vec<f32>,
    pub wall_ns: u64,
    pub workers: usize,
    pub stages: StageTimes,
}

fn elapsed(t: Instant) -> u64 {
    t.elapsed().as_nanos() as u64
}

/// Sequential reference product with wall time only.
pub fn matvec_sequential(layer: &PackedLayer, x: &[f32]) -> Result<MatvecResult> {
    let t = Instant::now();
    let y = matvec_oracle(layer, x, Accumulation::F32)?;
    Ok(MatvecResult {
        y,
        wall_ns: elapsed(t),
        workers: 1,
        stages: StageTimes::default(),
    })
}

struct Slot {
    codes: RowCodes,
    weights: Vec<f32>,
}

/// Stopwatch charging the time since the previous mark to one stage.
struct Marks(Instant);

impl Marks {
    fn lap(&mut self, stage: &mut u64) {
        let now = Instant::now();
        *stage += (now - self.0).as_nanos() as u64;
        self.0 = now;
    }
}

fn run_rows(layer: &PackedLayer, xp: &[f32], first: usize, out: &mut [f32]) -> StageTimes {
    let mut t = StageTimes::default();
    if out.is_empty() {
        return t;
    }
    let dec = RowDecoder::new(layer);
    let mut params = dec.block_params();
    let [mut cur, mut next] = [0, 1].map(|_| Slot {
        codes: dec.row_codes(),
        weights: dec.row_buffer(),
    });
    let mut clock = Marks(Instant::now());
    dec.ensure_block(first, &mut params);
    clock.lap(&mut t.preload_ns);
    dec.decode_row(first, &params, &mut cur.codes);
    clock.lap(&mut t.decode_ns);
    dec.dequantize_row(&cur.codes, &mut cur.weights);
    clock.lap(&mut t.overlap_ns);
    let n = out.len();
    for (i, y) in out.iter_mut().enumerate() {
        let acc = if i + 1 < n {
            let row = first + i + 1;
            dec.ensure_block(row, &mut params);
            clock.lap(&mut t.preload_ns);
            dec.decode_row(row, &params, &mut next.codes);
            clock.lap(&mut t.decode_ns);
            dec.dequantize_overlapped(&next.codes, &mut next.weights, &cur.weights, xp)
        } else {
            dot_row(&cur.weights, xp)
        };
        clock.lap(&mut t.overlap_ns);
        *y = layer.outliers().accumulate_row(first + i, xp, acc);
        clock.lap(&mut t.reduce_ns);
        std::mem::swap(&mut cur, &mut next);
    }
    t
}

/// Rows split into `workers` contiguous ranges, one thread each. Within a
/// thread two row slots alternate: while row `r` is accumulated, row `r + 1`
/// is dequantized into the other slot in the same loop. The result is
/// bitwise equal to the sequential one.
pub fn matvec_pipelined(layer: &PackedLayer, x: &[f32], workers: usize) -> Result<MatvecResult> {
    if workers == 0 {
        return Err(Error::Input("workers must be at least 1".into()));
    }
    let t = Instant::now();
    let xp = permute_activation(layer, x)?;
    let rows = layer.rows();
    let mut y = vec![0.0f32; rows];
    let chunk = rows.div_ceil(workers).max(1);
    let mut stages = StageTimes::default();
    if workers == 1 {
        stages = run_rows(layer, &xp, 0, &mut y);
    } else {
        let per_worker: Vec<StageTimes> = std::thread::scope(|s| {
            let handles: Vec<_> = y
                .chunks_mut(chunk)
                .enumerate()
                .map(|(i, out)| {
                    let xp = &xp;
                    s.spawn(move || run_rows(layer, xp, i * chunk, out))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        per_worker.iter().for_each(|w| stages.add(w));
    }
    Ok(MatvecResult {
        y,
        wall_ns: elapsed(t),
        workers,
        stages,
    })
}
