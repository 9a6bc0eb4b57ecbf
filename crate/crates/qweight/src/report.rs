//! CSV reports: group ranges, range histogram, error statistics and bits.

use std::io::Write;
use std::path::{Path, PathBuf};

use qweight_core::metrics::{
    group_range_report, quant_error_stats, range_histogram, storage_bits_actual, BitReport,
    ErrorStats, GroupRangeEntry, HistogramBin,
};
use qweight_core::plan::GROUP;
use qweight_core::{PackedLayer, WeightMatrix};

use crate::error::{Error, Result};

pub fn write_group_ranges<W: Write>(out: W, entries: &[GroupRangeEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "group", "min", "max", "range"])?;
    for e in entries {
        w.write_record([
            e.row.to_string(),
            e.group.to_string(),
            e.min.to_string(),
            e.max.to_string(),
            e.range.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_histogram<W: Write>(out: W, bins: &[HistogramBin]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lo", "hi", "count"])?;
    for b in bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// One `layer` line, then one line per group scoped `row:group`.
pub fn write_error_stats<W: Write>(out: W, stats: &ErrorStats) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scope", "mse", "max_abs_err"])?;
    w.write_record(["layer".to_string(), stats.mse.to_string(), stats.max_abs_err.to_string()])?;
    for g in &stats.groups {
        w.write_record([
            format!("{}:{}", g.row, g.group),
            g.mse.to_string(),
            g.max_abs_err.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Stored components first, then their total, then the formula figures.
pub fn write_bits<W: Write>(out: W, report: &BitReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["component", "bits_per_weight"])?;
    for c in &report.components {
        w.write_record([c.name.to_string(), report.component_bit(c).to_string()])?;
    }
    for (name, v) in [
        ("actual_container", report.actual_container_bit),
        ("formula_1order", report.formula_bit_1order),
        ("formula_2order", report.formula_bit_2order),
        ("formula_mixed", report.formula_bit_mixed),
        ("outlier_overhead", report.outlier_overhead_bit),
    ] {
        w.write_record([name.to_string(), v.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<(std::fs::File, PathBuf)> {
    let path = dir.join(name);
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((f, path))
}

/// Writes all four reports into `dir` and returns their paths.
pub fn write_all(dir: &Path, w: &WeightMatrix, layer: &PackedLayer, bins: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = group_range_report(w, layer.plan(), GROUP)?;
    let stats = quant_error_stats(w, layer)?;
    let bits = storage_bits_actual(layer);
    let mut paths = Vec::new();
    let (f, p) = create(dir, "group_range.csv")?;
    write_group_ranges(f, &entries)?;
    paths.push(p);
    let (f, p) = create(dir, "range_hist.csv")?;
    write_histogram(f, &range_histogram(&entries, bins)?)?;
    paths.push(p);
    let (f, p) = create(dir, "error_stats.csv")?;
    write_error_stats(f, &stats)?;
    paths.push(p);
    let (f, p) = create(dir, "bits.csv")?;
    write_bits(f, &bits)?;
    paths.push(p);
    Ok(paths)
}
