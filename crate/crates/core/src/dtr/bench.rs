//! Wall-clock comparison of the two attention kernels. Runs on the calling
//! thread only.

use std::io::Write;
use std::time::Instant;

use super::{attention, AttentionKind, Result};
use crate::rng::{normal_vec, stream, streams};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub kind: AttentionKind,
    pub median_ms: f64,
    pub runs: usize,
    pub seed: u64,
    /// Largest intermediate footprint of the kernel in elements.
    pub peak_live_elements: usize,
}

fn peak_elements(kind: AttentionKind, n: usize, dim: usize) -> usize {
    match kind {
        // scores plus their softmax, and the output
        AttentionKind::Vanilla => 2 * n * n + n * dim,
        // phi(Q), phi(K)^T, summary, numerator, broadcast denominator
        AttentionKind::Linear => 2 * n * dim + dim * dim + 2 * n * dim,
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

/// Median wall time of `runs` self-attention calls (`Q = K = V` drawn per
/// size from the seed) for every size and kind. Kinds are timed one at a
/// time over all sizes, smallest footprint first, so the allocator churn of
/// the large vanilla score matrices does not leak into the linear timings.
/// Rows come back size-major in the order of `sizes` and `kinds`.
pub fn bench_attention(
    kinds: &[AttentionKind],
    sizes: &[usize],
    dim: usize,
    runs: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let runs = runs.max(1);
    let largest = sizes.iter().copied().max().unwrap_or(0);
    let mut order = kinds.to_vec();
    order.sort_by_key(|&k| peak_elements(k, largest, dim));
    let mut rows = Vec::new();
    for kind in order {
        for &n in sizes {
            let mut rng = stream(seed ^ n as u64, streams::BENCH);
            let x = Tensor::new(normal_vec(&mut rng, n * dim, 1.0), &[n, dim])?;
            // one untimed warm-up
            let _ = attention(kind, &x, &x, &x)?;
            let times = (0..runs)
                .map(|_| {
                    let start = Instant::now();
                    let out = attention(kind, &x, &x, &x)?;
                    let ms = start.elapsed().as_secs_f64() * 1e3;
                    std::hint::black_box(out);
                    Ok(ms)
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(BenchRow {
                n,
                kind,
                median_ms: median(times),
                runs,
                seed,
                peak_live_elements: peak_elements(kind, n, dim),
            });
        }
    }
    let rank = |r: &BenchRow| {
        let size = sizes.iter().position(|&n| n == r.n).unwrap_or(usize::MAX);
        let kind = kinds.iter().position(|&k| k == r.kind).unwrap_or(usize::MAX);
        (size, kind)
    };
    rows.sort_by_key(rank);
    Ok(rows)
}

/// `N,kind,median_ms,runs,seed`
pub fn write_bench_csv<W: Write>(out: &mut W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(out, "N,kind,median_ms,runs,seed")?;
    for r in rows {
        writeln!(out, "{},{},{:.4},{},{}", r.n, r.kind, r.median_ms, r.runs, r.seed)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = bench_attention(&[AttentionKind::Vanilla, AttentionKind::Linear], &[8, 16], 4, 3, 1).unwrap();
        assert_eq!(rows.len(), 4);
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "N,kind,median_ms,runs,seed");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("8,vanilla,"));
        assert!(lines[2].starts_with("8,linear,"));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
