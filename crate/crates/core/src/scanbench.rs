//! Wall-clock scaling of the selective scan with sequence length.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssm::{s6_scan, ScanParams, Sequence};

/// Lengths 1024, 2048, ..., 65536.
pub fn default_lengths() -> Vec<usize> {
    (10..=16).map(|p| 1usize << p).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub d_inner: usize,
    pub state: usize,
    pub nanos: u128,
}

/// Times `repeats` scans per length after one untimed warm-up scan. Inputs
/// and parameters are seeded, so only the timings vary between runs.
pub fn bench_scan(lengths: &[usize], d_inner: usize, state: usize, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if d_inner == 0 || state == 0 || lengths.contains(&0) {
        return Err(Error::invalid("bench", "lengths, d_inner and state must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ScanParams::init(d_inner, state, &mut rng);
    let mut rows = Vec::with_capacity(lengths.len() * repeats);
    for &len in lengths {
        let x = Sequence::from_fn(d_inner, len, |_, _| rng.random_range(-1.0..1.0));
        std::hint::black_box(s6_scan(&x, &params)?);
        for _ in 0..repeats {
            let t = Instant::now();
            std::hint::black_box(s6_scan(std::hint::black_box(&x), &params)?);
            rows.push(BenchRow {
                len,
                d_inner,
                state,
                nanos: t.elapsed().as_nanos(),
            });
        }
    }
    Ok(rows)
}

/// Least-squares slope of log(time) against log(length), fitted to the
/// median time at each length. `None` with fewer than two lengths.
pub fn log_log_slope(rows: &[BenchRow]) -> Option<f64> {
    let mut lens: Vec<usize> = rows.iter().map(|r| r.len).collect();
    lens.sort_unstable();
    lens.dedup();
    if lens.len() < 2 {
        return None;
    }
    let points: Vec<(f64, f64)> = lens
        .iter()
        .map(|&l| {
            let mut t: Vec<u128> = rows.iter().filter(|r| r.len == l).map(|r| r.nanos).collect();
            t.sort_unstable();
            ((l as f64).ln(), (t[t.len() / 2].max(1) as f64).ln())
        })
        .collect();
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(len: usize, nanos: u128) -> BenchRow {
        BenchRow {
            len,
            d_inner: 1,
            state: 1,
            nanos,
        }
    }

    #[test]
    fn slope_of_exact_power_laws() {
        let linear: Vec<_> = [1, 2, 4, 8].iter().map(|&l| row(l * 100, l as u128 * 5000)).collect();
        assert!((log_log_slope(&linear).unwrap() - 1.0).abs() < 1e-12);
        let quad: Vec<_> = [1, 2, 4].iter().map(|&l| row(l, (l * l) as u128 * 1000)).collect();
        assert!((log_log_slope(&quad).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(log_log_slope(&[row(5, 5)]), None);
    }

    #[test]
    fn median_resists_one_outlier() {
        let rows = vec![row(10, 100), row(10, 100), row(10, 99_999), row(20, 200), row(20, 200), row(20, 1)];
        assert!((log_log_slope(&rows).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn repeats_give_rows_per_length() {
        let rows = bench_scan(&[16, 32], 2, 2, 3, 0).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows.iter().filter(|r| r.len == 32).count(), 3);
        assert!(bench_scan(&[0], 2, 2, 1, 0).is_err());
    }
}
