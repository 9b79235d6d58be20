//! Timing of the selective scan against sequence length.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssm::{parallel_scan, selective_scan, ScanResult, SsmParams};

pub const DEFAULT_LENGTHS: [usize; 7] = [256, 512, 1024, 2048, 4096, 8192, 16384];

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub trials: usize,
    pub channels: usize,
    pub state: usize,
    /// Largest allowed `|selective − parallel|` output difference.
    pub tolerance: f64,
    /// Each trial repeats the scan until it has run at least this long,
    /// so short scans are not dominated by timer and scheduler noise.
    pub min_trial_seconds: f64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            lengths: DEFAULT_LENGTHS.to_vec(),
            trials: 3,
            channels: 4,
            state: 16,
            tolerance: 1e-6,
            min_trial_seconds: 0.02,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub mean_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln t` against `ln L`.
    pub slope: f64,
    /// Largest selective/parallel disagreement seen over all lengths.
    pub max_diff: f64,
}

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("L,mean_seconds,slope\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.9},{:.6}\n", r.len, r.mean_seconds, self.slope));
        }
        out
    }

    /// Time ratio between the last two rows.
    pub fn top_ratio(&self) -> Option<f64> {
        let n = self.rows.len();
        (n >= 2).then(|| self.rows[n - 1].mean_seconds / self.rows[n - 2].mean_seconds)
    }
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

fn random_system(rng: &mut ChaCha8Rng, ch: usize, n: usize, len: usize) -> Result<(SsmParams<f64>, Vec<f64>)> {
    let mut draw = |k: usize, lo: f64, hi: f64| (0..k).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
    let a = draw(ch * n, -2.0, -0.1);
    let delta = draw(len * ch, 0.01, 0.2);
    let b = draw(len * n, -1.0, 1.0);
    let c = draw(len * n, -1.0, 1.0);
    let d = draw(ch, -1.0, 1.0);
    let x = draw(len * ch, -1.0, 1.0);
    Ok((SsmParams::selective(ch, n, a, delta, b, c, d)?, x))
}

type Kernel = fn(&SsmParams<f64>, &[f64], Option<&[f64]>) -> Result<ScanResult<f64>>;

/// Times `selective_scan` per length (mean seconds per scan over `trials`
/// interleaved rounds, after one warmup run) and checks each length
/// against `parallel_scan`.
pub fn bench_scan(opts: &BenchOptions) -> Result<BenchTable> {
    bench_scan_with(opts, parallel_scan)
}

/// [`bench_scan`] with the reference kernel supplied by the caller.
pub fn bench_scan_with(opts: &BenchOptions, reference: Kernel) -> Result<BenchTable> {
    if opts.lengths.is_empty() || opts.trials == 0 {
        return Err(Error::Usage("bench needs at least one length and one trial".into()));
    }
    if opts.lengths.windows(2).any(|w| w[0] >= w[1]) || opts.lengths[0] == 0 {
        return Err(Error::Usage(format!("lengths must be positive and ascending, got {:?}", opts.lengths)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases = Vec::with_capacity(opts.lengths.len());
    let mut max_diff: f64 = 0.0;
    for &len in &opts.lengths {
        let (p, x) = random_system(&mut rng, opts.channels, opts.state, len)?;
        let t = Instant::now();
        let expected = selective_scan(&p, &x, None)?;
        let warmup = t.elapsed().as_secs_f64();
        let other = reference(&p, &x, None)?;
        let diff = expected.y.iter().zip(&other.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if !(diff <= opts.tolerance) {
            return Err(Error::Domain(format!(
                "selective and parallel scans disagree by {diff:e} at L = {len} (tolerance {:e})",
                opts.tolerance
            )));
        }
        max_diff = max_diff.max(diff);
        let reps = (opts.min_trial_seconds / warmup.max(1e-9)).ceil().max(1.0) as usize;
        cases.push((p, x, reps));
    }
    // Each round times every length once, so slow and fast periods of the
    // machine are shared evenly across lengths instead of skewing a few.
    let mut totals = vec![0.0; cases.len()];
    for _ in 0..opts.trials {
        for ((p, x, reps), total) in cases.iter().zip(&mut totals) {
            let t = Instant::now();
            for _ in 0..*reps {
                std::hint::black_box(selective_scan(p, std::hint::black_box(x), None)?);
            }
            *total += t.elapsed().as_secs_f64() / *reps as f64;
        }
    }
    let rows: Vec<BenchRow> = opts
        .lengths
        .iter()
        .zip(&totals)
        .map(|(&len, total)| BenchRow { len, mean_seconds: total / opts.trials as f64 })
        .collect();
    let slope = if rows.len() >= 2 {
        loglog_slope(&rows.iter().map(|r| (r.len as f64, r.mean_seconds)).collect::<Vec<_>>())
    } else {
        f64::NAN
    };
    Ok(BenchTable { rows, slope, max_diff })
}
