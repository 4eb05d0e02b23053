//! Wall-clock scaling benchmarks of threshold attention against dense
//! self-attention, and log-log slope fitting.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{dense_sa, sa_flops, DENSE_SA_MAX_PIXELS};
use crate::tam::{tam_flops, tam_forward, ProjectionParams, ThresholdSpec};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "mechanism,n,c,l,median_ns,reps,flops";
pub const MIN_REPS: usize = 5;
pub const MIN_WARMUP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Tam,
    DenseSa,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Tam => "tam",
            Mechanism::DenseSa => "dense_sa",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tam" => Ok(Mechanism::Tam),
            "dense_sa" | "sa" => Ok(Mechanism::DenseSa),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mechanism {s:?} (tam, dense_sa)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub n: usize,
    pub c: usize,
    pub l: Option<usize>,
    pub median_ns: u64,
    pub reps: usize,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub mechanism: Mechanism,
    pub grid: Vec<usize>,
    pub channels: usize,
    pub levels: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchRun {
    pub records: Vec<BenchRecord>,
    /// Grid points skipped because dense attention would exceed its cap.
    pub skipped: Vec<usize>,
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2
    }
}

/// Times one mechanism at every grid point on a `C x 1 x N` random map.
/// Dense points above [`DENSE_SA_MAX_PIXELS`] are skipped with a warning.
pub fn bench_scaling(spec: &BenchSpec) -> Result<BenchRun> {
    if spec.grid.is_empty() || spec.grid.windows(2).any(|w| w[0] >= w[1]) || spec.grid[0] == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid must be positive and strictly ascending, got {:?}",
            spec.grid
        )));
    }
    if spec.reps < MIN_REPS || spec.warmup < MIN_WARMUP {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_REPS} repetitions and {MIN_WARMUP} warmup runs"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.channels;
    let tspec = ThresholdSpec::new(spec.levels)?;
    let params = ProjectionParams::<f32>::random(c, &mut rng)?;
    let mut run = BenchRun::default();
    for &n in &spec.grid {
        if spec.mechanism == Mechanism::DenseSa && n > DENSE_SA_MAX_PIXELS {
            log::warn!("skipping dense_sa at N={n}: above the N<={DENSE_SA_MAX_PIXELS} cap");
            run.skipped.push(n);
            continue;
        }
        let f = Tensor::<f32>::randn(vec![c, 1, n], 1.0, &mut rng)?;
        let once = || -> Result<()> {
            let out = match spec.mechanism {
                Mechanism::Tam => tam_forward(black_box(&f), tspec, &params)?,
                Mechanism::DenseSa => dense_sa(black_box(&f), &params)?,
            };
            black_box(out);
            Ok(())
        };
        for _ in 0..spec.warmup {
            once()?;
        }
        let mut times = Vec::with_capacity(spec.reps);
        for _ in 0..spec.reps {
            let t = Instant::now();
            once()?;
            times.push((t.elapsed().as_nanos() as u64).max(1));
        }
        let (l, flops) = match spec.mechanism {
            Mechanism::Tam => (
                Some(spec.levels),
                tam_flops(c as u64, n as u64, spec.levels as u64),
            ),
            Mechanism::DenseSa => (None, sa_flops(c as u64, n as u64)),
        };
        run.records.push(BenchRecord {
            mechanism: spec.mechanism,
            n,
            c,
            l,
            median_ns: median(times),
            reps: spec.reps,
            flops,
        });
    }
    Ok(run)
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let l = r.l.map_or(String::new(), |l| l.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.mechanism.name(),
            r.n,
            r.c,
            l,
            r.median_ns,
            r.reps,
            r.flops
        )
        .expect("writing to a String");
    }
    out
}

/// Least-squares slope of `ln(median_ns)` against `ln(n)`.
pub fn fit_slope(records: &[BenchRecord]) -> Result<f64> {
    if records.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "slope fit needs at least 4 points, got {}",
            records.len()
        )));
    }
    if records.iter().any(|r| r.mechanism != records[0].mechanism) {
        return Err(Error::InvalidArgument("slope fit mixes mechanisms".into()));
    }
    let pts: Vec<(f64, f64)> = records
        .iter()
        .map(|r| ((r.n as f64).ln(), (r.median_ns as f64).ln()))
        .collect();
    Ok(slope(&pts))
}

fn slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn synthetic(exponent: f64, noise: f64, rng: &mut ChaCha8Rng) -> Vec<BenchRecord> {
        (10..=17)
            .map(|e| {
                let n = 1usize << e;
                let jitter = 1.0 + noise * (2.0 * rng.random::<f64>() - 1.0);
                BenchRecord {
                    mechanism: Mechanism::Tam,
                    n,
                    c: 1,
                    l: Some(1),
                    median_ns: (3.0 * (n as f64).powf(exponent) * jitter).round() as u64,
                    reps: 5,
                    flops: 0,
                }
            })
            .collect()
    }

    #[test]
    fn noiseless_power_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((fit_slope(&synthetic(1.0, 0.0, &mut rng)).unwrap() - 1.0).abs() < 1e-9);
        assert!((fit_slope(&synthetic(2.0, 0.0, &mut rng)).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn noisy_power_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = fit_slope(&synthetic(1.5, 0.01, &mut rng)).unwrap();
        assert!((s - 1.5).abs() < 0.05, "{s}");
    }

    #[test]
    fn too_few_points_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(fit_slope(&synthetic(1.0, 0.0, &mut rng)[..3]).is_err());
    }

    #[test]
    fn small_run_reports_every_point_and_skips_over_cap() {
        let spec = BenchSpec {
            mechanism: Mechanism::DenseSa,
            grid: vec![16, 32, DENSE_SA_MAX_PIXELS + 1],
            channels: 4,
            levels: 4,
            reps: 5,
            warmup: 2,
            seed: 0,
        };
        let run = bench_scaling(&spec).unwrap();
        assert_eq!(run.records.len(), 2);
        assert_eq!(run.skipped, [DENSE_SA_MAX_PIXELS + 1]);
        assert!(run
            .records
            .iter()
            .all(|r| r.median_ns > 0 && r.flops == sa_flops(4, r.n as u64)));
        let csv = to_csv(&run.records);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert!(lines.next().unwrap().starts_with("dense_sa,16,4,,"));
        let tam = bench_scaling(&BenchSpec {
            mechanism: Mechanism::Tam,
            grid: vec![64, 128],
            ..spec
        })
        .unwrap();
        assert_eq!(tam.records[1].flops, tam_flops(4, 128, 4));
        assert!(to_csv(&tam.records)
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("tam,64,4,4,"));
    }

    #[test]
    fn unsorted_grid_and_few_reps_rejected() {
        let spec = BenchSpec {
            mechanism: Mechanism::Tam,
            grid: vec![64, 32],
            channels: 2,
            levels: 2,
            reps: 5,
            warmup: 2,
            seed: 0,
        };
        assert!(bench_scaling(&spec).is_err());
        assert!(bench_scaling(&BenchSpec {
            grid: vec![32],
            reps: 4,
            ..spec
        })
        .is_err());
    }
}
