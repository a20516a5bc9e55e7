//! Runtime scaling of the linear WKV route against dense quadratic
//! attention, plus the analytic activation-memory model.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use biwkv::{biwkv_forward, DecayParams, KvSequence, Real};

use crate::tensor::Mat;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("shape mismatch between Q, K, V")]
    Shape,
    #[error("non-finite input")]
    NonFinite,
    #[error(transparent)]
    Kernel(#[from] biwkv::KernelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    BiWkv,
    Quadratic,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BiWkv => "biwkv",
            Self::Quadratic => "quadratic",
        }
    }
}

impl std::str::FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "biwkv" => Ok(Self::BiWkv),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(format!("unknown mechanism `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub t: usize,
    pub c: usize,
    pub reps: usize,
    pub median_seconds: f64,
    pub activation_bytes: u64,
    /// Set when the median is too close to the timer resolution to trust.
    pub timer_flagged: bool,
}

/// Median below this is flagged as timer-resolution limited.
const TIMER_FLOOR_SECONDS: f64 = 2e-5;

/// Dense `softmax(Q K^T / sqrt(C)) V`, materializing the `T x T` score
/// matrix. `O(T^2 C)` time, `O(T^2)` memory.
pub fn quadratic_attention<F: Real>(
    q: &Mat<F>,
    k: &Mat<F>,
    v: &Mat<F>,
) -> Result<Mat<F>, BenchError> {
    let (t, c) = (q.rows, q.cols);
    if k.rows != t || k.cols != c || v.rows != t || v.cols != c {
        return Err(BenchError::Shape);
    }
    for m in [q, k, v] {
        if m.data.iter().any(|x| !x.is_finite()) {
            return Err(BenchError::NonFinite);
        }
    }
    let scale = F::of(1.0 / (c as f64).sqrt());
    let mut scores = q.matmul_tb(k);
    for x in scores.data.iter_mut() {
        *x *= scale;
    }
    // Row-wise stable softmax in place.
    for row in scores.data.chunks_exact_mut(t) {
        let mut max = F::neg_infinity();
        for &x in row.iter() {
            max = max.max(x);
        }
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = sum.recip();
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
    Ok(scores.matmul(v))
}

/// Analytic activation model (a reporting convention, not a measurement):
/// the linear route carries its output plus `O(C)` recurrence state, the
/// quadratic route carries the `T x T` score matrix plus the output.
pub fn activation_bytes(mechanism: Mechanism, t: u64, c: u64, elem_size: u64) -> u64 {
    match mechanism {
        Mechanism::BiWkv => elem_size * (t * c + c),
        Mechanism::Quadratic => elem_size * (t * t + t * c),
    }
}

fn random_mat<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<F> {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| F::of(rng.random_range(-1.0..1.0)))
            .collect(),
    )
}

fn time_once<F: Real>(
    mechanism: Mechanism,
    t: usize,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64, BenchError> {
    match mechanism {
        Mechanism::BiWkv => {
            let k = random_mat::<F>(rng, t, c);
            let v = random_mat::<F>(rng, t, c);
            let w: Vec<F> = (0..c).map(|_| F::of(rng.random_range(-2.0..2.0))).collect();
            let u: Vec<F> = (0..c).map(|_| F::of(rng.random_range(-2.0..2.0))).collect();
            let seq = KvSequence::new(t, c, k.data, v.data)?;
            let params = DecayParams::new(w, u)?;
            let start = Instant::now();
            let out = biwkv_forward(&seq, &params)?;
            let elapsed = start.elapsed().as_secs_f64();
            std::hint::black_box(&out.wkv);
            Ok(elapsed)
        }
        Mechanism::Quadratic => {
            let q = random_mat::<F>(rng, t, c);
            let k = random_mat::<F>(rng, t, c);
            let v = random_mat::<F>(rng, t, c);
            let start = Instant::now();
            let out = quadratic_attention(&q, &k, &v)?;
            let elapsed = start.elapsed().as_secs_f64();
            std::hint::black_box(&out.data);
            Ok(elapsed)
        }
    }
}

/// Median wall time over `reps` warm runs for each token count (two warmup
/// runs are discarded). `t_list` must be ascending.
pub fn bench_scaling<F: Real>(
    mechanism: Mechanism,
    t_list: &[usize],
    c: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>, BenchError> {
    let reps = reps.max(5);
    let mut records = Vec::new();
    for &t in t_list {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ t as u64);
        for _ in 0..2 {
            time_once::<F>(mechanism, t, c, &mut rng)?;
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            times.push(time_once::<F>(mechanism, t, c, &mut rng)?);
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = times[times.len() / 2];
        records.push(BenchRecord {
            mechanism,
            t,
            c,
            reps,
            median_seconds: median,
            activation_bytes: activation_bytes(
                mechanism,
                t as u64,
                c as u64,
                std::mem::size_of::<F>() as u64,
            ),
            timer_flagged: median < TIMER_FLOOR_SECONDS,
        });
    }
    Ok(records)
}

pub const BENCH_CSV_HEADER: &str = "mechanism,T,C,reps,median_seconds,activation_bytes";

pub fn write_bench_csv(records: &[BenchRecord], path: &Path) -> Result<(), BenchError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{BENCH_CSV_HEADER}")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{:.9},{}",
            r.mechanism.as_str(),
            r.t,
            r.c,
            r.reps,
            r.median_seconds,
            r.activation_bytes
        )?;
    }
    Ok(())
}
