//! Timing of the XNOR/popcount GEMM against float GEMMs over the same ±1
//! operands.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bittensor::{binary_gemm, BitTensor, RhsLayout};
use crate::error::{BnnError, Result};
use crate::tensor::{gemm, FloatTensor};

pub const DEFAULT_SIZES: [usize; 4] = [256, 512, 1024, 2048];

/// Timings for one `n × n × n` product, in seconds per call.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    /// Packing both operands into bits.
    pub pack_s: f64,
    pub binary_s: f64,
    pub naive_s: f64,
    /// Blocked float GEMM (`matrixmultiply`).
    pub blocked_s: f64,
}

impl BenchRow {
    fn gflops(&self, secs: f64) -> f64 {
        2.0 * (self.n as f64).powi(3) / secs / 1e9
    }

    /// Binary kernel speedup over the naive float GEMM.
    pub fn speedup_vs_naive(&self) -> f64 {
        self.naive_s / self.binary_s
    }

    pub fn speedup_vs_blocked(&self) -> f64 {
        self.blocked_s / self.binary_s
    }
}

/// Textbook float GEMM over `A` (`m×k`) and `Bᵀ` (`n×k`), one dot product per
/// entry.
pub fn naive_gemm(a: &[f32], bt: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    for i in 0..m {
        let ra = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let rb = &bt[j * k..(j + 1) * k];
            let mut s = 0f32;
            for t in 0..k {
                s += ra[t] * rb[t];
            }
            out[i * n + j] = s;
        }
    }
    out
}

fn blocked_gemm(a: &[f32], bt: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; m * n];
    gemm(false, true, m, k, n, 1.0, a, bt, 0.0, &mut out);
    out
}

/// Mean seconds per call, repeating until `min_time` has passed (at least
/// once).
fn time<R>(min_time: Duration, mut f: impl FnMut() -> R) -> f64 {
    let start = Instant::now();
    let mut calls = 0u32;
    loop {
        std::hint::black_box(f());
        calls += 1;
        if start.elapsed() >= min_time {
            return start.elapsed().as_secs_f64() / calls as f64;
        }
    }
}

/// Benchmarks one size. All three kernels are first run once and compared
/// entry by entry; any difference aborts before timing starts.
pub fn bench_size(n: usize, seed: u64, min_time: Duration) -> Result<BenchRow> {
    if n == 0 {
        return Err(BnnError::invalid("benchmark size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
    let mut pm1 = |len: usize| -> Vec<f32> {
        (0..len)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect()
    };
    let a = pm1(n * n);
    let bt = pm1(n * n);
    let at = FloatTensor::new(vec![n, n], a.clone())?;
    let btt = FloatTensor::new(vec![n, n], bt.clone())?;
    let pa = BitTensor::pack(&at)?;
    let pb = BitTensor::pack(&btt)?;

    let bin = binary_gemm(&pa, &pb, RhsLayout::Transposed)?;
    let naive = naive_gemm(&a, &bt, n, n, n);
    let blocked = blocked_gemm(&a, &bt, n, n, n);
    for (name, other) in [("naive", &naive), ("blocked", &blocked)] {
        if let Some(i) = bin
            .values()
            .iter()
            .zip(other.iter())
            .position(|(x, y)| x != y)
        {
            return Err(BnnError::Internal(format!(
                "binary GEMM differs from the {name} float GEMM at entry {i} (n = {n}): {} vs {}",
                bin.values()[i],
                other[i]
            )));
        }
    }

    Ok(BenchRow {
        n,
        pack_s: time(min_time, || (BitTensor::pack(&at), BitTensor::pack(&btt))),
        binary_s: time(min_time, || binary_gemm(&pa, &pb, RhsLayout::Transposed)),
        naive_s: time(min_time, || naive_gemm(&a, &bt, n, n, n)),
        blocked_s: time(min_time, || blocked_gemm(&a, &bt, n, n, n)),
    })
}

pub fn run(sizes: &[usize], seed: u64, min_time: Duration) -> Result<Vec<BenchRow>> {
    sizes
        .iter()
        .map(|&n| bench_size(n, seed, min_time))
        .collect()
}

/// Fixed-width table; GFLOP/s counts `2n³` operations for every kernel.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:>6} {:>11} {:>11} {:>11} {:>11} {:>10} {:>10} {:>10} {:>14} {:>16}\n",
        "n",
        "pack_ms",
        "binary_ms",
        "naive_ms",
        "blocked_ms",
        "bin_gflop",
        "naive_gflop",
        "blk_gflop",
        "speedup_naive",
        "speedup_blocked"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:>6} {:>11.3} {:>11.3} {:>11.3} {:>11.3} {:>10.2} {:>10.2} {:>10.2} {:>13.2}x {:>15.2}x",
            r.n,
            r.pack_s * 1e3,
            r.binary_s * 1e3,
            r.naive_s * 1e3,
            r.blocked_s * 1e3,
            r.gflops(r.binary_s),
            r.gflops(r.naive_s),
            r.gflops(r.blocked_s),
            r.speedup_vs_naive(),
            r.speedup_vs_blocked()
        );
    }
    s
}

/// CSV form of [`format_table`].
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("n,pack_s,binary_s,naive_s,blocked_s,speedup_naive,speedup_blocked\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:e},{:e},{:e},{:e},{:.4},{:.4}",
            r.n,
            r.pack_s,
            r.binary_s,
            r.naive_s,
            r.blocked_s,
            r.speedup_vs_naive(),
            r.speedup_vs_blocked()
        );
    }
    s
}
