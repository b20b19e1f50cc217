//! Response time (RTE) and peak resident memory (MMU) of a recognition
//! runner.
//!
//! Timing uses [`Instant`], the platform's monotonic clock (nanosecond
//! resolution on Linux). Memory is read from `VmRSS` in `/proc/self/status`
//! by a sampler thread; other platforms report [`ProfileError::Unsupported`].
//! Megabytes are decimal: 1 MB = 10^6 bytes.

use std::fmt;
use std::fs;
use std::hint::black_box;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("run {run} completed no recognitions in {duration:?}")]
    NoSamples { run: usize, duration: Duration },
    #[error("resident memory reading unsupported: {0}")]
    Unsupported(String),
    #[error("{0}")]
    Argument(String),
    #[error("runner failed: {0}")]
    Runner(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileConfig {
    pub runs: usize,
    pub run_duration: Duration,
    /// Interval between resident-memory samples.
    pub sample_period: Duration,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            runs: 5,
            run_duration: Duration::from_secs(10),
            sample_period: Duration::from_millis(5),
        }
    }
}

impl ProfileConfig {
    fn check(&self) -> Result<(), ProfileError> {
        if self.runs == 0 {
            return Err(ProfileError::Argument("runs must be at least 1".into()));
        }
        if self.run_duration.is_zero() {
            return Err(ProfileError::Argument("run duration must be positive".into()));
        }
        if self.sample_period.is_zero() {
            return Err(ProfileError::Argument("sample period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    pub samples: usize,
    pub total_seconds: f64,
}

impl RunStats {
    pub fn mean_seconds(&self) -> f64 {
        self.total_seconds / self.samples as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RteReport {
    pub runs: Vec<RunStats>,
    pub run_duration: Duration,
}

impl RteReport {
    pub fn samples(&self) -> usize {
        self.runs.iter().map(|r| r.samples).sum()
    }

    /// Mean latency over every sample of every run.
    pub fn rte_seconds(&self) -> f64 {
        let total: f64 = self.runs.iter().map(|r| r.total_seconds).sum();
        total / self.samples() as f64
    }

    pub fn run_means(&self) -> Vec<f64> {
        self.runs.iter().map(RunStats::mean_seconds).collect()
    }

    /// Per-run means averaged with equal weight per run. Equals
    /// [`rte_seconds`](Self::rte_seconds) only when every run has the same
    /// sample count.
    pub fn mean_of_run_means(&self) -> f64 {
        self.run_means().iter().sum::<f64>() / self.runs.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryReport {
    pub baseline_mb: f64,
    pub peak_mb: f64,
    pub samples: usize,
}

impl MemoryReport {
    pub fn growth_mb(&self) -> f64 {
        self.peak_mb - self.baseline_mb
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    pub rte: RteReport,
    pub memory: MemoryReport,
    pub environment: String,
}

impl ProfileReport {
    pub fn rte_seconds(&self) -> f64 {
        self.rte.rte_seconds()
    }

    pub fn mmu_megabytes(&self) -> f64 {
        self.memory.peak_mb
    }
}

impl fmt::Display for ProfileReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "runs: {} x {:.3} s",
            self.rte.runs.len(),
            self.rte.run_duration.as_secs_f64()
        )?;
        for (i, r) in self.rte.runs.iter().enumerate() {
            writeln!(
                f,
                "run {}: samples {} mean {:.6} s",
                i + 1,
                r.samples,
                r.mean_seconds()
            )?;
        }
        writeln!(f, "rte_samples: {}", self.rte.samples())?;
        writeln!(f, "rte_s: {:.6}", self.rte_seconds())?;
        writeln!(f, "mmu_mb: {:.2} (peak RSS, 1 MB = 10^6 bytes)", self.memory.peak_mb)?;
        writeln!(f, "baseline_mb: {:.2}", self.memory.baseline_mb)?;
        write!(f, "environment: {}", self.environment)
    }
}

/// Current resident set size in bytes.
pub fn resident_bytes() -> Result<u64, ProfileError> {
    let status = fs::read_to_string("/proc/self/status")
        .map_err(|e| ProfileError::Unsupported(format!("/proc/self/status: {e}")))?;
    parse_vmrss(&status).ok_or_else(|| ProfileError::Unsupported("no VmRSS line in /proc/self/status".into()))
}

fn parse_vmrss(status: &str) -> Option<u64> {
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let mut parts = line["VmRSS:".len()..].split_whitespace();
    let value: u64 = parts.next()?.parse().ok()?;
    match parts.next() {
        Some("kB") => Some(value * 1024),
        _ => None,
    }
}

fn to_mb(bytes: u64) -> f64 {
    bytes as f64 / 1e6
}

pub fn environment_note() -> String {
    let cpus = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!(
        "{} {}, {} logical cpu(s), monotonic clock, single-threaded runner",
        std::env::consts::OS,
        std::env::consts::ARCH,
        cpus
    )
}

/// Times `runner` back to back for `cfg.runs` runs of `cfg.run_duration`
/// each. A run stops at the first completed call past its deadline.
pub fn measure_rte<T, E: fmt::Display>(
    cfg: &ProfileConfig,
    mut runner: impl FnMut() -> Result<T, E>,
) -> Result<RteReport, ProfileError> {
    cfg.check()?;
    let mut runs = Vec::with_capacity(cfg.runs);
    for run in 0..cfg.runs {
        let deadline = Instant::now() + cfg.run_duration;
        let mut stats = RunStats {
            samples: 0,
            total_seconds: 0.0,
        };
        while Instant::now() < deadline {
            let start = Instant::now();
            let out = runner().map_err(|e| ProfileError::Runner(e.to_string()))?;
            stats.total_seconds += start.elapsed().as_secs_f64();
            black_box(out);
            stats.samples += 1;
        }
        if stats.samples == 0 {
            return Err(ProfileError::NoSamples {
                run: run + 1,
                duration: cfg.run_duration,
            });
        }
        runs.push(stats);
    }
    Ok(RteReport {
        runs,
        run_duration: cfg.run_duration,
    })
}

struct Sampler {
    stop: Arc<AtomicBool>,
    handle: thread::JoinHandle<(u64, usize)>,
}

impl Sampler {
    fn start(period: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = thread::spawn(move || {
            let (mut peak, mut n) = (0u64, 0usize);
            loop {
                let done = flag.load(Ordering::Acquire);
                if let Ok(b) = resident_bytes() {
                    peak = peak.max(b);
                    n += 1;
                }
                if done {
                    break;
                }
                thread::sleep(period);
            }
            (peak, n)
        });
        Sampler { stop, handle }
    }

    fn finish(self) -> (u64, usize) {
        self.stop.store(true, Ordering::Release);
        self.handle.join().unwrap_or((0, 0))
    }
}

/// Peak resident memory while `work` runs, sampled every `period` from a
/// second thread. The baseline is read just before `work` starts.
pub fn measure_mmu<T>(period: Duration, work: impl FnOnce() -> T) -> Result<(MemoryReport, T), ProfileError> {
    if period.is_zero() {
        return Err(ProfileError::Argument("sample period must be positive".into()));
    }
    let baseline = resident_bytes()?;
    let sampler = Sampler::start(period);
    let out = work();
    let (peak, samples) = sampler.finish();
    if samples == 0 {
        return Err(ProfileError::Unsupported("no resident memory samples".into()));
    }
    Ok((
        MemoryReport {
            baseline_mb: to_mb(baseline),
            peak_mb: to_mb(peak.max(baseline)),
            samples,
        },
        out,
    ))
}

/// RTE and MMU from the same runs.
pub fn profile<T, E: fmt::Display>(
    cfg: &ProfileConfig,
    runner: impl FnMut() -> Result<T, E>,
) -> Result<ProfileReport, ProfileError> {
    cfg.check()?;
    let (memory, rte) = measure_mmu(cfg.sample_period, || measure_rte(cfg, runner))?;
    Ok(ProfileReport {
        rte: rte?,
        memory,
        environment: environment_note(),
    })
}
