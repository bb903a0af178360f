//! Latency harness: median stage and total times over repeated synthesis.

use std::time::{Duration, Instant};

use ctts::frontend::Inventory;
use ctts::pipeline::{PipelineError, Synthesis, Synthesizer};

/// Real-time factor a deployment needs (audio seconds per compute second).
pub const RTF_THRESHOLD: f64 = 1.5;
pub const THREADS_ENV: &str = "CTTS_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
    /// Sentences synthesized concurrently within one iteration.
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { iters: 20, warmup: 3, seed: 0, workers: 1 }
    }
}

/// Worker count: available cores, capped by `CTTS_THREADS` when set.
pub fn workers_from_env() -> Result<usize, String> {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(cores)),
            _ => Err(format!("{THREADS_ENV} must be a positive integer, got {v:?}")),
        },
        Err(_) => Ok(cores),
    }
}

/// Times of one pass over every sentence. Stage and total times are summed
/// over sentences; `wall` is the elapsed time of the pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PassTimes {
    pub frontend: Duration,
    pub acoustic: Duration,
    pub vocoder: Duration,
    pub total: Duration,
    pub wall: Duration,
    pub audio_secs: f64,
}

/// Medians over the timed passes, in milliseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub frontend_ms: f64,
    pub acoustic_ms: f64,
    pub vocoder_ms: f64,
    pub total_ms: f64,
    pub wall_ms: f64,
    pub audio_ms: f64,
    /// Audio duration over synthesis time; above 1 is faster than real time.
    pub rtf: f64,
    pub iters: usize,
    pub warmup: usize,
    pub sentences: usize,
    pub workers: usize,
    pub passes: Vec<PassTimes>,
}

/// Median; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

impl BenchReport {
    pub fn stage_sum_ms(&self) -> f64 {
        self.frontend_ms + self.acoustic_ms + self.vocoder_ms
    }

    /// Relative gap between the stage medians' sum and the total median.
    pub fn stage_gap(&self) -> f64 {
        (self.stage_sum_ms() - self.total_ms).abs() / self.total_ms
    }

    pub fn realtime(&self) -> bool {
        self.rtf > RTF_THRESHOLD
    }

    /// Single flat `key=value` record.
    pub fn kv_line(&self) -> String {
        format!(
            "bench frontend_ms={:.3} acoustic_ms={:.3} vocoder_ms={:.3} total_ms={:.3} wall_ms={:.3} \
             audio_ms={:.3} rtf={:.4} rtf_threshold={RTF_THRESHOLD} rtf_ok={} stage_gap={:.4} \
             iters={} warmup={} sentences={} workers={}",
            self.frontend_ms,
            self.acoustic_ms,
            self.vocoder_ms,
            self.total_ms,
            self.wall_ms,
            self.audio_ms,
            self.rtf,
            self.realtime(),
            self.stage_gap(),
            self.iters,
            self.warmup,
            self.sentences,
            self.workers
        )
    }

    pub fn table(&self) -> String {
        let share = |ms: f64| 100.0 * ms / self.total_ms;
        let mut s = String::new();
        s.push_str(&format!("{:<10} {:>12} {:>7}\n", "stage", "median ms", "share"));
        for (name, ms) in [("frontend", self.frontend_ms), ("acoustic", self.acoustic_ms), ("vocoder", self.vocoder_ms)]
        {
            s.push_str(&format!("{name:<10} {ms:>12.3} {:>6.1}%\n", share(ms)));
        }
        s.push_str(&format!("{:<10} {:>12.3}\n", "total", self.total_ms));
        s.push_str(&format!("{:<10} {:>12.3}\n", "audio", self.audio_ms));
        s.push_str(&format!(
            "rtf {:.3} ({} the {RTF_THRESHOLD} real-time threshold)\n",
            self.rtf,
            if self.realtime() { "above" } else { "below" }
        ));
        s
    }
}

fn run_pass(
    synth: &Synthesizer<'_>,
    graphemes: &Inventory,
    texts: &[String],
    seed: u64,
    workers: usize,
) -> Result<PassTimes, PipelineError> {
    let start = Instant::now();
    let one = |i: usize| synth.synthesize(graphemes, &texts[i], seed.wrapping_add(i as u64));
    let results: Vec<Result<Synthesis, PipelineError>> = if workers <= 1 || texts.len() <= 1 {
        (0..texts.len()).map(one).collect()
    } else {
        // sentence i goes to worker i % workers; each keeps private state
        let mut slots: Vec<Option<Result<Synthesis, PipelineError>>> = (0..texts.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers.min(texts.len()))
                .map(|w| {
                    let one = &one;
                    scope.spawn(move || (w..texts.len()).step_by(workers).map(|i| (i, one(i))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("bench worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|r| r.expect("every sentence ran")).collect()
    };
    let wall = start.elapsed();
    let mut pass = PassTimes { wall, ..PassTimes::default() };
    for r in results {
        let s = r?;
        pass.frontend += s.times.frontend;
        pass.acoustic += s.times.acoustic;
        pass.vocoder += s.times.vocoder;
        pass.total += s.total;
        pass.audio_secs += s.waveform.duration_secs();
    }
    Ok(pass)
}

/// Runs `warmup` untimed passes then `iters` timed passes over `texts`.
pub fn run_bench(
    synth: &Synthesizer<'_>,
    graphemes: &Inventory,
    texts: &[String],
    cfg: &BenchConfig,
) -> Result<BenchReport, PipelineError> {
    if texts.is_empty() || cfg.iters == 0 {
        return Err(PipelineError::Model("bench needs at least one sentence and one iteration".into()));
    }
    for _ in 0..cfg.warmup {
        run_pass(synth, graphemes, texts, cfg.seed, cfg.workers)?;
    }
    let passes = (0..cfg.iters)
        .map(|_| run_pass(synth, graphemes, texts, cfg.seed, cfg.workers))
        .collect::<Result<Vec<_>, _>>()?;
    let med = |f: &dyn Fn(&PassTimes) -> f64| median(&passes.iter().map(f).collect::<Vec<_>>());
    let ms = |d: Duration| d.as_secs_f64() * 1e3;
    let total_ms = med(&|p| ms(p.total));
    let audio_ms = med(&|p| p.audio_secs * 1e3);
    Ok(BenchReport {
        frontend_ms: med(&|p| ms(p.frontend)),
        acoustic_ms: med(&|p| ms(p.acoustic)),
        vocoder_ms: med(&|p| ms(p.vocoder)),
        total_ms,
        wall_ms: med(&|p| ms(p.wall)),
        audio_ms,
        rtf: audio_ms / total_ms,
        iters: cfg.iters,
        warmup: cfg.warmup,
        sentences: texts.len(),
        workers: cfg.workers.max(1),
        passes,
    })
}
