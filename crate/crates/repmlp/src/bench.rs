//! Train-vs-deploy throughput benchmark.
//!
//! Both forms run the same seeded input; the harness refuses to time
//! anything until it has checked that the two forms agree numerically and
//! that the forward is deterministic, so every speed claim is about
//! equivalent computations. Latencies are reported as medians over at least
//! ten timed iterations after at least three warmups.

use std::time::Instant;

use rand::Rng;

use crate::block::Mode;
use crate::error::{Error, Result};
use crate::init::rng_from_seed;
use crate::net::{build_net, NetConfig, Network};
use crate::tensor::Tensor4;
use crate::verify::TOL_NET;

pub const MIN_WARMUP: usize = 3;
pub const MIN_ITERS: usize = 10;

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
    pub modes: Vec<Mode>,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            batch: 8,
            warmup: MIN_WARMUP,
            iters: 11,
            modes: vec![Mode::Train, Mode::Deploy],
            seed: 0,
        }
    }
}

impl BenchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.warmup < MIN_WARMUP {
            return Err(Error::config(format!(
                "warmup iterations must be >= {MIN_WARMUP}"
            )));
        }
        if self.iters < MIN_ITERS {
            return Err(Error::config(format!(
                "timed iterations must be >= {MIN_ITERS}"
            )));
        }
        if self.modes.is_empty() {
            return Err(Error::config("at least one mode must be benchmarked"));
        }
        Ok(())
    }
}

/// One CSV row of the benchmark report.
#[derive(Debug, Clone)]
pub struct BenchCase {
    pub config: String,
    pub mode: Mode,
    pub batch: usize,
    pub warmup: usize,
    pub iters: usize,
    pub median_ms: f64,
    pub samples_per_sec: f64,
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("latencies are finite"));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn time_forward(net: &Network, input: &Tensor4, opts: &BenchOptions) -> Result<BenchCase> {
    for _ in 0..opts.warmup {
        net.forward(input)?;
    }
    let mut latencies = Vec::with_capacity(opts.iters);
    for _ in 0..opts.iters {
        let start = Instant::now();
        net.forward(input)?;
        latencies.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let median = median_ms(latencies);
    Ok(BenchCase {
        config: net.cfg().display_name().to_string(),
        mode: net.mode(),
        batch: opts.batch,
        warmup: opts.warmup,
        iters: opts.iters,
        median_ms: median,
        samples_per_sec: opts.batch as f64 / (median / 1e3),
    })
}

/// Benchmarks an already-built train/deploy pair.
pub fn bench_pair(train: &Network, deploy: &Network, opts: &BenchOptions) -> Result<Vec<BenchCase>> {
    opts.validate()?;
    let (h, w) = train.cfg().input_hw;
    let mut rng = rng_from_seed(opts.seed);
    let data = (0..opts.batch * 3 * h * w)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    let input = Tensor4::from_vec(opts.batch, 3, h, w, data)?;

    // gate: determinism, then cross-mode agreement
    let train_out = train.forward(&input)?;
    let again = train.forward(&input)?;
    if train_out.data() != again.data() {
        return Err(Error::Verification(
            "train forward is not deterministic across repeated runs".into(),
        ));
    }
    let deploy_out = deploy.forward(&input)?;
    let diff = train_out.max_abs_diff(&deploy_out);
    if diff > TOL_NET {
        return Err(Error::Verification(format!(
            "train and deploy outputs differ by {diff:.3e} > {TOL_NET:.0e}; refusing to time"
        )));
    }

    opts.modes
        .iter()
        .map(|mode| {
            let net = match mode {
                Mode::Train => train,
                Mode::Deploy => deploy,
            };
            time_forward(net, &input, opts)
        })
        .collect()
}

/// Builds the config's train form, converts it, and benchmarks both.
pub fn bench_config(cfg: &NetConfig, opts: &BenchOptions) -> Result<Vec<BenchCase>> {
    opts.validate()?;
    let train = build_net(cfg, opts.seed)?;
    let deploy = train.convert()?;
    bench_pair(&train, &deploy, opts)
}

pub const CSV_HEADER: &str =
    "config,mode,batch,warmup_iters,timed_iters,median_latency_ms,samples_per_sec";

pub fn to_csv(cases: &[BenchCase]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in cases {
        out.push_str(&format!(
            "{},{},{},{},{},{:.3},{:.2}\n",
            c.config, c.mode, c.batch, c.warmup, c.iters, c.median_ms, c.samples_per_sec
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_opts() -> BenchOptions {
        BenchOptions {
            batch: 2,
            warmup: 3,
            iters: 10,
            modes: vec![Mode::Train, Mode::Deploy],
            seed: 7,
        }
    }

    #[test]
    fn options_enforce_minimums() {
        let mut o = tiny_opts();
        o.iters = 9;
        assert!(o.validate().is_err());
        let mut o = tiny_opts();
        o.warmup = 2;
        assert!(o.validate().is_err());
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median_ms(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_ms(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn bench_emits_one_row_per_mode() {
        let cfg = crate::net::tiny_test_config();
        let cases = bench_config(&cfg, &tiny_opts()).unwrap();
        assert_eq!(cases.len(), 2);
        assert_eq!(cases[0].mode, Mode::Train);
        assert_eq!(cases[1].mode, Mode::Deploy);
        for c in &cases {
            assert!(c.median_ms > 0.0);
            assert!(c.samples_per_sec > 0.0);
        }
        let csv = to_csv(&cases);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn tampered_pair_is_refused() {
        let cfg = crate::net::tiny_test_config();
        let train = build_net(&cfg, 1).unwrap();
        let other = build_net(&cfg, 2).unwrap().convert().unwrap();
        match bench_pair(&train, &other, &tiny_opts()) {
            Err(Error::Verification(_)) => {}
            other => panic!("expected verification refusal, got {other:?}"),
        }
    }
}
