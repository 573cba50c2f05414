use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::Network;
use crate::prune::PruneTrajectory;
use crate::tensor::{Rng, Tensor};

pub const DEFAULT_RUNS: usize = 1000;
pub const DEFAULT_WARMUP: usize = 50;

/// Formats like C's `%g`: 6 significant digits, trailing zeros removed,
/// exponent form below 1e-4 or from 1e6.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{v:.*}", (5 - exp) as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub runs: usize,
    pub warmup: usize,
    pub mean_us: f64,
    pub median_us: f64,
    pub p95_us: f64,
    pub min_us: f64,
    pub max_us: f64,
    pub input_shape: [usize; 4],
}

impl LatencyReport {
    /// Summarizes per-run timings in microseconds.
    pub fn from_samples(samples_us: &[f64], warmup: usize, input_shape: [usize; 4]) -> Result<Self> {
        if samples_us.is_empty() {
            return Err(Error::Range("latency needs at least one run".into()));
        }
        let mut s = samples_us.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let (min, max) = (s[0], s[n - 1]);
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            ((s[n / 2 - 1] + s[n / 2]) / 2.0).clamp(s[n / 2 - 1], s[n / 2])
        };
        let p95 = s[(n * 95).div_ceil(100) - 1];
        let mean = (s.iter().sum::<f64>() / n as f64).clamp(min, max);
        Ok(Self {
            runs: n,
            warmup,
            mean_us: mean,
            median_us: median,
            p95_us: p95,
            min_us: min,
            max_us: max,
            input_shape,
        })
    }

    pub fn is_consistent(&self) -> bool {
        self.runs >= 1
            && self.min_us <= self.median_us
            && self.median_us <= self.p95_us
            && self.p95_us <= self.max_us
            && (self.min_us..=self.max_us).contains(&self.mean_us)
    }

    pub fn to_text(&self) -> String {
        let [n, c, h, w] = self.input_shape;
        let mut out = String::new();
        writeln!(out, "runs={}", self.runs).unwrap();
        writeln!(out, "warmup={}", self.warmup).unwrap();
        writeln!(out, "input_shape={n}x{c}x{h}x{w}").unwrap();
        for (k, v) in [
            ("mean_us", self.mean_us),
            ("median_us", self.median_us),
            ("p95_us", self.p95_us),
            ("min_us", self.min_us),
            ("max_us", self.max_us),
        ] {
            writeln!(out, "{k}={}", fmt_float(v)).unwrap();
        }
        out
    }
}

/// Times `runs` single-image eval-mode forward passes after `warmup`
/// untimed ones. Forward passes run on the calling thread only.
pub fn measure_latency(net: &Network, runs: usize, warmup: usize) -> Result<LatencyReport> {
    if runs == 0 {
        return Err(Error::Range("runs must be at least 1".into()));
    }
    let [c, h, w] = net.spec().input_shape;
    let mut rng = Rng::new(0);
    let image = Tensor::from_fn(&[1, c, h, w], |_| rng.uniform());
    for _ in 0..warmup {
        std::hint::black_box(net.logits(&image)?);
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        std::hint::black_box(net.logits(std::hint::black_box(&image))?);
        samples.push(t.elapsed().as_nanos() as f64 / 1000.0);
    }
    LatencyReport::from_samples(&samples, warmup, [1, c, h, w])
}

/// Multiply-accumulates of one single-image forward pass.
pub fn count_network_flops(net: &Network) -> u64 {
    net.flops()
}

/// Fills the mean latency of the base network and of the network after each
/// step (rebuilt from `base` by removing the same blocks).
pub fn attach_latency(traj: &mut PruneTrajectory, base: &Network, runs: usize, warmup: usize) -> Result<()> {
    traj.base_latency_us = Some(measure_latency(base, runs, warmup)?.mean_us);
    let mut removed = Vec::new();
    for step in &mut traj.steps {
        removed.push(step.removed);
        let net = base.prune_set(&removed)?;
        step.mean_latency_us = Some(measure_latency(&net, runs, warmup)?.mean_us);
    }
    Ok(())
}

pub const CURVE_HEADER: &str =
    "step,removed_block,blocks_remaining,params,flops,mean_latency_us,acc_raw,acc_finetuned";

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub removed_block: Option<usize>,
    pub blocks_remaining: usize,
    pub params: usize,
    pub flops: u64,
    pub mean_latency_us: Option<f64>,
    pub acc_raw: f64,
    pub acc_finetuned: Option<f64>,
}

/// Step 0 is the unpruned network, then one row per removal.
pub fn curve_rows(traj: &PruneTrajectory) -> Vec<CurveRow> {
    let mut rows = vec![CurveRow {
        step: 0,
        removed_block: None,
        blocks_remaining: traj.base_blocks,
        params: traj.base_params,
        flops: traj.base_flops,
        mean_latency_us: traj.base_latency_us,
        acc_raw: traj.base_accuracy,
        acc_finetuned: None,
    }];
    rows.extend(traj.steps.iter().enumerate().map(|(i, s)| CurveRow {
        step: i + 1,
        removed_block: Some(s.removed),
        blocks_remaining: s.blocks_remaining,
        params: s.params,
        flops: s.flops,
        mean_latency_us: s.mean_latency_us,
        acc_raw: s.acc_raw,
        acc_finetuned: s.acc_finetuned,
    }));
    rows
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let opt_f = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.removed_block.map(|b| b.to_string()).unwrap_or_default(),
            r.blocks_remaining,
            r.params,
            r.flops,
            opt_f(r.mean_latency_us),
            fmt_float(r.acc_raw),
            opt_f(r.acc_finetuned)
        )
        .unwrap();
    }
    out
}

pub fn emit_curve(traj: &PruneTrajectory, path: &Path) -> Result<()> {
    std::fs::write(path, curve_csv(&curve_rows(traj)))?;
    Ok(())
}

pub fn parse_curve(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CURVE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {CURVE_HEADER:?}"),
            })
        }
    }
    lines
        .map(|(n, line)| {
            let err = |msg: String| Error::Parse { line: n + 1, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(err(format!("expected 8 fields, got {}", f.len())));
            }
            fn num<T: std::str::FromStr>(s: &str, col: &str) -> std::result::Result<T, String> {
                s.parse().map_err(|_| format!("{col}: cannot parse {s:?}"))
            }
            fn opt<T: std::str::FromStr>(s: &str, col: &str) -> std::result::Result<Option<T>, String> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    num(s, col).map(Some)
                }
            }
            Ok(CurveRow {
                step: num(f[0], "step").map_err(err)?,
                removed_block: opt(f[1], "removed_block").map_err(err)?,
                blocks_remaining: num(f[2], "blocks_remaining").map_err(err)?,
                params: num(f[3], "params").map_err(err)?,
                flops: num(f[4], "flops").map_err(err)?,
                mean_latency_us: opt(f[5], "mean_latency_us").map_err(err)?,
                acc_raw: num(f[6], "acc_raw").map_err(err)?,
                acc_finetuned: opt(f[7], "acc_finetuned").map_err(err)?,
            })
        })
        .collect()
}
