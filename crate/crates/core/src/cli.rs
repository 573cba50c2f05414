use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::bench::{attach_latency, count_network_flops, emit_curve, measure_latency, DEFAULT_RUNS, DEFAULT_WARMUP};
use crate::data::{load_cifar10_binary, normalize, split, synth_dataset, Dataset, CIFAR10_MEAN, CIFAR10_STD};
use crate::error::{Error, Result};
use crate::model::{build_network, Network, NetworkSpec};
use crate::prune::{
    brute_force, check_brute_force_budget, greedy_prune, sequential_baseline, srinit_prune, Finetune,
    FinetuneMode, Method, PruneRun,
};
use crate::train::{train, FinetunePreset, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Keys accepted in config files and `--set`.
pub const CONFIG_KEYS: &[&str] = &[
    "model",
    "model_spec",
    "checkpoint",
    "data",
    "synth.classes",
    "synth.per_class",
    "synth.seed",
    "cifar10.train",
    "cifar10.normalize",
    "split.val_fraction",
    "split.seed",
    "seed",
    "train.preset",
    "train.epochs",
    "train.lr0",
    "train.weight_decay",
    "train.momentum",
    "train.batch_size",
    "train.milestones",
    "train.decay_factor",
    "method",
    "k",
    "finetune",
    "finetune.preset",
    "srinit.trials",
    "latency",
    "runs",
    "warmup",
    "out",
];

#[derive(Parser, Debug)]
#[command(name = "blockprune", version, about = "Block pruning by direct removal: train, prune, bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a baseline network and write its checkpoint.
    Train(Overrides),
    /// Prune a trained network with the selected method.
    Prune(Overrides),
    /// Measure single-image inference latency.
    Bench(Overrides),
}

#[derive(Args, Debug)]
struct Overrides {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pruning method: greedy, sequential, srinit or brute.
    #[arg(long)]
    method: Option<String>,
    /// Number of blocks to remove.
    #[arg(long)]
    k: Option<usize>,
    /// Initialization, shuffling and re-initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Timed forward passes for latency.
    #[arg(long)]
    runs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra KEY=VALUE overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Flat key=value configuration. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            c.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !CONFIG_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

/// Maps an error to the process exit code: 2 for usage, configuration and
/// malformed input, 3 for failures during computation.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Budget { .. }
        | Error::Range(_)
        | Error::Validity { .. }
        | Error::Build(_)
        | Error::Spec(_)
        | Error::Format { .. }
        | Error::Checkpoint(_)
        | Error::Dataset(_) => EXIT_USAGE,
        Error::CorruptRecord { .. }
        | Error::Diverged { .. }
        | Error::Dimension(_)
        | Error::Contract(_)
        | Error::Io(_) => EXIT_RUNTIME,
    }
}

/// Entry point for the `blockprune` binary; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, ov) = match &cli.command {
        Command::Train(o) => ("train", o),
        Command::Prune(o) => ("prune", o),
        Command::Bench(o) => ("bench", o),
    };
    let result = resolve(ov).and_then(|cfg| match name {
        "train" => cmd_train(&cfg),
        "prune" => cmd_prune(&cfg),
        _ => cmd_bench(&cfg),
    });
    match result {
        Ok(summary) => {
            print!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("blockprune {name}: {e}");
            exit_code(&e)
        }
    }
}

fn resolve(ov: &Overrides) -> Result<Config> {
    let mut cfg = match &ov.config {
        Some(p) => Config::read(p)?,
        None => Config::default(),
    };
    for kv in &ov.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(m) = &ov.method {
        cfg.set("method", m)?;
    }
    if let Some(k) = ov.k {
        cfg.set("k", &k.to_string())?;
    }
    if let Some(s) = ov.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(r) = ov.runs {
        cfg.set("runs", &r.to_string())?;
    }
    if let Some(o) = &ov.out {
        cfg.set("out", &o.to_string_lossy())?;
    }
    Ok(cfg)
}

fn model_spec(cfg: &Config) -> Result<NetworkSpec> {
    match cfg.get("model_spec") {
        Some(p) => {
            let path = Path::new(p);
            if !path.is_file() {
                return Err(Error::Config(format!("model_spec: file {p:?} does not exist")));
            }
            NetworkSpec::read(path)
        }
        None => NetworkSpec::preset(cfg.get("model").unwrap_or("desk")),
    }
}

fn load_network(cfg: &Config, require_checkpoint: bool) -> Result<Network> {
    let spec = model_spec(cfg)?;
    let mut net = build_network(&spec, cfg.parsed("seed", 0u64)?)?;
    match cfg.get("checkpoint") {
        Some(p) => {
            let path = Path::new(p);
            if !path.is_file() {
                return Err(Error::Config(format!("checkpoint: file {p:?} does not exist")));
            }
            net.load_checkpoint(path)?;
        }
        None if require_checkpoint => return Err(Error::Config("missing required key \"checkpoint\"".into())),
        None => {}
    }
    Ok(net)
}

fn load_data(cfg: &Config, spec: &NetworkSpec) -> Result<(Dataset, Dataset)> {
    let ds = match cfg.get("data").unwrap_or("synth") {
        "synth" => synth_dataset(
            cfg.parsed("synth.classes", spec.num_classes)?,
            cfg.parsed("synth.per_class", 256usize)?,
            spec.input_shape,
            cfg.parsed("synth.seed", 1u64)?,
        )?,
        "cifar10" => {
            let paths: Vec<PathBuf> = cfg
                .required("cifar10.train")?
                .split(',')
                .map(|p| PathBuf::from(p.trim()))
                .collect();
            if let Some(p) = paths.iter().find(|p| !p.is_file()) {
                return Err(Error::Config(format!(
                    "cifar10.train: file {} does not exist",
                    p.display()
                )));
            }
            let ds = load_cifar10_binary(&paths)?;
            if cfg.flag("cifar10.normalize", true)? {
                normalize(&ds, &CIFAR10_MEAN, &CIFAR10_STD)?
            } else {
                ds
            }
        }
        other => return Err(Error::Config(format!("data: expected synth or cifar10, got {other:?}"))),
    };
    let val: f64 = cfg.parsed("split.val_fraction", 0.2)?;
    split(&ds, (1.0 - val, val), cfg.parsed("split.seed", 2u64)?)
}

fn train_config(cfg: &Config) -> Result<TrainConfig> {
    let preset: FinetunePreset = cfg.get("train.preset").unwrap_or("desk").parse()?;
    let mut t = preset.config(cfg.parsed("seed", 0u64)?);
    t.epochs = cfg.parsed("train.epochs", t.epochs)?;
    t.lr0 = cfg.parsed("train.lr0", t.lr0)?;
    t.weight_decay = cfg.parsed("train.weight_decay", t.weight_decay)?;
    t.momentum = cfg.parsed("train.momentum", t.momentum)?;
    t.batch_size = cfg.parsed("train.batch_size", t.batch_size)?;
    t.decay_factor = cfg.parsed("train.decay_factor", t.decay_factor)?;
    if let Some(m) = cfg.get("train.milestones") {
        t.milestones = m
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("train.milestones: bad entry {s:?}")))
            })
            .collect::<Result<_>>()?;
    }
    t.validate()?;
    Ok(t)
}

fn out_dir(cfg: &Config) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.get("out").unwrap_or("out"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("out: cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `manifest.txt`: command, resolved config and the sha256 of every
/// artifact.
fn write_manifest(dir: &Path, command: &str, cfg: &Config, artifacts: &[&str]) -> Result<()> {
    let mut m = String::new();
    writeln!(m, "command={command}").unwrap();
    writeln!(m, "version={}", env!("CARGO_PKG_VERSION")).unwrap();
    for (k, v) in cfg.entries() {
        writeln!(m, "config.{k}={v}").unwrap();
    }
    for a in artifacts {
        let bytes = std::fs::read(dir.join(a))?;
        writeln!(m, "sha256.{a}={}", sha256_hex(&bytes)).unwrap();
    }
    std::fs::write(dir.join("manifest.txt"), m)?;
    Ok(())
}

/// Resolves defaults into the config so the manifest records every value
/// that influenced the run.
fn with_defaults(cfg: &Config, defaults: &[(&str, String)]) -> Config {
    let mut c = cfg.clone();
    for (k, v) in defaults {
        c.values.entry(k.to_string()).or_insert_with(|| v.clone());
    }
    c
}

pub fn cmd_train(cfg: &Config) -> Result<String> {
    let tc = train_config(cfg)?;
    let spec = model_spec(cfg)?;
    let (train_ds, val_ds) = load_data(cfg, &spec)?;
    let dir = out_dir(cfg)?;
    let mut net = build_network(&spec, tc.seed)?;
    let report = train(&mut net, &train_ds, &val_ds, &tc)?;
    net.save_checkpoint(&dir.join("checkpoint.bin"))?;
    std::fs::write(dir.join("model.spec"), spec.to_text())?;
    std::fs::write(dir.join("train_report.csv"), report.to_csv())?;
    let resolved = with_defaults(
        cfg,
        &[
            ("seed", tc.seed.to_string()),
            ("train.epochs", tc.epochs.to_string()),
            ("train.lr0", tc.lr0.to_string()),
            ("train.batch_size", tc.batch_size.to_string()),
        ],
    );
    write_manifest(&dir, "train", &resolved, &["checkpoint.bin", "model.spec", "train_report.csv"])?;
    Ok(format!(
        "final_val_acc={}\nparams={}\ncheckpoint={}\n",
        report.final_val_acc,
        net.param_count(),
        dir.join("checkpoint.bin").display()
    ))
}

pub fn cmd_prune(cfg: &Config) -> Result<String> {
    let method: Method = cfg.get("method").unwrap_or("greedy").parse()?;
    let spec = model_spec(cfg)?;
    let valid = spec.valid_blocks().len();
    if method == Method::Brute {
        check_brute_force_budget(valid)?;
    }
    let k: usize = cfg.parsed("k", valid)?;
    if k > valid {
        return Err(Error::Range(format!("k = {k} exceeds the {valid} valid blocks")));
    }
    let mode: FinetuneMode = cfg.get("finetune").unwrap_or("off").parse()?;
    let preset: FinetunePreset = cfg.get("finetune.preset").unwrap_or("desk").parse()?;
    let trials: usize = cfg.parsed("srinit.trials", 3)?;
    let seed: u64 = cfg.parsed("seed", 0)?;
    let latency = cfg.flag("latency", false)?;
    let runs: usize = cfg.parsed("runs", DEFAULT_RUNS)?;
    let warmup: usize = cfg.parsed("warmup", DEFAULT_WARMUP)?;
    let net = load_network(cfg, true)?;
    let (train_ds, val_ds) = load_data(cfg, net.spec())?;
    let dir = out_dir(cfg)?;
    let ft = Finetune {
        mode,
        train: &train_ds,
        preset,
        seed,
    };
    let mut artifacts: Vec<String> = Vec::new();
    let mut summary = String::new();
    if method == Method::Brute {
        let r = brute_force(&net, &val_ds, k)?;
        std::fs::write(dir.join("brute_force.csv"), r.to_csv())?;
        std::fs::write(dir.join("brute_best.csv"), r.best_csv())?;
        artifacts.extend(["brute_force.csv".into(), "brute_best.csv".into()]);
        for (k, (s, a)) in r.best.iter().enumerate() {
            writeln!(summary, "k={k} best_subset={s:?} best_accuracy={a}").unwrap();
        }
    } else {
        let ft = (mode != FinetuneMode::Off).then_some(&ft);
        let mut run: PruneRun = match method {
            Method::Greedy => greedy_prune(&net, &val_ds, k, ft)?,
            Method::Sequential => sequential_baseline(&net, &val_ds, k, ft)?,
            _ => srinit_prune(&net, &val_ds, k, trials, seed, ft)?,
        };
        if latency {
            attach_latency(&mut run.trajectory, &net, runs, warmup)?;
        }
        emit_curve(&run.trajectory, &dir.join("curve.csv"))?;
        artifacts.push("curve.csv".into());
        for (s, t) in run.tables.iter().enumerate() {
            let name = match method {
                Method::Srinit => "importance_srinit.csv".to_string(),
                _ => format!("importance_step{}.csv", s + 1),
            };
            std::fs::write(dir.join(&name), t.to_csv())?;
            artifacts.push(name);
        }
        run.network.save_checkpoint(&dir.join("pruned.bin"))?;
        std::fs::write(dir.join("pruned.spec"), run.network.spec().to_text())?;
        artifacts.extend(["pruned.bin".into(), "pruned.spec".into()]);
        writeln!(summary, "method={method}").unwrap();
        writeln!(summary, "base_accuracy={}", run.trajectory.base_accuracy).unwrap();
        for (i, s) in run.trajectory.steps.iter().enumerate() {
            write!(summary, "step={} removed={} acc_raw={} params={} flops={}", i + 1, s.removed, s.acc_raw, s.params, s.flops).unwrap();
            if let Some(a) = s.acc_finetuned {
                write!(summary, " acc_finetuned={a}").unwrap();
            }
            summary.push('\n');
        }
    }
    let resolved = with_defaults(
        cfg,
        &[
            ("method", method.to_string()),
            ("k", k.to_string()),
            ("seed", seed.to_string()),
        ],
    );
    let names: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    write_manifest(&dir, "prune", &resolved, &names)?;
    Ok(summary)
}

pub fn cmd_bench(cfg: &Config) -> Result<String> {
    let runs: usize = cfg.parsed("runs", DEFAULT_RUNS)?;
    let warmup: usize = cfg.parsed("warmup", DEFAULT_WARMUP)?;
    if runs == 0 {
        return Err(Error::Range("runs must be at least 1".into()));
    }
    let net = load_network(cfg, false)?;
    let dir = out_dir(cfg)?;
    let report = measure_latency(&net, runs, warmup)?;
    let mut text = report.to_text();
    writeln!(text, "params={}", net.param_count()).unwrap();
    writeln!(text, "flops={}", count_network_flops(&net)).unwrap();
    std::fs::write(dir.join("latency.txt"), &text)?;
    let resolved = with_defaults(cfg, &[("runs", runs.to_string()), ("warmup", warmup.to_string())]);
    write_manifest(&dir, "bench", &resolved, &["latency.txt"])?;
    Ok(text)
}
