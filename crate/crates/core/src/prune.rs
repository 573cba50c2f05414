use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::bench::fmt_float;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Rng;
use crate::train::{finetune, FinetunePreset};

pub const EVAL_BATCH: usize = 256;
/// Largest valid set brute force will enumerate (2^20 subsets).
pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Fraction of samples whose arg-max logit (lowest class on ties) equals
/// the label, in eval mode.
pub fn evaluate_accuracy(net: &Network, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    for (images, labels) in batches(ds, EVAL_BATCH, None)? {
        let logits = net.logits(&images)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(classes).zip(&labels) {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            correct += (best == label) as usize;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Greedy,
    Sequential,
    Srinit,
    Brute,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Sequential => "sequential",
            Method::Srinit => "srinit",
            Method::Brute => "brute",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Greedy, Method::Sequential, Method::Srinit, Method::Brute]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?} (expected greedy, sequential, srinit or brute)"
                ))
            })
    }
}

/// Accuracy after removing (or re-initializing) each valid block.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub base_accuracy: f64,
    /// `(block index, accuracy)`, ascending by index.
    pub entries: Vec<(usize, f64)>,
}

impl ImportanceTable {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == index).map(|e| e.1)
    }

    /// Block indices from highest to lowest accuracy, lowest index first on
    /// ties.
    pub fn ranking(&self) -> Vec<usize> {
        let mut e = self.entries.clone();
        e.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        e.into_iter().map(|e| e.0).collect()
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        let i = *self.ranking().first()?;
        Some((i, self.get(i).unwrap()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,accuracy,base_accuracy\n");
        for (i, a) in &self.entries {
            writeln!(out, "{i},{},{}", fmt_float(*a), fmt_float(self.base_accuracy)).unwrap();
        }
        out
    }
}

fn score_blocks(
    net: &Network,
    parallel: bool,
    score: impl Fn(usize) -> Result<f64> + Sync,
) -> Result<Vec<(usize, f64)>> {
    let valid = net.valid_blocks();
    let scores: Vec<Result<f64>> = if parallel {
        valid.par_iter().map(|&i| score(i)).collect()
    } else {
        valid.iter().map(|&i| score(i)).collect()
    };
    valid.into_iter().zip(scores).map(|(i, s)| Ok((i, s?))).collect()
}

/// Accuracy of `prune(net, i)` for every valid block `i`.
pub fn importance_direct(net: &Network, val: &Dataset) -> Result<ImportanceTable> {
    importance_direct_with(net, val, false)
}

/// As [`importance_direct`], evaluating candidates on the rayon pool. The
/// table is identical to the serial one.
pub fn importance_direct_parallel(net: &Network, val: &Dataset) -> Result<ImportanceTable> {
    importance_direct_with(net, val, true)
}

fn importance_direct_with(net: &Network, val: &Dataset, parallel: bool) -> Result<ImportanceTable> {
    Ok(ImportanceTable {
        base_accuracy: evaluate_accuracy(net, val)?,
        entries: score_blocks(net, parallel, |i| evaluate_accuracy(&net.prune(i)?, val))?,
    })
}

/// Mean accuracy over `trials` re-initializations of each valid block; trial
/// `t` of block `i` draws from `Rng::derive(seed + t, i)`. `net` is not
/// modified.
pub fn srinit_importance(net: &Network, val: &Dataset, trials: usize, seed: u64) -> Result<ImportanceTable> {
    if trials == 0 {
        return Err(Error::Range("srinit needs at least one trial".into()));
    }
    Ok(ImportanceTable {
        base_accuracy: evaluate_accuracy(net, val)?,
        entries: score_blocks(net, true, |i| {
            let mut sum = 0.0;
            for t in 0..trials as u64 {
                let mut trial = net.clone();
                trial.reinit_block(i, &mut Rng::derive(seed.wrapping_add(t), i as u64))?;
                sum += evaluate_accuracy(&trial, val)?;
            }
            Ok(sum / trials as f64)
        })?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneMode {
    Off,
    Final,
    Each,
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(FinetuneMode::Off),
            "final" => Ok(FinetuneMode::Final),
            "each" => Ok(FinetuneMode::Each),
            _ => Err(Error::Config(format!(
                "unknown finetune mode {s:?} (expected off, final or each)"
            ))),
        }
    }
}

/// When and how to fine-tune pruned networks.
#[derive(Debug, Clone, Copy)]
pub struct Finetune<'a> {
    pub mode: FinetuneMode,
    pub train: &'a Dataset,
    pub preset: FinetunePreset,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneStep {
    pub removed: usize,
    /// Validation accuracy right after removal, before any fine-tuning.
    pub acc_raw: f64,
    pub acc_finetuned: Option<f64>,
    pub params: usize,
    pub flops: u64,
    pub blocks_remaining: usize,
    pub mean_latency_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneTrajectory {
    pub method: Method,
    pub base_accuracy: f64,
    pub base_params: usize,
    pub base_flops: u64,
    pub base_blocks: usize,
    pub base_latency_us: Option<f64>,
    pub steps: Vec<PruneStep>,
}

impl PruneTrajectory {
    fn start(method: Method, net: &Network, val: &Dataset) -> Result<Self> {
        Ok(Self {
            method,
            base_accuracy: evaluate_accuracy(net, val)?,
            base_params: net.param_count(),
            base_flops: net.flops(),
            base_blocks: body_blocks(net),
            base_latency_us: None,
            steps: Vec::new(),
        })
    }

    pub fn removed(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.removed).collect()
    }
}

fn body_blocks(net: &Network) -> usize {
    net.spec().stages.iter().map(Vec::len).sum()
}

/// A finished pruning run: the trajectory, the importance table used at each
/// greedy step, and the final network.
#[derive(Debug, Clone)]
pub struct PruneRun {
    pub trajectory: PruneTrajectory,
    pub tables: Vec<ImportanceTable>,
    pub network: Network,
}

fn check_k(net: &Network, k: usize) -> Result<()> {
    let v = net.valid_blocks().len();
    if k > v {
        return Err(Error::Range(format!("k = {k} exceeds the {v} valid blocks")));
    }
    Ok(())
}

/// Removes blocks in `order` one at a time, recording metrics; `choose`
/// picks the next block from the current network (after any fine-tuning).
fn run_removals(
    method: Method,
    net: &Network,
    val: &Dataset,
    k: usize,
    ft: Option<&Finetune>,
    mut choose: impl FnMut(&Network, usize) -> Result<(usize, Option<ImportanceTable>)>,
) -> Result<PruneRun> {
    check_k(net, k)?;
    let mut trajectory = PruneTrajectory::start(method, net, val)?;
    let mut tables = Vec::new();
    let mut current = net.clone();
    let mode = ft.map_or(FinetuneMode::Off, |f| f.mode);
    for step in 0..k {
        let (i, table) = choose(&current, step)?;
        tables.extend(table);
        current = current.prune(i)?;
        let acc_raw = evaluate_accuracy(&current, val)?;
        let tune = mode == FinetuneMode::Each || (mode == FinetuneMode::Final && step + 1 == k);
        let acc_finetuned = match ft {
            Some(f) if tune => {
                finetune(&mut current, f.train, val, f.preset, f.seed)?;
                Some(evaluate_accuracy(&current, val)?)
            }
            _ => None,
        };
        trajectory.steps.push(PruneStep {
            removed: i,
            acc_raw,
            acc_finetuned,
            params: current.param_count(),
            flops: current.flops(),
            blocks_remaining: body_blocks(&current),
            mean_latency_us: None,
        });
    }
    Ok(PruneRun {
        trajectory,
        tables,
        network: current,
    })
}

/// Iterative greedy pruning: at every step remove the valid block whose
/// direct removal keeps the highest validation accuracy (lowest index on
/// ties). With `Each` fine-tuning, later steps score the fine-tuned network.
pub fn greedy_prune(net: &Network, val: &Dataset, k: usize, ft: Option<&Finetune>) -> Result<PruneRun> {
    run_removals(Method::Greedy, net, val, k, ft, |cur, _| {
        let table = importance_direct_parallel(cur, val)?;
        let (i, _) = table.best().expect("k never exceeds the valid set");
        Ok((i, Some(table)))
    })
}

/// Removes the `k` highest-indexed valid blocks, last block first.
pub fn sequential_baseline(net: &Network, val: &Dataset, k: usize, ft: Option<&Finetune>) -> Result<PruneRun> {
    let order: Vec<usize> = net.valid_blocks().into_iter().rev().collect();
    run_removals(Method::Sequential, net, val, k, ft, |_, step| Ok((order[step], None)))
}

/// One-shot SRinit ordering: blocks whose re-initialization costs the least
/// accuracy are removed first.
pub fn srinit_prune(
    net: &Network,
    val: &Dataset,
    k: usize,
    trials: usize,
    seed: u64,
    ft: Option<&Finetune>,
) -> Result<PruneRun> {
    check_k(net, k)?;
    let table = srinit_importance(net, val, trials, seed)?;
    let order = table.ranking();
    let mut first = Some(table);
    run_removals(Method::Srinit, net, val, k, ft, |_, step| Ok((order[step], first.take())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub valid: Vec<usize>,
    pub base_accuracy: f64,
    /// Every evaluated subset, by size then lexicographically.
    pub table: Vec<(Vec<usize>, f64)>,
    /// Best subset per size `0..=max_k`; lexicographically smallest on ties.
    pub best: Vec<(Vec<usize>, f64)>,
}

impl BruteForceResult {
    pub fn best_accuracy(&self, k: usize) -> Option<f64> {
        self.best.get(k).map(|b| b.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,subset,accuracy\n");
        for (s, a) in &self.table {
            writeln!(out, "{},{},{}", s.len(), join_subset(s), fmt_float(*a)).unwrap();
        }
        out
    }

    pub fn best_csv(&self) -> String {
        let mut out = String::from("k,best_subset,best_accuracy\n");
        for (k, (s, a)) in self.best.iter().enumerate() {
            writeln!(out, "{k},{},{}", join_subset(s), fmt_float(*a)).unwrap();
        }
        out
    }
}

fn join_subset(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// All size-`k` subsets of `items` in lexicographic order.
pub fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn rec(items: &[usize], k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        let need = k - cur.len();
        for p in 0..items.len() {
            if items.len() - p < need {
                break;
            }
            cur.push(items[p]);
            rec(&items[p + 1..], k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= items.len() {
        rec(items, k, &mut Vec::with_capacity(k), &mut out);
    }
    out
}

pub fn check_brute_force_budget(valid: usize) -> Result<()> {
    if valid > BRUTE_FORCE_LIMIT {
        return Err(Error::Budget {
            valid,
            evaluations: 1u128 << valid,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    Ok(())
}

/// Evaluates `prune_set(net, S)` for every `S ⊆ V` with `|S| ≤ max_k`.
pub fn brute_force(net: &Network, val: &Dataset, max_k: usize) -> Result<BruteForceResult> {
    let valid = net.valid_blocks();
    check_brute_force_budget(valid.len())?;
    let max_k = max_k.min(valid.len());
    let subsets: Vec<Vec<usize>> = (0..=max_k).flat_map(|k| combinations(&valid, k)).collect();
    let accs: Vec<Result<f64>> = subsets
        .par_iter()
        .map(|s| evaluate_accuracy(&net.prune_set(s)?, val))
        .collect();
    let table: Vec<(Vec<usize>, f64)> = subsets
        .into_iter()
        .zip(accs)
        .map(|(s, a)| Ok((s, a?)))
        .collect::<Result<_>>()?;
    let mut best: Vec<(Vec<usize>, f64)> = Vec::with_capacity(max_k + 1);
    for (s, a) in &table {
        match best.get_mut(s.len()) {
            Some(b) if *a > b.1 => *b = (s.clone(), *a),
            Some(_) => {}
            None => best.push((s.clone(), *a)),
        }
    }
    Ok(BruteForceResult {
        base_accuracy: table[0].1,
        valid,
        table,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_are_lexicographic_with_binomial_counts() {
        let v = [3, 4, 6, 7, 9, 10];
        let counts: Vec<usize> = (0..=6).map(|k| combinations(&v, k).len()).collect();
        assert_eq!(counts, vec![1, 6, 15, 20, 15, 6, 1]);
        let two = combinations(&v, 2);
        assert_eq!(two[0], vec![3, 4]);
        assert_eq!(two[5], vec![4, 6]);
        let mut sorted = two.clone();
        sorted.sort();
        assert_eq!(sorted, two);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        let t = ImportanceTable {
            base_accuracy: 0.9,
            entries: vec![(3, 0.5), (4, 0.8), (6, 0.8), (7, 0.1)],
        };
        assert_eq!(t.ranking(), vec![4, 6, 3, 7]);
        assert_eq!(t.best(), Some((4, 0.8)));
    }

    #[test]
    fn budget_guard() {
        assert!(check_brute_force_budget(20).is_ok());
        match check_brute_force_budget(24) {
            Err(Error::Budget { evaluations, .. }) => assert_eq!(evaluations, 1 << 24),
            other => panic!("{other:?}"),
        }
    }
}
