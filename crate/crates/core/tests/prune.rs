use blockprune::cli::sha256_hex;
use blockprune::data::{synth_dataset, Dataset, SplitTag};
use blockprune::model::{build_network, Network, NetworkSpec};
use blockprune::prune::{
    brute_force, check_brute_force_budget, evaluate_accuracy, greedy_prune, importance_direct,
    importance_direct_parallel, sequential_baseline, srinit_importance, srinit_prune, Finetune, FinetuneMode, Method,
};
use blockprune::tensor::Tensor;
use blockprune::train::FinetunePreset;
use blockprune::Error;

fn desk_net(seed: u64) -> Network {
    build_network(&NetworkSpec::desk(), seed).unwrap()
}

fn val_set() -> Dataset {
    synth_dataset(4, 20, [3, 16, 16], 5).unwrap()
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

#[test]
fn forced_prediction_accuracy() {
    let mut net = desk_net(0);
    let head = net.block_mut(11).unwrap().params_mut();
    head.get_mut("head.fc.weight").unwrap().data_mut().fill(0.0);
    let bias = head.get_mut("head.fc.bias").unwrap().data_mut();
    bias.fill(0.0);
    bias[0] = 1.0;
    let images = synth_dataset(4, 5, [3, 16, 16], 0).unwrap().images().clone();
    let all = |label| Dataset::new(images.clone(), vec![label; 20], 4, SplitTag::Val).unwrap();
    assert_eq!(evaluate_accuracy(&net, &all(0)).unwrap(), 1.0);
    assert_eq!(evaluate_accuracy(&net, &all(1)).unwrap(), 0.0);
}

#[test]
fn untrained_net_is_near_chance() {
    let spec = NetworkSpec::resnet20();
    let ds = synth_dataset(10, 30, spec.input_shape, 4).unwrap();
    for seed in 0..3 {
        let acc = evaluate_accuracy(&build_network(&spec, seed).unwrap(), &ds).unwrap();
        assert!((acc - 0.1).abs() <= 0.05, "seed {seed}: {acc}");
    }
}

#[test]
fn accuracy_rejects_mismatched_data() {
    let net = desk_net(0);
    let wrong = Dataset::new(Tensor::zeros(&[2, 3, 8, 8]), vec![0, 1], 4, SplitTag::Val).unwrap();
    assert!(evaluate_accuracy(&net, &wrong).is_err());
}

#[test]
fn importance_of_identity_block_equals_base() {
    let mut net = desk_net(1);
    net.block_mut(7).unwrap().zero_branch().unwrap();
    let val = val_set();
    let t = importance_direct(&net, &val).unwrap();
    assert_eq!(t.entries.len(), 6);
    assert_eq!(t.entries.iter().map(|e| e.0).collect::<Vec<_>>(), vec![3, 4, 6, 7, 9, 10]);
    assert_eq!(t.get(7), Some(t.base_accuracy));
    assert_eq!(importance_direct_parallel(&net, &val).unwrap(), t);
    for &(i, a) in &t.entries {
        assert_eq!(a, evaluate_accuracy(&net.prune(i).unwrap(), &val).unwrap());
    }
    let csv = t.to_csv();
    assert!(csv.starts_with("block,accuracy,base_accuracy\n"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn greedy_first_step_is_best_single_removal() {
    let val = val_set();
    for seed in 0..3 {
        let net = desk_net(seed);
        let run = greedy_prune(&net, &val, 2, None).unwrap();
        let best = importance_direct(&net, &val).unwrap().best().unwrap();
        assert_eq!(run.trajectory.steps[0].removed, best.0);
        assert_eq!(run.trajectory.steps[0].acc_raw, best.1);
        assert_eq!(run.tables.len(), 2);
        assert_eq!(run.trajectory.method, Method::Greedy);
    }
}

#[test]
fn zero_step_and_oversized_runs() {
    let net = desk_net(0);
    let val = val_set();
    let run = greedy_prune(&net, &val, 0, None).unwrap();
    assert!(run.trajectory.steps.is_empty());
    assert_eq!(run.trajectory.base_accuracy, evaluate_accuracy(&net, &val).unwrap());
    assert_eq!(run.trajectory.base_params, net.param_count());
    assert_eq!(run.trajectory.base_blocks, 9);
    assert!(matches!(greedy_prune(&net, &val, 7, None), Err(Error::Range(_))));
    assert!(matches!(sequential_baseline(&net, &val, 7, None), Err(Error::Range(_))));
    assert!(matches!(srinit_prune(&net, &val, 7, 1, 0, None), Err(Error::Range(_))));
}

#[test]
fn sequential_removes_from_the_end() {
    let val = val_set();
    let net = desk_net(0);
    assert_eq!(sequential_baseline(&net, &val, 2, None).unwrap().trajectory.removed(), vec![10, 9]);
    let a = sequential_baseline(&desk_net(7), &val, 3, None).unwrap().trajectory.removed();
    assert_eq!(a, vec![10, 9, 7]);
    let all = sequential_baseline(&net, &val, 6, None).unwrap();
    assert_eq!(all.trajectory.removed(), vec![10, 9, 7, 6, 4, 3]);
    assert!(all.network.valid_blocks().is_empty());
    let spec = NetworkSpec::desk();
    let mut params = net.param_count();
    for s in &all.trajectory.steps {
        params -= spec.block(s.removed).unwrap().param_count();
        assert_eq!(s.params, params);
    }
    assert_eq!(all.trajectory.steps.last().unwrap().blocks_remaining, 3);
}

#[test]
fn srinit_restores_the_network() {
    let net = desk_net(2);
    let val = val_set();
    let before = sha256_hex(&net.checkpoint_bytes());
    let base = evaluate_accuracy(&net, &val).unwrap();
    let t = srinit_importance(&net, &val, 3, 9).unwrap();
    assert_eq!(sha256_hex(&net.checkpoint_bytes()), before);
    assert_eq!(evaluate_accuracy(&net, &val).unwrap(), base);
    assert_eq!(t.entries.len(), 6);
    assert!(matches!(srinit_importance(&net, &val, 0, 9), Err(Error::Range(_))));
}

#[test]
fn srinit_with_the_init_seed_reproduces_base() {
    let net = desk_net(4);
    let val = val_set();
    let t = srinit_importance(&net, &val, 1, 4).unwrap();
    assert!(t.entries.iter().all(|&(_, a)| a == t.base_accuracy), "{t:?}");
}

#[test]
fn srinit_prune_follows_its_ranking() {
    let net = desk_net(3);
    let val = val_set();
    let run = srinit_prune(&net, &val, 4, 2, 1, None).unwrap();
    let ranking = srinit_importance(&net, &val, 2, 1).unwrap().ranking();
    assert_eq!(run.trajectory.removed(), ranking[..4]);
    assert_eq!(run.tables.len(), 1);
}

#[test]
fn brute_force_tables() {
    let net = desk_net(5);
    let val = val_set();
    let r = brute_force(&net, &val, 6).unwrap();
    assert_eq!(r.valid, vec![3, 4, 6, 7, 9, 10]);
    for k in 0..=6 {
        assert_eq!(r.table.iter().filter(|(s, _)| s.len() == k).count(), binomial(6, k));
    }
    assert_eq!(r.best_accuracy(0), Some(r.base_accuracy));
    let direct = importance_direct(&net, &val).unwrap();
    assert_eq!(r.best_accuracy(1), Some(direct.best().unwrap().1));
    for (subset, acc) in r.table.iter().filter(|(s, _)| s.len() == 2) {
        assert_eq!(*acc, evaluate_accuracy(&net.prune_set(subset).unwrap(), &val).unwrap());
        assert!(*acc <= r.best_accuracy(2).unwrap());
    }
    let greedy = greedy_prune(&net, &val, 6, None).unwrap();
    for (k, s) in greedy.trajectory.steps.iter().enumerate() {
        assert!(s.acc_raw <= r.best_accuracy(k + 1).unwrap());
    }
    assert!(r.to_csv().starts_with("k,subset,accuracy\n"));
    assert_eq!(r.to_csv().lines().count(), 65);
    assert_eq!(r.best_csv().lines().count(), 8);
    let limited = brute_force(&net, &val, 2).unwrap();
    assert_eq!(limited.table.len(), 1 + 6 + 15);
}

#[test]
fn brute_force_budget_guard() {
    assert!(check_brute_force_budget(20).is_ok());
    assert!(matches!(check_brute_force_budget(24), Err(Error::Budget { valid: 24, .. })));
    let net = build_network(&NetworkSpec::resnet56(), 0).unwrap();
    let val = synth_dataset(10, 1, [3, 32, 32], 0).unwrap();
    assert!(matches!(brute_force(&net, &val, 1), Err(Error::Budget { .. })));
}

#[test]
fn finetune_modes_mark_tuned_steps() {
    let train = synth_dataset(4, 4, [3, 16, 16], 8).unwrap();
    let val = val_set();
    let net = desk_net(0);
    let ft = |mode| Finetune {
        mode,
        train: &train,
        preset: FinetunePreset::Desk,
        seed: 0,
    };
    let each = sequential_baseline(&net, &val, 2, Some(&ft(FinetuneMode::Each))).unwrap();
    assert!(each.trajectory.steps.iter().all(|s| s.acc_finetuned.is_some()));
    let last = sequential_baseline(&net, &val, 2, Some(&ft(FinetuneMode::Final))).unwrap();
    let tuned: Vec<bool> = last.trajectory.steps.iter().map(|s| s.acc_finetuned.is_some()).collect();
    assert_eq!(tuned, vec![false, true]);
    let off = sequential_baseline(&net, &val, 2, Some(&ft(FinetuneMode::Off))).unwrap();
    assert!(off.trajectory.steps.iter().all(|s| s.acc_finetuned.is_none()));
    assert_eq!(off.trajectory.steps[0].acc_raw, each.trajectory.steps[0].acc_raw);
    assert!("sometimes".parse::<FinetuneMode>().is_err());
}
