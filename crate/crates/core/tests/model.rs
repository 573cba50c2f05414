use std::collections::BTreeSet;

use blockprune::model::{build_network, resnet_spec, NetworkSpec};
use blockprune::tensor::{Rng, Tensor};
use blockprune::{Error, ValidityRule};

fn random_batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(&[n, shape[0], shape[1], shape[2]], |_| rng.normal())
}

#[test]
fn preset_topologies_and_valid_sets() {
    let r20 = NetworkSpec::resnet20();
    assert_eq!(r20.stages.iter().map(Vec::len).sum::<usize>(), 9);
    assert_eq!(r20.valid_blocks(), vec![3, 4, 6, 7, 9, 10]);
    let r56 = NetworkSpec::resnet56();
    assert_eq!(r56.stages.iter().map(Vec::len).sum::<usize>(), 27);
    assert_eq!(r56.valid_blocks().len(), 24);
    assert_eq!(NetworkSpec::mini().valid_blocks(), vec![3, 5, 7]);
    let one = resnet_spec(&[1], &[8], 4, [3, 16, 16]).unwrap();
    assert!(one.valid_blocks().is_empty());
    assert_eq!(NetworkSpec::desk().valid_blocks(), vec![3, 4, 6, 7, 9, 10]);
}

#[test]
fn valid_set_excludes_stem_head_and_first_of_stage() {
    for spec in [NetworkSpec::resnet20(), NetworkSpec::resnet56(), NetworkSpec::desk()] {
        let valid: BTreeSet<usize> = spec.valid_blocks().into_iter().collect();
        assert!(!valid.contains(&spec.stem.index));
        assert!(!valid.contains(&spec.head.index));
        for stage in &spec.stages {
            assert!(!valid.contains(&stage[0].index));
            assert!(stage[1..].iter().all(|b| valid.contains(&b.index)));
        }
    }
}

#[test]
fn param_count_matches_built_store() {
    for spec in [NetworkSpec::resnet20(), NetworkSpec::desk(), NetworkSpec::mini()] {
        let net = build_network(&spec, 3).unwrap();
        let closed: usize = spec.blocks().map(|b| b.param_count()).sum();
        assert_eq!(net.param_count(), closed);
        let trainable: usize = net.blocks().iter().map(|b| b.params().scalar_count()).sum();
        assert_eq!(trainable, closed);
    }
    assert_eq!(NetworkSpec::resnet20().param_count(), 272_474);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let spec = NetworkSpec::desk();
    let a = build_network(&spec, 11).unwrap().checkpoint_bytes();
    let b = build_network(&spec, 11).unwrap().checkpoint_bytes();
    let c = build_network(&spec, 12).unwrap().checkpoint_bytes();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn broken_channel_chain_fails_to_build() {
    let text = NetworkSpec::desk().to_text().replacen("in=8 out=16", "in=12 out=16", 1);
    let spec = NetworkSpec::parse(&text);
    let built = spec.and_then(|s| build_network(&s, 0).map(|_| ()));
    assert!(matches!(built, Err(Error::Build(_)) | Err(Error::Spec(_))), "{built:?}");
}

#[test]
fn forward_shape_and_determinism() {
    let spec = NetworkSpec::desk();
    let net = build_network(&spec, 5).unwrap();
    let x = random_batch(3, spec.input_shape, 1);
    let y = net.logits(&x).unwrap();
    assert_eq!(y.shape(), &[3, spec.num_classes]);
    assert_eq!(y.data(), net.logits(&x).unwrap().data());

    let one = x.slice_outer(0, 1).unwrap();
    let same = one.gather_outer(&[0, 0, 0, 0]).unwrap();
    let rows = net.logits(&same).unwrap();
    let c = spec.num_classes;
    for r in 1..4 {
        assert_eq!(rows.data()[..c], rows.data()[r * c..(r + 1) * c]);
    }
    assert!(matches!(net.logits(&Tensor::zeros(&[1, 3, 8, 8])), Err(Error::Dimension(_))));
}

#[test]
fn pruning_one_block_is_exact_bookkeeping() {
    let spec = NetworkSpec::resnet20();
    let net = build_network(&spec, 0).unwrap();
    for i in spec.valid_blocks() {
        let p = net.prune(i).unwrap();
        assert_eq!(p.spec().stages.iter().map(Vec::len).sum::<usize>(), 8);
        assert_eq!(p.param_count(), net.param_count() - spec.block(i).unwrap().param_count());
        assert!(p.block(i).is_none());
    }
    let rule = |i| match net.prune(i) {
        Err(Error::Validity { rule, .. }) => rule,
        other => panic!("{i}: {:?}", other.map(|n| n.param_count())),
    };
    assert_eq!(rule(1), ValidityRule::Stem);
    assert_eq!(rule(11), ValidityRule::Head);
    assert_eq!(rule(2), ValidityRule::FirstOfStage);
    assert_eq!(rule(5), ValidityRule::FirstOfStage);
    assert_eq!(rule(8), ValidityRule::FirstOfStage);
    assert_eq!(rule(42), ValidityRule::Missing);
}

#[test]
fn zero_branch_block_prunes_to_identical_logits() {
    let spec = NetworkSpec::desk();
    let mut net = build_network(&spec, 9).unwrap();
    net.block_mut(7).unwrap().zero_branch().unwrap();
    let x = random_batch(4, spec.input_shape, 2);
    let pruned = net.prune(7).unwrap();
    assert_eq!(net.logits(&x).unwrap().data(), pruned.logits(&x).unwrap().data());
}

#[test]
fn prune_set_edge_cases_and_composition() {
    let spec = NetworkSpec::resnet20();
    let net = build_network(&spec, 4).unwrap();
    let x = random_batch(2, spec.input_shape, 3);
    let base = net.logits(&x).unwrap();
    assert_eq!(net.prune_set(&[]).unwrap().logits(&x).unwrap().data(), base.data());

    let all = net.prune_set(&spec.valid_blocks()).unwrap();
    let kept: Vec<usize> = all.spec().blocks().map(|b| b.index).collect();
    assert_eq!(kept, vec![1, 2, 5, 8, 11]);
    assert_eq!(all.logits(&x).unwrap().shape(), &[2, 10]);

    for (a, b) in [(3, 4), (10, 6), (7, 9)] {
        let once = net.prune_set(&[a, b]).unwrap().logits(&x).unwrap();
        let twice = net.prune(a).unwrap().prune(b).unwrap().logits(&x).unwrap();
        assert_eq!(once.data(), twice.data());
    }
    assert!(net.prune(3).unwrap().prune(3).is_err());
}

#[test]
fn checkpoints_roundtrip_and_reject_other_topologies() {
    let dir = tempfile::tempdir().unwrap();
    let spec = NetworkSpec::desk();
    let net = build_network(&spec, 1).unwrap();
    let path = dir.path().join("net.bin");
    net.save_checkpoint(&path).unwrap();
    let mut other = build_network(&spec, 2).unwrap();
    other.load_checkpoint(&path).unwrap();
    assert_eq!(other.checkpoint_bytes(), net.checkpoint_bytes());

    let pruned = net.prune(4).unwrap();
    let mut full = build_network(&spec, 2).unwrap();
    assert!(full.load_checkpoint_bytes(&pruned.checkpoint_bytes()).is_err());
    let mut bytes = net.checkpoint_bytes();
    bytes.truncate(bytes.len() - 1);
    assert!(full.load_checkpoint_bytes(&bytes).is_err());
}

#[test]
fn spec_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["resnet20", "resnet56", "desk", "mini"] {
        let spec = NetworkSpec::preset(name).unwrap();
        let path = dir.path().join(format!("{name}.spec"));
        std::fs::write(&path, spec.to_text()).unwrap();
        assert_eq!(NetworkSpec::read(&path).unwrap(), spec);
    }
    assert!(NetworkSpec::preset("resnet18").is_err());
}
