//! Desk-scale fixtures: the seeded synthetic split, a trained desk network
//! and a desk network with a planted identity block.

use std::collections::BTreeSet;

use blockprune::data::{split, synth_dataset, Dataset};
use blockprune::model::{build_network, Network, NetworkSpec};
use blockprune::train::{train, FinetunePreset, TrainReport};

pub const DATA_SEED: u64 = 1;
pub const SPLIT_SEED: u64 = 2;
pub const TRAIN_SEED: u64 = 0;
/// Planted identity block of the desk network (stage 2, second block).
pub const PLANTED: usize = 9;

pub fn desk_split() -> (Dataset, Dataset) {
    let spec = NetworkSpec::desk();
    let ds = synth_dataset(spec.num_classes, 256, spec.input_shape, DATA_SEED).unwrap();
    split(&ds, (0.8, 0.2), SPLIT_SEED).unwrap()
}

pub fn train_spec(spec: &NetworkSpec, seed: u64, data: &(Dataset, Dataset)) -> (Network, TrainReport) {
    let mut net = build_network(spec, seed).unwrap();
    let report = train(&mut net, &data.0, &data.1, &FinetunePreset::Desk.config(seed)).unwrap();
    (net, report)
}

/// Trains the desk network without `planted`, then rebuilds the full
/// topology around the trained blocks with `planted` reduced to an exact
/// identity (zero residual branch).
pub fn planted_identity_net(planted: usize, data: &(Dataset, Dataset)) -> Network {
    let full = NetworkSpec::desk();
    let without = full.without(&BTreeSet::from([planted]));
    let (trained, _) = train_spec(&without, TRAIN_SEED, data);
    let mut net = build_network(&full, TRAIN_SEED).unwrap();
    for b in trained.blocks() {
        *net.block_mut(b.spec().index).unwrap() = b.clone();
    }
    net.block_mut(planted).unwrap().zero_branch().unwrap();
    net
}
