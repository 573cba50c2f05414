mod common;

use blockprune::blocks::{build_block, BlockKind, BlockSpec};
use blockprune::tensor::{Mode, Rng, Tensor};
use common::sweep::{block_kind_coverage, block_sweep};
use common::{one_spec_per_kind, random_tensor};
use proptest::prelude::*;

#[test]
fn every_kind_passes_gradient_check_on_three_shapes() {
    assert_eq!(one_spec_per_kind().len(), BlockKind::ALL.len());
    let cases = block_sweep();
    let bad: Vec<String> = cases
        .iter()
        .filter(|c| !c.block_ok())
        .map(|c| format!("{}: rel err {:.3e}, kept {}/{}", c.name, c.check.worst_rel_err, c.check.kept, c.check.sampled))
        .collect();
    assert!(bad.is_empty(), "{bad:#?}");
    for (kind, kept, sampled) in block_kind_coverage(&cases) {
        assert!(kept * 2 >= sampled, "{kind}: only {kept}/{sampled} coordinates checked");
    }
}

#[test]
fn built_count_matches_closed_form_for_every_kind() {
    for spec in one_spec_per_kind() {
        for bn in [true, false] {
            let mut s = spec.clone();
            s.batchnorm = bn;
            let b = build_block(&s, &mut Rng::new(1)).unwrap();
            assert_eq!(b.param_count(), s.param_count(), "{} bn={bn}", s.kind);
        }
    }
}

fn arb_spec() -> impl Strategy<Value = BlockSpec> {
    (0usize..10, 1usize..9, 1usize..9, 1usize..3, 1usize..4, any::<bool>()).prop_map(
        |(k, cin, cout, stride, extra, bn)| {
            let kind = BlockKind::ALL[k];
            let mut s = match kind {
                BlockKind::Residual => BlockSpec::new(kind, cin, cin, 1),
                BlockKind::ResidualProj if cin == cout && stride == 1 => {
                    BlockSpec::new(kind, cin, cout + 1, 1)
                }
                BlockKind::Dense => BlockSpec::dense(cin, extra, extra),
                BlockKind::MobileNetV2S1 => BlockSpec::new(kind, cin, cout, 1),
                BlockKind::MobileNetV2S2 => BlockSpec::new(kind, cin, cout, 2),
                BlockKind::Inception => BlockSpec::new(kind, cin, 4 * cout, 1),
                BlockKind::FullyConnected => BlockSpec::new(kind, cin, cout, 1),
                _ => BlockSpec::new(kind, cin, cout, stride),
            };
            s.expansion = extra;
            s.batchnorm = bn;
            s
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_shape_matches_prediction(spec in arb_spec(), h in 2usize..9, w in 2usize..9, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let mut block = build_block(&spec, &mut rng).unwrap();
        let x = random_tensor(&[2, spec.in_channels, h, w], &mut rng, 1.0);
        let want = spec.output_shape(&[spec.in_channels, h, w]);
        prop_assume!(want.is_ok());
        let want = want.unwrap();
        let y = block.forward_tensor(&x, Mode::Eval).unwrap();
        prop_assert_eq!(&y.shape()[1..], &want[..]);
        prop_assert_eq!(spec.is_shape_preserving(), y.shape() == x.shape());
    }

    #[test]
    fn closed_form_count_equals_built_scalars(spec in arb_spec(), seed in 0u64..1000) {
        let block = build_block(&spec, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(block.param_count(), spec.param_count());
    }

    #[test]
    fn zero_branch_identity_exact(c in 1usize..6, h in 1usize..6, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let mut block = build_block(&BlockSpec::new(BlockKind::Residual, c, c, 1), &mut rng).unwrap();
        block.zero_branch().unwrap();
        let x = Tensor::from_fn(&[2, c, h, h], |_| rng.uniform() * 3.0);
        let y = block.forward_tensor(&x, Mode::Eval).unwrap();
        prop_assert_eq!(y.data(), x.data());
    }
}
