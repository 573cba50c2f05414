//! Gradient sweeps over every differentiable op and every block kind, each
//! on three input shapes.

use blockprune::blocks::build_block;
use blockprune::tensor::{Mode, NormConfig, NormStats, Rng, Tensor};

use super::{
    check_block_gradients, check_gradients, distinct_tensor, jitter_norm_params, one_spec_per_kind,
    random_away_from_zero, random_tensor, GradCheck, FD_TOL,
};

pub struct Case {
    pub name: String,
    pub check: GradCheck,
}

impl Case {
    /// Error within tolerance and at least half of every leaf's sampled
    /// coordinates away from kinks.
    pub fn op_ok(&self) -> bool {
        self.check.worst_rel_err <= FD_TOL && self.check.min_leaf_coverage >= 0.5
    }

    /// Error within tolerance and at least a quarter of all sampled
    /// coordinates away from kinks (train-mode norms couple every pixel of
    /// a channel, so kinks are denser).
    pub fn block_ok(&self) -> bool {
        self.check.worst_rel_err <= FD_TOL && self.check.kept * 4 >= self.check.sampled
    }
}

fn case(name: &str, i: usize, check: GradCheck) -> Case {
    Case {
        name: format!("{name}[{i}]"),
        check,
    }
}

pub fn op_sweep() -> Vec<Case> {
    let mut out = Vec::new();

    for (i, (x, w, stride, pad)) in [
        ([2, 3, 8, 8], [4, 3, 3, 3], 1, 1),
        ([1, 2, 5, 7], [3, 2, 3, 3], 2, 0),
        ([2, 4, 6, 6], [2, 4, 1, 1], 1, 0),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = Rng::new(10 + i as u64);
        let inputs = [
            random_tensor(&x, &mut rng, 1.0),
            random_tensor(&w, &mut rng, 0.5),
            random_tensor(&[w[0]], &mut rng, 0.5),
        ];
        let c = check_gradients(&inputs, 1, &|t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap());
        out.push(case("conv2d", i, c));
    }

    for (i, (x, k, stride, pad)) in [([2, 3, 6, 6], 3, 1, 1), ([1, 2, 7, 5], 3, 2, 1), ([1, 4, 4, 4], 1, 1, 0)]
        .into_iter()
        .enumerate()
    {
        let mut rng = Rng::new(20 + i as u64);
        let c = x[1];
        let inputs = [
            random_tensor(&x, &mut rng, 1.0),
            random_tensor(&[c, 1, k, k], &mut rng, 0.5),
            random_tensor(&[c], &mut rng, 0.5),
        ];
        let c = check_gradients(&inputs, 2, &|t, v| {
            t.depthwise_conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()
        });
        out.push(case("depthwise_conv2d", i, c));
    }

    for (i, (n, din, dout)) in [(1, 3, 2), (4, 7, 5), (3, 16, 10)].into_iter().enumerate() {
        let mut rng = Rng::new(30 + i as u64);
        let inputs = [
            random_tensor(&[n, din], &mut rng, 1.0),
            random_tensor(&[dout, din], &mut rng, 0.5),
            random_tensor(&[dout], &mut rng, 0.5),
        ];
        let c = check_gradients(&inputs, 3, &|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap());
        out.push(case("linear", i, c));
    }

    for (i, shape) in [vec![7], vec![2, 3, 4, 4], vec![5, 6]].into_iter().enumerate() {
        let mut rng = Rng::new(40 + i as u64);
        let inputs = [random_away_from_zero(&shape, &mut rng, 0.05)];
        out.push(case("relu", i, check_gradients(&inputs, 4, &|t, v| t.relu(v[0]))));
    }

    for (i, shape) in [[1, 2, 4, 4], [2, 3, 6, 6], [1, 1, 8, 6]].into_iter().enumerate() {
        let mut rng = Rng::new(50 + i as u64);
        let inputs = [distinct_tensor(&shape, &mut rng, 0.05)];
        let c = check_gradients(&inputs, 5, &|t, v| t.max_pool2d(v[0], 2, 2, 0).unwrap());
        out.push(case("max_pool2d", i, c));
        let c = check_gradients(&inputs, 5, &|t, v| t.max_pool2d(v[0], 3, 1, 1).unwrap());
        out.push(case("max_pool2d_padded", i, c));
        let c = check_gradients(&inputs, 6, &|t, v| t.avg_pool2d(v[0], 2, 2).unwrap());
        out.push(case("avg_pool2d", i, c));
        let c = check_gradients(&inputs, 7, &|t, v| t.global_avg_pool(v[0]).unwrap());
        out.push(case("global_avg_pool", i, c));
    }

    for (i, shape) in [[4, 3, 2, 2], [2, 2, 3, 3], [8, 5, 1, 1]].into_iter().enumerate() {
        let mut rng = Rng::new(60 + i as u64);
        let c = shape[1];
        let inputs = [
            random_tensor(&shape, &mut rng, 2.0),
            Tensor::from_fn(&[c], |_| 1.0 + 0.3 * rng.normal()),
            random_tensor(&[c], &mut rng, 0.5),
        ];
        let stats = NormStats {
            mean: (0..c).map(|k| 0.1 * k as f32).collect(),
            var: (0..c).map(|k| 1.0 + 0.5 * k as f32).collect(),
        };
        for (name, mode) in [("batch_norm2d_train", Mode::Train), ("batch_norm2d_eval", Mode::Eval)] {
            let cfg = NormConfig { mode, ..NormConfig::default() };
            let c = check_gradients(&inputs, 8, &|t, v| t.batch_norm2d(v[0], v[1], v[2], &stats, cfg).unwrap().0);
            out.push(case(name, i, c));
        }
    }

    for (i, (n, c)) in [(1, 10), (4, 3), (8, 5)].into_iter().enumerate() {
        let mut rng = Rng::new(70 + i as u64);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let inputs = [random_tensor(&[n, c], &mut rng, 2.0)];
        let c = check_gradients(&inputs, 9, &|t, v| t.softmax_cross_entropy(v[0], &labels).unwrap());
        out.push(case("softmax_cross_entropy", i, c));
    }

    for (i, (n, ca, cb, hw)) in [(2, 2, 3, 3), (1, 1, 4, 2), (3, 3, 1, 4)].into_iter().enumerate() {
        let mut rng = Rng::new(80 + i as u64);
        let inputs = [
            random_tensor(&[n, ca, hw, hw], &mut rng, 1.0),
            random_tensor(&[n, cb, hw, hw], &mut rng, 1.0),
        ];
        let c = check_gradients(&inputs, 10, &|t, v| t.concat_channels(&[v[0], v[1]]).unwrap());
        out.push(case("concat_channels", i, c));
        let same = [inputs[0].clone(), random_tensor(inputs[0].shape(), &mut rng, 1.0)];
        let c = check_gradients(&same, 11, &|t, v| t.add(v[0], v[1]).unwrap());
        out.push(case("add", i, c));
        let c = check_gradients(&same, 12, &|t, v| t.mul(v[0], v[1]).unwrap());
        out.push(case("mul", i, c));
    }

    for (i, shape) in [[2, 3, 2, 2], [1, 4, 3, 1], [3, 1, 2, 5]].into_iter().enumerate() {
        let mut rng = Rng::new(90 + i as u64);
        let inputs = [random_tensor(&shape, &mut rng, 1.0)];
        let c = check_gradients(&inputs, 13, &|t, v| t.flatten(v[0]).unwrap());
        out.push(case("flatten", i, c));
        let flat = [shape[0] * shape[1], shape[2] * shape[3]];
        let c = check_gradients(&inputs, 14, &|t, v| t.reshape(v[0], &flat).unwrap());
        out.push(case("reshape", i, c));
        let c = check_gradients(&inputs, 15, &|t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.sum(sq)
        });
        out.push(case("sum", i, c));
    }

    for i in 0..3 {
        let mut rng = Rng::new(100 + i as u64);
        let inputs = [
            random_tensor(&[2, 2, 6, 6], &mut rng, 1.0),
            random_tensor(&[3, 2, 3, 3], &mut rng, 0.5),
            random_tensor(&[4, 12], &mut rng, 0.3),
            random_tensor(&[4], &mut rng, 0.3),
        ];
        let c = check_gradients(&inputs, 16, &|t, v| {
            let c = t.conv2d(v[0], v[1], None, 2, 0).unwrap();
            let r = t.relu(c);
            let f = t.flatten(r).unwrap();
            t.linear(f, v[2], Some(v[3])).unwrap()
        });
        out.push(case("conv_relu_linear", i, c));
    }
    out
}

/// Every block kind on three input shapes, in train and eval mode.
pub fn block_sweep() -> Vec<Case> {
    let mut out = Vec::new();
    for spec in one_spec_per_kind() {
        for (i, (n, h, w)) in [(2, 4, 4), (3, 5, 3), (2, 6, 6)].into_iter().enumerate() {
            let mut rng = Rng::new(100 + i as u64);
            let mut block = build_block(&spec, &mut rng).unwrap();
            jitter_norm_params(&mut block, &mut rng);
            let x = random_tensor(&[n, spec.in_channels, h, w], &mut rng, 1.0);
            for mode in [Mode::Train, Mode::Eval] {
                let c = check_block_gradients(&block, &x, mode, 7 + i as u64);
                out.push(Case {
                    name: format!("{}[{i}]/{mode:?}", spec.kind),
                    check: c,
                });
            }
        }
    }
    out
}

/// Aggregate kept/sampled per block kind must be at least one half.
pub fn block_kind_coverage(cases: &[Case]) -> Vec<(String, usize, usize)> {
    let mut out: Vec<(String, usize, usize)> = Vec::new();
    for c in cases {
        let kind = c.name.split('[').next().unwrap().to_string();
        match out.iter_mut().find(|e| e.0 == kind) {
            Some(e) => {
                e.1 += c.check.kept;
                e.2 += c.check.sampled;
            }
            None => out.push((kind, c.check.kept, c.check.sampled)),
        }
    }
    out
}
