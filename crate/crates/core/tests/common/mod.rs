//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use blockprune::tensor::{Rng, Tape, Tensor, Var};

pub const FD_STEP: f32 = 1e-2;
pub const FD_TOL: f64 = 1e-3;

pub fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() * scale)
}

/// Entries are a shuffled ladder of values `spacing` apart, so no two
/// entries of a pooling window are within a finite-difference step.
pub fn distinct_tensor(shape: &[usize], rng: &mut Rng, spacing: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mid = n as f32 / 2.0;
    Tensor::from_fn(shape, |i| (order[i] as f32 - mid) * spacing)
}

/// Random tensor whose entries stay at least `margin` away from zero, so
/// that central differences never straddle a ReLU kink.
pub fn random_away_from_zero(shape: &[usize], rng: &mut Rng, margin: f32) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.normal();
        let mag = v.abs() + margin;
        if v < 0.0 {
            -mag
        } else {
            mag
        }
    })
}

/// Scalar objective sum(w ⊙ f(inputs)) with fixed random weights `w`, the
/// reduction done in f64 so cancellation does not swamp the difference.
pub struct Probe {
    pub weights: Vec<f32>,
}

impl Probe {
    pub fn new(len: usize, rng: &mut Rng) -> Self {
        Self {
            weights: (0..len).map(|_| rng.normal()).collect(),
        }
    }

    pub fn eval(&self, out: &[f32]) -> f64 {
        out.iter()
            .zip(&self.weights)
            .map(|(&o, &w)| o as f64 * w as f64)
            .sum()
    }

    /// Records the same objective on the tape so it can be differentiated.
    pub fn record(&self, tape: &mut Tape, out: Var) -> Var {
        let w = Tensor::new(tape.shape(out), self.weights.clone()).unwrap();
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod)
    }
}

/// Norm-wise relative error ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Central finite differences of `f` at `inputs[which]`, sampled at up to
/// `max_coords` evenly spaced coordinates.
///
/// The step-`FD_STEP` difference is compared against one at half the step.
/// On smooth stretches they agree to O(h²); when a kink (ReLU, max-pool
/// switch) lies inside the step they do not, and the coordinate is reported
/// as `None` because the central difference there is not a derivative.
pub fn central_differences(
    inputs: &[Tensor],
    which: usize,
    max_coords: usize,
    f: &dyn Fn(&[Tensor]) -> f64,
) -> (Vec<usize>, Vec<Option<f64>>) {
    let n = inputs[which].numel();
    let stride = n.div_ceil(max_coords).max(1);
    let coords: Vec<usize> = (0..n).step_by(stride).collect();
    let mut work = inputs.to_vec();
    let grads = coords
        .iter()
        .map(|&k| {
            let orig = work[which].data()[k];
            let mut at = |h: f32| {
                work[which].data_mut()[k] = orig + h;
                let v = f(&work);
                work[which].data_mut()[k] = orig;
                v
            };
            let centre = at(0.0);
            let (up, down) = (at(FD_STEP), at(-FD_STEP));
            let (up2, down2) = (at(FD_STEP / 2.0), at(-FD_STEP / 2.0));
            let h = FD_STEP as f64;
            let full = (up - down) / (2.0 * h);
            let half = (up2 - down2) / h;
            let scale = full.abs().max(half.abs());
            // a kink inside the stencil breaks either the agreement of the two
            // central estimates or the linear scaling of the one-sided gap
            let gap = (up - 2.0 * centre + down) / h;
            let gap2 = (up2 - 2.0 * centre + down2) / (h / 2.0);
            let smooth = (full - half).abs() <= 2.5e-4 * scale + 1e-3
                && (gap - 2.0 * gap2).abs() <= 1e-3 * scale + 1e-3;
            smooth.then_some(full)
        })
        .collect();
    (coords, grads)
}

/// Outcome of a gradient check: worst norm-wise relative error over leaves,
/// and how many sampled coordinates survived the kink filter.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub worst_rel_err: f64,
    pub kept: usize,
    pub sampled: usize,
    /// Smallest kept/sampled ratio of any single leaf.
    pub min_leaf_coverage: f64,
}

impl GradCheck {
    fn new() -> Self {
        Self {
            worst_rel_err: 0.0,
            kept: 0,
            sampled: 0,
            min_leaf_coverage: 1.0,
        }
    }

    fn add_leaf(&mut self, analytic: &[f32], coords: &[usize], numeric: &[Option<f64>]) {
        let (picked, numeric): (Vec<f64>, Vec<f64>) = coords
            .iter()
            .zip(numeric)
            .filter_map(|(&k, d)| d.map(|d| (analytic[k] as f64, d)))
            .unzip();
        self.kept += picked.len();
        self.sampled += coords.len();
        self.min_leaf_coverage = self.min_leaf_coverage.min(picked.len() as f64 / coords.len() as f64);
        if !picked.is_empty() {
            self.worst_rel_err = self.worst_rel_err.max(rel_err(&picked, &numeric));
        }
    }
}

/// Runs `build` on a tape with every input as a gradient leaf, back-propagates
/// the probe objective, and compares each input gradient with central
/// differences at up to 48 coordinates per input.
pub fn check_gradients(
    inputs: &[Tensor],
    seed: u64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> GradCheck {
    let forward = |ts: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t.clone().param())).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, _, out) = forward(inputs);
    let mut rng = Rng::new(seed);
    let probe = Probe::new(tape.value(out).numel(), &mut rng);
    drop(tape);

    let (mut tape, vars, out) = forward(inputs);
    let loss = probe.record(&mut tape, out);
    tape.backward(loss).unwrap();

    let objective = |ts: &[Tensor]| {
        let (tape, _, out) = forward(ts);
        probe.eval(tape.value(out).data())
    };
    let mut check = GradCheck::new();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("gradient reached every input");
        let (coords, numeric) = central_differences(inputs, i, 48, &objective);
        check.add_leaf(analytic, &coords, &numeric);
    }
    check
}

/// Gradient check of a whole block w.r.t. its input and every parameter
/// tensor. Train mode normalizes with batch statistics.
pub fn check_block_gradients(
    block: &blockprune::blocks::Block,
    input: &Tensor,
    mode: blockprune::tensor::Mode,
    seed: u64,
) -> GradCheck {
    let mut inputs = vec![input.clone()];
    inputs.extend(block.params().iter().map(|(_, t)| t.clone()));

    let with_params = |ts: &[Tensor]| {
        let mut b = block.clone();
        for ((_, p), t) in b.params_mut().iter_mut().zip(&ts[1..]) {
            p.data_mut().copy_from_slice(t.data());
        }
        b
    };
    let objective_out = |ts: &[Tensor]| {
        let b = with_params(ts);
        let mut tape = Tape::new();
        let x = tape.constant(ts[0].clone());
        let out = b.forward(&mut tape, x, mode).unwrap();
        tape.value(out.output).data().to_vec()
    };
    let mut rng = Rng::new(seed);
    let probe = Probe::new(objective_out(&inputs).len(), &mut rng);

    let mut tape = Tape::new();
    let x = tape.leaf(input.clone().param());
    let out = block.forward(&mut tape, x, mode).unwrap();
    let loss = probe.record(&mut tape, out.output);
    tape.backward(loss).unwrap();
    let mut leaves = vec![x];
    leaves.extend(out.params);

    let objective = |ts: &[Tensor]| probe.eval(&objective_out(ts));
    let mut check = GradCheck::new();
    for (i, v) in leaves.iter().enumerate() {
        let analytic = tape.grad(*v).expect("gradient reached leaf");
        let (coords, numeric) = central_differences(&inputs, i, 24, &objective);
        check.add_leaf(analytic, &coords, &numeric);
    }
    check
}

/// Moves normalization affine parameters off their (1, 0) initial values so
/// activations are not centred on ReLU kinks during gradient checks.
pub fn jitter_norm_params(block: &mut blockprune::blocks::Block, rng: &mut Rng) {
    for (name, t) in block.params_mut().iter_mut() {
        if name.ends_with(".gamma") {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0 + 0.3 * rng.normal());
        } else if name.ends_with(".beta") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.normal());
        }
    }
}

pub mod desk;
pub mod sweep;

/// One spec of every kind, sized for quick gradient checks.
pub fn one_spec_per_kind() -> Vec<blockprune::blocks::BlockSpec> {
    use blockprune::blocks::{BlockKind, BlockSpec};
    let mut v2 = BlockSpec::new(BlockKind::MobileNetV2S1, 3, 3, 1);
    v2.expansion = 2;
    let mut v2s2 = BlockSpec::new(BlockKind::MobileNetV2S2, 3, 4, 2);
    v2s2.expansion = 2;
    let mut fc = BlockSpec::new(BlockKind::FullyConnected, 3, 5, 1);
    fc.relu = true;
    vec![
        fc,
        BlockSpec::new(BlockKind::Basic, 3, 4, 1),
        BlockSpec::new(BlockKind::Pooling, 3, 4, 1),
        BlockSpec::new(BlockKind::Residual, 3, 3, 1),
        BlockSpec::new(BlockKind::ResidualProj, 3, 4, 2),
        BlockSpec::dense(3, 2, 2),
        BlockSpec::new(BlockKind::MobileNetV1, 3, 4, 1),
        v2,
        v2s2,
        BlockSpec::new(BlockKind::Inception, 3, 4, 1),
    ]
}
