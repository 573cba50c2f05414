use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::blocks::{build_block, Block, BlockKind, BlockSpec, Stage};
use crate::error::{Error, Result, ValidityRule};
use crate::tensor::{
    checkpoint_bytes, parse_checkpoint, read_checkpoint, write_checkpoint, Mode, NormStats,
    ParamStore, Rng, Tape, Tensor, Var,
};

/// Declarative network layout: stem, stages of blocks, classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub stem: BlockSpec,
    pub stages: Vec<Vec<BlockSpec>>,
    pub head: BlockSpec,
    pub num_classes: usize,
    /// Per-sample input shape `(C, H, W)`.
    pub input_shape: [usize; 3],
}

/// Residual network family: a 3×3 stem, `depths[σ]` residual blocks per
/// stage (the first block of every stage after the first is a stride-2
/// projection block), global average pooling and a linear head.
pub fn resnet_spec(
    depths: &[usize],
    widths: &[usize],
    num_classes: usize,
    input_shape: [usize; 3],
) -> Result<NetworkSpec> {
    if depths.is_empty() || depths.len() != widths.len() {
        return Err(Error::Build(format!(
            "depths ({}) and widths ({}) must be non-empty lists of equal length",
            depths.len(),
            widths.len()
        )));
    }
    if depths.contains(&0) || widths.contains(&0) {
        return Err(Error::Build("stage depths and widths must be positive".into()));
    }
    let mut index = 1;
    let stem = BlockSpec::new(BlockKind::Basic, input_shape[0], widths[0], 1).at(index, Stage::Stem);
    let mut stages = Vec::new();
    let mut channels = widths[0];
    for (s, (&depth, &width)) in depths.iter().zip(widths).enumerate() {
        let mut blocks = Vec::new();
        for b in 0..depth {
            index += 1;
            let spec = if b == 0 && s > 0 {
                BlockSpec::new(BlockKind::ResidualProj, channels, width, 2)
            } else if channels != width {
                BlockSpec::new(BlockKind::ResidualProj, channels, width, 1)
            } else {
                BlockSpec::new(BlockKind::Residual, width, width, 1)
            };
            blocks.push(spec.at(index, Stage::Body(s)));
            channels = width;
        }
        stages.push(blocks);
    }
    let mut head = BlockSpec::new(BlockKind::FullyConnected, channels, num_classes, 1).at(index + 1, Stage::Head);
    head.pool = true;
    let spec = NetworkSpec {
        stem,
        stages,
        head,
        num_classes,
        input_shape,
    };
    spec.validate()?;
    Ok(spec)
}

impl NetworkSpec {
    pub fn resnet20() -> Self {
        resnet_spec(&[3, 3, 3], &[16, 32, 64], 10, [3, 32, 32]).unwrap()
    }

    pub fn resnet56() -> Self {
        resnet_spec(&[9, 9, 9], &[16, 32, 64], 10, [3, 32, 32]).unwrap()
    }

    /// ResNet20 topology at reduced width for 4-class 3×16×16 inputs.
    pub fn desk() -> Self {
        resnet_spec(&[3, 3, 3], &[8, 16, 32], 4, [3, 16, 16]).unwrap()
    }

    /// Two blocks per stage; the fastest preset with a non-empty valid set.
    pub fn mini() -> Self {
        resnet_spec(&[2, 2, 2], &[8, 16, 32], 4, [3, 16, 16]).unwrap()
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "resnet20" => Ok(Self::resnet20()),
            "resnet56" => Ok(Self::resnet56()),
            "desk" => Ok(Self::desk()),
            "mini" => Ok(Self::mini()),
            _ => Err(Error::Config(format!(
                "unknown model preset {name:?} (expected resnet20, resnet56, desk or mini)"
            ))),
        }
    }

    /// Every block in forward order: stem, stage blocks, head.
    pub fn blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        std::iter::once(&self.stem)
            .chain(self.stages.iter().flatten())
            .chain(std::iter::once(&self.head))
    }

    pub fn block(&self, index: usize) -> Option<&BlockSpec> {
        self.blocks().find(|b| b.index == index)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Build(msg));
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.input_shape.contains(&0) {
            return fail(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.stem.stage != Stage::Stem || self.head.stage != Stage::Head {
            return fail("stem and head must carry the stem and head stage tags".into());
        }
        if self.head.kind != BlockKind::FullyConnected {
            return fail(format!("head must be an fc block, got {}", self.head.kind));
        }
        if self.head.out_channels != self.num_classes {
            return fail(format!(
                "head produces {} outputs but num_classes is {}",
                self.head.out_channels, self.num_classes
            ));
        }
        if self.stages.is_empty() {
            return fail("network needs at least one stage".into());
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.is_empty() {
                return fail(format!("stage {s} is empty"));
            }
            for b in stage {
                if b.stage != Stage::Body(s) {
                    return fail(format!("block {} is listed in stage {s} but tagged {:?}", b.index, b.stage));
                }
                if b.kind == BlockKind::FullyConnected {
                    return fail(format!("block {}: fc blocks may only appear as the head", b.index));
                }
            }
        }
        let mut last = 0;
        for b in self.blocks() {
            if b.index <= last {
                return fail(format!(
                    "block indices must be strictly increasing in forward order, got {} after {last}",
                    b.index
                ));
            }
            last = b.index;
        }
        let mut shape = self.input_shape.to_vec();
        for b in self.blocks() {
            if b.in_channels != shape[0] {
                return fail(format!(
                    "block {} ({}) expects {} input channels but its predecessor produces {}",
                    b.index, b.kind, b.in_channels, shape[0]
                ));
            }
            shape = b
                .output_shape(&shape)
                .map_err(|e| Error::Build(format!("block {}: {e}", b.index)))?;
        }
        Ok(())
    }

    /// Per-sample input shape of every block, in forward order.
    pub fn block_inputs(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut out = Vec::new();
        for b in self.blocks() {
            out.push(shape.clone());
            shape = b.output_shape(&shape)?;
        }
        Ok(out)
    }

    /// Checks whether block `index` may be removed, naming the rule if not.
    pub fn check_prunable(&self, index: usize) -> Result<()> {
        let rule = if index == self.stem.index {
            Some(ValidityRule::Stem)
        } else if index == self.head.index {
            Some(ValidityRule::Head)
        } else {
            match self
                .stages
                .iter()
                .find_map(|st| st.iter().position(|b| b.index == index).map(|p| (p, &st[p])))
            {
                None => Some(ValidityRule::Missing),
                Some((0, _)) => Some(ValidityRule::FirstOfStage),
                Some((_, b)) if !b.is_shape_preserving() => Some(ValidityRule::Bridging),
                Some(_) => None,
            }
        };
        match rule {
            Some(rule) => Err(Error::Validity { index, rule }),
            None => Ok(()),
        }
    }

    /// Sorted indices of removable blocks.
    pub fn valid_blocks(&self) -> Vec<usize> {
        self.stages
            .iter()
            .flatten()
            .map(|b| b.index)
            .filter(|&i| self.check_prunable(i).is_ok())
            .collect()
    }

    pub fn without(&self, removed: &BTreeSet<usize>) -> NetworkSpec {
        let mut spec = self.clone();
        for stage in &mut spec.stages {
            stage.retain(|b| !removed.contains(&b.index));
        }
        spec
    }

    pub fn param_count(&self) -> usize {
        self.blocks().map(BlockSpec::param_count).sum()
    }

    /// Multiply-accumulate count of one forward pass over a single sample.
    pub fn flops(&self) -> Result<u64> {
        Ok(self
            .blocks()
            .zip(self.block_inputs()?)
            .map(|(b, s)| match s[..] {
                [_, h, w] => b.flops((h, w)),
                _ => b.flops((1, 1)),
            })
            .sum())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let [c, h, w] = self.input_shape;
        writeln!(out, "input {c} {h} {w}").unwrap();
        writeln!(out, "classes {}", self.num_classes).unwrap();
        writeln!(out, "stem {}", block_line(&self.stem)).unwrap();
        for stage in &self.stages {
            writeln!(out, "stage").unwrap();
            for b in stage {
                writeln!(out, "block {}", block_line(b)).unwrap();
            }
        }
        writeln!(out, "head {}", block_line(&self.head)).unwrap();
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        parse_spec(text)
    }

    pub fn read(path: &Path) -> Result<Self> {
        parse_spec(&std::fs::read_to_string(path)?)
    }
}

fn block_line(b: &BlockSpec) -> String {
    let mut s = format!(
        "{} in={} out={} stride={} index={}",
        b.kind, b.in_channels, b.out_channels, b.stride, b.index
    );
    match b.kind {
        BlockKind::MobileNetV2S1 | BlockKind::MobileNetV2S2 => write!(s, " expansion={}", b.expansion).unwrap(),
        BlockKind::Dense => write!(s, " growth={} layers={}", b.growth, b.layers).unwrap(),
        BlockKind::Inception => {
            let [a, c, d, e] = b.inception_widths();
            write!(s, " widths={a},{c},{d},{e}").unwrap()
        }
        BlockKind::FullyConnected => write!(s, " pool={} relu={}", b.pool as u8, b.relu as u8).unwrap(),
        _ => {}
    }
    if !b.batchnorm {
        s.push_str(" bn=0");
    }
    s
}

fn parse_spec(text: &str) -> Result<NetworkSpec> {
    let mut input = None;
    let mut classes = None;
    let mut stem = None;
    let mut head = None;
    let mut stages: Vec<Vec<BlockSpec>> = Vec::new();
    let mut next_index = 1;
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let err = |msg: String| Error::Parse { line, msg };
        let content = raw.split('#').next().unwrap().trim();
        if content.is_empty() {
            continue;
        }
        let mut words = content.split_whitespace();
        let keyword = words.next().unwrap();
        let rest: Vec<&str> = words.collect();
        let mut block = |stage: Stage| -> Result<BlockSpec> {
            let b = parse_block(&rest, stage, next_index).map_err(err)?;
            next_index = b.index + 1;
            Ok(b)
        };
        match keyword {
            "input" => {
                let dims: Vec<usize> = rest
                    .iter()
                    .map(|w| w.parse().map_err(|_| err(format!("bad input extent {w:?}"))))
                    .collect::<Result<_>>()?;
                let dims: [usize; 3] = dims
                    .try_into()
                    .map_err(|_| err("input takes exactly three extents: C H W".into()))?;
                input = Some(dims);
            }
            "classes" => {
                let [w] = rest[..] else {
                    return Err(err("classes takes one integer".into()));
                };
                classes = Some(w.parse().map_err(|_| err(format!("bad class count {w:?}")))?);
            }
            "stem" => {
                if stem.is_some() {
                    return Err(err("duplicate stem".into()));
                }
                stem = Some(block(Stage::Stem)?);
            }
            "stage" => {
                if !rest.is_empty() {
                    return Err(err("stage takes no arguments".into()));
                }
                if stem.is_none() {
                    return Err(err("stage before stem".into()));
                }
                stages.push(Vec::new());
            }
            "block" => {
                if stages.is_empty() {
                    return Err(err("block outside a stage".into()));
                }
                let s = stages.len() - 1;
                let b = block(Stage::Body(s))?;
                stages[s].push(b);
            }
            "head" => {
                if head.is_some() {
                    return Err(err("duplicate head".into()));
                }
                head = Some(block(Stage::Head)?);
            }
            other => return Err(err(format!("unknown keyword {other:?}"))),
        }
    }
    let missing = |what: &str| Error::Parse {
        line: text.lines().count(),
        msg: format!("missing {what} line"),
    };
    let spec = NetworkSpec {
        stem: stem.ok_or_else(|| missing("stem"))?,
        stages,
        head: head.ok_or_else(|| missing("head"))?,
        num_classes: classes.ok_or_else(|| missing("classes"))?,
        input_shape: input.ok_or_else(|| missing("input"))?,
    };
    spec.validate()?;
    Ok(spec)
}

fn parse_block(words: &[&str], stage: Stage, default_index: usize) -> std::result::Result<BlockSpec, String> {
    let (kind, opts) = words.split_first().ok_or("missing block kind")?;
    let kind: BlockKind = kind.parse().map_err(|e: Error| e.to_string())?;
    let mut fields = std::collections::BTreeMap::new();
    for opt in opts {
        let (k, v) = opt.split_once('=').ok_or_else(|| format!("expected key=value, got {opt:?}"))?;
        if fields.insert(k, v).is_some() {
            return Err(format!("duplicate key {k:?}"));
        }
    }
    let num = |k: &str| -> std::result::Result<Option<usize>, String> {
        fields
            .get(k)
            .map(|v| v.parse::<usize>().map_err(|_| format!("{k}: expected a non-negative integer, got {v:?}")))
            .transpose()
    };
    let flag = |k: &str| -> std::result::Result<Option<bool>, String> {
        fields
            .get(k)
            .map(|v| match *v {
                "0" | "false" => Ok(false),
                "1" | "true" => Ok(true),
                _ => Err(format!("{k}: expected 0 or 1, got {v:?}")),
            })
            .transpose()
    };
    let known = [
        "in", "out", "stride", "index", "expansion", "growth", "layers", "widths", "bn", "pool", "relu",
    ];
    if let Some(k) = fields.keys().find(|k| !known.contains(k)) {
        return Err(format!("unknown key {k:?}"));
    }
    let cin = num("in")?.ok_or("missing in=")?;
    let cout = num("out")?.ok_or("missing out=")?;
    let mut b = BlockSpec::new(kind, cin, cout, num("stride")?.unwrap_or(1));
    if let Some(e) = num("expansion")? {
        b.expansion = e;
    }
    if let Some(g) = num("growth")? {
        b.growth = g;
    }
    if let Some(l) = num("layers")? {
        b.layers = l;
    }
    if let Some(w) = fields.get("widths") {
        let ws: Vec<usize> = w
            .split(',')
            .map(|x| x.parse().map_err(|_| format!("widths: bad entry {x:?}")))
            .collect::<std::result::Result<_, _>>()?;
        b.branch_widths = Some(ws.try_into().map_err(|_| "widths takes four comma-separated values")?);
    }
    if let Some(bn) = flag("bn")? {
        b.batchnorm = bn;
    }
    if let Some(p) = flag("pool")? {
        b.pool = p;
    }
    if let Some(r) = flag("relu")? {
        b.relu = r;
    }
    let index = num("index")?.unwrap_or(default_index);
    b = b.at(index, stage);
    b.validate().map_err(|e| e.to_string())?;
    Ok(b)
}

/// A built network. Blocks keep their original global indices after pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    blocks: Vec<Block>,
}

/// Result of recording a network on a tape.
pub struct NetworkForward {
    pub logits: Var,
    /// Parameter leaves per block, in forward order.
    pub params: Vec<Vec<Var>>,
    pub norm_updates: Vec<Vec<(String, NormStats)>>,
}

/// Builds every block from its own stream `Rng::derive(seed, index)`, so a
/// block's initial values depend only on the seed and its global index.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let blocks = spec
        .blocks()
        .map(|b| build_block(b, &mut Rng::derive(seed, b.index as u64)))
        .collect::<Result<_>>()?;
    Ok(Network {
        spec: spec.clone(),
        blocks,
    })
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> Option<&Block> {
        self.blocks.iter().find(|b| b.spec().index == index)
    }

    pub fn block_mut(&mut self, index: usize) -> Option<&mut Block> {
        self.blocks.iter_mut().find(|b| b.spec().index == index)
    }

    pub fn valid_blocks(&self) -> Vec<usize> {
        self.spec.valid_blocks()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Block::param_count).sum()
    }

    pub fn flops(&self) -> u64 {
        self.spec.flops().expect("built networks have a consistent shape chain")
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(Error::Dimension(format!(
                "network expects input [N, {}, {}, {}], got {shape:?}",
                self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2]
            )));
        }
        Ok(())
    }

    pub fn record(&self, tape: &mut Tape, x: Var, mode: Mode) -> Result<NetworkForward> {
        self.check_input(tape.shape(x))?;
        let mut h = x;
        let mut params = Vec::with_capacity(self.blocks.len());
        let mut norm_updates = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let f = b.forward(tape, h, mode)?;
            h = f.output;
            params.push(f.params);
            norm_updates.push(f.norm_updates);
        }
        Ok(NetworkForward {
            logits: h,
            params,
            norm_updates,
        })
    }

    /// Eval-mode logits `[N, num_classes]`.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let f = self.record(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(f.logits).clone())
    }

    /// Forward pass; train mode updates normalization running statistics.
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let f = self.record(&mut tape, x, mode)?;
        let out = tape.value(f.logits).clone();
        self.apply_norm_updates(f.norm_updates);
        Ok(out)
    }

    pub fn apply_norm_updates(&mut self, updates: Vec<Vec<(String, NormStats)>>) {
        for (b, u) in self.blocks.iter_mut().zip(updates) {
            b.apply_norm_updates(u);
        }
    }

    /// Adds the tape gradients of `leaves` into the parameters' gradient
    /// buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, leaves: &[Vec<Var>]) -> Result<()> {
        for (b, vars) in self.blocks.iter_mut().zip(leaves) {
            for (t, v) in b.params_mut().tensors_mut().zip(vars) {
                if let Some(g) = tape.grad(*v) {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    /// Trainable tensors in a fixed order (stem, stage blocks, head).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut().tensors_mut())
    }

    pub fn zero_grad(&mut self) {
        for b in &mut self.blocks {
            b.params_mut().zero_grad();
        }
    }

    /// Removes block `index`, returning a new network; `self` is untouched.
    pub fn prune(&self, index: usize) -> Result<Network> {
        self.prune_set(&[index])
    }

    /// Removes every block in `indices` (each must be valid in `self`).
    pub fn prune_set(&self, indices: &[usize]) -> Result<Network> {
        for &i in indices {
            self.spec.check_prunable(i)?;
        }
        let removed: BTreeSet<usize> = indices.iter().copied().collect();
        Ok(Network {
            spec: self.spec.without(&removed),
            blocks: self
                .blocks
                .iter()
                .filter(|b| !removed.contains(&b.spec().index))
                .cloned()
                .collect(),
        })
    }

    /// Replaces block `index` with a freshly initialized copy drawn from `rng`.
    pub fn reinit_block(&mut self, index: usize, rng: &mut Rng) -> Result<()> {
        let slot = self
            .blocks
            .iter()
            .position(|b| b.spec().index == index)
            .ok_or(Error::Validity {
                index,
                rule: ValidityRule::Missing,
            })?;
        self.blocks[slot] = build_block(&self.blocks[slot].spec().clone(), rng)?;
        Ok(())
    }

    /// All parameters followed by all normalization buffers, block by block.
    pub fn state(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for b in &self.blocks {
            s.extend(b.params()).expect("parameter names are unique");
            s.extend(b.buffers()).expect("buffer names are unique");
        }
        s
    }

    /// Loads values from `state`, which must hold exactly this network's
    /// tensor names with matching shapes.
    pub fn load_state(&mut self, state: &ParamStore) -> Result<()> {
        let expected = self.state();
        if expected.len() != state.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, network has {}",
                state.len(),
                expected.len()
            )));
        }
        for b in &mut self.blocks {
            load_into(b.params_mut(), state)?;
            load_into(b.buffers_mut(), state)?;
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint_bytes(&self.state())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_checkpoint(&self.state(), path)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.load_state(&read_checkpoint(path)?)
    }

    pub fn load_checkpoint_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.load_state(&parse_checkpoint(bytes)?)
    }
}

fn load_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for (name, t) in dst.iter_mut() {
        let s = src
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no tensor {name:?}")))?;
        if s.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?}: checkpoint shape {:?}, network shape {:?}",
                s.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(s.data());
    }
    Ok(())
}
