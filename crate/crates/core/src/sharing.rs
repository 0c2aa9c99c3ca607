//! Weight banks and task-specific networks assembled from them.
//!
//! A base architecture is duplicated once per task. Every shareable
//! parametric layer position ℓ owns `K` candidate weights; an [`Assignment`]
//! picks one candidate for each (task, ℓ) cell. Assigning the same candidate
//! to several tasks shares those weights literally. The final dense layer of
//! each task is always private.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::distribution::Assignment;
use crate::error::{Error, Result};
use crate::tensor::{he_uniform_init, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// Opens a new shareable slot.
    #[default]
    Shared,
    /// Belongs to the slot of the previous shareable layer, so both are
    /// assigned as one unit (e.g. the convolutions of a residual block).
    JoinPrevious,
    /// Never shared; each task owns its copy.
    Private,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default)]
        sharing: Sharing,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        #[serde(default)]
        sharing: Sharing,
    },
    Relu,
    MaxPool2,
    Flatten,
}

impl LayerSpec {
    fn sharing(&self) -> Option<Sharing> {
        match self {
            LayerSpec::Dense { sharing, .. } | LayerSpec::Conv { sharing, .. } => Some(*sharing),
            _ => None,
        }
    }

    /// (weight shape, fan-in, bias length)
    fn param_shapes(&self) -> Option<(Vec<usize>, usize, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => Some((vec![inputs, outputs], inputs, outputs)),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                ..
            } => Some((vec![out_channels, in_channels, 3, 3], in_channels * 9, out_channels)),
            _ => None,
        }
    }
}

/// Base architecture shared by all tasks, excluding the per-task head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// Shape of a single example, e.g. `[1, 28, 28]` or `[16]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// Dense MLP trunk `inputs → hidden[0] → … → hidden[n-1]` with ReLU after
    /// each layer, every layer shareable.
    pub fn mlp(inputs: usize, hidden: &[usize]) -> Self {
        let mut layers = Vec::new();
        let mut prev = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                inputs: prev,
                outputs: h,
                sharing: Sharing::Shared,
            });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        ArchitectureSpec {
            input_shape: vec![inputs],
            layers,
        }
    }

    /// Convolutional trunk for single-channel `side×side` images: 3×3
    /// convolutions with ReLU, each followed by 2×2 pooling while the spatial
    /// size stays even, then a dense ReLU layer. Every layer is shareable.
    pub fn convnet(side: usize, channels: usize, filters: usize, conv_layers: usize, dense_units: usize) -> Self {
        let mut layers = Vec::new();
        let mut in_ch = channels;
        let mut size = side;
        for _ in 0..conv_layers {
            layers.push(LayerSpec::Conv {
                in_channels: in_ch,
                out_channels: filters,
                sharing: Sharing::Shared,
            });
            layers.push(LayerSpec::Relu);
            if size.is_multiple_of(2) {
                layers.push(LayerSpec::MaxPool2);
                size /= 2;
            }
            in_ch = filters;
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Dense {
            inputs: filters * size * size,
            outputs: dense_units,
            sharing: Sharing::Shared,
        });
        layers.push(LayerSpec::Relu);
        ArchitectureSpec {
            input_shape: vec![channels, side, side],
            layers,
        }
    }

    /// Checks that layer shapes compose and returns the trunk output width.
    pub fn validate(&self) -> Result<usize> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("bad input shape {:?}", self.input_shape)));
        }
        let mut shape = self.input_shape.clone();
        let mut seen_shared = false;
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |why: String| Error::Spec(format!("layer {i} ({layer:?}): {why}"));
            match *layer {
                LayerSpec::Dense { inputs, outputs, .. } => {
                    if shape != [inputs] {
                        return Err(fail(format!("expects [{inputs}], gets {shape:?}")));
                    }
                    if outputs == 0 {
                        return Err(fail("zero outputs".into()));
                    }
                    shape = vec![outputs];
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    ..
                } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(fail(format!("expects [{in_channels}, h, w], gets {shape:?}")));
                    }
                    if out_channels == 0 {
                        return Err(fail("zero filters".into()));
                    }
                    shape[0] = out_channels;
                }
                LayerSpec::MaxPool2 => {
                    if shape.len() != 3 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
                        return Err(fail(format!("needs [c, even, even], gets {shape:?}")));
                    }
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                }
                LayerSpec::Flatten => shape = vec![shape.iter().product()],
                LayerSpec::Relu => {}
            }
            match layer.sharing() {
                Some(Sharing::Shared) => seen_shared = true,
                Some(Sharing::JoinPrevious) if !seen_shared => {
                    return Err(fail("join_previous without a preceding shared layer".into()))
                }
                _ => {}
            }
        }
        match shape.as_slice() {
            &[width] => Ok(width),
            other => Err(Error::Spec(format!(
                "trunk must end in a flat vector for the head, ends in {other:?}"
            ))),
        }
    }

    /// Number of shareable slots per task.
    pub fn shareable_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.sharing() == Some(Sharing::Shared))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
enum Binding {
    /// Parameter group `member` of shareable slot `slot`.
    Shared { slot: usize, member: usize },
    /// Private layer number `index`.
    Private { index: usize },
}

/// `[weight, bias]`
pub type ParamPair = [ParamId; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBank {
    pub arch: ArchitectureSpec,
    pub candidates_per_slot: usize,
    pub task_classes: Vec<usize>,
    pub store: ParamStore,
    /// `[slot][candidate][member]`
    slots: Vec<Vec<Vec<ParamPair>>>,
    /// `[task][private layer]`
    private: Vec<Vec<ParamPair>>,
    heads: Vec<ParamPair>,
    bindings: Vec<Option<Binding>>,
}

impl WeightBank {
    /// Creates `K` independently initialized candidates for every shareable
    /// slot, plus private layers and a head for each task. Weights use
    /// uniform He initialization; biases start at zero.
    pub fn build<R: Rng + ?Sized>(
        arch: &ArchitectureSpec,
        candidates: usize,
        task_classes: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if candidates == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if task_classes.is_empty() {
            return Err(Error::Config("need at least one task".into()));
        }
        if let Some(&c) = task_classes.iter().find(|&&c| c < 2) {
            return Err(Error::Config(format!("a task needs at least 2 classes, got {c}")));
        }
        let trunk_width = arch.validate()?;

        let mut bindings = Vec::with_capacity(arch.layers.len());
        let mut slot_members: Vec<Vec<usize>> = Vec::new();
        let mut private_layers: Vec<usize> = Vec::new();
        for (i, layer) in arch.layers.iter().enumerate() {
            bindings.push(match layer.sharing() {
                None => None,
                Some(Sharing::Shared) => {
                    slot_members.push(vec![i]);
                    Some(Binding::Shared {
                        slot: slot_members.len() - 1,
                        member: 0,
                    })
                }
                Some(Sharing::JoinPrevious) => {
                    let slot = slot_members.len() - 1;
                    slot_members[slot].push(i);
                    Some(Binding::Shared {
                        slot,
                        member: slot_members[slot].len() - 1,
                    })
                }
                Some(Sharing::Private) => {
                    private_layers.push(i);
                    Some(Binding::Private {
                        index: private_layers.len() - 1,
                    })
                }
            });
        }

        let mut store = ParamStore::new();
        let make = |layer: &LayerSpec, store: &mut ParamStore, rng: &mut R| -> Result<ParamPair> {
            let (wshape, fan_in, bias_len) = layer.param_shapes().expect("parametric layer");
            let w = store.insert(he_uniform_init(&wshape, fan_in, rng)?);
            let b = store.insert(Tensor::zeros(&[bias_len]));
            Ok([w, b])
        };

        let mut slots = Vec::with_capacity(slot_members.len());
        for members in &slot_members {
            let mut cands = Vec::with_capacity(candidates);
            for _ in 0..candidates {
                let group = members
                    .iter()
                    .map(|&i| make(&arch.layers[i], &mut store, rng))
                    .collect::<Result<Vec<_>>>()?;
                cands.push(group);
            }
            slots.push(cands);
        }
        let mut private = Vec::with_capacity(task_classes.len());
        for _ in task_classes {
            private.push(
                private_layers
                    .iter()
                    .map(|&i| make(&arch.layers[i], &mut store, rng))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let mut heads = Vec::with_capacity(task_classes.len());
        for &classes in task_classes {
            let head = LayerSpec::Dense {
                inputs: trunk_width,
                outputs: classes,
                sharing: Sharing::Private,
            };
            heads.push(make(&head, &mut store, rng)?);
        }

        Ok(WeightBank {
            arch: arch.clone(),
            candidates_per_slot: candidates,
            task_classes: task_classes.to_vec(),
            store,
            slots,
            private,
            heads,
            bindings,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.task_classes.len()
    }

    /// Shareable slots per task.
    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    /// `N = tasks × shareable layers`
    pub fn num_slots(&self) -> usize {
        self.num_tasks() * self.num_layers()
    }

    /// Position of cell (task, layer) in an assignment vector.
    pub fn slot_index(&self, task: usize, layer: usize) -> usize {
        task * self.num_layers() + layer
    }

    pub fn candidate(&self, layer: usize, candidate: usize) -> &[ParamPair] {
        &self.slots[layer][candidate]
    }

    pub fn head(&self, task: usize) -> ParamPair {
        self.heads[task]
    }

    pub fn check_assignment(&self, a: &Assignment) -> Result<()> {
        if a.len() != self.num_slots() {
            return Err(Error::dim("assignment", &[a.len()], &[self.num_slots()]));
        }
        if let Some(&bad) = a.0.iter().find(|&&i| i >= self.candidates_per_slot) {
            return Err(Error::Argument(format!(
                "candidate {bad} out of range for K = {}",
                self.candidates_per_slot
            )));
        }
        Ok(())
    }

    /// Runs task `task`'s network on `x` (`[batch, input_shape…]`), taking
    /// each shareable layer's weights from the candidate chosen by `assignment`.
    pub fn forward_task(&self, tape: &mut Tape, task: usize, assignment: &Assignment, x: &Tensor) -> Result<Var> {
        if task >= self.num_tasks() {
            return Err(Error::Argument(format!("task {task} out of range")));
        }
        self.check_assignment(assignment)?;
        if x.shape().len() != self.arch.input_shape.len() + 1 || x.shape()[1..] != self.arch.input_shape[..] {
            return Err(Error::dim("forward_task input", x.shape(), &self.arch.input_shape));
        }
        let mut h = tape.constant(x.clone());
        for (layer, binding) in self.arch.layers.iter().zip(&self.bindings) {
            let params = binding.map(|b| match b {
                Binding::Shared { slot, member } => {
                    let cand = assignment.0[self.slot_index(task, slot)];
                    self.slots[slot][cand][member]
                }
                Binding::Private { index } => self.private[task][index],
            });
            h = match layer {
                LayerSpec::Dense { .. } => {
                    let [w, b] = params.expect("dense layer has parameters");
                    let (w, b) = (tape.param(&self.store, w), tape.param(&self.store, b));
                    tape.linear(h, w, b)?
                }
                LayerSpec::Conv { .. } => {
                    let [k, b] = params.expect("conv layer has parameters");
                    let (k, b) = (tape.param(&self.store, k), tape.param(&self.store, b));
                    tape.conv2d(h, k, b)?
                }
                LayerSpec::Relu => tape.relu(h),
                LayerSpec::MaxPool2 => tape.maxpool2(h)?,
                LayerSpec::Flatten => tape.flatten(h)?,
            };
        }
        let [w, b] = self.heads[task];
        let (w, b) = (tape.param(&self.store, w), tape.param(&self.store, b));
        tape.linear(h, w, b)
    }

    fn pair_size(&self, pair: &ParamPair) -> usize {
        pair.iter().map(|&id| self.store.value(id).len()).sum()
    }

    /// Total size of candidates referenced by at least one task, plus all
    /// private layers and heads.
    pub fn count_effective_parameters(&self, a: &Assignment) -> Result<usize> {
        self.check_assignment(a)?;
        let mut used = BTreeSet::new();
        for task in 0..self.num_tasks() {
            for layer in 0..self.num_layers() {
                used.insert((layer, a.0[self.slot_index(task, layer)]));
            }
        }
        let shared: usize = used
            .into_iter()
            .map(|(l, k)| self.slots[l][k].iter().map(|p| self.pair_size(p)).sum::<usize>())
            .sum();
        let private: usize = self.private.iter().flatten().map(|p| self.pair_size(p)).sum();
        let heads: usize = self.heads.iter().map(|p| self.pair_size(p)).sum();
        Ok(shared + private + heads)
    }

    /// Size of one candidate of every shareable slot, summed over slots.
    pub fn shareable_size_per_network(&self) -> usize {
        self.slots
            .iter()
            .map(|c| c[0].iter().map(|p| self.pair_size(p)).sum::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedSharing {
    FullSharing,
    NoSharing,
}

/// Baseline assignments: full sharing puts every task on candidate 0; no
/// sharing puts task `t` on candidate `t` (needs `K ≥ T`).
pub fn fixed_assignment(mode: FixedSharing, tasks: usize, layers: usize, candidates: usize) -> Result<Assignment> {
    match mode {
        FixedSharing::FullSharing => Ok(Assignment(vec![0; tasks * layers])),
        FixedSharing::NoSharing => {
            if candidates < tasks {
                return Err(Error::Config(format!(
                    "no sharing needs K >= T, got K = {candidates}, T = {tasks}"
                )));
            }
            Ok(Assignment(
                (0..tasks).flat_map(|t| std::iter::repeat_n(t, layers)).collect(),
            ))
        }
    }
}

/// Per shareable layer: how many groups of exactly `t` tasks share one candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingSummary {
    pub layers: Vec<BTreeMap<usize, usize>>,
}

pub fn sharing_summary(a: &Assignment, tasks: usize, layers: usize) -> Result<SharingSummary> {
    if a.len() != tasks * layers {
        return Err(Error::dim("sharing_summary", &[a.len()], &[tasks * layers]));
    }
    let summary = (0..layers)
        .map(|l| {
            let mut groups: BTreeMap<usize, usize> = BTreeMap::new();
            for t in 0..tasks {
                *groups.entry(a.0[t * layers + l]).or_default() += 1;
            }
            let mut hist = BTreeMap::new();
            for size in groups.into_values() {
                *hist.entry(size).or_default() += 1;
            }
            hist
        })
        .collect();
    Ok(SharingSummary { layers: summary })
}
