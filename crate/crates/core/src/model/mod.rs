//! Dual-branch fusion model.
//!
//! Each branch projects face and voice vectors linearly to the embedding
//! dimension and fuses the pair with one of three heads (attention, gated
//! convolution, scalar weight). The frozen branch is trained first and then
//! locked; the update branch and a per-dimension gating combiner are trained
//! on top of it.

mod checkpoint;
mod fusion;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use diffcore::{BatchNormState, BatchStats, DiffArray, Gradients, NormMode, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, invalid, Result};

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use fusion::blend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Attention,
    Conv,
    /// Single learnable modality weight `sigmoid(ω)`.
    Scalar,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionKind::Attention => "attention",
            FusionKind::Conv => "conv",
            FusionKind::Scalar => "scalar",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchId {
    Frozen,
    Update,
}

impl BranchId {
    fn prefix(self) -> &'static str {
        match self {
            BranchId::Frozen => "frozen",
            BranchId::Update => "update",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Face => "face",
            Modality::Voice => "voice",
        })
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Training progress recorded on the model and in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Stage1,
    Stage2,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Init => "init",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

/// Which forward path to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Frozen (baseline) branch only.
    Baseline,
    /// Both branches joined by the combiner.
    Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Face,
    Voice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub face_dim: usize,
    pub voice_dim: usize,
    pub embed_dim: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub frozen_fusion: FusionKind,
    pub update_fusion: FusionKind,
    /// False builds a single-branch model (frozen slot only).
    pub dual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            face_dim: 4096,
            voice_dim: 512,
            embed_dim: 128,
            conv_channels: 8,
            conv_kernel: 3,
            frozen_fusion: FusionKind::Attention,
            update_fusion: FusionKind::Conv,
            dual: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("face_dim", self.face_dim),
            ("voice_dim", self.voice_dim),
            ("embed_dim", self.embed_dim),
            ("conv_channels", self.conv_channels),
            ("conv_kernel", self.conv_kernel),
        ] {
            if v == 0 {
                return Err(config_err(format!("model.{name} must be positive")));
            }
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(config_err(format!(
                "model.conv_kernel must be odd to keep the sequence length, got {}",
                self.conv_kernel
            )));
        }
        Ok(())
    }

    fn fusion(&self, branch: BranchId) -> FusionKind {
        match branch {
            BranchId::Frozen => self.frozen_fusion,
            BranchId::Update => self.update_fusion,
        }
    }

    fn branches(&self) -> &'static [BranchId] {
        if self.dual {
            &[BranchId::Frozen, BranchId::Update]
        } else {
            &[BranchId::Frozen]
        }
    }

    /// Parameter names and shapes in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let e = self.embed_dim;
        let c = self.conv_channels;
        let k = self.conv_kernel;
        let mut out = Vec::new();
        for &b in self.branches() {
            let p = b.prefix();
            let mut push = |name: &str, shape: Vec<usize>| out.push((format!("{p}.{name}"), shape));
            push("face.weight", vec![e, self.face_dim]);
            push("face.bias", vec![e]);
            push("voice.weight", vec![e, self.voice_dim]);
            push("voice.bias", vec![e]);
            match self.fusion(b) {
                FusionKind::Attention => {
                    push("att.score.weight", vec![2, 2 * e]);
                    push("att.score.bias", vec![2]);
                    push("att.out.weight", vec![e, e]);
                    push("att.out.bias", vec![e]);
                }
                FusionKind::Conv => {
                    push("conv.k1", vec![c, 1, k]);
                    push("conv.bn.gamma", vec![c]);
                    push("conv.bn.beta", vec![c]);
                    push("conv.k2", vec![1, c, k]);
                    push("conv.b2", vec![1]);
                    push("conv.out.weight", vec![e, 2 * e]);
                    push("conv.out.bias", vec![e]);
                }
                FusionKind::Scalar => {
                    push("scalar.omega", vec![1]);
                    push("scalar.out.weight", vec![e, e]);
                    push("scalar.out.bias", vec![e]);
                }
            }
        }
        if self.dual {
            out.push(("combiner.l1.weight".into(), vec![e, 2 * e]));
            out.push(("combiner.l1.bias".into(), vec![e]));
            out.push(("combiner.l2.weight".into(), vec![e, e]));
            out.push(("combiner.l2.bias".into(), vec![e]));
        }
        out.push(("head.weight".into(), vec![e, e]));
        out.push(("head.bias".into(), vec![e]));
        out
    }

    /// Names of batch-norm layers with their channel counts.
    fn batchnorm_layers(&self) -> Vec<(String, usize)> {
        self.branches()
            .iter()
            .filter(|&&b| self.fusion(b) == FusionKind::Conv)
            .map(|b| (format!("{}.conv.bn", b.prefix()), self.conv_channels))
            .collect()
    }
}

/// Biases, shifts and the scalar fusion weight start at zero, batch-norm
/// scales at one, and weights uniform in ±sqrt(6 / (fan_in + fan_out)).
fn init_rule(name: &str, shape: &[usize]) -> Init {
    if name.ends_with(".gamma") {
        return Init::Const(1.0);
    }
    if name.ends_with("bias") || name.ends_with(".beta") || name.ends_with(".b2") || name.ends_with(".omega") {
        return Init::Const(0.0);
    }
    let (fan_in, fan_out) = match *shape {
        [out, inp] => (inp, out),
        [c_out, c_in, k] => (c_in * k, c_out * k),
        _ => (1, 1),
    };
    Init::Uniform((6.0 / (fan_in + fan_out) as f64).sqrt())
}

enum Init {
    Const(f64),
    Uniform(f64),
}

/// Map from parameter name to its handle on a tape.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("parameter {name} is not bound on this tape")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Batch-norm statistics produced by a training forward pass, keyed by layer.
pub type BatchUpdates = Vec<(String, BatchStats)>;

#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchModel {
    config: ModelConfig,
    params: BTreeMap<String, DiffArray>,
    bn: BTreeMap<String, BatchNormState>,
    frozen: BTreeSet<BranchId>,
    stage: Stage,
    seed: u64,
}

impl DualBranchModel {
    /// Freshly initialized model drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = match init_rule(&name, &shape) {
                Init::Const(c) => vec![c; n],
                Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..=a)).collect(),
            };
            params.insert(name, DiffArray::new(shape, data)?);
        }
        let bn = config
            .batchnorm_layers()
            .into_iter()
            .map(|(name, c)| (name, BatchNormState::new(c)))
            .collect();
        Ok(Self {
            config,
            params,
            bn,
            frozen: BTreeSet::new(),
            stage: Stage::Init,
            seed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn params(&self) -> &BTreeMap<String, DiffArray> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&DiffArray> {
        self.params
            .get(name)
            .ok_or_else(|| invalid(format!("model has no parameter {name}")))
    }

    /// Replaces a parameter's values; the shape must not change.
    pub fn set_param(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| invalid(format!("model has no parameter {name}")))?;
        if p.len() != data.len() {
            return Err(invalid(format!(
                "parameter {name} has {} elements, got {}",
                p.len(),
                data.len()
            )));
        }
        p.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn batchnorm_states(&self) -> &BTreeMap<String, BatchNormState> {
        &self.bn
    }

    pub fn is_dual(&self) -> bool {
        self.config.dual
    }

    pub fn has_branch(&self, branch: BranchId) -> bool {
        self.config.branches().contains(&branch)
    }

    pub fn is_frozen(&self, branch: BranchId) -> bool {
        self.frozen.contains(&branch)
    }

    /// Locks a branch: it leaves the optimizer parameter list and always runs
    /// in eval mode. Freezing twice has no further effect.
    pub fn freeze_branch(&mut self, branch: BranchId) -> Result<()> {
        if !self.has_branch(branch) {
            return Err(invalid(format!("cannot freeze {branch} branch: model has no such branch")));
        }
        if branch == BranchId::Frozen && self.stage == Stage::Init {
            return Err(invalid("cannot freeze the frozen branch before it has been trained"));
        }
        self.frozen.insert(branch);
        Ok(())
    }

    pub(crate) fn unfreeze(&mut self, branch: BranchId) {
        self.frozen.remove(&branch);
    }

    fn branch_of(name: &str) -> Option<BranchId> {
        if name.starts_with("frozen.") {
            Some(BranchId::Frozen)
        } else if name.starts_with("update.") {
            Some(BranchId::Update)
        } else {
            None
        }
    }

    /// Parameters updated by the optimizer for a training pass.
    pub fn trainable_names(&self, pass: Pass) -> Vec<String> {
        self.params
            .keys()
            .filter(|name| match Self::branch_of(name) {
                Some(b) => {
                    !self.is_frozen(b)
                        && match pass {
                            Pass::Baseline => b == BranchId::Frozen,
                            Pass::Dual => true,
                        }
                }
                None => name.starts_with("head.") || (pass == Pass::Dual && name.starts_with("combiner.")),
            })
            .cloned()
            .collect()
    }

    /// Records every parameter on the tape, tracking gradients only for the
    /// names in `trainable`.
    pub fn bind(&self, tape: &Tape, trainable: &[String]) -> Bound {
        self.bind_where(tape, trainable, |_| true)
    }

    /// Like [`bind`](Self::bind), but skips parameters that `pass` never reads.
    pub fn bind_for(&self, tape: &Tape, pass: Pass, trainable: &[String]) -> Bound {
        self.bind_where(tape, trainable, |name| {
            pass == Pass::Dual || !(name.starts_with("update.") || name.starts_with("combiner."))
        })
    }

    fn bind_where(&self, tape: &Tape, trainable: &[String], keep: impl Fn(&str) -> bool) -> Bound {
        let set: BTreeSet<&str> = trainable.iter().map(String::as_str).collect();
        let mut bound = Bound::new();
        for (name, p) in self.params.iter().filter(|(name, _)| keep(name)) {
            let v = if set.contains(name.as_str()) {
                tape.param(p)
            } else {
                tape.constant(p)
            };
            bound.insert(name.clone(), v);
        }
        bound
    }

    /// Mutable access for the optimizer, restricted to `names`.
    pub fn params_mut<'a>(&'a mut self, names: &'a [String]) -> impl Iterator<Item = (&'a str, &'a mut DiffArray)> {
        self.params
            .iter_mut()
            .filter(move |(k, _)| names.iter().any(|n| n == *k))
            .map(|(k, v)| (k.as_str(), v))
    }

    /// Moves the gradients of the bound parameters from `grads` onto the
    /// model's arrays.
    pub fn set_grads(&mut self, bound: &Bound, grads: &mut Gradients) -> Result<()> {
        for (name, v) in bound.iter() {
            if let Some(g) = grads.take(v) {
                let p = self
                    .params
                    .get_mut(name)
                    .ok_or_else(|| invalid(format!("unknown parameter {name}")))?;
                p.set_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.values_mut().for_each(DiffArray::clear_grad);
    }

    /// Folds training-batch statistics into the running statistics.
    pub fn apply_batch_updates(&mut self, updates: &BatchUpdates) -> Result<()> {
        for (name, stats) in updates {
            let state = self
                .bn
                .get_mut(name)
                .ok_or_else(|| invalid(format!("model has no batch-norm layer {name}")))?;
            state.update(stats);
        }
        Ok(())
    }

    fn check_pass(&self, pass: Pass) -> Result<()> {
        if pass == Pass::Dual {
            if !self.config.dual {
                return Err(invalid("single-branch model has no dual forward path"));
            }
            if self.stage == Stage::Init {
                return Err(invalid(
                    "dual forward requires a model trained through stage 1 (model is at stage init)",
                ));
            }
        }
        Ok(())
    }

    /// Forward pass on the tape returning fused embeddings `[B×E]`.
    ///
    /// With `train` set, unfrozen branches normalize with batch statistics
    /// and their updates are returned; frozen branches always use running
    /// statistics.
    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        faces: Var,
        voices: Var,
        pass: Pass,
        train: bool,
    ) -> Result<(Var, BatchUpdates)> {
        self.check_pass(pass)?;
        let fs = tape.shape(faces);
        let vs = tape.shape(voices);
        if fs.len() != 2 || vs.len() != 2 || fs[0] != vs[0] {
            return Err(invalid(format!("face batch {fs:?} and voice batch {vs:?} must be matrices with equal rows")));
        }
        let mut updates = Vec::new();
        let mut run = |branch: BranchId| -> Result<Var> {
            let mode = if train && !self.is_frozen(branch) {
                NormMode::Train
            } else {
                NormMode::Eval
            };
            let (f, v) = self.project(tape, bound, branch, faces, voices)?;
            let (out, stats) = self.fuse(tape, bound, branch, f, v, mode)?;
            updates.extend(stats);
            Ok(out)
        };
        let out = match pass {
            Pass::Baseline => run(BranchId::Frozen)?,
            Pass::Dual => {
                let att = run(BranchId::Frozen)?;
                let con = run(BranchId::Update)?;
                self.combine(tape, bound, con, att)?
            }
        };
        Ok((out, updates))
    }

    /// The forward path matching the model's current stage.
    pub fn default_pass(&self) -> Pass {
        if self.config.dual && self.stage >= Stage::Stage2 {
            Pass::Dual
        } else {
            Pass::Baseline
        }
    }

    /// Eval-mode forward on plain arrays.
    pub fn forward_batch(&self, faces: &DiffArray, voices: &DiffArray, pass: Pass) -> Result<DiffArray> {
        let tape = Tape::new();
        let bound = self.bind(&tape, &[]);
        let f = tape.constant(faces);
        let v = tape.constant(voices);
        let (out, _) = self.forward(&tape, &bound, f, v, pass, false)?;
        Ok(tape.to_array(out))
    }

    /// Unimodal test-time embedding: the modality's projection is fed to
    /// both fusion slots, the result passed through the stage's forward path
    /// and L2-normalized.
    pub fn embed_modality(&self, rows: &DiffArray, modality: Modality) -> Result<DiffArray> {
        let pass = self.default_pass();
        self.check_pass(pass)?;
        let expected = match modality {
            Modality::Face => self.config.face_dim,
            Modality::Voice => self.config.voice_dim,
        };
        if rows.shape().len() != 2 || rows.shape()[1] != expected {
            return Err(invalid(format!(
                "{modality:?} rows have shape {:?}, expected [n×{expected}]",
                rows.shape()
            )));
        }
        let tape = Tape::new();
        let bound = self.bind_for(&tape, pass, &[]);
        let x = tape.constant(rows);
        let run = |branch: BranchId| -> Result<Var> {
            let prefix = branch.prefix();
            let (w, b) = match modality {
                Modality::Face => (format!("{prefix}.face.weight"), format!("{prefix}.face.bias")),
                Modality::Voice => (format!("{prefix}.voice.weight"), format!("{prefix}.voice.bias")),
            };
            let p = tape.linear(x, bound.get(&w)?, bound.get(&b)?)?;
            let (out, _) = self.fuse(&tape, &bound, branch, p, p, NormMode::Eval)?;
            Ok(out)
        };
        let out = match pass {
            Pass::Baseline => run(BranchId::Frozen)?,
            Pass::Dual => {
                let att = run(BranchId::Frozen)?;
                let con = run(BranchId::Update)?;
                self.combine(&tape, &bound, con, att)?
            }
        };
        let out = tape.l2_normalize(out)?;
        Ok(tape.to_array(out))
    }

    pub(crate) fn restore(
        config: ModelConfig,
        params: BTreeMap<String, DiffArray>,
        bn: BTreeMap<String, BatchNormState>,
        frozen: BTreeSet<BranchId>,
        stage: Stage,
        seed: u64,
    ) -> Self {
        Self {
            config,
            params,
            bn,
            frozen,
            stage,
            seed,
        }
    }

    pub(crate) fn frozen_set(&self) -> &BTreeSet<BranchId> {
        &self.frozen
    }
}
