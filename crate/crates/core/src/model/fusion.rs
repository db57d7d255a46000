use diffcore::{BatchStats, DiffArray, NormMode, Tape, Var};

use super::{BranchId, Bound, DualBranchModel, FusionKind};
use crate::error::{invalid, Result};

impl DualBranchModel {
    /// Linear face and voice projections `(F, V)` of a branch.
    pub fn project(&self, tape: &Tape, bound: &Bound, branch: BranchId, faces: Var, voices: Var) -> Result<(Var, Var)> {
        let p = branch.prefix();
        let fd = tape.shape(faces);
        let vd = tape.shape(voices);
        if fd.last() != Some(&self.config.face_dim) || vd.last() != Some(&self.config.voice_dim) {
            return Err(invalid(format!(
                "feature shapes {fd:?}/{vd:?} do not match face_dim {} / voice_dim {}",
                self.config.face_dim, self.config.voice_dim
            )));
        }
        let f = tape.linear(faces, bound.get(&format!("{p}.face.weight"))?, bound.get(&format!("{p}.face.bias"))?)?;
        let v = tape.linear(voices, bound.get(&format!("{p}.voice.weight"))?, bound.get(&format!("{p}.voice.bias"))?)?;
        Ok((f, v))
    }

    /// Applies the branch's fusion head to projected embeddings.
    pub fn fuse(
        &self,
        tape: &Tape,
        bound: &Bound,
        branch: BranchId,
        f: Var,
        v: Var,
        mode: NormMode,
    ) -> Result<(Var, Option<(String, BatchStats)>)> {
        if !self.has_branch(branch) {
            return Err(invalid(format!("model has no {branch} branch")));
        }
        match self.config.fusion(branch) {
            FusionKind::Attention => Ok((self.attention_fuse(tape, bound, branch, f, v)?, None)),
            FusionKind::Scalar => Ok((self.scalar_fuse(tape, bound, branch, f, v)?, None)),
            FusionKind::Conv => self.conv_gate_fuse(tape, bound, branch, f, v, mode),
        }
    }

    fn expect_kind(&self, branch: BranchId, kind: FusionKind) -> Result<()> {
        let actual = self.config.fusion(branch);
        if actual != kind {
            return Err(invalid(format!("{branch} branch uses {actual} fusion, not {kind}")));
        }
        Ok(())
    }

    /// Softmax modality weighting `w_F·F + w_V·V` followed by a linear map.
    pub fn attention_fuse(&self, tape: &Tape, bound: &Bound, branch: BranchId, f: Var, v: Var) -> Result<Var> {
        self.expect_kind(branch, FusionKind::Attention)?;
        let p = branch.prefix();
        let rows = tape.shape(f)[0];
        let x = tape.concat_cols(f, v)?;
        let scores = tape.linear(x, bound.get(&format!("{p}.att.score.weight"))?, bound.get(&format!("{p}.att.score.bias"))?)?;
        let w = tape.softmax_rows(scores)?;
        let wf = tape.slice_cols(w, 0, 1)?;
        let wf = tape.reshape(wf, vec![rows])?;
        let wv = tape.slice_cols(w, 1, 2)?;
        let wv = tape.reshape(wv, vec![rows])?;
        let a = tape.scale_rows(f, wf)?;
        let b = tape.scale_rows(v, wv)?;
        let fused = tape.add(a, b)?;
        Ok(tape.linear(fused, bound.get(&format!("{p}.att.out.weight"))?, bound.get(&format!("{p}.att.out.bias"))?)?)
    }

    /// `sigmoid(ω)·F + (1 − sigmoid(ω))·V` followed by a linear map.
    pub fn scalar_fuse(&self, tape: &Tape, bound: &Bound, branch: BranchId, f: Var, v: Var) -> Result<Var> {
        self.expect_kind(branch, FusionKind::Scalar)?;
        let p = branch.prefix();
        let rows = tape.shape(f)[0];
        let omega = tape.reshape(bound.get(&format!("{p}.scalar.omega"))?, vec![1, 1])?;
        let w = tape.sigmoid(omega)?;
        let ones = tape.constant(&DiffArray::filled(vec![rows, 1], 1.0)?);
        let col = tape.matmul(ones, w)?;
        let wf = tape.reshape(col, vec![rows])?;
        let wv = tape.affine(wf, -1.0, 1.0)?;
        let a = tape.scale_rows(f, wf)?;
        let b = tape.scale_rows(v, wv)?;
        let fused = tape.add(a, b)?;
        Ok(tape.linear(fused, bound.get(&format!("{p}.scalar.out.weight"))?, bound.get(&format!("{p}.scalar.out.bias"))?)?)
    }

    /// Gated convolution fusion.
    ///
    /// `x = [F, V]` is read as a one-channel sequence. A convolution,
    /// batch-norm and ReLU stack gives `c` (C channels); a second
    /// convolution reduces `c` to one attention channel `a`. The gate is
    /// `k = sigmoid(mean_c(c) ⊙ a)` and the output `linear(k ⊙ x)`.
    pub fn conv_gate_fuse(
        &self,
        tape: &Tape,
        bound: &Bound,
        branch: BranchId,
        f: Var,
        v: Var,
        mode: NormMode,
    ) -> Result<(Var, Option<(String, BatchStats)>)> {
        self.expect_kind(branch, FusionKind::Conv)?;
        let p = branch.prefix();
        let rows = tape.shape(f)[0];
        let len = 2 * self.config.embed_dim;
        let pad = self.config.conv_kernel / 2;
        let bn_name = format!("{p}.conv.bn");
        let state = self
            .bn
            .get(&bn_name)
            .ok_or_else(|| invalid(format!("model has no batch-norm layer {bn_name}")))?;

        let x = tape.concat_cols(f, v)?;
        let seq = tape.reshape(x, vec![rows, 1, len])?;
        // no bias before batch norm: the normalization would cancel it
        let zero_bias = tape.constant(&DiffArray::zeros(vec![self.config.conv_channels])?);
        let c = tape.conv1d(seq, bound.get(&format!("{p}.conv.k1"))?, zero_bias, 1, pad)?;
        let (c, stats) = tape.batchnorm(
            c,
            bound.get(&format!("{p}.conv.bn.gamma"))?,
            bound.get(&format!("{p}.conv.bn.beta"))?,
            state,
            mode,
        )?;
        let c = tape.relu(c)?;
        let a = tape.conv1d(c, bound.get(&format!("{p}.conv.k2"))?, bound.get(&format!("{p}.conv.b2"))?, 1, pad)?;
        let a = tape.reshape(a, vec![rows, len])?;
        let m = tape.mean_channels(c)?;
        let prod = tape.mul(m, a)?;
        let gate = tape.sigmoid(prod)?;
        let gated = tape.mul(gate, x)?;
        let out = tape.linear(gated, bound.get(&format!("{p}.conv.out.weight"))?, bound.get(&format!("{p}.conv.out.bias"))?)?;
        Ok((out, stats.map(|s| (bn_name, s))))
    }

    /// Per-dimension gate `W = sigmoid(L2(relu(L1([I_con, I_att]))))`.
    pub fn combiner_weights(&self, tape: &Tape, bound: &Bound, i_con: Var, i_att: Var) -> Result<Var> {
        if !self.config.dual {
            return Err(invalid("single-branch model has no combiner"));
        }
        let x = tape.concat_cols(i_con, i_att)?;
        let h = tape.linear(x, bound.get("combiner.l1.weight")?, bound.get("combiner.l1.bias")?)?;
        let h = tape.relu(h)?;
        let w = tape.linear(h, bound.get("combiner.l2.weight")?, bound.get("combiner.l2.bias")?)?;
        Ok(tape.sigmoid(w)?)
    }

    /// `I = W ⊙ I_con + (1 − W) ⊙ I_att`.
    pub fn combine(&self, tape: &Tape, bound: &Bound, i_con: Var, i_att: Var) -> Result<Var> {
        let w = self.combiner_weights(tape, bound, i_con, i_att)?;
        Ok(blend(tape, w, i_con, i_att)?)
    }
}

/// `w ⊙ a + (1 − w) ⊙ b`.
pub fn blend(tape: &Tape, w: Var, a: Var, b: Var) -> diffcore::Result<Var> {
    let wa = tape.mul(w, a)?;
    let rest = tape.affine(w, -1.0, 1.0)?;
    let rb = tape.mul(rest, b)?;
    tape.add(wa, rb)
}
