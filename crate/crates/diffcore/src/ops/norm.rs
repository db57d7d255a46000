//! Row softmax, row L2 normalization and batch normalization.

use crate::error::{DiffError, Result};
use crate::tape::{GradStore, Op, Tape, Var};

/// Norm floor used by [`Tape::l2_normalize`].
pub const L2_NORM_FLOOR: f64 = 1e-12;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance.
    pub var_unbiased: Vec<f64>,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

pub(crate) struct BnSaved {
    /// Normalized input before the affine transform.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: NormMode,
    batch: usize,
    channels: usize,
    inner: usize,
}

impl Tape {
    /// Softmax over each row of a 2-D array.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let (sx, vx, gx) = self.fetch(x)?;
        if sx.len() != 2 {
            return Err(DiffError::InvalidArgument {
                op: "softmax_rows",
                msg: format!("expected a 2-D array, got {sx:?}"),
            });
        }
        let cols = sx[1];
        let mut out = vec![0.0; vx.len()];
        for (row_in, row_out) in vx.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                total += *o;
            }
            row_out.iter_mut().for_each(|o| *o /= total);
        }
        Ok(self.push_node(sx, out, Op::SoftmaxRows { x }, gx))
    }

    /// Divides each row by `max(‖row‖₂, 1e-12)`.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let (sx, vx, gx) = self.fetch(x)?;
        if sx.len() != 2 {
            return Err(DiffError::InvalidArgument {
                op: "l2_normalize",
                msg: format!("expected batch×dim, got {sx:?}"),
            });
        }
        let cols = sx[1];
        let mut norms = Vec::with_capacity(sx[0]);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.chunks(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(n);
            let d = n.max(L2_NORM_FLOOR);
            out.extend(row.iter().map(|v| v / d));
        }
        Ok(self.push_node(sx, out, Op::L2Normalize { x, norms }, gx))
    }

    /// Batch normalization over `batch×features` or `batch×channels×length`
    /// input. In train mode the batch statistics are returned so the caller
    /// can fold them into `state`.
    pub fn batchnorm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        mode: NormMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (sx, vx, gx) = self.fetch(x)?;
        let (sg, vg, gg) = self.fetch(gamma)?;
        let (sb, vb, gb) = self.fetch(beta)?;
        let (batch, channels, inner) = match *sx.as_slice() {
            [b, f] => (b, f, 1),
            [b, c, l] => (b, c, l),
            _ => {
                return Err(DiffError::InvalidArgument {
                    op: "batchnorm",
                    msg: format!("expected 2-D or 3-D input, got {sx:?}"),
                })
            }
        };
        if sg != [channels] || sb != [channels] || state.channels() != channels {
            return Err(DiffError::ShapeMismatch {
                op: "batchnorm",
                left: sx,
                right: sg,
            });
        }
        if mode == NormMode::Train && batch < 2 {
            return Err(DiffError::InvalidArgument {
                op: "batchnorm",
                msg: format!("train mode needs a batch of at least 2, got {batch}"),
            });
        }
        let idx = |b: usize, c: usize, t: usize| (b * channels + c) * inner + t;
        let n = (batch * inner) as f64;
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        for t in 0..inner {
                            s += vx[idx(b, c, t)];
                        }
                    }
                    mean[c] = s / n;
                    let mut ss = 0.0;
                    for b in 0..batch {
                        for t in 0..inner {
                            let d = vx[idx(b, c, t)] - mean[c];
                            ss += d * d;
                        }
                    }
                    var[c] = ss / n;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|v| v * n / (n - 1.0)).collect(),
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval => (state.running_mean.clone(), state.running_var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let mut xhat = vec![0.0; vx.len()];
        let mut out = vec![0.0; vx.len()];
        for b in 0..batch {
            for c in 0..channels {
                for t in 0..inner {
                    let i = idx(b, c, t);
                    xhat[i] = (vx[i] - mean[c]) * inv_std[c];
                    out[i] = vg[c] * xhat[i] + vb[c];
                }
            }
        }
        let saved = BnSaved {
            xhat,
            inv_std,
            mode,
            batch,
            channels,
            inner,
        };
        let var_out = self.push_node(
            sx,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
            gx || gg || gb,
        );
        Ok((var_out, stats))
    }

    /// Train-mode batch norm that folds the batch statistics into `state`.
    pub fn batchnorm1d_train(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
    ) -> Result<Var> {
        let (out, stats) = self.batchnorm(x, gamma, beta, state, NormMode::Train)?;
        if let Some(stats) = stats {
            state.update(&stats);
        }
        Ok(out)
    }
}

pub(crate) fn softmax_backward(x: Var, shape: &[usize], out: &[f64], g: &[f64], store: &mut GradStore<'_>) {
    let cols = shape[1];
    if let Some(dx) = store.slot(x) {
        for ((y, gy), d) in out.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
            let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
            for j in 0..cols {
                d[j] += y[j] * (gy[j] - dot);
            }
        }
    }
}

pub(crate) fn l2_backward(
    x: Var,
    shape: &[usize],
    out: &[f64],
    norms: &[f64],
    g: &[f64],
    store: &mut GradStore<'_>,
) {
    let cols = shape[1];
    if let Some(dx) = store.slot(x) {
        for (r, &n) in norms.iter().enumerate() {
            let y = &out[r * cols..(r + 1) * cols];
            let gy = &g[r * cols..(r + 1) * cols];
            let d = &mut dx[r * cols..(r + 1) * cols];
            if n > L2_NORM_FLOOR {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    d[j] += (gy[j] - y[j] * dot) / n;
                }
            } else {
                for j in 0..cols {
                    d[j] += gy[j] / L2_NORM_FLOOR;
                }
            }
        }
    }
}

pub(crate) fn batchnorm_backward(
    x: Var,
    gamma: Var,
    beta: Var,
    saved: &BnSaved,
    g: &[f64],
    store: &mut GradStore<'_>,
) {
    let BnSaved {
        xhat,
        inv_std,
        mode,
        batch,
        channels,
        inner,
    } = saved;
    let (batch, channels, inner) = (*batch, *channels, *inner);
    let idx = |b: usize, c: usize, t: usize| (b * channels + c) * inner + t;
    let mut sum_g = vec![0.0; channels];
    let mut sum_gx = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            for t in 0..inner {
                let i = idx(b, c, t);
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * xhat[i];
            }
        }
    }
    let gamma_v = &store.nodes[gamma.0].value;
    if let Some(dx) = store.slot(x) {
        let n = (batch * inner) as f64;
        for b in 0..batch {
            for c in 0..channels {
                let scale = gamma_v[c] * inv_std[c];
                for t in 0..inner {
                    let i = idx(b, c, t);
                    dx[i] += match mode {
                        NormMode::Train => {
                            scale * (g[i] - sum_g[c] / n - xhat[i] * sum_gx[c] / n)
                        }
                        NormMode::Eval => scale * g[i],
                    };
                }
            }
        }
    }
    store.add(gamma, &sum_gx);
    store.add(beta, &sum_g);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::DiffArray;

    #[test]
    fn unit_row_is_unchanged() {
        let tape = Tape::new();
        let x = tape.constant(&DiffArray::new(vec![1, 2], vec![0.6, 0.8]).unwrap());
        let y = tape.l2_normalize(x).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn three_four_row() {
        let tape = Tape::new();
        let x = tape.constant(&DiffArray::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let y = tape.l2_normalize(x).unwrap();
        assert_eq!(&*tape.value(y), &[0.6, 0.8]);
    }

    #[test]
    fn zero_row_passes_through_guard() {
        let tape = Tape::new();
        let x = tape.constant(&DiffArray::zeros(vec![1, 3]).unwrap());
        let y = tape.l2_normalize(x).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_column_normalizes_to_zero() {
        let tape = Tape::new();
        let x = tape.constant(&DiffArray::new(vec![3, 1], vec![2.0, 2.0, 2.0]).unwrap());
        let gamma = tape.constant(&DiffArray::filled(vec![1], 1.0).unwrap());
        let beta = tape.constant(&DiffArray::zeros(vec![1]).unwrap());
        let state = BatchNormState::new(1);
        let (y, _) = tape.batchnorm(x, gamma, beta, &state, NormMode::Train).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn train_mode_standardizes_columns() {
        let tape = Tape::new();
        let data = vec![10.0, 100.0, 20.0, -40.0, 70.0, 5.0, 30.0, 20.0];
        let x = tape.constant(&DiffArray::new(vec![4, 2], data).unwrap());
        let gamma = tape.constant(&DiffArray::filled(vec![2], 1.0).unwrap());
        let beta = tape.constant(&DiffArray::zeros(vec![2]).unwrap());
        let mut state = BatchNormState::new(2);
        let y = tape.batchnorm1d_train(x, gamma, beta, &mut state).unwrap();
        let v = tape.value(y);
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| v[r * 2 + c]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            // epsilon shrinks the variance by eps/var
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
        assert_ne!(state.running_mean, vec![0.0, 0.0]);
    }

    #[test]
    fn batch_of_one_rejected_in_train_mode() {
        let tape = Tape::new();
        let x = tape.constant(&DiffArray::zeros(vec![1, 2]).unwrap());
        let gamma = tape.constant(&DiffArray::filled(vec![2], 1.0).unwrap());
        let beta = tape.constant(&DiffArray::zeros(vec![2]).unwrap());
        let state = BatchNormState::new(2);
        assert!(tape.batchnorm(x, gamma, beta, &state, NormMode::Train).is_err());
        assert!(tape.batchnorm(x, gamma, beta, &state, NormMode::Eval).is_ok());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(&DiffArray::new(vec![2, 2], vec![0.0, 0.0, 1000.0, 0.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert_eq!(v[2], 1.0);
        assert_eq!(v[3], 0.0);
    }
}
