use crate::error::{DiffError, Result};
use crate::tape::{GradStore, Op, Tape, Var};

impl Tape {
    /// Column-wise concatenation of two 2-D arrays with equal row counts.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, va, ga) = self.fetch(a)?;
        let (sb, vb, gb) = self.fetch(b)?;
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "concat_cols",
                left: sa,
                right: sb,
            });
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        Ok(self.push_node(vec![rows, ca + cb], out, Op::Concat { a, b }, ga || gb))
    }

    /// Columns `start..end` of a 2-D array.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (sx, vx, gx) = self.fetch(x)?;
        if sx.len() != 2 || start >= end || end > sx[1] {
            return Err(DiffError::InvalidArgument {
                op: "slice_cols",
                msg: format!("columns {start}..{end} out of range for shape {sx:?}"),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&vx[r * cols + start..r * cols + end]);
        }
        Ok(self.push_node(vec![rows, end - start], out, Op::SliceCols { x, start }, gx))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let (sx, vx, gx) = self.fetch(x)?;
        if shape.contains(&0) || shape.iter().product::<usize>() != vx.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: sx,
                right: shape,
            });
        }
        Ok(self.push_node(shape, vx.to_vec(), Op::Reshape { x }, gx))
    }

    /// Sum of all elements, as a single-element array.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let (_, vx, gx) = self.fetch(x)?;
        let total = vx.iter().sum();
        Ok(self.push_node(vec![1], vec![total], Op::Sum { x }, gx))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let (_, vx, gx) = self.fetch(x)?;
        let total: f64 = vx.iter().sum();
        Ok(self.push_node(vec![1], vec![total / vx.len() as f64], Op::Mean { x }, gx))
    }

    /// Mean over the channel axis of a batch×channels×length array.
    pub fn mean_channels(&self, x: Var) -> Result<Var> {
        let (sx, vx, gx) = self.fetch(x)?;
        let &[b, c, l] = sx.as_slice() else {
            return Err(DiffError::InvalidArgument {
                op: "mean_channels",
                msg: format!("expected batch×channels×length, got {sx:?}"),
            });
        };
        let mut out = vec![0.0; b * l];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * l;
                for t in 0..l {
                    out[bi * l + t] += vx[base + t];
                }
            }
        }
        let inv = 1.0 / c as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push_node(vec![b, l], out, Op::MeanChannels { x }, gx))
    }
}

pub(crate) fn concat_backward(a: Var, b: Var, g: &[f64], store: &mut GradStore<'_>) {
    let ca = store.shape(a)[1];
    let cb = store.shape(b)[1];
    let rows = store.shape(a)[0];
    let w = ca + cb;
    if let Some(da) = store.slot(a) {
        for r in 0..rows {
            for j in 0..ca {
                da[r * ca + j] += g[r * w + j];
            }
        }
    }
    if let Some(db) = store.slot(b) {
        for r in 0..rows {
            for j in 0..cb {
                db[r * cb + j] += g[r * w + ca + j];
            }
        }
    }
}

pub(crate) fn slice_backward(x: Var, start: usize, out_shape: &[usize], g: &[f64], store: &mut GradStore<'_>) {
    let cols = store.shape(x)[1];
    let (rows, width) = (out_shape[0], out_shape[1]);
    if let Some(dx) = store.slot(x) {
        for r in 0..rows {
            for j in 0..width {
                dx[r * cols + start + j] += g[r * width + j];
            }
        }
    }
}

pub(crate) fn sum_backward(x: Var, g: f64, store: &mut GradStore<'_>) {
    if let Some(dx) = store.slot(x) {
        dx.iter_mut().for_each(|d| *d += g);
    }
}

pub(crate) fn mean_channels_backward(x: Var, g: &[f64], store: &mut GradStore<'_>) {
    let (b, c, l) = {
        let s = store.shape(x);
        (s[0], s[1], s[2])
    };
    let inv = 1.0 / c as f64;
    if let Some(dx) = store.slot(x) {
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * l;
                for t in 0..l {
                    dx[base + t] += g[bi * l + t] * inv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::{DiffArray, Tape};

    #[test]
    fn concat_then_slice_recovers_parts() {
        let tape = Tape::new();
        let a = tape.constant(&DiffArray::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.constant(&DiffArray::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat_cols(a, b).unwrap();
        assert_eq!(&*tape.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let right = tape.slice_cols(c, 1, 3).unwrap();
        assert_eq!(&*tape.value(right), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let x = tape.param(&DiffArray::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn square_sum_gradient_accumulates_fan_out() {
        let tape = Tape::new();
        let data = vec![1.0, -2.0, 3.0];
        let x = tape.param(&DiffArray::vector(data.clone()).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(&DiffArray::zeros(vec![3]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unrelated_parameter_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(&DiffArray::scalar(2.0));
        let unused = tape.param(&DiffArray::zeros(vec![2]).unwrap());
        let y = tape.sum(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(unused).unwrap(), &[0.0, 0.0]);
    }
}
