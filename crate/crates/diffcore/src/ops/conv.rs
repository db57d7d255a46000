//! 1-D cross-correlation with zero padding.

use crate::error::{DiffError, Result};
use crate::tape::{GradStore, Op, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    len_out: usize,
}

impl ConvGeom {
    /// Index into the unpadded input for output position `t`, tap `j`.
    #[inline]
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        let p = t * self.stride + j;
        if p < self.pad || p - self.pad >= self.len {
            None
        } else {
            Some(p - self.pad)
        }
    }
}

/// Output length of a convolution, or `None` when the kernel is longer than
/// the padded input.
pub fn conv_output_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || k == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl Tape {
    /// Cross-correlation of `x` (`channels_in × length`, optionally with a
    /// leading batch axis) with `kernels` (`channels_out × channels_in × k`)
    /// plus a per-output-channel bias. No kernel flip; zero padding.
    pub fn conv1d(&self, x: Var, kernels: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, vx, gx) = self.fetch(x)?;
        let (sw, vw, gw) = self.fetch(kernels)?;
        let (sb, vb, gb) = self.fetch(bias)?;
        let (batched, batch, c_in, len) = match *sx.as_slice() {
            [c, l] => (false, 1, c, l),
            [b, c, l] => (true, b, c, l),
            _ => {
                return Err(DiffError::InvalidArgument {
                    op: "conv1d",
                    msg: format!("expected channels×length input, got {sx:?}"),
                })
            }
        };
        let &[c_out, wc_in, k] = sw.as_slice() else {
            return Err(DiffError::InvalidArgument {
                op: "conv1d",
                msg: format!("kernels must be out×in×k, got {sw:?}"),
            });
        };
        if wc_in != c_in {
            return Err(DiffError::ShapeMismatch {
                op: "conv1d",
                left: sx,
                right: sw,
            });
        }
        if sb != [c_out] {
            return Err(DiffError::ShapeMismatch {
                op: "conv1d",
                left: sw,
                right: sb,
            });
        }
        if stride == 0 {
            return Err(DiffError::InvalidArgument {
                op: "conv1d",
                msg: "stride must be positive".into(),
            });
        }
        let len_out = conv_output_len(len, k, stride, padding).ok_or_else(|| DiffError::InvalidArgument {
            op: "conv1d",
            msg: format!("kernel of length {k} exceeds padded input of length {}", len + 2 * padding),
        })?;
        let geom = ConvGeom {
            batch,
            c_in,
            c_out,
            len,
            k,
            stride,
            pad: padding,
            len_out,
        };
        let mut out = vec![0.0; batch * c_out * len_out];
        for b in 0..batch {
            for o in 0..c_out {
                let dst = &mut out[(b * c_out + o) * len_out..(b * c_out + o + 1) * len_out];
                for (t, d) in dst.iter_mut().enumerate() {
                    let mut acc = vb[o];
                    for c in 0..c_in {
                        let src = &vx[(b * c_in + c) * len..(b * c_in + c + 1) * len];
                        let ker = &vw[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                        for (j, w) in ker.iter().enumerate() {
                            if let Some(p) = geom.source(t, j) {
                                acc += w * src[p];
                            }
                        }
                    }
                    *d = acc;
                }
            }
        }
        let shape = if batched {
            vec![batch, c_out, len_out]
        } else {
            vec![c_out, len_out]
        };
        Ok(self.push_node(
            shape,
            out,
            Op::Conv1d {
                x,
                w: kernels,
                b: bias,
                geom,
            },
            gx || gw || gb,
        ))
    }
}

pub(crate) fn conv1d_backward(x: Var, w: Var, b: Var, geom: &ConvGeom, g: &[f64], store: &mut GradStore<'_>) {
    let ConvGeom {
        batch,
        c_in,
        c_out,
        len,
        k,
        len_out,
        ..
    } = *geom;
    let nodes = store.nodes;
    let vx = &nodes[x.0].value;
    let vw = &nodes[w.0].value;
    let gout = |bi: usize, o: usize| &g[(bi * c_out + o) * len_out..(bi * c_out + o + 1) * len_out];

    if let Some(db) = store.slot(b) {
        for bi in 0..batch {
            for (o, d) in db.iter_mut().enumerate() {
                *d += gout(bi, o).iter().sum::<f64>();
            }
        }
    }
    if let Some(dw) = store.slot(w) {
        for bi in 0..batch {
            for o in 0..c_out {
                let go = gout(bi, o);
                for c in 0..c_in {
                    let src = &vx[(bi * c_in + c) * len..(bi * c_in + c + 1) * len];
                    for j in 0..k {
                        let mut acc = 0.0;
                        for (t, gt) in go.iter().enumerate() {
                            if let Some(p) = geom.source(t, j) {
                                acc += gt * src[p];
                            }
                        }
                        dw[(o * c_in + c) * k + j] += acc;
                    }
                }
            }
        }
    }
    if let Some(dx) = store.slot(x) {
        for bi in 0..batch {
            for o in 0..c_out {
                let go = gout(bi, o);
                for c in 0..c_in {
                    let ker = &vw[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                    let base = (bi * c_in + c) * len;
                    for (t, gt) in go.iter().enumerate() {
                        for (j, wv) in ker.iter().enumerate() {
                            if let Some(p) = geom.source(t, j) {
                                dx[base + p] += gt * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}
