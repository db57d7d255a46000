pub mod conv;
pub mod linalg;
pub mod norm;
pub mod pointwise;
pub mod shape;

use crate::tape::{GradStore, Op};

pub(crate) fn backward(op: &Op, shape: &[usize], out: &[f64], g: &[f64], store: &mut GradStore<'_>) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b, m, k, n } => {
            linalg::matmul_backward(*a, *b, *trans_b, (*m, *k, *n), g, store)
        }
        Op::Transpose { x } => linalg::transpose_backward(*x, shape, g, store),
        Op::AddBias { x, bias } => pointwise::add_bias_backward(*x, *bias, g, store),
        Op::Binary { kind, a, b } => pointwise::binary_backward(*kind, *a, *b, g, store),
        Op::Unary { kind, x } => pointwise::unary_backward(*kind, *x, out, g, store),
        Op::Affine { x, scale } => pointwise::affine_backward(*x, *scale, g, store),
        Op::ScaleRows { x, s } => pointwise::scale_rows_backward(*x, *s, g, store),
        Op::Concat { a, b } => shape::concat_backward(*a, *b, g, store),
        Op::SliceCols { x, start } => shape::slice_backward(*x, *start, shape, g, store),
        Op::Reshape { x } => store.add(*x, g),
        Op::Sum { x } => shape::sum_backward(*x, g[0], store),
        Op::Mean { x } => {
            let n = store.value(*x).len() as f64;
            shape::sum_backward(*x, g[0] / n, store)
        }
        Op::MeanChannels { x } => shape::mean_channels_backward(*x, g, store),
        Op::SoftmaxRows { x } => norm::softmax_backward(*x, shape, out, g, store),
        Op::L2Normalize { x, norms } => norm::l2_backward(*x, shape, out, norms, g, store),
        Op::BatchNorm { x, gamma, beta, saved } => {
            norm::batchnorm_backward(*x, *gamma, *beta, saved, g, store)
        }
        Op::Conv1d { x, w, b, geom } => conv::conv1d_backward(*x, *w, *b, geom, g, store),
        Op::Custom { inputs, rule } => {
            let nodes = store.nodes;
            let values: Vec<&[f64]> = inputs.iter().map(|v| &*nodes[v.0].value).collect();
            let contributions = rule.backward(&values, out, g);
            for (v, c) in inputs.iter().zip(contributions) {
                if let Some(c) = c {
                    store.add(*v, &c);
                }
            }
        }
    }
}
