//! Forward kernels (as methods on [`Var`](crate::Var)) and their adjoints.

pub mod conv;
mod elementwise;
mod linalg;
mod loss;
pub mod norm;
mod pool;
mod shape;

pub use elementwise::sigmoid;
pub use loss::{gaussian_log_norm, softmax_rows};

use crate::float::Float;
use crate::tape::{Node, NodeId, Op};
use crate::tensor::Tensor;

pub(crate) type Contributions<F> = Vec<(NodeId, Tensor<F>)>;

/// Adjoint of `node` given the gradient `g` of the loss w.r.t. its output.
pub(crate) fn backward<F: Float>(nodes: &[Node<F>], node: &Node<F>, g: &Tensor<F>) -> Contributions<F> {
    let val = |id: NodeId| -> &Tensor<F> { &nodes[id].value };
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => elementwise::mul_backward(*a, *b, val(*a), val(*b), g),
        Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
        Op::Shift(a) => vec![(*a, g.clone())],
        Op::Relu(a) => elementwise::relu_backward(*a, val(*a), g),
        Op::Sigmoid(a) => elementwise::sigmoid_backward(*a, &node.value, g),
        Op::Clamp { x, lo, hi } => elementwise::clamp_backward(*x, val(*x), *lo, *hi, g),
        Op::Matmul(a, b) => linalg::matmul_backward(*a, *b, val(*a), val(*b), g),
        Op::Affine { x, w, b } => linalg::affine_backward(*x, *w, *b, val(*x), val(*w), g),
        Op::Conv2d { x, w, cols, geom } => conv::conv2d_backward(*x, *w, val(*w), cols, geom, g, nodes[*x].requires_grad),
        Op::MaxPool { x, argmax } => pool::max_pool_backward(*x, val(*x), argmax, g),
        Op::GlobalAvgPool { x, spatial } => pool::gap_backward(*x, val(*x), *spatial, g),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => norm::batch_norm_backward(*x, *gamma, *beta, val(*gamma), xhat, inv_std, *batch_stats, g),
        Op::MulChannel { att, map } => elementwise::mul_channel_backward(*att, *map, val(*att), val(*map), g),
        Op::Concat(a, b) => shape::concat_backward(*a, *b, val(*a), val(*b), g),
        Op::SoftmaxCrossEntropy { logits, probs, labels } => loss::softmax_ce_backward(*logits, val(*logits), probs, labels, g),
        Op::SqDist(a, b) => loss::sq_dist_backward(*a, *b, val(*a), val(*b), g),
        Op::Mean(a) => {
            let x = val(*a);
            let s = g.data()[0] / F::from_usize(x.len().max(1)).unwrap();
            vec![(*a, Tensor::full(x.shape(), s))]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
        Op::Reshape(a) => {
            let x = val(*a);
            vec![(*a, Tensor::new(x.shape().to_vec(), g.data().to_vec()).unwrap())]
        }
        Op::SliceRows { x, start } => shape::slice_rows_backward(*x, val(*x), *start, g),
        Op::GatherRows { x, indices } => shape::gather_rows_backward(*x, val(*x), indices, g),
        Op::GaussianLogProb { mean, sample, sigma } => loss::gaussian_log_prob_backward(*mean, val(*mean), sample, *sigma, g),
    }
}
