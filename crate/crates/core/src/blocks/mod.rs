//! Composite segmentation blocks.

pub mod afem;
pub mod cos;
pub mod tapp;
pub mod toynet;

pub use afem::{afem_forward, Afem, AfemConfig};
pub use cos::{channel_attention, cos_prefilter, ChannelAttention};
pub use tapp::{
    sep_dilated_branch, tapp_forward, SepDilatedBranch, Tapp, TappConfig, BRANCH_KERNELS,
};
pub use toynet::{toynet_forward, ToyNet, ToyNetConfig, Variant};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Runs a graph-level block on a constant `C x H x W` or `B x C x H x W`
/// input and returns the output with the input's batch convention.
pub(crate) fn batched<T: Scalar>(
    f: &Tensor<T>,
    op: &'static str,
    forward: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = f.as_bchw(op)?;
    let mut g = Graph::new();
    let x = g.constant(f.reshape(vec![b, c, h, w])?);
    let y = forward(&mut g, x)?;
    let out = g.value(y).clone();
    if f.rank() == 3 {
        out.reshape(out.dims()[1..].to_vec())
    } else {
        Ok(out)
    }
}
