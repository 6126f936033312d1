//! Gated recurrent window encoder.
//!
//! One LSTM-style cell with input, forget, output, and candidate gates is
//! unrolled over the rows of an L x F window; hidden and cell states start
//! at zero. The whole unroll is recorded on the tape, so backpropagation
//! through time falls out of the ordinary reverse pass.
//!
//! Parameters (for `hidden = N`, `input_dim = F`):
//! - `enc.wx`: F x 4N input projection
//! - `enc.wh`: N x 4N recurrent projection
//! - `enc.b`:  1 x 4N bias, gate order (input, forget, candidate, output)
//!
//! The forget-gate bias initializes to 1 so early training does not flush
//! state; everything else follows the init conventions in [`params`].

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{scaled_uniform, BoundParams, ParamSet};
use super::Array;
use crate::error::{Error, Result};

pub const W_INPUT: &str = "enc.wx";
pub const W_RECURRENT: &str = "enc.wh";
pub const BIAS: &str = "enc.b";

/// Expected parameter shapes for a given input width and hidden size.
pub fn encoder_shapes(input_dim: usize, hidden: usize) -> Vec<(&'static str, usize, usize)> {
    vec![
        (BIAS, 1, 4 * hidden),
        (W_INPUT, input_dim, 4 * hidden),
        (W_RECURRENT, hidden, 4 * hidden),
    ]
}

/// Insert freshly initialized encoder parameters into `params`.
pub fn init_encoder_params(
    params: &mut ParamSet,
    input_dim: usize,
    hidden: usize,
    rng: &mut impl Rng,
) {
    params.insert(W_INPUT, scaled_uniform(input_dim, 4 * hidden, rng));
    params.insert(W_RECURRENT, scaled_uniform(hidden, 4 * hidden, rng));
    let mut bias = Array::zeros(1, 4 * hidden);
    for c in hidden..2 * hidden {
        bias.set(0, c, 1.0); // forget gate opens by default
    }
    params.insert(BIAS, bias);
}

/// Unroll the cell over the rows of `window` (an L x F node), returning the
/// 1 x N hidden-state node after each timestep. Row order is time order, so
/// step `i` has consumed rows `0..=i` and nothing later.
pub fn encoder_steps(
    graph: &mut Graph,
    window: NodeId,
    bound: &BoundParams,
    hidden: usize,
) -> Result<Vec<NodeId>> {
    let (steps, input_dim) = graph.value(window).shape();
    if !graph.value(window).is_finite() {
        return Err(Error::Domain("encoder input contains non-finite values".into()));
    }
    let wx = bound.node(W_INPUT)?;
    let wh = bound.node(W_RECURRENT)?;
    let b = bound.node(BIAS)?;
    if graph.value(wx).shape() != (input_dim, 4 * hidden) {
        return Err(Error::Dim(format!(
            "encoder input width {} does not match {} ({}x{})",
            input_dim,
            W_INPUT,
            graph.value(wx).rows(),
            graph.value(wx).cols()
        )));
    }

    let mut h = graph.constant(Array::zeros(1, hidden));
    let mut c = graph.constant(Array::zeros(1, hidden));
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = graph.slice(window, t, t + 1, 0, input_dim)?;
        let from_x = graph.matmul(xt, wx)?;
        let from_h = graph.matmul(h, wh)?;
        let linear = graph.add(from_x, from_h)?;
        let pre = graph.add(linear, b)?;

        let pre_i = graph.slice(pre, 0, 1, 0, hidden)?;
        let pre_f = graph.slice(pre, 0, 1, hidden, 2 * hidden)?;
        let pre_g = graph.slice(pre, 0, 1, 2 * hidden, 3 * hidden)?;
        let pre_o = graph.slice(pre, 0, 1, 3 * hidden, 4 * hidden)?;

        let gate_i = graph.sigmoid(pre_i);
        let gate_f = graph.sigmoid(pre_f);
        let cand = graph.tanh(pre_g);
        let gate_o = graph.sigmoid(pre_o);

        let keep = graph.mul(gate_f, c)?;
        let write = graph.mul(gate_i, cand)?;
        c = graph.add(keep, write)?;
        let c_act = graph.tanh(c);
        h = graph.mul(gate_o, c_act)?;
        outputs.push(h);
    }
    Ok(outputs)
}

/// The full encoded window as one L x N node (each row is a timestep's
/// hidden state).
pub fn encoder_forward(
    graph: &mut Graph,
    window: NodeId,
    bound: &BoundParams,
    hidden: usize,
) -> Result<NodeId> {
    let steps = encoder_steps(graph, window, bound, hidden)?;
    graph.concat_rows(&steps)
}
