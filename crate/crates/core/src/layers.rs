//! Convolution and convolutional-LSTM layers built on the autograd graph.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Kernel `HxW`, `D` output channels, stride `S` (written `HxWxD/S`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(kernel_h: usize, kernel_w: usize, out_channels: usize, stride: usize) -> Self {
        ConvSpec {
            kernel_h,
            kernel_w,
            out_channels,
            stride,
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(TensorError::InvalidSpec(self.to_string()));
        }
        Ok(())
    }

    pub fn weight_shape(&self, in_channels: usize) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, in_channels, self.out_channels]
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{}/{}",
            self.kernel_h, self.kernel_w, self.out_channels, self.stride
        )
    }
}

impl FromStr for ConvSpec {
    type Err = String;

    /// Parses `HxWxD/S`.
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected HxWxD/S, got {s:?}");
        let (dims, stride) = s.trim().split_once('/').ok_or_else(bad)?;
        let parts: Vec<&str> = dims.split('x').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let num = |p: &str| p.trim().parse::<usize>().map_err(|_| bad());
        let spec = ConvSpec::new(num(parts[0])?, num(parts[1])?, num(parts[2])?, num(stride)?);
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

impl Serialize for ConvSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ConvSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hidden and cell maps of one convolutional LSTM, `(n, h, w, channels)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState<T> {
    pub hidden: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Scalar> ConvLstmState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        ConvLstmState {
            hidden: Tensor::zeros(shape),
            cell: Tensor::zeros(shape),
        }
    }

    pub fn new(hidden: Tensor<T>, cell: Tensor<T>) -> Result<Self, TensorError> {
        if hidden.shape() != cell.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "conv_lstm_state",
                left: hidden.shape().to_vec(),
                right: cell.shape().to_vec(),
            });
        }
        Ok(ConvLstmState { hidden, cell })
    }

    /// Inserts the state into a graph as constants.
    pub fn to_vars(&self, g: &mut Graph<T>) -> LstmVars {
        LstmVars {
            hidden: g.constant(self.hidden.clone()),
            cell: g.constant(self.cell.clone()),
        }
    }

    pub fn from_vars(g: &Graph<T>, v: LstmVars) -> Self {
        ConvLstmState {
            hidden: g.value(v.hidden).clone(),
            cell: g.value(v.cell).clone(),
        }
    }
}

/// In-graph LSTM state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmVars {
    pub hidden: Var,
    pub cell: Var,
}

/// Graph handles for a convolutional LSTM's parameters. Input-to-gate
/// weights are `(kh, kw, cin, 4*hidden)`, hidden-to-gate weights are
/// `(kh, kw, hidden, 4*hidden)`; gate order is input, forget, candidate,
/// output.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmWeights {
    pub input_weight: Var,
    pub bias: Var,
    pub hidden_weight: Var,
    pub stride: usize,
}

/// One recurrent step. Returns the new hidden map (the layer output) and
/// the new state.
pub fn conv_lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    input: Var,
    state: LstmVars,
    w: &ConvLstmWeights,
) -> Result<(Var, LstmVars), TensorError> {
    let hid = *g.shape(state.cell).last().unwrap_or(&0);
    let hw_shape = g.shape(w.hidden_weight).to_vec();
    if hw_shape.len() != 4 || hw_shape[2] != hid || hw_shape[3] != 4 * hid {
        return Err(TensorError::ShapeMismatch {
            op: "conv_lstm_step",
            left: g.shape(state.cell).to_vec(),
            right: hw_shape,
        });
    }
    if g.shape(state.hidden) != g.shape(state.cell) {
        return Err(TensorError::ShapeMismatch {
            op: "conv_lstm_step",
            left: g.shape(state.hidden).to_vec(),
            right: g.shape(state.cell).to_vec(),
        });
    }
    let from_input = g.conv2d(input, w.input_weight, Some(w.bias), w.stride)?;
    let from_hidden = g.conv2d(state.hidden, w.hidden_weight, None, 1)?;
    let gates = g.add(from_input, from_hidden)?;
    let packed = g.lstm_cell(gates, state.cell)?;
    let hidden = g.slice_channels(packed, 0, hid)?;
    let cell = g.slice_channels(packed, hid, hid)?;
    Ok((hidden, LstmVars { hidden, cell }))
}
