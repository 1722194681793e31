use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewD, ArrayViewMutD};

use super::layers::Linear;
use crate::rng::Rng;

/// Small stand-in encoder producing `z^0`: `Linear -> ReLU -> Linear`.
/// The identity variant has no parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Identity { dim: usize },
    Mlp { hidden: Linear, out: Linear },
}

/// Activations kept from one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Array2<f64>,
    hidden_pre: Option<Array2<f64>>,
    hidden: Option<Array2<f64>>,
}

impl Encoder {
    pub fn mlp(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Encoder::Mlp {
            hidden: Linear::init(input, hidden, rng),
            out: Linear::init(hidden, output, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Mlp { hidden, .. } => hidden.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Encoder::Identity { dim } => *dim,
            Encoder::Mlp { out, .. } => out.output_dim(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match self {
            Encoder::Identity { .. } => x.to_owned(),
            Encoder::Mlp { hidden, out } => {
                let h = hidden.forward(x).mapv(|v| v.max(0.0));
                out.forward(h.view())
            }
        }
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, EncoderCache) {
        match self {
            Encoder::Identity { .. } => (
                x.to_owned(),
                EncoderCache {
                    input: x.to_owned(),
                    hidden_pre: None,
                    hidden: None,
                },
            ),
            Encoder::Mlp { hidden, out } => {
                let pre = hidden.forward(x);
                let h = pre.mapv(|v| v.max(0.0));
                let y = out.forward(h.view());
                (
                    y,
                    EncoderCache {
                        input: x.to_owned(),
                        hidden_pre: Some(pre),
                        hidden: Some(h),
                    },
                )
            }
        }
    }

    /// Gradients in [`Encoder::params`] order, plus the input gradient.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        grad_out: ArrayView2<f64>,
    ) -> (Vec<ArrayD<f64>>, Array2<f64>) {
        match self {
            Encoder::Identity { .. } => (Vec::new(), grad_out.to_owned()),
            Encoder::Mlp { hidden, out } => {
                let h = cache.hidden.as_ref().expect("mlp cache");
                let pre = cache.hidden_pre.as_ref().expect("mlp cache");
                let (gw2, gb2, gh) = out.backward(h.view(), grad_out);
                let gpre = gh * pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let (gw1, gb1, gx) = hidden.backward(cache.input.view(), gpre.view());
                (
                    vec![
                        gw1.into_dyn(),
                        gb1.into_dyn(),
                        gw2.into_dyn(),
                        gb2.into_dyn(),
                    ],
                    gx,
                )
            }
        }
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        match self {
            Encoder::Identity { .. } => Vec::new(),
            Encoder::Mlp { hidden, out } => vec![
                hidden.weight.view().into_dyn(),
                hidden.bias.view().into_dyn(),
                out.weight.view().into_dyn(),
                out.bias.view().into_dyn(),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        match self {
            Encoder::Identity { .. } => Vec::new(),
            Encoder::Mlp { hidden, out } => vec![
                hidden.weight.view_mut().into_dyn(),
                hidden.bias.view_mut().into_dyn(),
                out.weight.view_mut().into_dyn(),
                out.bias.view_mut().into_dyn(),
            ],
        }
    }
}
