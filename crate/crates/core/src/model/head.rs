use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewD, ArrayViewMutD};

use super::layers::{BatchNorm, BatchNormCache, Linear, Mode};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// MLP mapping `z^0` into one coarser semantic space.
///
/// `Linear -> [BatchNorm] -> ReLU` repeated, then a final `Linear`. Input and
/// output dimension are equal.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub linears: Vec<Linear>,
    /// One slot per hidden block; `None` when normalization is disabled.
    pub norms: Vec<Option<BatchNorm>>,
    cache: Option<HeadCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct HeadCache {
    inputs: Vec<Array2<f64>>,
    norm_caches: Vec<Option<BatchNormCache>>,
    pre_relu: Vec<Array2<f64>>,
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

impl ProjectionHead {
    pub fn new(dim: usize, hidden: usize, layers: usize, use_norm: bool, rng: &mut Rng) -> Self {
        assert!(
            layers >= 2,
            "a projection head needs at least two affine layers"
        );
        let mut linears = Vec::with_capacity(layers);
        let mut norms = Vec::with_capacity(layers - 1);
        for i in 0..layers {
            let input = if i == 0 { dim } else { hidden };
            let output = if i + 1 == layers { dim } else { hidden };
            linears.push(Linear::init(input, output, rng));
            if i + 1 < layers {
                norms.push(use_norm.then(|| BatchNorm::new(output)));
            }
        }
        Self {
            linears,
            norms,
            cache: None,
        }
    }

    /// Assembles a head from explicit layers (`norms.len() == linears.len() - 1`).
    pub fn from_layers(linears: Vec<Linear>, norms: Vec<Option<BatchNorm>>) -> Result<Self> {
        if linears.len() < 2 || norms.len() + 1 != linears.len() {
            return Err(Error::Shape(format!(
                "{} linear layers with {} normalization slots",
                linears.len(),
                norms.len()
            )));
        }
        Ok(Self {
            linears,
            norms,
            cache: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.linears[0].input_dim()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Runs the head and caches activations for [`ProjectionHead::backward`].
    /// Train mode needs at least two rows for batch statistics.
    pub fn forward(&mut self, x: ArrayView2<f64>, mode: Mode) -> Result<Array2<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "head expects {} columns, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        if mode == Mode::Train && x.nrows() < 2 {
            return Err(Error::Config(
                "train-mode head forward needs a batch of at least 2".into(),
            ));
        }
        let blocks = self.linears.len() - 1;
        let mut cache = HeadCache {
            inputs: Vec::with_capacity(blocks + 1),
            norm_caches: Vec::with_capacity(blocks),
            pre_relu: Vec::with_capacity(blocks),
        };
        let mut h = x.to_owned();
        for i in 0..blocks {
            let mut a = self.linears[i].forward(h.view());
            cache.inputs.push(h);
            let nc = match &mut self.norms[i] {
                Some(norm) => {
                    let (y, c) = norm.forward(a.view(), mode);
                    a = y;
                    Some(c)
                }
                None => None,
            };
            cache.norm_caches.push(nc);
            h = relu(&a);
            cache.pre_relu.push(a);
        }
        let out = self.linears[blocks].forward(h.view());
        cache.inputs.push(h);
        self.cache = Some(cache);
        Ok(out)
    }

    /// Reverse pass for the cached forward. Gradients come back in
    /// [`ProjectionHead::params`] order.
    pub fn backward(&self, grad_out: ArrayView2<f64>) -> Result<(Vec<ArrayD<f64>>, Array2<f64>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("head backward called without a cached forward".into()))?;
        let blocks = self.linears.len() - 1;
        let expected = (cache.inputs[0].nrows(), self.dim());
        if grad_out.dim() != expected {
            return Err(Error::Shape(format!(
                "grad_out is {:?}, cached output is {:?}",
                grad_out.dim(),
                expected
            )));
        }
        // per layer: [W, b] or [W, b, gamma, beta]
        let mut per_layer: Vec<Vec<ArrayD<f64>>> = vec![Vec::new(); self.linears.len()];
        let (gw, gb, mut g) = self.linears[blocks].backward(cache.inputs[blocks].view(), grad_out);
        per_layer[blocks] = vec![gw.into_dyn(), gb.into_dyn()];
        for i in (0..blocks).rev() {
            let mask = cache.pre_relu[i].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            g = g * mask;
            let mut norm_grads = Vec::new();
            if let (Some(norm), Some(nc)) = (&self.norms[i], &cache.norm_caches[i]) {
                let (dgamma, dbeta, dx) = norm.backward(nc, g.view());
                norm_grads = vec![dgamma.into_dyn(), dbeta.into_dyn()];
                g = dx;
            }
            let (gw, gb, gx) = self.linears[i].backward(cache.inputs[i].view(), g.view());
            per_layer[i] = vec![gw.into_dyn(), gb.into_dyn()];
            per_layer[i].extend(norm_grads);
            g = gx;
        }
        Ok((per_layer.into_iter().flatten().collect(), g))
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = Vec::new();
        for (i, lin) in self.linears.iter().enumerate() {
            out.push(lin.weight.view().into_dyn());
            out.push(lin.bias.view().into_dyn());
            if let Some(Some(norm)) = self.norms.get(i) {
                out.push(norm.gamma.view().into_dyn());
                out.push(norm.beta.view().into_dyn());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        let norms = self.norms.iter_mut().map(Some).chain(std::iter::once(None));
        for (lin, norm) in self.linears.iter_mut().zip(norms) {
            out.push(lin.weight.view_mut().into_dyn());
            out.push(lin.bias.view_mut().into_dyn());
            if let Some(Some(norm)) = norm {
                out.push(norm.gamma.view_mut().into_dyn());
                out.push(norm.beta.view_mut().into_dyn());
            }
        }
        out
    }

    /// Running statistics, in declaration order.
    pub fn buffers(&self) -> Vec<ArrayViewD<'_, f64>> {
        self.norms
            .iter()
            .flatten()
            .flat_map(|n| {
                [
                    n.running_mean.view().into_dyn(),
                    n.running_var.view().into_dyn(),
                ]
            })
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        self.norms
            .iter_mut()
            .flatten()
            .flat_map(|n| {
                [
                    n.running_mean.view_mut().into_dyn(),
                    n.running_var.view_mut().into_dyn(),
                ]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rng_from(seed);
        Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn identity_configuration_passes_nonnegative_input_through() {
        // the ReLU between the layers keeps negative inputs from passing
        let mut head =
            ProjectionHead::from_layers(vec![Linear::identity(3), Linear::identity(3)], vec![None])
                .unwrap();
        let x = array![[0.5, 1.0, 0.0], [2.0, 0.25, 3.0]];
        assert_eq!(head.forward(x.view(), Mode::Train).unwrap(), x);
    }

    #[test]
    fn output_shape_and_errors() {
        let mut head = ProjectionHead::new(4, 7, 2, true, &mut rng_from(0));
        assert!(matches!(
            head.backward(Array2::zeros((2, 4)).view()),
            Err(Error::State(_))
        ));
        let out = head.forward(random(5, 4, 1).view(), Mode::Train).unwrap();
        assert_eq!(out.dim(), (5, 4));
        assert!(matches!(
            head.forward(random(1, 4, 1).view(), Mode::Train),
            Err(Error::Config(_))
        ));
        assert_eq!(
            head.forward(random(1, 4, 1).view(), Mode::Eval)
                .unwrap()
                .dim(),
            (1, 4)
        );
        assert!(matches!(
            head.forward(random(3, 5, 1).view(), Mode::Eval),
            Err(Error::Shape(_))
        ));

        let mut five = ProjectionHead::new(4, 6, 5, true, &mut rng_from(0));
        assert_eq!(
            five.forward(random(3, 4, 2).view(), Mode::Train)
                .unwrap()
                .dim(),
            (3, 4)
        );
        assert_eq!(five.params().len(), 5 * 2 + 4 * 2);
    }

    #[test]
    fn zero_grad_gives_zero_gradients() {
        let mut head = ProjectionHead::new(4, 6, 2, true, &mut rng_from(3));
        head.forward(random(6, 4, 4).view(), Mode::Train).unwrap();
        let (grads, gx) = head.backward(Array2::zeros((6, 4)).view()).unwrap();
        assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_grad_out() {
        let mut head = ProjectionHead::new(4, 6, 2, true, &mut rng_from(5));
        head.forward(random(6, 4, 6).view(), Mode::Train).unwrap();
        let (g1, g2) = (random(6, 4, 7), random(6, 4, 8));
        let (a, b) = (0.7, -1.3);
        let combo = &g1 * a + &g2 * b;
        let (p1, x1) = head.backward(g1.view()).unwrap();
        let (p2, x2) = head.backward(g2.view()).unwrap();
        let (pc, xc) = head.backward(combo.view()).unwrap();
        for ((u, v), w) in p1.iter().zip(&p2).zip(&pc) {
            for ((x, y), z) in u.iter().zip(v.iter()).zip(w.iter()) {
                assert!((a * x + b * y - z).abs() < 1e-12);
            }
        }
        for ((x, y), z) in x1.iter().zip(x2.iter()).zip(xc.iter()) {
            assert!((a * x + b * y - z).abs() < 1e-12);
        }
    }
}
