//! InfoNCE over in-batch negatives, and the objective interface it fills.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use super::encoder::Encoder;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceOutput {
    pub loss: f64,
    pub grad_anchors: Array2<f64>,
    pub grad_positives: Array2<f64>,
}

/// Rows divided by their norms, plus the norms. Zero rows are an error.
fn normalize_rows(x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if norms.iter().any(|&n| !(n > 0.0)) {
        return Err(Error::Math("zero-norm row in contrastive batch".into()));
    }
    let unit = &x / &norms.view().insert_axis(Axis(1));
    Ok((unit, norms))
}

/// Backpropagates `du` through `u = x / |x|`.
fn normalize_backward(unit: &Array2<f64>, norms: &Array1<f64>, du: Array2<f64>) -> Array2<f64> {
    let proj = (&du * unit).sum_axis(Axis(1)).insert_axis(Axis(1));
    (du - unit * &proj) / &norms.view().insert_axis(Axis(1))
}

/// Cross-entropy of each anchor against its own positive among all
/// positives of the batch, on cosine similarities divided by `temperature`.
pub fn infonce_loss(
    anchors: ArrayView2<f64>,
    positives: ArrayView2<f64>,
    temperature: f64,
) -> Result<InfoNceOutput> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    if anchors.dim() != positives.dim() {
        return Err(Error::Shape(format!(
            "anchors {:?} vs positives {:?}",
            anchors.dim(),
            positives.dim()
        )));
    }
    let b = anchors.nrows();
    if b < 2 {
        return Err(Error::Config(
            "contrastive batch needs at least 2 rows".into(),
        ));
    }
    let (a, an) = normalize_rows(anchors)?;
    let (p, pn) = normalize_rows(positives)?;
    let logits = a.dot(&p.t()) / temperature;

    let mut loss = 0.0;
    let mut dlogits = Array2::zeros((b, b));
    for i in 0..b {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps = row.mapv(|v| (v - max).exp());
        let sum = exps.sum();
        loss += max + sum.ln() - row[i];
        let mut drow = dlogits.row_mut(i);
        drow.assign(&(exps / sum));
        drow[i] -= 1.0;
    }
    let scale = 1.0 / b as f64;
    loss *= scale;
    dlogits *= scale / temperature;

    let da = dlogits.dot(&p);
    let dp = dlogits.t().dot(&a);
    Ok(InfoNceOutput {
        loss,
        grad_anchors: normalize_backward(&a, &an, da),
        grad_positives: normalize_backward(&p, &pn, dp),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOutput {
    pub loss: f64,
    /// Encoder gradients in `Encoder::params` order.
    pub encoder_grads: Vec<ArrayD<f64>>,
}

/// The base objective modeling the finest representation. It sees a
/// minibatch of raw inputs and the encoder, and reports its loss with
/// gradients for the encoder parameters.
pub trait FineGrainedObjective {
    fn name(&self) -> &'static str;

    fn loss_and_grads(
        &self,
        encoder: &Encoder,
        batch: ArrayView2<f64>,
        rng: &mut Rng,
    ) -> Result<ObjectiveOutput>;
}

/// InfoNCE between two views of each input made by additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNce {
    pub temperature: f64,
    pub aug_sigma: f64,
}

impl InfoNce {
    fn view(&self, batch: ArrayView2<f64>, rng: &mut Rng) -> Array2<f64> {
        let mut v = batch.to_owned();
        if self.aug_sigma > 0.0 {
            v.mapv_inplace(|x| {
                let z: f64 = StandardNormal.sample(rng);
                x + self.aug_sigma * z
            });
        }
        v
    }
}

impl FineGrainedObjective for InfoNce {
    fn name(&self) -> &'static str {
        "infonce"
    }

    fn loss_and_grads(
        &self,
        encoder: &Encoder,
        batch: ArrayView2<f64>,
        rng: &mut Rng,
    ) -> Result<ObjectiveOutput> {
        let v1 = self.view(batch, rng);
        let v2 = self.view(batch, rng);
        let (z1, c1) = encoder.forward_cached(v1.view());
        let (z2, c2) = encoder.forward_cached(v2.view());
        let out = infonce_loss(z1.view(), z2.view(), self.temperature)?;
        let (g1, _) = encoder.backward(&c1, out.grad_anchors.view());
        let (g2, _) = encoder.backward(&c2, out.grad_positives.view());
        let encoder_grads = g1.into_iter().zip(g2).map(|(a, b)| a + b).collect();
        Ok(ObjectiveOutput {
            loss: out.loss,
            encoder_grads,
        })
    }
}
