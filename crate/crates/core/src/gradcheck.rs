//! Central finite-difference checks of the hand-written backward passes.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{self, Layer, ParamGrads};
use crate::network::Network;
use crate::tensor::Tensor;

/// Step used for central differences.
pub const FD_EPSILON: f64 = 1e-5;

/// Per-coordinate relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Worst coordinate found by a check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_relative_error: f64,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradReport {
    fn new() -> Self {
        GradReport {
            max_relative_error: 0.0,
            analytic: 0.0,
            numeric: 0.0,
            coordinates: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        if e > self.max_relative_error || self.coordinates == 0 {
            self.max_relative_error = e;
            self.analytic = analytic;
            self.numeric = numeric;
        }
        self.coordinates += 1;
    }
}

fn central<F: FnMut(f64) -> Result<f64>>(x: f64, mut f: F) -> Result<f64> {
    let plus = f(x + FD_EPSILON)?;
    let minus = f(x - FD_EPSILON)?;
    Ok((plus - minus) / (2.0 * FD_EPSILON))
}

fn projected(layer: &Layer, input: &Tensor, projection: &Tensor) -> Result<f64> {
    let (out, _) = layer.forward(input)?;
    out.expect_shape(projection.shape(), "gradient check projection")?;
    Ok(out.data().iter().zip(projection.data()).map(|(a, b)| a * b).sum())
}

/// Checks one layer against the scalar objective `sum(projection * forward(input))`,
/// covering the input gradient and every parameter.
pub fn check_layer(layer: &Layer, input: &Tensor, projection: &Tensor) -> Result<GradReport> {
    let (_, cache) = layer.forward(input)?;
    let (grad_input, grads) = layer.backward(&cache, projection)?;
    let mut report = GradReport::new();

    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let numeric = central(orig, |v| {
            x.data_mut()[i] = v;
            projected(layer, &x, projection)
        })?;
        x.data_mut()[i] = orig;
        report.record(grad_input.data()[i], numeric);
    }

    let mut probe = layer.clone();
    check_params(
        &mut report,
        &grads,
        |t, i, v| {
            probe.params_mut()[t].data_mut()[i] = v;
            projected(&probe, input, projection)
        },
        layer.params(),
    )?;
    Ok(report)
}

/// Checks every parameter of a network against the cross-entropy loss for
/// one labeled image.
pub fn check_network(net: &Network, image: &Tensor, label: usize) -> Result<GradReport> {
    let (_, _, grads) = net.loss_and_grads(image, label)?;
    let mut report = GradReport::new();
    let mut probe = net.clone();
    for (l, layer) in net.layers.iter().enumerate() {
        check_params(
            &mut report,
            &grads[l],
            |t, i, v| {
                probe.layers[l].params_mut()[t].data_mut()[i] = v;
                let trace = probe.forward(image)?;
                Ok(layers::softmax_xent(&trace.logits, label)?.1)
            },
            layer.params(),
        )?;
    }
    Ok(report)
}

fn check_params<F>(report: &mut GradReport, grads: &ParamGrads, mut eval: F, params: Vec<&Tensor>) -> Result<()>
where
    F: FnMut(usize, usize, f64) -> Result<f64>,
{
    let analytic = grads.tensors();
    if analytic.len() != params.len() {
        return Err(Error::InvalidArgument("gradient tree does not match layer".into()));
    }
    for (t, (p, g)) in params.iter().zip(analytic).enumerate() {
        for i in 0..p.len() {
            let orig = p.data()[i];
            let numeric = central(orig, |v| eval(t, i, v))?;
            eval(t, i, orig)?;
            report.record(g.data()[i], numeric);
        }
    }
    Ok(())
}
