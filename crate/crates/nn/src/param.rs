//! Parameter storage and the visitor used to enumerate parameters.

use ndarray::{Array, ArrayViewMutD, Dimension};

/// A learnable tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<D: Dimension> {
    pub v: Array<f64, D>,
    pub g: Array<f64, D>,
}

impl<D: Dimension> Param<D> {
    pub fn new(v: Array<f64, D>) -> Self {
        let g = Array::zeros(v.raw_dim());
        Param { v, g }
    }

    /// Hands the value/gradient pair to a [`Params`] visitor callback.
    pub fn visit(
        &mut self,
        name: &str,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        f(name, self.v.view_mut().into_dyn(), self.g.view_mut().into_dyn());
    }
}

/// Walks every parameter of a module in a stable, code-defined order.
///
/// The order must not depend on runtime state: optimizer slots, checkpoint
/// layout, and gradient checks all index parameters by visit order or by the
/// dotted names produced here.
pub trait Params {
    fn visit_params(
        &mut self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    );
}

/// Resets every gradient accumulator of `net` to zero.
pub fn zero_grads(net: &mut dyn Params) {
    net.visit_params(&mut |_, _, mut g| g.fill(0.0));
}

/// Counts scalar parameters, useful for sanity checks and reports.
pub fn param_count(net: &mut dyn Params) -> usize {
    let mut n = 0;
    net.visit_params(&mut |_, v, _| n += v.len());
    n
}
