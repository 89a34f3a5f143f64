//! Central-difference gradient checking against backprop.

use crate::param::Params;

fn get_entry(net: &mut dyn Params, name: &str, idx: usize) -> f64 {
    let mut out = None;
    net.visit_params(&mut |n, v, _| {
        if n == name {
            out = Some(v.as_slice().expect("param must be contiguous")[idx]);
        }
    });
    out.unwrap_or_else(|| panic!("no parameter named {name}"))
}

fn set_entry(net: &mut dyn Params, name: &str, idx: usize, val: f64) {
    let mut found = false;
    net.visit_params(&mut |n, mut v, _| {
        if n == name {
            v.as_slice_mut().expect("param must be contiguous")[idx] = val;
            found = true;
        }
    });
    assert!(found, "no parameter named {name}");
}

/// Reads the accumulated gradient entry `idx` of parameter `name`.
pub fn read_grad(net: &mut dyn Params, name: &str, idx: usize) -> f64 {
    let mut out = None;
    net.visit_params(&mut |n, _, g| {
        if n == name {
            out = Some(g.as_slice().expect("grad must be contiguous")[idx]);
        }
    });
    out.unwrap_or_else(|| panic!("no parameter named {name}"))
}

/// Central-difference derivative of `loss` with respect to one parameter
/// entry. The parameter is restored to its original value afterwards.
pub fn numeric_grad<N: Params>(
    net: &mut N,
    name: &str,
    idx: usize,
    h: f64,
    loss: &mut dyn FnMut(&mut N) -> f64,
) -> f64 {
    let orig = get_entry(net, name, idx);
    set_entry(net, name, idx, orig + h);
    let lp = loss(net);
    set_entry(net, name, idx, orig - h);
    let lm = loss(net);
    set_entry(net, name, idx, orig);
    (lp - lm) / (2.0 * h)
}

/// All parameter names with their flat lengths, in visit order.
pub fn param_specs(net: &mut dyn Params) -> Vec<(String, usize)> {
    let mut specs = Vec::new();
    net.visit_params(&mut |n, v, _| specs.push((n.to_string(), v.len())));
    specs
}

/// Symmetric relative error with an absolute floor so near-zero pairs
/// compare sensibly.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{zero_grads, Param, Params};
    use ndarray::{arr1, ArrayViewMutD};

    struct Cubic {
        x: Param<ndarray::Ix1>,
    }

    impl Params for Cubic {
        fn visit_params(
            &mut self,
            f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
        ) {
            self.x.visit("x", f);
        }
    }

    #[test]
    fn numeric_grad_matches_analytic_cubic() {
        let mut net = Cubic {
            x: Param::new(arr1(&[1.5, -0.7])),
        };
        // loss = sum(x^3); dloss/dx_i = 3 x_i^2
        let mut loss = |n: &mut Cubic| n.x.v.iter().map(|v| v * v * v).sum::<f64>();
        for idx in 0..2 {
            let num = numeric_grad(&mut net, "x", idx, 1e-5, &mut loss);
            let ana = 3.0 * net.x.v[idx] * net.x.v[idx];
            assert!(relative_error(num, ana) < 1e-7, "{num} vs {ana}");
        }
        zero_grads(&mut net);
        assert_eq!(read_grad(&mut net, "x", 0), 0.0);
    }

    #[test]
    fn param_entries_restored_after_check() {
        let mut net = Cubic {
            x: Param::new(arr1(&[2.0])),
        };
        let mut loss = |n: &mut Cubic| n.x.v[0];
        numeric_grad(&mut net, "x", 0, 1e-4, &mut loss);
        assert_eq!(net.x.v[0], 2.0);
    }
}
