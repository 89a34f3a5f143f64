//! Finite-difference gradient checks for every layer.
//!
//! Each test builds a tiny module, defines a scalar loss over its output,
//! runs one backward pass, and compares accumulated parameter gradients and
//! input gradients against central differences.

use ndarray::{Array2, Array4, ArrayViewMutD};
use nullcast_nn::{
    concat_channels, leaky_relu, leaky_relu_back, numeric_grad, read_grad, relative_error,
    sigmoid, sigmoid_back, silu, silu_back, split_channels, upsample2x, upsample2x_back,
    zero_grads, Conv2d, GroupNorm, Init, Linear, Params,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rand4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum of the output keeps the loss scalar while exercising every
/// output element with a distinct coefficient.
fn probe_like(rng: &mut ChaCha8Rng, y: &Array4<f64>) -> Array4<f64> {
    Array4::from_shape_fn(y.dim(), |_| rng.random_range(-1.0..1.0))
}

struct ConvNet {
    conv: Conv2d,
}

impl Params for ConvNet {
    fn visit_params(
        &mut self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.conv.visit("conv", f);
    }
}

#[test]
fn conv2d_param_and_input_gradients() {
    for &(stride, pad) in &[(1usize, 1usize), (2, 1), (2, 0)] {
        let mut rng = ChaCha8Rng::seed_from_u64(42 + stride as u64);
        let mut init = Init::new(9);
        let mut net = ConvNet {
            conv: Conv2d::new(3, 4, 3, stride, pad, &mut init),
        };
        let x = rand4(&mut rng, (2, 3, 6, 6));
        let y0 = net.conv.forward(&x);
        let probe = probe_like(&mut rng, &y0);

        zero_grads(&mut net);
        let (y, cache) = net.conv.forward_t(&x);
        let gx = net.conv.backward(&cache, &probe);
        let _ = y;

        let p = probe.clone();
        let xc = x.clone();
        let mut loss = move |n: &mut ConvNet| (&n.conv.forward(&xc) * &p).sum();
        for (name, len) in [("conv.w", net.conv.w.v.len()), ("conv.b", net.conv.b.v.len())] {
            for idx in (0..len).step_by((len / 6).max(1)) {
                let num = numeric_grad(&mut net, name, idx, 1e-5, &mut loss);
                let ana = read_grad(&mut net, name, idx);
                assert!(
                    relative_error(num, ana) < TOL,
                    "{name}[{idx}] stride={stride} pad={pad}: numeric {num} vs backprop {ana}"
                );
            }
        }

        // Input gradient against finite differences on a few entries.
        let mut x_pert = x.clone();
        for &idx in &[0usize, 17, 101] {
            let flat = x_pert.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + 1e-5;
            let lp = (&net.conv.forward(&x_pert) * &probe).sum();
            x_pert.as_slice_mut().unwrap()[idx] = orig - 1e-5;
            let lm = (&net.conv.forward(&x_pert) * &probe).sum();
            x_pert.as_slice_mut().unwrap()[idx] = orig;
            let num = (lp - lm) / 2e-5;
            let ana = gx.as_slice().unwrap()[idx];
            assert!(
                relative_error(num, ana) < TOL,
                "input[{idx}] stride={stride}: {num} vs {ana}"
            );
        }
    }
}

struct LinNet {
    lin: Linear,
}

impl Params for LinNet {
    fn visit_params(
        &mut self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.lin.visit("lin", f);
    }
}

#[test]
fn linear_param_and_input_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut init = Init::new(3);
    let mut net = LinNet {
        lin: Linear::new(5, 4, &mut init),
    };
    let x = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
    let probe = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));

    zero_grads(&mut net);
    let (_, cache) = net.lin.forward_t(&x);
    let gx = net.lin.backward(&cache, &probe);

    let p = probe.clone();
    let xc = x.clone();
    let mut loss = move |n: &mut LinNet| (&n.lin.forward(&xc) * &p).sum();
    for (name, len) in [("lin.w", 20usize), ("lin.b", 4)] {
        for idx in 0..len {
            let num = numeric_grad(&mut net, name, idx, 1e-5, &mut loss);
            let ana = read_grad(&mut net, name, idx);
            assert!(relative_error(num, ana) < TOL, "{name}[{idx}]: {num} vs {ana}");
        }
    }

    for idx in 0..x.len() {
        let mut xp = x.clone();
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + 1e-5;
        let lp = (&net.lin.forward(&xp) * &probe).sum();
        xp.as_slice_mut().unwrap()[idx] = orig - 1e-5;
        let lm = (&net.lin.forward(&xp) * &probe).sum();
        let num = (lp - lm) / 2e-5;
        assert!(relative_error(num, gx.as_slice().unwrap()[idx]) < TOL);
    }
}

struct GnNet {
    gn: GroupNorm,
}

impl Params for GnNet {
    fn visit_params(
        &mut self,
        f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>),
    ) {
        self.gn.visit("gn", f);
    }
}

#[test]
fn groupnorm_param_and_input_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut net = GnNet {
        gn: GroupNorm::new(6, 3),
    };
    // Non-trivial gamma/beta so their gradients interact with the stats.
    net.gn.gamma.v.assign(&ndarray::arr1(&[1.3, 0.7, -0.5, 2.0, 1.0, 0.2]));
    net.gn.beta.v.assign(&ndarray::arr1(&[0.1, -0.2, 0.3, 0.0, 0.5, -0.7]));
    let x = rand4(&mut rng, (2, 6, 3, 3));
    let probe = probe_like(&mut rng, &x);

    zero_grads(&mut net);
    let (_, cache) = net.gn.forward_t(&x);
    let gx = net.gn.backward(&cache, &probe);

    let p = probe.clone();
    let xc = x.clone();
    let mut loss = move |n: &mut GnNet| (&n.gn.forward(&xc) * &p).sum();
    for (name, len) in [("gn.gamma", 6usize), ("gn.beta", 6)] {
        for idx in 0..len {
            let num = numeric_grad(&mut net, name, idx, 1e-5, &mut loss);
            let ana = read_grad(&mut net, name, idx);
            assert!(relative_error(num, ana) < TOL, "{name}[{idx}]: {num} vs {ana}");
        }
    }

    for &idx in &[0usize, 25, 60, 107] {
        let mut xp = x.clone();
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + 1e-5;
        let lp = (&net.gn.forward(&xp) * &probe).sum();
        xp.as_slice_mut().unwrap()[idx] = orig - 1e-5;
        let lm = (&net.gn.forward(&xp) * &probe).sum();
        let num = (lp - lm) / 2e-5;
        let ana = gx.as_slice().unwrap()[idx];
        assert!(relative_error(num, ana) < 1e-5, "input[{idx}]: {num} vs {ana}");
    }
}

#[test]
fn activation_chains_backprop_correctly() {
    // Compose lrelu -> silu -> sigmoid and check the chained input gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand4(&mut rng, (1, 2, 3, 3)).into_dyn();
    let probe = Array4::from_shape_fn((1, 2, 3, 3), |_| rng.random_range(-1.0..1.0)).into_dyn();

    let a = leaky_relu(&x.view(), 0.1);
    let b = silu(&a.view());
    let c = sigmoid(&b.view());
    let gc = probe.clone();
    let gb = sigmoid_back(&c.view(), &gc.view());
    let ga = silu_back(&a.view(), &gb.view());
    let gx = leaky_relu_back(&x.view(), &ga.view(), 0.1);

    let f = |x: &ndarray::ArrayD<f64>| {
        let a = leaky_relu(&x.view(), 0.1);
        let b = silu(&a.view());
        let c = sigmoid(&b.view());
        (&c * &probe).sum()
    };
    for &idx in &[0usize, 5, 11, 17] {
        let mut xp = x.clone();
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + 1e-6;
        let lp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - 1e-6;
        let lm = f(&xp);
        let num = (lp - lm) / 2e-6;
        let ana = gx.as_slice().unwrap()[idx];
        assert!(relative_error(num, ana) < 1e-5, "chain[{idx}]: {num} vs {ana}");
    }
}

#[test]
fn upsample_and_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a = rand4(&mut rng, (1, 2, 2, 2));
    let b = rand4(&mut rng, (1, 3, 4, 4));
    // y = concat(upsample(a), b); loss = <probe, y>
    let up = upsample2x(&a);
    let y = concat_channels(&up, &b);
    let probe = probe_like(&mut rng, &y);
    let (g_up, g_b) = split_channels(&probe, 2);
    let g_a = upsample2x_back(&g_up);

    for &idx in &[0usize, 3, 7] {
        let mut ap = a.clone();
        let orig = ap.as_slice_mut().unwrap()[idx];
        ap.as_slice_mut().unwrap()[idx] = orig + 1e-6;
        let lp = (&concat_channels(&upsample2x(&ap), &b) * &probe).sum();
        ap.as_slice_mut().unwrap()[idx] = orig - 1e-6;
        let lm = (&concat_channels(&upsample2x(&ap), &b) * &probe).sum();
        let num = (lp - lm) / 2e-6;
        assert!(relative_error(num, g_a.as_slice().unwrap()[idx]) < 1e-6);
    }
    // The b-side gradient is just the probe slice.
    assert_eq!(g_b, probe.slice(ndarray::s![.., 2.., .., ..]).to_owned());
}
