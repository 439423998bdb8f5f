//! Central finite-difference checks of every differentiable op.

use asda_autodiff::{Conv2dSpec, Graph, RoiCells, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Reduces an arbitrary node to a scalar with fixed random weights so every
/// output element contributes a distinct amount.
fn weighted_readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yv = g.value(y).clone();
    let weights: Vec<f64> = (0..yv.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let value = yv.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
    let grad = Tensor::new(yv.shape().to_vec(), weights);
    g.custom_scalar(value, vec![(y, grad)])
}

/// Builds `f(inputs)` twice per perturbed coordinate and compares.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
        let y = build(&mut g, &vars);
        let root = weighted_readout(&mut g, y, 99);
        (g, vars, root)
    };
    let (g, vars, root) = eval(&inputs);
    let grads = g.backward(root);
    let h = 1e-5;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("input gradient").clone();
        let mut num = vec![0.0; x.len()];
        for (j, n) in num.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let (gp, _, rp) = eval(&plus);
            let (gm, _, rm) = eval(&minus);
            *n = (gp.value(rp).item() - gm.value(rm).item()) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic.sq_norm().sqrt().max(num.iter().map(|v| v * v).sum::<f64>().sqrt());
        assert!(
            diff <= 1e-6 * scale.max(1e-8),
            "input {i}: relative error {} (scale {scale})",
            diff / scale.max(1e-300)
        );
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(s, p) in &[(1, 1), (2, 1), (2, 0)] {
        let x = rand_tensor(&mut rng, &[2, 2, 5, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check(vec![x, w, b], |g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(s, p)));
    }
}

#[test]
fn conv_transpose2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(k, s, p) in &[(4, 2, 1), (8, 4, 2), (3, 1, 1)] {
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let w = rand_tensor(&mut rng, &[2, 3, k, k]);
        let b = rand_tensor(&mut rng, &[3]);
        check(vec![x, w, b], |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(s, p))
        });
    }
}

#[test]
fn relu_add_concat_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Keep values away from the relu kink.
    let shift = |t: Tensor<f64>| t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let a = shift(rand_tensor(&mut rng, &[2, 2, 3, 3]));
    let b = shift(rand_tensor(&mut rng, &[2, 2, 3, 3]));
    let c = rand_tensor(&mut rng, &[2, 1, 3, 3]);
    check(vec![a, b, c], |g, v| {
        let s = g.add(v[0], v[1]);
        let r = g.relu(v[0]);
        let cat = g.concat_channels(&[s, r, v[2]]);
        g.relu(cat)
    });
}

#[test]
fn roi_pool_and_global_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
    let rois = [
        RoiCells { batch: 0, y0: 0, y1: 6, x0: 0, x1: 6 },
        RoiCells { batch: 1, y0: 1, y1: 3, x0: 2, x1: 5 },
        RoiCells { batch: 1, y0: 4, y1: 5, x0: 4, x1: 5 },
    ];
    check(vec![x.clone()], |g, v| g.roi_pool(v[0], &rois, 3));
    check(vec![x], |g, v| g.global_avg_pool(v[0]));
}

#[test]
fn linear_and_weighted_sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 3]);
    let w = rand_tensor(&mut rng, &[5, 3]);
    let b = rand_tensor(&mut rng, &[5]);
    check(vec![x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        let a = weighted_readout(g, y, 7);
        let c = weighted_readout(g, v[0], 8);
        g.weighted_sum(&[(a, 0.5), (c, -2.0)])
    });
}

#[test]
fn frozen_inputs_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let w = g.variable(Tensor::full(vec![1, 1, 3, 3], 0.5));
    let frozen = g.constant(Tensor::full(vec![1], 0.1));
    let y = g.conv2d(x, w, Some(frozen), Conv2dSpec::new(1, 1));
    let root = weighted_readout(&mut g, y, 1);
    let grads = g.backward(root);
    assert!(grads.get(w).is_some());
    assert!(grads.get(x).is_none());
    assert!(grads.get(frozen).is_none());
}

#[test]
fn detach_cuts_the_tape() {
    let mut g = Graph::<f64>::new();
    let a = g.variable(Tensor::full(vec![1, 1, 2, 2], 2.0));
    let r = g.relu(a);
    let d = g.detach(r);
    let root = weighted_readout(&mut g, d, 3);
    let grads = g.backward(root);
    assert!(grads.get(a).is_none());
}
