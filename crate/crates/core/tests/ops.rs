//! Op values against independent oracles (nested loops, hand-computed
//! values) and op gradients against f64 central differences computed here.

use med::autodiff::{AutodiffError, Graph, NodeId, OpKind};
use med::rng::Rng;
use med::tensor::{Shape, Tensor};

fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

/// Zero-padded "same" convolution by direct summation.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = [
        x.shape().batch(),
        x.shape().channels(),
        x.shape().height(),
        x.shape().width(),
    ];
    let [cout, _, k, _] = [
        w.shape().batch(),
        w.shape().channels(),
        w.shape().height(),
        w.shape().width(),
    ];
    let pad = (k - 1) / 2;
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    Tensor::from_fn(Shape::new(n, cout, oh, ow), |[bi, co, oy, ox]| {
        let mut s = b.data()[co];
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                        continue;
                    }
                    s += w.at([co, ci, ky, kx]) * x.at([bi, ci, iy as usize, ix as usize]);
                }
            }
        }
        s
    })
}

#[test]
fn conv_matches_nested_loops() {
    let mut seed = 0;
    for (n, cin, cout, hw) in [
        (1, 1, 1, 1),
        (1, 3, 2, 5),
        (2, 3, 4, 6),
        (2, 2, 3, 3),
        (1, 3, 2, 6),
    ] {
        for k in [1, 3] {
            for stride in [1, 2] {
                seed += 1;
                let x = random(Shape::new(n, cin, hw, hw), seed);
                let w = random(Shape::new(cout, cin, k, k), seed + 100);
                let b = random(Shape::image(cout, 1, 1), seed + 200);
                let mut g = Graph::<f64>::new();
                let (xn, wn, bn) = (
                    g.constant(x.clone()),
                    g.constant(w.clone()),
                    g.constant(b.clone()),
                );
                let y = g.conv2d(xn, wn, bn, stride).unwrap();
                let want = conv_oracle(&x, &w, &b, stride);
                assert_eq!(g.shape(y), want.shape());
                let err = g.value(y).max_abs_diff(&want);
                assert!(
                    err < 1e-12,
                    "n{n} cin{cin} cout{cout} {hw}x{hw} k{k} s{stride}: {err}"
                );
            }
        }
    }
}

#[test]
fn conv_f32_agrees_with_f64() {
    let x = random(Shape::new(2, 3, 6, 6), 1);
    let w = random(Shape::new(4, 3, 3, 3), 2);
    let b = random(Shape::image(4, 1, 1), 3);
    let want = conv_oracle(&x, &w, &b, 2);
    let mut g = Graph::<f32>::new();
    let (xn, wn, bn) = (
        g.constant(x.cast()),
        g.constant(w.cast()),
        g.constant(b.cast()),
    );
    let y = g.conv2d(xn, wn, bn, 2).unwrap();
    assert!(g.value(y).cast::<f64>().max_abs_diff(&want) < 1e-5);
}

/// Central differences of `f` with respect to every element of every
/// input, compared with backward, per-element relative error.
fn check_grad<F>(inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &ids);
    g.backward(loss).unwrap();
    let h = 1e-5;
    let mut vals = inputs.to_vec();
    for t in 0..vals.len() {
        let analytic = g.grad(ids[t]).unwrap().clone();
        for i in 0..vals[t].numel() {
            let orig = vals[t].data()[i];
            let mut eval = |v: f64| {
                vals[t].data_mut()[i] = v;
                let mut g = Graph::<f64>::new();
                let ids: Vec<NodeId> = vals.iter().map(|t| g.constant(t.clone())).collect();
                let l = f(&mut g, &ids);
                g.value(l).item()
            };
            let numeric = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            vals[t].data_mut()[i] = orig;
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "input {t}[{i}]: analytic {a} numeric {numeric}");
        }
    }
}

fn project(g: &mut Graph<f64>, y: NodeId, seed: u64) -> NodeId {
    let t = g.constant(random(g.shape(y), seed));
    g.mse(y, t).unwrap()
}

#[test]
fn conv_gradients() {
    for stride in [1, 2] {
        for k in [1, 3] {
            let x = random(Shape::new(2, 2, 5, 5), 10);
            let w = random(Shape::new(3, 2, k, k), 11);
            let b = random(Shape::image(3, 1, 1), 12);
            check_grad(&[x, w, b], |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride).unwrap();
                project(g, y, 13)
            });
        }
    }
}

#[test]
fn batch_norm_gradients() {
    let x = random(Shape::new(2, 3, 3, 3), 20);
    let gamma = random(Shape::image(3, 1, 1), 21);
    let beta = random(Shape::image(3, 1, 1), 22);
    check_grad(&[x, gamma, beta], |g, v| {
        let y = g.batch_norm(v[0], v[1], v[2], 1e-5).unwrap();
        project(g, y, 23)
    });
}

#[test]
fn pointwise_gradients() {
    // Leaky ReLU inputs stay clear of the kink.
    let mut x = random(Shape::image(2, 3, 3), 30);
    for v in x.data_mut() {
        *v += 0.1 * v.signum();
    }
    check_grad(&[x.clone()], |g, v| {
        let y = g.leaky_relu(v[0], 0.2).unwrap();
        project(g, y, 31)
    });
    check_grad(&[x.clone()], |g, v| {
        let y = g.sigmoid(v[0]).unwrap();
        project(g, y, 32)
    });
    check_grad(&[x], |g, v| {
        let y = g.scale(v[0], -2.5).unwrap();
        project(g, y, 33)
    });
}

#[test]
fn resampling_gradients() {
    check_grad(&[random(Shape::image(2, 3, 2), 40)], |g, v| {
        let y = g.upsample_bilinear(v[0], 2).unwrap();
        project(g, y, 41)
    });
    for f in [2, 4] {
        check_grad(&[random(Shape::image(2, 8, 4), 42)], |g, v| {
            let y = g.downsample_area(v[0], f).unwrap();
            project(g, y, 43)
        });
    }
}

#[test]
fn structural_gradients() {
    let a = random(Shape::image(2, 3, 3), 50);
    let b = random(Shape::image(1, 3, 3), 51);
    let c = random(Shape::image(2, 3, 3), 52);
    check_grad(&[a.clone(), b], |g, v| {
        let y = g.concat_channels(v[0], v[1]).unwrap();
        project(g, y, 53)
    });
    check_grad(&[a.clone(), c.clone()], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y, 54)
    });
    check_grad(&[a.clone(), c.clone()], |g, v| g.mse(v[0], v[1]).unwrap());
    let mask = Tensor::from_fn(
        a.shape(),
        |[_, _, y, x]| if (x + y) % 3 == 0 { 0.0 } else { 1.0 },
    );
    check_grad(&[a.clone(), c.clone()], |g, v| {
        g.masked_mse(v[0], v[1], &mask).unwrap()
    });
    check_grad(&[a, c], |g, v| {
        let l1 = g.mse(v[0], v[1]).unwrap();
        let l2 = g.mse(v[1], v[0]).unwrap();
        g.weighted_sum(&[(0.3, l1), (1.0, l2)]).unwrap().unwrap()
    });
}

#[test]
fn batch_norm_normalizes_each_channel() {
    let mut rng = Rng::new(3);
    let x = Tensor::from_fn(Shape::new(2, 3, 5, 5), |[_, c, _, _]| {
        4.0 * c as f64 + rng.uniform(-2.0, 2.0)
    });
    let mut g = Graph::<f64>::new();
    let xn = g.constant(x.clone());
    let gamma = g.constant(Tensor::full(Shape::image(3, 1, 1), 1.0));
    let beta = g.constant(Tensor::zeros(Shape::image(3, 1, 1)));
    let eps = 1e-5;
    let y = g.batch_norm(xn, gamma, beta, eps).unwrap();
    let y = g.value(y);
    for c in 0..3 {
        let xs: Vec<f64> = (0..2).flat_map(|n| x.plane(n, c).to_vec()).collect();
        let ys: Vec<f64> = (0..2).flat_map(|n| y.plane(n, c).to_vec()).collect();
        let m = ys.len() as f64;
        let mean_x = xs.iter().sum::<f64>() / m;
        let var_x = xs.iter().map(|v| (v - mean_x).powi(2)).sum::<f64>() / m;
        let mean = ys.iter().sum::<f64>() / m;
        let var = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        assert!(mean.abs() < 1e-12, "channel {c} mean {mean}");
        assert!(
            (var - var_x / (var_x + eps)).abs() < 1e-12,
            "channel {c} var {var}"
        );
    }
}

#[test]
fn bilinear_hand_values() {
    // Half-pixel centers: outputs sit at 1/4 and 3/4 between inputs, edges
    // clamp.
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(Shape::image(1, 1, 2), vec![0.0, 4.0]).unwrap());
    let y = g.upsample_bilinear(x, 2).unwrap();
    assert_eq!(g.shape(y), Shape::image(1, 2, 4));
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);

    let x = g.constant(Tensor::from_vec(Shape::image(1, 2, 1), vec![2.0, 6.0]).unwrap());
    let y = g.upsample_bilinear(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 2.0, 3.0, 3.0, 5.0, 5.0, 6.0, 6.0]);
}

#[test]
fn downsample_by_four_is_two_twice() {
    let x = random(Shape::new(2, 3, 8, 8), 60);
    let mut g = Graph::<f64>::new();
    let xn = g.constant(x);
    let four = g.downsample_area(xn, 4).unwrap();
    let half = g.downsample_area(xn, 2).unwrap();
    let twice = g.downsample_area(half, 2).unwrap();
    assert!(g.value(four).max_abs_diff(g.value(twice)) < 1e-15);
}

#[test]
fn conv_is_linear_in_its_input() {
    let (x1, x2) = (
        random(Shape::new(1, 2, 6, 6), 70),
        random(Shape::new(1, 2, 6, 6), 71),
    );
    let w = random(Shape::new(3, 2, 3, 3), 72);
    let zero = Tensor::zeros(Shape::image(3, 1, 1));
    let (a, b) = (0.7, -1.3);
    let combo = Tensor::from_fn(x1.shape(), |i| a * x1.at(i) + b * x2.at(i));
    let conv = |x: &Tensor<f64>| conv_oracle(x, &w, &zero, 2);
    let mut g = Graph::<f64>::new();
    let (xn, wn, bn) = (
        g.constant(combo),
        g.constant(w.clone()),
        g.constant(zero.clone()),
    );
    let y = g.conv2d(xn, wn, bn, 2).unwrap();
    let (y1, y2) = (conv(&x1), conv(&x2));
    let want = Tensor::from_fn(y1.shape(), |i| a * y1.at(i) + b * y2.at(i));
    assert!(g.value(y).max_abs_diff(&want) < 1e-12);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.param(random(Shape::new(1, 3, 8, 8), 80).cast());
        let w = g.param(random(Shape::new(4, 3, 3, 3), 81).cast());
        let b = g.param(Tensor::zeros(Shape::image(4, 1, 1)));
        let y = g.conv2d(x, w, b, 2).unwrap();
        let y = g.leaky_relu(y, 0.2).unwrap();
        let y = g.upsample_bilinear(y, 2).unwrap();
        let t = g.constant(Tensor::full(Shape::new(1, 4, 8, 8), 0.25));
        let l = g.mse(y, t).unwrap();
        g.backward(l).unwrap();
        (
            g.value(l).item(),
            g.grad(w).unwrap().clone(),
            g.grad(x).unwrap().clone(),
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}

#[test]
fn structural_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros(Shape::image(2, 4, 4)));
    let w = g.param(Tensor::zeros(Shape::new(3, 5, 3, 3)));
    let b = g.param(Tensor::zeros(Shape::image(3, 1, 1)));
    assert!(matches!(
        g.conv2d(x, w, b, 1),
        Err(AutodiffError::ShapeMismatch {
            op: OpKind::Conv2d,
            ..
        })
    ));
    let even = g.param(Tensor::zeros(Shape::new(3, 2, 2, 2)));
    assert!(matches!(
        g.conv2d(x, even, b, 1),
        Err(AutodiffError::EvenKernel { .. })
    ));
    let odd = g.param(Tensor::zeros(Shape::image(1, 3, 3)));
    assert!(matches!(
        g.downsample_area(odd, 2),
        Err(AutodiffError::Indivisible { .. })
    ));
    let other = g.param(Tensor::zeros(Shape::image(2, 2, 2)));
    assert!(matches!(
        g.concat_channels(x, other),
        Err(AutodiffError::ShapeMismatch { .. })
    ));
    assert!(matches!(
        g.backward(x),
        Err(AutodiffError::NonScalarRoot { .. })
    ));
    let l = g.mse(x, x).unwrap();
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(AutodiffError::BackwardTwice)));
    g.zero_grad();
    g.backward(l).unwrap();
}

#[test]
fn non_finite_backward_names_the_op() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::full(Shape::image(1, 2, 2), f32::MAX));
    let y = g.scale(x, 4.0).unwrap_or(x);
    let t = g.constant(Tensor::zeros(Shape::image(1, 2, 2)));
    match g.mse(y, t) {
        Err(AutodiffError::NonFinite { .. }) => {}
        Ok(l) => match g.backward(l) {
            Err(AutodiffError::NonFinite { .. }) => {}
            other => panic!("expected a non-finite error, got {other:?}"),
        },
        Err(e) => panic!("unexpected {e}"),
    }
}
