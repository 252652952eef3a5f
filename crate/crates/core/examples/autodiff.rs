//! The tape-based autodiff engine on its own: fit a 3x3 convolution to a
//! hidden one by gradient descent with Adam.
//!
//! cargo run --release --example autodiff

use med::autodiff::Graph;
use med::fit::Adam;
use med::rng::Rng;
use med::tensor::{Shape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = Rng::new(7);
    let mut sample = |shape| Tensor::<f32>::from_fn(shape, |_| rng.uniform(-1.0, 1.0) as f32);
    let x = sample(Shape::image(2, 12, 12));
    let hidden_w = sample(Shape::new(3, 2, 3, 3));
    let hidden_b = sample(Shape::image(3, 1, 1));

    let mut g = Graph::<f32>::new();
    let (xn, wn, bn) = (
        g.constant(x.clone()),
        g.constant(hidden_w),
        g.constant(hidden_b),
    );
    let target = g.conv2d(xn, wn, bn, 1)?;
    let target = g.value(target).clone();

    let mut params = vec![
        Tensor::zeros(Shape::new(3, 2, 3, 3)),
        Tensor::zeros(Shape::image(3, 1, 1)),
    ];
    let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8);
    for step in 0..=300 {
        let mut g = Graph::<f32>::new();
        let xn = g.constant(x.clone());
        let w = g.param(params[0].clone());
        let b = g.param(params[1].clone());
        let t = g.constant(target.clone());
        let y = g.conv2d(xn, w, b, 1)?;
        let loss = g.mse(y, t)?;
        g.backward(loss)?;
        if step % 50 == 0 {
            println!(
                "step {step:>3}  loss {:.3e}  tape {} nodes",
                g.value(loss).item(),
                g.len()
            );
        }
        let grads = [g.grad(w).expect("param"), g.grad(b).expect("param")];
        adam.step(&mut params, &grads)
            .map_err(|i| format!("non-finite gradient for parameter {i}"))?;
    }
    Ok(())
}
