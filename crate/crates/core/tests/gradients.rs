use consensus_prune::net::train::softmax_cross_entropy;
use consensus_prune::net::{ArchitectureSpec, Mode, Model, ResnetShape, TransformerShape};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(model: &mut Model<f64>, x: &Array2<f64>, y: &[usize], mode: Mode) -> f64 {
    let logits = model.forward(x.view(), mode);
    softmax_cross_entropy(&logits, y).0
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares backprop against central differences for a sample of weights in
/// every tensor and a few input coordinates.
fn check(spec: &ArchitectureSpec, mode: Mode, seed: u64) {
    let mut model = Model::<f64>::build(spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let n = 4;
    let x = Array2::from_shape_fn((n, spec.input.numel()), |_| rng.gen_range(0.0..1.0));
    let y: Vec<usize> = (0..n).map(|i| i % spec.classes()).collect();
    if mode == Mode::Record {
        // Move running statistics off their initial values; with mean 0 and
        // beta 0 exact zeros propagate and land on ReLU kinks.
        for _ in 0..3 {
            let warm = Array2::from_shape_fn(x.dim(), |_| rng.gen_range(0.0..1.0));
            model.forward(warm.view(), Mode::Train);
        }
    }

    model.zero_grad();
    let logits = model.forward(x.view(), mode);
    let (_, dlogits) = softmax_cross_entropy(&logits, &y);
    let dx = model.backward(&dlogits);

    let mut names = Vec::new();
    let mut grads = Vec::new();
    model.visit(&mut |name, p| {
        if let Some(g) = &p.grad {
            names.push(name);
            grads.push(g.clone());
        }
    });

    let h = 1e-5;
    let mut checked = 0;
    for (t, (name, grad)) in names.iter().zip(&grads).enumerate() {
        for _ in 0..3 {
            let j = rng.gen_range(0..grad.len());
            let bump = |delta: f64, model: &mut Model<f64>| {
                let mut idx = 0;
                model.visit(&mut |_, p| {
                    if p.grad.is_some() {
                        if idx == t {
                            let v = p.value.as_slice_mut().unwrap();
                            v[j] += delta;
                        }
                        idx += 1;
                    }
                });
            };
            bump(h, &mut model);
            let up = loss(&mut model, &x, &y, mode);
            bump(-2.0 * h, &mut model);
            let down = loss(&mut model, &x, &y, mode);
            bump(h, &mut model);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.as_slice().unwrap()[j];
            assert!(close(analytic, numeric), "{name}[{j}]: analytic {analytic} numeric {numeric}");
            checked += 1;
        }
    }
    assert!(checked >= 10);

    for _ in 0..5 {
        let (i, j) = (rng.gen_range(0..n), rng.gen_range(0..x.ncols()));
        let mut xp = x.clone();
        xp[[i, j]] += h;
        let up = loss(&mut model, &xp, &y, mode);
        xp[[i, j]] -= 2.0 * h;
        let down = loss(&mut model, &xp, &y, mode);
        let numeric = (up - down) / (2.0 * h);
        assert!(close(dx[[i, j]], numeric), "input[{i},{j}]: analytic {} numeric {numeric}", dx[[i, j]]);
    }
}

fn small_resnet() -> ArchitectureSpec {
    ArchitectureSpec::resnet_cifar(&ResnetShape {
        height: 6,
        width: 6,
        channels: 2,
        stem_width: 3,
        widths: vec![3, 4],
        blocks_per_stage: vec![2, 2],
        classes: 3,
    })
    .unwrap()
}

#[test]
fn resnet_gradients_match_finite_differences_in_training_mode() {
    check(&small_resnet(), Mode::Train, 1);
}

#[test]
fn resnet_gradients_match_finite_differences_with_running_statistics() {
    check(&small_resnet(), Mode::Record, 2);
}

#[test]
fn transformer_gradients_match_finite_differences() {
    let spec = ArchitectureSpec::transformer_tabular(&TransformerShape {
        features: 3,
        model_dim: 4,
        heads: 2,
        ff_dim: 6,
        blocks: 2,
        classes: 3,
    })
    .unwrap();
    check(&spec, Mode::Train, 3);
}
