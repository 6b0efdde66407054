//! Central finite-difference checks of every differentiable tape operation
//! and of the full network loss.

use rahn::model::{ModelDims, RahnConfig, RahnModel, TrainSample};
use rahn::tensor::{ParamKind, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

const H: f64 = 1e-5;

/// |analytic − numeric| / max(|analytic|, |numeric|, floor)
fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], avoid_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.5..1.5);
            if !avoid_zero || v.abs() > 0.05 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds a scalar from `inputs` as `Σ op(inputs) ∘ R` for a fixed random
/// `R`, then compares tape gradients against central differences.
fn check_op(
    seed: u64,
    shapes: &[&[usize]],
    avoid_zero: bool,
    op: impl Fn(&mut Tape<'static>, &[Var]) -> Var,
) -> f64 {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| random_tensor(&mut rng, s, avoid_zero))
        .collect();
    let weight_seed: u64 = rng.random();

    let eval = |inputs: &[Tensor]| -> (Tape<'static>, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = op(&mut tape, &vars);
        let mut wr = Xoshiro256PlusPlus::seed_from_u64(weight_seed);
        let shape = tape.shape(out).to_vec();
        let w = tape.constant(random_tensor(&mut wr, &shape, false));
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        (tape, vars, loss)
    };

    let (tape, vars, loss) = eval(&inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap();
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fp = {
                let (t, _, l) = eval(&plus);
                t.value(l).item().unwrap()
            };
            let fm = {
                let (t, _, l) = eval(&minus);
                t.value(l).item().unwrap()
            };
            let numeric = (fp - fm) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[i], numeric, 1e-3));
        }
    }
    worst
}

fn check_all_seeds(name: &str, shapes: &[&[usize]], avoid_zero: bool, op: impl Fn(&mut Tape<'static>, &[Var]) -> Var + Copy) {
    for seed in 0..10 {
        let e = check_op(seed, shapes, avoid_zero, op);
        assert!(e < 1e-6, "{name} seed {seed}: relative error {e:e}");
    }
}

#[test]
fn matmul_gradients() {
    check_all_seeds("matmul", &[&[3, 4], &[4, 2]], false, |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn linear_gradients() {
    check_all_seeds("linear", &[&[3, 5], &[5, 2], &[1, 2]], false, |t, v| {
        t.linear(v[0], v[1], v[2]).unwrap()
    });
}

#[test]
fn bmm_and_transpose_gradients() {
    check_all_seeds("bmm", &[&[2, 3, 4], &[2, 3, 4]], false, |t, v| {
        let bt = t.transpose(v[1]).unwrap();
        t.bmm(v[0], bt).unwrap()
    });
}

#[test]
fn relu_gradients_away_from_kink() {
    check_all_seeds("relu", &[&[4, 5]], true, |t, v| t.relu(v[0]));
}

#[test]
fn abs_gradients_away_from_kink() {
    check_all_seeds("abs", &[&[3, 3]], true, |t, v| t.abs(v[0]));
}

#[test]
fn softmax_gradients() {
    check_all_seeds("softmax", &[&[3, 5]], false, |t, v| t.softmax(v[0]));
    check_all_seeds("softmax3d", &[&[2, 3, 4]], false, |t, v| t.softmax(v[0]));
}

#[test]
fn concat_gradients() {
    check_all_seeds("concat", &[&[2, 3], &[2, 1], &[2, 4]], false, |t, v| {
        t.concat(v).unwrap()
    });
}

#[test]
fn broadcast_gather_and_reductions() {
    check_all_seeds("add_broadcast", &[&[2, 3, 4], &[3, 4]], false, |t, v| {
        t.add_broadcast(v[0], v[1]).unwrap()
    });
    check_all_seeds("gather", &[&[4, 3]], false, |t, v| {
        t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap()
    });
    check_all_seeds("sum_squares", &[&[3, 2]], false, |t, v| t.sum_squares(v[0]));
    check_all_seeds("mean", &[&[3, 2]], false, |t, v| t.mean(v[0]));
    check_all_seeds("scale_sub_reshape", &[&[2, 6], &[2, 6]], false, |t, v| {
        let d = t.sub(v[0], v[1]).unwrap();
        let s = t.scale(d, -0.7);
        t.reshape(s, &[3, 4]).unwrap()
    });
}

fn gradient_check_model(d: usize, n_stack: usize, use_pe: bool, seed: u64) -> f64 {
    let dims = ModelDims {
        n_users: 4,
        n_services: 5,
        n_user_regions: 3,
        n_service_regions: 2,
    };
    let config = RahnConfig {
        d,
        n_stack,
        use_pe,
        seed,
        ..RahnConfig::default()
    };
    let mut model = RahnModel::new(config, dims).unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed + 1000);
    // Biases start at zero, which puts ReLU inputs exactly on the kink when
    // an upstream layer is silent. Move to a generic point first.
    for p in model.params.iter_mut() {
        if p.kind == ParamKind::Bias {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let batch: Vec<TrainSample> = (0..6)
        .map(|i| TrainSample {
            user_index: i % 4,
            service_index: (i * 2) % 5,
            user_region: i % 3,
            service_region: i % 2,
            user_reputation: rng.random(),
            service_reputation: rng.random(),
            target_qos: rng.random_range(1.0..3.0),
        })
        .collect();
    let lambda = 1e-2;
    model.accumulate_gradients(&batch, lambda).unwrap();

    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = model.params.get(id).grad.clone().unwrap();
        for i in 0..analytic.numel() {
            let orig = model.params.value(id).data()[i];
            model.params.get_mut(id).value.data_mut()[i] = orig + H;
            let fp = model.loss_value(&batch, lambda).unwrap();
            model.params.get_mut(id).value.data_mut()[i] = orig - H;
            let fm = model.loss_value(&batch, lambda).unwrap();
            model.params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            let e = rel_err(analytic.data()[i], numeric, 1e-3);
            if e > worst {
                worst = e;
            }
        }
    }
    worst
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for n_stack in [0, 1] {
        for use_pe in [false, true] {
            for seed in 0..5 {
                let e = gradient_check_model(4, n_stack, use_pe, seed);
                assert!(e < 1e-4, "N={n_stack} PE={use_pe} seed {seed}: {e:e}");
            }
        }
    }
    // Two stacks at d = 8 exercise stacking and multi-column tokens.
    let e = gradient_check_model(8, 2, true, 11);
    assert!(e < 1e-4, "d=8 N=2: {e:e}");
}
