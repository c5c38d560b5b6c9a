//! Analytic gradients against central finite differences (h = 1e-3).

use atlas_autodiff::gradcheck::{numeric_gradient, relative_error};
use atlas_autodiff::{Axis, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f32 = 1e-3;
const TOL: f64 = 1e-3;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Builds `sum(op(inputs) * weights)` so every output element contributes an O(1) gradient.
fn projected(
    tape: &mut Tape,
    inputs: &[Tensor],
    wrt: usize,
    weights_seed: u64,
    op: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> (Var, Var) {
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i == wrt {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    let out = op(tape, &vars);
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(out, w).unwrap();
    (tape.sum(prod), vars[wrt])
}

fn check(inputs: &[Tensor], wrt: usize, seed: u64, op: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let (loss, x) = projected(&mut tape, inputs, wrt, seed ^ 0x5eed, op);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(x).unwrap().clone();
    let numeric = numeric_gradient(&inputs[wrt], H, |probe| {
        let mut ins = inputs.to_vec();
        ins[wrt] = probe.clone();
        let mut tape = Tape::new();
        let (loss, _) = projected(&mut tape, &ins, wrt, seed ^ 0x5eed, op);
        tape.scalar(loss).unwrap()
    });
    relative_error(&analytic, &numeric)
}

fn conv_op(stride: usize, padding: usize) -> impl Fn(&mut Tape, &[Var]) -> Var {
    move |t, v| t.conv2d(v[0], v[1], v[2], stride, padding).unwrap()
}

#[test]
fn conv2d_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random(&mut rng, &[1, 2, 5, 5], -1.0, 1.0),
            random(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            random(&mut rng, &[3], -1.0, 1.0),
        ];
        for (stride, pad) in [(1, 1), (2, 1)] {
            for wrt in 0..3 {
                let err = check(&inputs, wrt, seed, &conv_op(stride, pad));
                assert!(err < TOL, "seed {seed} stride {stride} wrt {wrt}: {err}");
            }
        }
    }
}

#[test]
fn elementwise_gradients() {
    type Op = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let unary: Vec<(&str, Op)> = vec![
        ("leaky_relu", Box::new(|t: &mut Tape, v: &[Var]| t.leaky_relu(v[0], 0.2))),
        ("sigmoid", Box::new(|t: &mut Tape, v: &[Var]| t.sigmoid(v[0]))),
        ("clamp", Box::new(|t: &mut Tape, v: &[Var]| t.clamp(v[0], -0.5, 0.5))),
        ("scale", Box::new(|t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7))),
        ("offset", Box::new(|t: &mut Tape, v: &[Var]| t.offset(v[0], 0.3))),
        ("mean", Box::new(|t: &mut Tape, v: &[Var]| t.mean(v[0]))),
        ("sum", Box::new(|t: &mut Tape, v: &[Var]| t.sum(v[0]))),
        ("upsample2x", Box::new(|t: &mut Tape, v: &[Var]| t.upsample2x(v[0]).unwrap())),
        ("diff_x", Box::new(|t: &mut Tape, v: &[Var]| t.diff(v[0], Axis::X).unwrap())),
        ("diff_y", Box::new(|t: &mut Tape, v: &[Var]| t.diff(v[0], Axis::Y).unwrap())),
    ];
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep values away from the kinks at 0 and +-0.5 so h never straddles one.
        let x = random(&mut rng, &[1, 2, 4, 4], -1.0, 1.0).map(|v| {
            let v = if v.abs() < 0.05 { v + 0.1f32.copysign(v) } else { v };
            if (v.abs() - 0.5).abs() < 0.05 { v * 1.2 } else { v }
        });
        for (name, op) in &unary {
            let err = check(&[x.clone()], 0, seed, op.as_ref());
            assert!(err < TOL, "{name} seed {seed}: {err}");
        }
        let pos = random(&mut rng, &[1, 2, 4, 4], 0.2, 2.0);
        let err = check(&[pos.clone()], 0, seed, &|t: &mut Tape, v: &[Var]| t.ln(v[0]));
        assert!(err < TOL, "ln seed {seed}: {err}");

        let y = random(&mut rng, &[1, 2, 4, 4], 0.5, 1.5);
        let binary: Vec<(&str, Op)> = vec![
            ("add", Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]).unwrap())),
            ("sub", Box::new(|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]).unwrap())),
            ("mul", Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]).unwrap())),
            ("div", Box::new(|t: &mut Tape, v: &[Var]| t.div(v[0], v[1]).unwrap())),
            ("concat", Box::new(|t: &mut Tape, v: &[Var]| t.concat(&[v[0], v[1]]).unwrap())),
        ];
        for (name, op) in &binary {
            for wrt in 0..2 {
                let err = check(&[x.clone(), y.clone()], wrt, seed, op.as_ref());
                assert!(err < TOL, "{name} wrt {wrt} seed {seed}: {err}");
            }
        }
    }
}

#[test]
fn grid_sample_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random(&mut rng, &[1, 2, 6, 6], 0.0, 1.0);
        // Non-integer offsets keep sample points off the bilinear kinks.
        let flow = random(&mut rng, &[1, 2, 6, 6], -1.5, 1.5).map(|v| {
            let frac = v - v.floor();
            if !(0.1..=0.9).contains(&frac) { v + 0.3 } else { v }
        });
        let op = |t: &mut Tape, v: &[Var]| t.grid_sample(v[0], v[1]).unwrap();
        for wrt in 0..2 {
            let err = check(&[image.clone(), flow.clone()], wrt, seed, &op);
            assert!(err < TOL, "grid_sample wrt {wrt} seed {seed}: {err}");
        }
    }
}

#[test]
fn composite_conv_relu_mean() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Redraw until no pre-activation lies within reach of the kink at 0;
        // a perturbation of 1e-3 moves any pre-activation by less than 0.01 here.
        let inputs = loop {
            let inputs = [
                random(&mut rng, &[2, 2, 6, 6], -1.0, 1.0),
                random(&mut rng, &[4, 2, 3, 3], -0.5, 0.5),
                random(&mut rng, &[4], -0.1, 0.1),
            ];
            let mut t = Tape::new();
            let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            let c = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
            if t.value(c).data().iter().all(|p| p.abs() > 0.01) {
                break inputs;
            }
        };
        let op = |t: &mut Tape, v: &[Var]| {
            let c = t.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
            let r = t.leaky_relu(c, 0.2);
            t.mean(r)
        };
        for wrt in 0..3 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, x)| if i == wrt { tape.param(x.clone()) } else { tape.constant(x.clone()) })
                .collect();
            let loss = op(&mut tape, &vars);
            tape.backward(loss).unwrap();
            let analytic = tape.grad(vars[wrt]).unwrap().clone();
            let numeric = numeric_gradient(&inputs[wrt], H, |probe| {
                let mut ins = inputs.to_vec();
                ins[wrt] = probe.clone();
                let mut tape = Tape::new();
                let vars: Vec<Var> = ins.iter().map(|x| tape.constant(x.clone())).collect();
                let loss = op(&mut tape, &vars);
                tape.scalar(loss).unwrap()
            });
            let err = relative_error(&analytic, &numeric);
            assert!(err < TOL, "composite wrt {wrt} seed {seed}: {err}");
        }
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    let k = random(&mut rng, &[5, 3, 3, 3], -1.0, 1.0);
    let b = random(&mut rng, &[5], -1.0, 1.0);
    let run = || {
        let mut t = Tape::new();
        let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
        let c = t.conv2d(xv, kv, bv, 1, 1).unwrap();
        let r = t.sigmoid(c);
        let m = t.mean(r);
        (t.value(c).clone(), t.scalar(m).unwrap().to_bits())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn zero_flow_warp_is_identity(
        h in 1usize..7,
        w in 1usize..7,
        c in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random(&mut rng, &[1, c, h, w], -10.0, 10.0);
        let mut t = Tape::new();
        let iv = t.constant(image.clone());
        let fv = t.constant(Tensor::zeros(&[1, 2, h, w]));
        let out = t.grid_sample(iv, fv).unwrap();
        let same = t.value(out).data().iter().zip(image.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}
