//! Finite-difference checks for every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reluplan::gradcore::*;
use reluplan::relaxation::mixed_op_var;
use reluplan::Result;

use super::{max_rel_err, numeric_grad};

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-5;

/// Constants an op check needs besides its differentiable inputs.
pub struct Fixture {
    pub weights: Vec<f64>,
    pub consts: Vec<Array>,
    labels: Vec<usize>,
    index: usize,
}

pub type Build = fn(&mut Graph, &[Var], &Fixture) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: fn(usize, usize) -> Vec<Vec<usize>>,
    pub build: Build,
}

/// Reduces any output to a scalar with fixed random weights so the whole
/// Jacobian is exercised.
fn project(g: &mut Graph, out: Var, f: &Fixture) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = g.leaf(Array::new(shape, f.weights[..n].to_vec())?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn evaluate(build: Build, inputs: &[Array], f: &Fixture) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let root = build(&mut g, &vars, f).unwrap();
    (g, vars, root)
}

/// Worst relative error between analytic and central-difference gradients.
pub fn check(build: Build, inputs: &[Array], f: &Fixture) -> f64 {
    let (g, vars, root) = evaluate(build, inputs, f);
    let grads = g.backward(root);
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&g, vars[k]).into_data();
        let numeric = numeric_grad(
            |probe| {
                let mut moved = inputs.to_vec();
                moved[k] = Array::new(x.shape().to_vec(), probe.to_vec()).unwrap();
                let (g, _, root) = evaluate(build, &moved, f);
                g.value(root).item()
            },
            x.data(),
            STEP,
        );
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// Uniform in [-2, 2], nudged away from the ReLU kink.
pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() < 1e-3 {
                v + 0.01
            } else {
                v
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

pub fn cases() -> Vec<OpCase> {
    fn one(r: usize, c: usize) -> Vec<Vec<usize>> {
        vec![vec![r, c]]
    }
    fn two(r: usize, c: usize) -> Vec<Vec<usize>> {
        vec![vec![r, c], vec![r, c]]
    }
    vec![
        OpCase {
            name: "matmul",
            shapes: |r, c| vec![vec![r, c + 1], vec![c + 1, c]],
            build: |g, v, f| {
                let o = g.matmul(v[0], v[1])?;
                project(g, o, f)
            },
        },
        OpCase {
            name: "add",
            shapes: two,
            build: |g, v, f| {
                let o = g.add(v[0], v[1])?;
                project(g, o, f)
            },
        },
        OpCase {
            name: "sub",
            shapes: two,
            build: |g, v, f| {
                let o = g.sub(v[0], v[1])?;
                project(g, o, f)
            },
        },
        OpCase {
            name: "mul",
            shapes: two,
            build: |g, v, f| {
                let o = g.mul(v[0], v[1])?;
                project(g, o, f)
            },
        },
        OpCase {
            name: "add_row",
            shapes: |r, c| vec![vec![r, c], vec![c]],
            build: |g, v, f| {
                let o = g.add_row(v[0], v[1])?;
                project(g, o, f)
            },
        },
        OpCase {
            name: "scale",
            shapes: one,
            build: |g, v, f| {
                let o = g.scale(v[0], -1.7);
                project(g, o, f)
            },
        },
        OpCase {
            name: "add_const",
            shapes: one,
            build: |g, v, f| {
                let o = g.add_const(v[0], &f.consts[0])?;
                project(g, o, f)
            },
        },
        OpCase {
            name: "relu",
            shapes: one,
            build: |g, v, f| {
                let o = g.relu(v[0]);
                project(g, o, f)
            },
        },
        OpCase {
            name: "exp",
            shapes: one,
            build: |g, v, f| {
                let o = g.exp(v[0]);
                project(g, o, f)
            },
        },
        OpCase {
            name: "log",
            shapes: one,
            build: |g, v, f| {
                // strictly positive argument x^2 + 0.5
                let sq = g.mul(v[0], v[0])?;
                let half = Array::filled(g.value(sq).shape(), 0.5);
                let pos = g.add_const(sq, &half)?;
                let o = g.log(pos);
                project(g, o, f)
            },
        },
        OpCase {
            name: "softmax",
            shapes: one,
            build: |g, v, f| {
                let o = g.softmax(v[0]);
                project(g, o, f)
            },
        },
        OpCase {
            name: "log_softmax",
            shapes: one,
            build: |g, v, f| {
                let o = g.log_softmax(v[0]);
                project(g, o, f)
            },
        },
        OpCase {
            name: "sum",
            shapes: one,
            build: |g, v, _| {
                let s = g.sum(v[0]);
                Ok(g.scale(s, 0.3))
            },
        },
        OpCase { name: "mean", shapes: one, build: |g, v, _| Ok(g.mean(v[0])) },
        OpCase {
            name: "gather",
            shapes: one,
            build: |g, v, f| {
                let o = g.gather(v[0], &f.labels)?;
                project(g, o, f)
            },
        },
        OpCase {
            name: "scale_by",
            shapes: |r, c| vec![vec![r, c], vec![4]],
            build: |g, v, f| {
                let o = g.scale_by(v[0], v[1], f.index)?;
                project(g, o, f)
            },
        },
        OpCase {
            name: "weighted_sum",
            shapes: |_, _| vec![vec![4]],
            build: |g, v, f| {
                let o = g.weighted_sum(v[0], f.consts.clone())?;
                project(g, o, f)
            },
        },
        OpCase {
            name: "mixed_op",
            shapes: |r, c| vec![vec![4], vec![r, c], vec![r, c], vec![r, c], vec![r, c]],
            build: |g, v, f| {
                let o = mixed_op_var(g, v[0], &v[1..])?;
                project(g, o, f)
            },
        },
        OpCase {
            name: "gumbel_relaxed",
            shapes: |_, _| vec![vec![4]],
            build: |g, v, f| {
                // relaxed path of the straight-through estimator
                let lp = g.log_softmax(v[0]);
                let noise = Array::vector(f.weights[..4].to_vec());
                let shifted = g.add_const(lp, &noise)?;
                let z = g.scale(shifted, 1.0 / 0.7);
                let o = g.softmax(z);
                project(g, o, f)
            },
        },
        OpCase { name: "cross_entropy", shapes: one, build: |g, v, f| cross_entropy(g, v[0], &f.labels) },
        OpCase { name: "mse", shapes: one, build: |g, v, f| mse(g, v[0], &f.consts[1]) },
        OpCase { name: "kd_loss", shapes: one, build: |g, v, f| kd_loss(g, v[0], &f.consts[2], &f.labels) },
        OpCase {
            name: "mlp3",
            shapes: |r, c| vec![vec![r, 5], vec![5, 6], vec![6], vec![6, 6], vec![6], vec![6, c]],
            build: |g, v, f| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.add_row(h, v[2])?;
                let h = g.relu(h);
                let h = g.matmul(h, v[3])?;
                let h = g.add_row(h, v[4])?;
                let h = g.relu(h);
                let logits = g.matmul(h, v[5])?;
                kd_loss(g, logits, &f.consts[3], &f.labels)
            },
        },
    ]
}

/// Worst relative error per op over `instances` random instances.
pub fn worst_errors(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases()
        .into_iter()
        .map(|case| {
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                let (r, c) = (rng.random_range(1..5), rng.random_range(2..6));
                let f = Fixture {
                    weights: (0..256).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    consts: (0..4).map(|_| uniform(&[r, c], &mut rng)).collect(),
                    labels: (0..r).map(|_| rng.random_range(0..c)).collect(),
                    index: rng.random_range(0..4),
                };
                let inputs: Vec<Array> = (case.shapes)(r, c).iter().map(|s| uniform(s, &mut rng)).collect();
                worst = worst.max(check(case.build, &inputs, &f));
            }
            (case.name, worst)
        })
        .collect()
}
