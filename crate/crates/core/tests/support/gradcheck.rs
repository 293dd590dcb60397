//! Central finite-difference oracle for the autodiff tape.
//!
//! Every op is checked through a random projection `L = Σ r_i · y_i`, so the
//! analytic side is a vector-Jacobian product and the numeric side only ever
//! differentiates a scalar.

#![allow(dead_code)]

use mishape::tensor::{Graph, Mode, RunningStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor: below this gradient magnitude the check is absolute.
pub const FLOOR: f64 = 1e-3;

pub struct Report {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.worst < REL_TOL
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Worst relative error between analytic and numeric gradients of `build`.
pub fn check<F>(inputs: &[Tensor], build: &F, seed: u64) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor], weights: Option<&[f64]>| -> (f64, Vec<Vec<f64>>, usize) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let y = build(&mut g, &vars);
        let n = g.value(y).numel();
        let Some(w) = weights else {
            return (0.0, Vec::new(), n);
        };
        let l: f64 = g.value(y).values().iter().zip(w).map(|(a, b)| a * b).sum();
        g.backward_from(y, w.to_vec()).unwrap();
        (l, vars.iter().map(|v| g.grad(*v)).collect(), n)
    };
    let (_, _, n_out) = eval(inputs, None);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, analytic, _) = eval(inputs, Some(&weights));

    let mut worst: f64 = 0.0;
    let mut ins = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..ins[k].numel() {
            let orig = ins[k].values()[i];
            ins[k].values_mut()[i] = orig + STEP;
            let (fp, _, _) = eval(&ins, Some(&weights));
            ins[k].values_mut()[i] = orig - STEP;
            let (fm, _, _) = eval(&ins, Some(&weights));
            ins[k].values_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * STEP);
            worst = worst.max(rel_err(grad[i], numeric));
        }
    }
    worst
}

fn run<F>(name: &'static str, instances: usize, seed: u64, mut make: F) -> Report
where
    F: FnMut(&mut ChaCha8Rng, u64) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..instances)
        .map(|i| make(&mut rng, seed.wrapping_add(i as u64)))
        .fold(0.0, f64::max);
    Report {
        name,
        instances,
        worst,
    }
}

/// Runs the full suite: every differentiable op, `instances` random draws each.
pub fn suite(instances: usize, seed: u64) -> Vec<Report> {
    let mut out = Vec::new();

    out.push(run("linear", instances, seed, |rng, s| {
        let ins = [uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 5], -1.0, 1.0), uniform(rng, &[5], -1.0, 1.0)];
        check(&ins, &|g, v| g.linear(v[0], v[1], v[2]).unwrap(), s)
    }));
    out.push(run("shared_pointwise_mlp", instances, seed + 1, |rng, s| {
        let ins = [uniform(rng, &[2, 4, 3], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4], -1.0, 1.0)];
        check(&ins, &|g, v| g.shared_pointwise_mlp(v[0], v[1], v[2]).unwrap(), s)
    }));
    out.push(run("relu", instances, seed + 2, |rng, s| {
        // keep clear of the kink so the central difference is valid
        let mut x = uniform(rng, &[12], -1.0, 1.0);
        x.values_mut().iter_mut().for_each(|v| {
            if v.abs() < 1e-3 {
                *v += 2e-3
            }
        });
        check(&[x], &|g, v| g.relu(v[0]), s)
    }));
    out.push(run("sigmoid", instances, seed + 3, |rng, s| {
        check(&[uniform(rng, &[12], -1.0, 1.0)], &|g, v| g.sigmoid(v[0]), s)
    }));
    out.push(run("batch_norm(train)", instances, seed + 4, |rng, s| {
        let ins = [uniform(rng, &[4, 8, 3], -1.0, 1.0), uniform(rng, &[3], 0.5, 1.5), uniform(rng, &[3], -1.0, 1.0)];
        check(
            &ins,
            &|g, v| {
                let mut stats = RunningStats::new(3);
                g.batch_norm(v[0], v[1], v[2], &mut stats, Mode::Train).unwrap()
            },
            s,
        )
    }));
    out.push(run("batch_norm(eval)", instances, seed + 5, |rng, s| {
        let ins = [uniform(rng, &[2, 5, 3], -1.0, 1.0), uniform(rng, &[3], 0.5, 1.5), uniform(rng, &[3], -1.0, 1.0)];
        let stats = RunningStats {
            mean: (0..3).map(|_| rng.random_range(-0.5..0.5)).collect(),
            var: (0..3).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        check(
            &ins,
            &|g, v| {
                let mut st = stats.clone();
                g.batch_norm(v[0], v[1], v[2], &mut st, Mode::Eval).unwrap()
            },
            s,
        )
    }));
    out.push(run("max_pool_points", instances, seed + 6, |rng, s| {
        check(&[uniform(rng, &[2, 6, 4], -1.0, 1.0)], &|g, v| g.max_pool_points(v[0]).unwrap(), s)
    }));
    out.push(run("dropout", instances, seed + 7, |rng, s| {
        let x = uniform(rng, &[3, 5], -1.0, 1.0);
        check(
            &[x],
            &|g, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(s);
                g.dropout(v[0], 0.4, Mode::Train, &mut mask_rng).unwrap()
            },
            s,
        )
    }));
    out.push(run("bce_loss", instances, seed + 8, |rng, s| {
        let p = uniform(rng, &[6], 0.05, 0.95);
        let y: Vec<f64> = (0..6).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        check(&[p], &|g, v| g.bce_loss(v[0], &y).unwrap(), s)
    }));
    out.push(run("batch_matmul", instances, seed + 9, |rng, s| {
        let ins = [uniform(rng, &[2, 4, 3], -1.0, 1.0), uniform(rng, &[2, 3, 3], -1.0, 1.0)];
        check(&ins, &|g, v| g.batch_matmul(v[0], v[1]).unwrap(), s)
    }));
    out.push(run("orthogonality_penalty", instances, seed + 10, |rng, s| {
        check(&[uniform(rng, &[2, 3, 3], -1.0, 1.0)], &|g, v| g.orthogonality_penalty(v[0]).unwrap(), s)
    }));
    out.push(run("slice/concat channels", instances, seed + 11, |rng, s| {
        check(
            &[uniform(rng, &[2, 3, 5], -1.0, 1.0)],
            &|g, v| {
                let head = g.slice_channels(v[0], 0, 3).unwrap();
                let tail = g.slice_channels(v[0], 3, 5).unwrap();
                let r = g.relu(tail);
                g.concat_channels(r, head).unwrap()
            },
            s,
        )
    }));
    out.push(run("reshape/add_scaled", instances, seed + 12, |rng, s| {
        let ins = [uniform(rng, &[2, 6], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)];
        check(
            &ins,
            &|g, v| {
                let r = g.reshape(v[0], vec![3, 4]).unwrap();
                let sg = g.sigmoid(v[1]);
                g.add_scaled(r, sg, -0.7).unwrap()
            },
            s,
        )
    }));
    out
}
