//! Shared finite-difference machinery for the gradient test suites.

use apam_core::autodiff::{backward, per_sample_grads, NodeId, Tape};
use apam_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-6;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>() * (hi - lo) + lo).collect()
}

/// Checks d(scalar output)/d(input element) for every element of every
/// param leaf against central differences. `build` reconstructs the graph
/// from the (possibly perturbed) leaf values each time.
pub fn gradcheck(
    name: &str,
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
) {
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.param(t.clone())).collect();
        let root = build(&mut tape, &ids);
        tape.value(root).item()
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &ids);
    let grads = backward(&tape, root).unwrap();

    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (leaf, &id) in ids.iter().enumerate() {
        let zero = inputs[leaf].zeros_like();
        let g = grads.get(&id).unwrap_or(&zero);
        for idx in 0..inputs[leaf].numel() {
            let orig = inputs[leaf].data()[idx];
            perturbed[leaf].data_mut()[idx] = orig + H;
            let up = eval(&perturbed);
            perturbed[leaf].data_mut()[idx] = orig - H;
            let dn = eval(&perturbed);
            perturbed[leaf].data_mut()[idx] = orig;
            let fd = (up - dn) / (2.0 * H);
            let an = g.data()[idx];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            let rel = (an - fd).abs() / denom;
            assert!(
                rel < TOL,
                "{name}: leaf {leaf} element {idx}: analytic {an} vs finite difference {fd} (rel {rel:.3e})"
            );
        }
    }
}

pub fn check_add_sub_mul(cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..cases {
        let n = rng.gen_range(1..6);
        let a = Tensor::vector(rand_vec(&mut rng, n, -2.0, 2.0));
        let b = Tensor::vector(rand_vec(&mut rng, n, -2.0, 2.0));
        gradcheck("add", &[a.clone(), b.clone()], &|t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            t.sum(s)
        });
        gradcheck("sub", &[a.clone(), b.clone()], &|t, ids| {
            let s = t.sub(ids[0], ids[1]).unwrap();
            t.sum(s)
        });
        gradcheck("mul", &[a, b], &|t, ids| {
            let s = t.mul(ids[0], ids[1]).unwrap();
            t.sum(s)
        });
    }
}

pub fn check_matmul(cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..cases {
        let (m, k, n) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let a = Tensor::matrix(rand_vec(&mut rng, m * k, -1.5, 1.5), m, k).unwrap();
        let b = Tensor::matrix(rand_vec(&mut rng, k * n, -1.5, 1.5), k, n).unwrap();
        gradcheck("matmul", &[a.clone(), b.clone()], &|t, ids| {
            let p = t.matmul(ids[0], ids[1]).unwrap();
            t.sum(p)
        });
        let bt = Tensor::matrix(rand_vec(&mut rng, n * k, -1.5, 1.5), n, k).unwrap();
        gradcheck("matmul_nt", &[a, bt], &|t, ids| {
            let p = t.matmul_nt(ids[0], ids[1]).unwrap();
            t.sum(p)
        });
    }
}

pub fn check_elementwise(cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..cases {
        let n = rng.gen_range(1..8);
        // keep relu inputs away from the kink at 0
        let a = Tensor::vector(
            rand_vec(&mut rng, n, 0.1, 2.0)
                .into_iter()
                .map(|x| if rng.gen::<bool>() { x } else { -x })
                .collect(),
        );
        gradcheck("relu", &[a.clone()], &|t, ids| {
            let r = t.relu(ids[0]);
            t.sum(r)
        });
        gradcheck("sigmoid", &[a.clone()], &|t, ids| {
            let r = t.sigmoid(ids[0]);
            t.sum(r)
        });
        let pos = Tensor::vector(rand_vec(&mut rng, n, 0.2, 3.0));
        gradcheck("log", &[pos.clone()], &|t, ids| {
            let r = t.log(ids[0]);
            t.sum(r)
        });
        gradcheck("pow_scalar", &[pos], &|t, ids| {
            let r = t.pow_scalar(ids[0], 2.5);
            t.sum(r)
        });
        gradcheck("scale", &[a], &|t, ids| {
            let r = t.scale(ids[0], -1.7);
            t.sum(r)
        });
    }
}

pub fn check_reductions(cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..cases {
        let n = rng.gen_range(1..8);
        let a = Tensor::vector(rand_vec(&mut rng, n, -2.0, 2.0));
        gradcheck("mean", &[a.clone()], &|t, ids| t.mean(ids[0]));
        gradcheck("sum", &[a], &|t, ids| t.sum(ids[0]));
        let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let m = Tensor::matrix(rand_vec(&mut rng, r * c, -2.0, 2.0), r, c).unwrap();
        gradcheck("mean_rows", &[m], &|t, ids| {
            let mr = t.mean_rows(ids[0]).unwrap();
            t.sum(mr)
        });
    }
}

pub fn check_softmax_family(cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..cases {
        let n = rng.gen_range(2..6);
        let a = Tensor::vector(rand_vec(&mut rng, n, -3.0, 3.0));
        let pick_idx = case % n;
        gradcheck("softmax", &[a.clone()], &|t, ids| {
            let s = t.softmax(ids[0]).unwrap();
            t.pick(s, pick_idx).unwrap()
        });
        gradcheck("log_softmax", &[a.clone()], &|t, ids| {
            let s = t.log_softmax(ids[0]).unwrap();
            t.pick(s, pick_idx).unwrap()
        });
        gradcheck("l2_normalize_rows", &[a], &|t, ids| {
            let s = t.l2_normalize_rows(ids[0]).unwrap();
            t.sum(s)
        });
    }
}

pub fn check_structural(cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..cases {
        let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let m = Tensor::matrix(rand_vec(&mut rng, r * c, -2.0, 2.0), r, c).unwrap();
        let row_idx = case % r;
        gradcheck("row", &[m.clone()], &|t, ids| {
            let rw = t.row(ids[0], row_idx).unwrap();
            t.sum(rw)
        });
        let v = Tensor::vector(rand_vec(&mut rng, c, -2.0, 2.0));
        let pick_idx = case % c;
        gradcheck("pick", &[v.clone()], &|t, ids| t.pick(ids[0], pick_idx).unwrap());
        gradcheck("concat_rows", &[v.clone(), v.clone()], &|t, ids| {
            let cat = t.concat_rows(&[ids[0], ids[1]]).unwrap();
            t.sum(cat)
        });
        gradcheck("stack", &[v], &|t, ids| {
            let a = t.pick(ids[0], 0).unwrap();
            let b = t.mean(ids[0]);
            let st = t.stack(&[a, b]).unwrap();
            t.sum(st)
        });
    }
}

pub fn check_dropout(cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..cases {
        let n = rng.gen_range(1..8);
        let a = Tensor::vector(rand_vec(&mut rng, n, -2.0, 2.0));
        // the mask is a function of the seed only, so it is constant
        // across finite-difference evaluations
        gradcheck("dropout", &[a], &|t, ids| {
            let d = t.dropout(ids[0], 0.4, case as u64).unwrap();
            t.sum(d)
        });
    }
}

pub fn check_embedding_lookup(cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..cases {
        let (v, d) = (rng.gen_range(2..5), rng.gen_range(1..4));
        let table = Tensor::matrix(rand_vec(&mut rng, v * d, -1.0, 1.0), v, d).unwrap();
        let indices: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..v)).collect();
        gradcheck("embedding_lookup", &[table], &|t, ids| {
            let e = t.embedding_lookup(ids[0], &indices).unwrap();
            t.sum(e)
        });
    }
}

/// Gradient of the mean of stacked per-sample losses must equal the
/// average of the per-sample gradients.
pub fn check_per_sample_additivity(cases: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..cases {
        let (n, d) = (rng.gen_range(2..5), rng.gen_range(2..4));
        let w = Tensor::matrix(rand_vec(&mut rng, d * d, -1.0, 1.0), d, d).unwrap();
        let xs: Vec<Tensor<f64>> = (0..n)
            .map(|_| Tensor::vector(rand_vec(&mut rng, d, -1.0, 1.0)))
            .collect();

        let mut tape = Tape::new();
        let wid = tape.param(w.clone());
        let mut scalars = Vec::new();
        for x in &xs {
            let xid = tape.leaf(x.clone());
            let y = tape.matmul(xid, wid).unwrap();
            let s = tape.sigmoid(y);
            scalars.push(tape.mean(s));
        }
        let stacked = tape.stack(&scalars).unwrap();
        let per = per_sample_grads(&tape, stacked).unwrap();
        let mean = tape.mean(stacked);
        let total = backward(&tape, mean).unwrap();

        let mut acc = w.zeros_like();
        for g in &per {
            acc.axpy(1.0 / n as f64, &g[&wid]);
        }
        for (a, b) in acc.data().iter().zip(total[&wid].data()) {
            assert!(
                (a - b).abs() < TOL,
                "per-sample mean {a} differs from batch gradient {b}"
            );
        }
    }
}

/// Every op family at `cases` random cases each.
#[allow(dead_code)] // each test binary compiles its own copy of this module
pub fn check_all_ops(cases: usize) {
    check_add_sub_mul(cases);
    check_matmul(cases);
    check_elementwise(cases);
    check_reductions(cases);
    check_softmax_family(cases);
    check_structural(cases);
    check_dropout(cases);
    check_embedding_lookup(cases);
}
