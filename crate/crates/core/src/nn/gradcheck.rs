use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compares backward gradients against central differences for every input.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let h = 1e-6;
    for (i, inp) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(&inp.shape));
        for j in 0..inp.len() {
            let eval = |delta: f64| {
                let mut ins = inputs.clone();
                ins[i].data[j] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = ins.into_iter().map(|x| t.leaf(x, false)).collect();
                let o = f(&mut t, &vs);
                t.value(o).item()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data[j];
            let err = (a - num).abs() / (a.abs().max(num.abs()).max(1e-3));
            assert!(err < 1e-5, "input {i} elem {j}: analytic {a} numeric {num}");
        }
    }
}

fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(t.shape(x), &mut rng);
    let w = t.constant(w);
    let p = t.mul(x, w);
    t.sum(p)
}

#[test]
fn elementwise_and_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng)], |t, v| {
        let m = t.matmul(v[0], v[1]);
        let a = t.add_row(m, v[2]);
        let g = t.gelu(a);
        let s = t.sigmoid(g);
        let e = t.exp(s);
        let r = t.mul_row(e, v[2]);
        let d = t.sub(r, m);
        let sc = t.scale(d, 0.7);
        weighted_sum(t, sc, 2)
    });
}

#[test]
fn layer_norm_and_spmm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let csr = Rc::new(Csr::from_triplets(3, 3, vec![(0, 0, 0.5), (0, 1, 0.3), (1, 2, 1.0), (2, 0, -0.2), (2, 2, 0.4)]));
    check(vec![random(&[3, 5], &mut rng)], |t, v| {
        let a = t.spmm(csr.clone(), v[0]);
        let n = t.layer_norm(a, 1e-5);
        weighted_sum(t, n, 4)
    });
}

#[test]
fn conv_upsample_slice() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check(
        vec![random(&[2, 2, 4, 4], &mut rng), random(&[4, 2, 3, 3], &mut rng), random(&[4], &mut rng)],
        |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], ConvSpec { stride: 2, pad: 1 });
            let u = t.upsample(c, 2);
            let s = t.slice_channels(u, 1, 2);
            weighted_sum(t, s, 6)
        },
    );
}

#[test]
fn attention_segments() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let segs = Rc::new(vec![
        AttnSegment { queries: 0..2, keys: 0..3 },
        AttnSegment { queries: 2..5, keys: 3..4 },
    ]);
    check(
        vec![random(&[5, 4], &mut rng), random(&[4, 4], &mut rng), random(&[4, 4], &mut rng)],
        |t, v| {
            let a = t.attention(v[0], v[1], v[2], 2, segs.clone());
            weighted_sum(t, a, 8)
        },
    );
}

#[test]
fn pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let segs = Rc::new(vec![0..3, 3..5]);
    for mode in [PoolMode::Mean, PoolMode::Sum, PoolMode::Max] {
        check(vec![random(&[5, 3], &mut rng)], |t, v| {
            let p = t.segment_pool(v[0], segs.clone(), mode);
            weighted_sum(t, p, 10)
        });
    }
    check(vec![random(&[5, 3], &mut rng), random(&[5, 1], &mut rng)], |t, v| {
        let p = t.softmax_pool(v[0], v[1], segs.clone());
        weighted_sum(t, p, 11)
    });
}

#[test]
fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    check(vec![random(&[6], &mut rng), random(&[6], &mut rng)], |t, v| {
        let a = t.mse(v[0], v[1]);
        let b = t.kl(v[0], v[1], 2);
        t.add(a, b)
    });
    let labels = Rc::new(vec![0, 2, 1]);
    check(vec![random(&[3, 3], &mut rng)], |t, v| t.cross_entropy(v[0], labels.clone()));
    let times = Rc::new(vec![1.0, 2.0, 2.0, 3.0, 0.5]);
    let events = Rc::new(vec![true, false, true, true, false]);
    check(vec![random(&[5, 1], &mut rng)], |t, v| t.cox(v[0], times.clone(), events.clone()));
}
