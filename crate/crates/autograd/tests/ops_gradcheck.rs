use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stroke_autograd::{check_gradients, GradCheckConfig, Graph, ParamSet, Tensor, Var, NONE};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Reduces any node to a scalar through fixed random weights so that every
/// output element contributes a distinct gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(random(&mut rng, &shape));
    let p = g.mul(x, w);
    g.sum(p)
}

fn check(params: &ParamSet, f: impl Fn(&mut Graph, &ParamSet) -> Var) {
    let report = check_gradients(params, f, GradCheckConfig::default());
    let worst = report.worst().unwrap();
    assert!(
        report.max_rel_error() < 1e-6,
        "worst tensor {} rel error {}",
        worst.name,
        worst.rel_error
    );
}

#[test]
fn elementwise_and_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParamSet::new();
    p.insert("a", random(&mut rng, &[3, 4]));
    p.insert("b", random(&mut rng, &[3, 4]));
    p.insert("bias", random(&mut rng, &[4]));
    check(&p, |g, p| {
        let a = g.param("a", p.expect("a"), true);
        let b = g.param("b", p.expect("b"), true);
        let bias = g.param("bias", p.expect("bias"), true);
        let s = g.add(a, b);
        let d = g.sub(s, b);
        let m = g.mul(d, b);
        let m = g.scale(m, 1.7);
        let m = g.add_bias(m, bias);
        let m = g.mul_bias(m, bias);
        let u1 = g.gelu(m);
        let u2 = g.sigmoid(u1);
        let u3 = g.tanh(a);
        let u4 = g.softplus(b);
        let u5 = g.leaky_relu(a, 0.2);
        let u6 = g.exp(b);
        let x = g.add(u2, u3);
        let x = g.add(x, u4);
        let x = g.add(x, u5);
        let x = g.add(x, u6);
        project(g, x, 11)
    });
}

#[test]
fn matmul_plain_and_batched() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ParamSet::new();
    p.insert("a", random(&mut rng, &[3, 5]));
    p.insert("b", random(&mut rng, &[5, 2]));
    p.insert("ba", random(&mut rng, &[2, 3, 4]));
    p.insert("bb", random(&mut rng, &[2, 4, 3]));
    check(&p, |g, p| {
        let a = g.param("a", p.expect("a"), true);
        let b = g.param("b", p.expect("b"), true);
        let ba = g.param("ba", p.expect("ba"), true);
        let bb = g.param("bb", p.expect("bb"), true);
        let c = g.matmul(a, b);
        let bc = g.matmul(ba, bb);
        let l1 = project(g, c, 3);
        let l2 = project(g, bc, 4);
        g.add(l1, l2)
    });
}

#[test]
fn normalisations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamSet::new();
    p.insert("x", random(&mut rng, &[4, 6]));
    check(&p, |g, p| {
        let x = g.param("x", p.expect("x"), true);
        let s = g.softmax(x);
        let ls = g.log_softmax(x);
        let ln = g.layer_norm(x, 1e-5);
        let l1 = project(g, s, 5);
        let l2 = project(g, ls, 6);
        let l3 = project(g, ln, 7);
        let t = g.add(l1, l2);
        g.add(t, l3)
    });
}

#[test]
fn index_and_reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = ParamSet::new();
    p.insert("x", random(&mut rng, &[3, 4]));
    p.insert("y", random(&mut rng, &[2, 4]));
    check(&p, |g, p| {
        let x = g.param("x", p.expect("x"), true);
        let y = g.param("y", p.expect("y"), true);
        let t = g.transpose(x);
        let idx: Arc<[usize]> = vec![0, NONE, 5, 5, 11, 3].into();
        let ga = g.gather(x, idx.clone(), vec![6]);
        let sc = g.scatter_add(ga, vec![1, 1, 0, NONE, 2, 3].into(), vec![4]);
        let cat = g.concat(&[x, y], vec![5, 4]);
        let mr = g.mean_rows(cat);
        let r = g.reshape(t, vec![12]);
        let l1 = project(g, r, 8);
        let l2 = project(g, sc, 9);
        let l3 = project(g, mr, 10);
        let s = g.sum(ga);
        let a = g.add(l1, l2);
        let a = g.add(a, l3);
        g.add(a, s)
    });
}

#[test]
fn depthwise_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamSet::new();
    p.insert("x", random(&mut rng, &[5 * 4, 3]));
    p.insert("k", random(&mut rng, &[9, 3]));
    check(&p, |g, p| {
        let x = g.param("x", p.expect("x"), true);
        let k = g.param("k", p.expect("k"), true);
        let y = g.depthwise_conv(x, k, 5, 4);
        project(g, y, 12)
    });
}
