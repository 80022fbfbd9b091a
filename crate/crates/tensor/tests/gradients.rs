//! Analytic gradients of every differentiable op against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxelfill_tensor::gradcheck::{self, FdConfig};
use voxelfill_tensor::rng::stream;
use voxelfill_tensor::{Graph, Mode, Result, Tensor, Var};

const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Loss = Σ op(inputs) ⊙ w for a fixed random projection `w`, so every
/// output element contributes with a distinct weight.
fn projected<F>(inputs: &[Tensor], op: &F, seed: u64) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(out), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    let loss = g.sum_all(p);
    Ok((g, vars, loss))
}

fn check_op<F>(inputs: Vec<Tensor>, op: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, loss) = projected(&inputs, &op, 99).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.get(*v).unwrap().clone())
        .collect();
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(t, x)| (0..x.numel()).map(move |i| (t, i)))
        .collect();
    let report = gradcheck::check(
        &inputs,
        &analytic,
        &coords,
        usize::MAX,
        FdConfig::default(),
        |p| {
            let (g, _, loss) = projected(p, &op, 99)?;
            Ok((g.value(loss).item().unwrap(), g.branch_signature()))
        },
    )
    .unwrap();
    assert!(
        report.probes.len() * 10 >= coords.len() * 9,
        "too many kinks: {report:?}"
    );
    assert!(report.all_within(TOL), "worst probe {:?}", report.worst());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn elementwise_binary_ops() {
    let mut r = rng(1);
    let a = random(&[2, 3], -1.0, 1.0, &mut r);
    let b = random(&[2, 3], 0.5, 2.0, &mut r);
    let s = random(&[1], 0.5, 2.0, &mut r);
    check_op(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check_op(vec![a.clone(), b.clone()], |g, v| g.div(v[0], v[1]));
    check_op(vec![a.clone(), s.clone()], |g, v| g.div(v[0], v[1]));
    check_op(vec![s, a], |g, v| g.sub(v[0], v[1]));
}

#[test]
fn scalar_ops_and_reductions() {
    let mut r = rng(2);
    let a = random(&[3, 2, 2, 2], -1.0, 1.0, &mut r);
    check_op(vec![a.clone()], |g, v| Ok(g.add_scalar(v[0], 0.3)));
    check_op(vec![a.clone()], |g, v| Ok(g.mul_scalar(v[0], -1.7)));
    check_op(vec![a.clone()], |g, v| Ok(g.square(v[0])));
    check_op(vec![a.clone()], |g, v| Ok(g.tanh(v[0])));
    check_op(vec![a.clone()], |g, v| Ok(g.sum_all(v[0])));
    check_op(vec![a], |g, v| Ok(g.mean_all(v[0])));
}

#[test]
fn abs_of_affine_composite() {
    let mut r = rng(3);
    let x = random(&[10], -1.0, 1.0, &mut r);
    let a = random(&[1], 0.5, 1.5, &mut r);
    let b = random(&[1], -0.5, 0.5, &mut r);
    check_op(vec![x, a, b], |g, v| {
        let ax = g.mul(v[0], v[1])?;
        let axb = g.add(ax, v[2])?;
        Ok(g.abs(axb))
    });
}

#[test]
fn rectifiers() {
    let mut r = rng(4);
    let x = random(&[2, 3, 2, 2], -1.0, 1.0, &mut r);
    let a = Tensor::new(vec![2], vec![0.25, 0.6]).unwrap();
    check_op(vec![x.clone()], |g, v| Ok(g.relu(v[0])));
    check_op(vec![x, a], |g, v| g.prelu(v[0], v[1]));
}

#[test]
fn convolution_all_operands() {
    let mut r = rng(5);
    let x = random(&[2, 4, 3, 5], -1.0, 1.0, &mut r);
    let k = random(&[3, 2, 3, 3, 3], -0.5, 0.5, &mut r);
    let b = random(&[3], -0.5, 0.5, &mut r);
    check_op(vec![x.clone(), k, b], |g, v| {
        g.conv3d(v[0], v[1], Some(v[2]), 1)
    });
    let k1 = random(&[1, 2, 1, 1, 1], -0.5, 0.5, &mut r);
    check_op(vec![x, k1], |g, v| g.conv3d(v[0], v[1], None, 0));
}

#[test]
fn pooling_and_upsampling() {
    let mut r = rng(6);
    let x = random(&[2, 4, 2, 4], -1.0, 1.0, &mut r);
    check_op(vec![x.clone()], |g, v| g.maxpool3d(v[0]));
    let y = random(&[2, 2, 1, 3], -1.0, 1.0, &mut r);
    check_op(vec![y], |g, v| g.upsample_nn(v[0]));
}

#[test]
fn instance_norm_all_operands() {
    let mut r = rng(7);
    let x = random(&[2, 3, 2, 3], -1.0, 1.0, &mut r);
    let gamma = random(&[2], 0.5, 1.5, &mut r);
    let beta = random(&[2], -0.5, 0.5, &mut r);
    check_op(vec![x, gamma, beta], |g, v| {
        g.instance_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn dropout_with_fixed_stream() {
    let mut r = rng(8);
    let x = random(&[1, 4, 4, 4], -1.0, 1.0, &mut r);
    check_op(vec![x], |g, v| {
        let mut s = stream(5, "dropout", 0);
        g.dropout(v[0], 0.2, Mode::Train, &mut s)
    });
}

#[test]
fn concat_and_box_mean() {
    let mut r = rng(9);
    let a = random(&[1, 4, 5, 4], -1.0, 1.0, &mut r);
    let b = random(&[2, 4, 5, 4], -1.0, 1.0, &mut r);
    check_op(vec![a.clone(), b], |g, v| g.concat_channels(v[0], v[1]));
    check_op(vec![a], |g, v| g.box_mean3d(v[0], 3));
}

#[test]
fn backward_is_linear_in_loss_scale() {
    let mut r = rng(10);
    let x = random(&[2, 4, 4, 4], -1.0, 1.0, &mut r);
    let k = random(&[2, 2, 3, 3, 3], -0.5, 0.5, &mut r);
    let grads_for = |alpha: f64| {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let kv = g.param(k.clone());
        let y = g.conv3d(xv, kv, None, 1).unwrap();
        let y = g.tanh(y);
        let s = g.mean_all(y);
        let l = g.mul_scalar(s, alpha);
        let gr = g.backward(l).unwrap();
        (gr.get(xv).unwrap().clone(), gr.get(kv).unwrap().clone())
    };
    let (gx1, gk1) = grads_for(1.0);
    let alpha = -3.7;
    let (gxa, gka) = grads_for(alpha);
    for (a, b) in gx1
        .data()
        .iter()
        .chain(gk1.data())
        .zip(gxa.data().iter().chain(gka.data()))
    {
        assert!((alpha * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn backward_bitwise_identical_across_thread_counts() {
    let mut r = rng(11);
    let x = random(&[3, 8, 8, 8], -1.0, 1.0, &mut r);
    let k = random(&[4, 3, 3, 3, 3], -0.5, 0.5, &mut r);
    let run = || {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let kv = g.param(k.clone());
        let y = g.conv3d(xv, kv, None, 1).unwrap();
        let y = g.square(y);
        let s = g.sum_all(y);
        let gr = g.backward(s).unwrap();
        let mut bits: Vec<u64> = gr
            .get(xv)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        bits.extend(gr.get(kv).unwrap().data().iter().map(|v| v.to_bits()));
        bits
    };
    let pool = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
    };
    let one = pool(1).install(run);
    let four = pool(4).install(run);
    assert_eq!(one, four);
    assert_eq!(one, run());
}
