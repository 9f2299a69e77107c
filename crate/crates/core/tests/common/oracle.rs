//! Float64 reference implementations of the layers and a central-difference
//! gradient checker comparing them against the f32 tape.

use mstd_core::graph::Graph;
use mstd_core::nn::{Linear, Module, MultiHeadSelfAttention};
use mstd_core::rng;
use mstd_core::tensor::Tensor;
use mstd_core::zoo::{GateNet, MaskNet, MaskNetConfig};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;
/// Denominator floor of the relative error, for entries whose gradient is
/// itself close to zero.
pub const REL_FLOOR: f64 = 1e-2;

pub fn linear(x: &[f64], n: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let o = b.len();
    let i = w.len() / o;
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut acc = b[c];
            for k in 0..i {
                acc += x[r * i + k] * w[k * o + c];
            }
            y[r * o + c] = acc;
        }
    }
    y
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
}

pub fn softmax(x: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let e: Vec<f64> = row.iter().map(|v| (v / tau).exp()).collect();
        let s: f64 = e.iter().sum();
        y.extend(e.iter().map(|v| v / s));
    }
    y
}

/// `x: [b, t, d]`; `p` = q.w, q.b, k.w, k.b, v.w, v.b, o.w, o.b.
pub fn mhsa(x: &[f64], b: usize, t: usize, d: usize, heads: usize, p: &[Vec<f64>]) -> Vec<f64> {
    let hd = d / heads;
    let q = linear(x, b * t, &p[0], &p[1]);
    let k = linear(x, b * t, &p[2], &p[3]);
    let v = linear(x, b * t, &p[4], &p[5]);
    let mut ctx = vec![0.0; b * t * d];
    let scale = 1.0 / (hd as f64).sqrt();
    for n in 0..b {
        for h in 0..heads {
            for i in 0..t {
                let scores: Vec<f64> = (0..t)
                    .map(|j| {
                        (0..hd)
                            .map(|c| q[(n * t + i) * d + h * hd + c] * k[(n * t + j) * d + h * hd + c])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let a = softmax(&scores, t, 1.0);
                for c in 0..hd {
                    ctx[(n * t + i) * d + h * hd + c] = (0..t).map(|j| a[j] * v[(n * t + j) * d + h * hd + c]).sum();
                }
            }
        }
    }
    linear(&ctx, b * t, &p[6], &p[7])
}

/// `z: [b, d_m]`; `p` = projector w/b, the eight attention tensors, score w/b.
pub fn masknet(z: &[f64], b: usize, cfg: MaskNetConfig, p: &[Vec<f64>]) -> Vec<f64> {
    let (dm, dh) = (cfg.d_m, cfg.d_h);
    let tokens = linear(z, b, &p[0], &p[1]);
    let mixed = mhsa(&tokens, b, dm, dh, cfg.heads, &p[2..10]);
    let s = linear(&mixed, b * dm, &p[10], &p[11]);
    sigmoid(&s).iter().zip(z).map(|(m, v)| m * v).collect()
}

pub fn gatenet_hidden(z: &[f64], b: usize, p: &[Vec<f64>]) -> Vec<f64> {
    linear(z, b, &p[0], &p[1])
}

pub fn gatenet(z: &[f64], b: usize, p: &[Vec<f64>]) -> Vec<f64> {
    let h = relu(&gatenet_hidden(z, b, p));
    let s = linear(&h, b, &p[2], &p[3]);
    softmax(&s, p[3].len(), 1.0)
}

fn to64(t: &[f32]) -> Vec<f64> {
    t.iter().map(|&v| f64::from(v)).collect()
}

fn uniform(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Max relative error between `analytic` and central differences of
/// `loss` around `vals`, over every entry of every tensor.
fn compare(analytic: &[Vec<f64>], vals: &[Vec<f64>], loss: &dyn Fn(&[Vec<f64>]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut v = vals.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.len(), vals[t].len(), "gradient {t} has the wrong size");
        for i in 0..vals[t].len() {
            let x0 = v[t][i];
            v[t][i] = x0 + EPS;
            let up = loss(&v);
            v[t][i] = x0 - EPS;
            let down = loss(&v);
            v[t][i] = x0;
            let num = (up - down) / (2.0 * EPS);
            let a = grad[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

fn dot(y: &[f64], c: &[f64]) -> f64 {
    y.iter().zip(c).map(|(a, b)| a * b).sum()
}

/// Analytic gradients of `sum(c * f(x))` for a module `f`; returns the input
/// gradient followed by the gradients of `params`.
fn tape_grads(
    x: &Tensor,
    c: &[f64],
    params: &[&mstd_core::Parameter],
    f: &dyn Fn(&mut Graph, mstd_core::NodeId) -> mstd_core::Result<mstd_core::NodeId>,
) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let y = f(&mut g, xv).unwrap();
    let shape = g.shape(y).to_vec();
    let cv = g.input(Tensor::new(shape, c.iter().map(|&v| v as f32).collect()).unwrap());
    let p = g.mul(y, cv).unwrap();
    let l = g.sum_all(p);
    let grads = g.backward(l).unwrap();
    let mut out = vec![to64(g.grad(xv).unwrap())];
    for p in params {
        out.push(to64(grads.get(p.id()).unwrap()));
    }
    out
}

fn tensor(shape: &[usize], v: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), v.iter().map(|&x| x as f32).collect()).unwrap()
}

/// Inputs bounded away from zero so no perturbation crosses the ReLU kink.
fn away_from_zero(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = r.random_range(0.05..1.0);
            if r.random_bool(0.5) { m } else { -m }
        })
        .collect()
}

pub fn check_linear(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck/linear");
    let (n, i, o) = (3, 5, 4);
    let lin = Linear::new("l", i, o, &mut r);
    let x = uniform(n * i, &mut r);
    let c = uniform(n * o, &mut r);
    let params = lin.params();
    let analytic = tape_grads(&tensor(&[n, i], &x), &c, &params, &|g, x| lin.forward(g, x));
    let vals = vec![x, to64(lin.weight.tensor.data()), to64(lin.bias.tensor.data())];
    compare(&analytic, &vals, &|v| dot(&linear(&v[0], n, &v[1], &v[2]), &c))
}

pub fn check_relu(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck/relu");
    let x = away_from_zero(12, &mut r);
    let c = uniform(12, &mut r);
    let analytic = tape_grads(&tensor(&[3, 4], &x), &c, &[], &|g, x| Ok(g.relu(x)));
    compare(&analytic, &[x], &|v| dot(&relu(&v[0]), &c))
}

pub fn check_sigmoid(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck/sigmoid");
    let x: Vec<f64> = uniform(12, &mut r).into_iter().map(|v| 3.0 * v).collect();
    let c = uniform(12, &mut r);
    let analytic = tape_grads(&tensor(&[3, 4], &x), &c, &[], &|g, x| Ok(g.sigmoid(x)));
    compare(&analytic, &[x], &|v| dot(&sigmoid(&v[0]), &c))
}

pub fn check_softmax(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck/softmax");
    let tau = [1.0, 2.0, 4.0][(seed % 3) as usize];
    let x: Vec<f64> = uniform(15, &mut r).into_iter().map(|v| 3.0 * v).collect();
    let c = uniform(15, &mut r);
    let analytic = tape_grads(&tensor(&[3, 5], &x), &c, &[], &|g, x| g.softmax(x, tau as f32));
    compare(&analytic, &[x], &|v| dot(&softmax(&v[0], 5, tau), &c))
}

pub fn check_mhsa(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck/mhsa");
    let (b, t, d, heads) = (2, 4, 6, 3);
    let att = MultiHeadSelfAttention::new("a", d, heads, &mut r).unwrap();
    let x = uniform(b * t * d, &mut r);
    let c = uniform(b * t * d, &mut r);
    let params = att.params();
    let analytic = tape_grads(&tensor(&[b, t, d], &x), &c, &params, &|g, x| att.forward(g, x));
    let mut vals = vec![x];
    vals.extend(params.iter().map(|p| to64(p.tensor.data())));
    compare(&analytic, &vals, &|v| dot(&mhsa(&v[0], b, t, d, heads, &v[1..]), &c))
}

pub fn check_masknet(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck/masknet");
    let cfg = MaskNetConfig::new(5, 6, 3).unwrap();
    let b = 2;
    let net = MaskNet::new("mn", cfg, &mut r).unwrap();
    let z = uniform(b * cfg.d_m, &mut r);
    let c = uniform(b * cfg.d_m, &mut r);
    let params = net.params();
    let analytic = tape_grads(&tensor(&[b, cfg.d_m], &z), &c, &params, &|g, z| net.forward(g, z));
    let mut vals = vec![z];
    vals.extend(params.iter().map(|p| to64(p.tensor.data())));
    compare(&analytic, &vals, &|v| dot(&masknet(&v[0], b, cfg, &v[1..]), &c))
}

pub fn check_gatenet(seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck/gatenet");
    let (b, classes, teachers) = (3, 4, 3);
    // Redraw until no hidden pre-activation sits near the ReLU kink.
    let (net, z) = loop {
        let net = GateNet::new(classes, teachers, None, &mut r).unwrap();
        let z: Vec<f64> = uniform(b * classes, &mut r).into_iter().map(|v| 2.0 * v).collect();
        let p: Vec<Vec<f64>> = net.params().iter().map(|p| to64(p.tensor.data())).collect();
        if gatenet_hidden(&z, b, &p).iter().all(|h| h.abs() > 0.05) {
            break (net, z);
        }
    };
    let c = uniform(b * teachers, &mut r);
    let params = net.params();
    let analytic = tape_grads(&tensor(&[b, classes], &z), &c, &params, &|g, z| net.forward(g, z));
    let mut vals = vec![z];
    vals.extend(params.iter().map(|p| to64(p.tensor.data())));
    compare(&analytic, &vals, &|v| dot(&gatenet(&v[0], b, &v[1..]), &c))
}

pub type Check = fn(u64) -> f64;

pub const LAYERS: [(&str, Check); 7] = [
    ("linear", check_linear),
    ("relu", check_relu),
    ("sigmoid", check_sigmoid),
    ("softmax", check_softmax),
    ("mhsa", check_mhsa),
    ("masknet", check_masknet),
    ("gatenet", check_gatenet),
];

/// Worst relative error of `check` over `instances` seeds.
pub fn worst(check: Check, instances: u64) -> f64 {
    (0..instances).map(check).fold(0.0, f64::max)
}
