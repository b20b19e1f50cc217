//! Analytic gradients against central finite differences in f64.
//!
//! Each layer is wrapped in the scalar loss `L = sum(out * R)` for a fixed
//! random `R`, so `dL/dout = R`. Relative error is
//! `|a - n| / max(|a|, |n|, FLOOR)`; the floor keeps gradients that are
//! zero up to rounding from dividing by nothing.

use resmonet_core::graph::{parse_graph, TrainingPass};
use resmonet_core::rng::Rng;
use resmonet_core::tensor::{
    batchnorm_backward, batchnorm_train, concat_channels, concat_channels_backward, conv2d,
    conv2d_backward, dense, dense_backward, depthwise_conv2d, depthwise_conv2d_backward,
    dropout_backward, dropout_train, pool, pool_backward, relu, relu_backward, softmax_xent,
    softmax_xent_backward, Activation, BatchNormParams, ConvParams, DenseParams, DepthwiseParams,
    PoolKind, PoolSpec,
};
use resmonet_core::{Tensor, WeightStore};

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-3;
const MAX_REL: f64 = 1e-4;
const SHAPES: usize = 20;

type T64 = Tensor<f64>;

fn rand_t(rng: &mut Rng, shape: &[usize]) -> T64 {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn range(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

fn dot(a: &T64, b: &T64) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` with respect to every element of `x`.
fn numeric(x: &T64, mut f: impl FnMut(&T64) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + H;
            let up = f(&probe);
            probe.data_mut()[i] = orig - H;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn check(what: &str, analytic: &T64, numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric).enumerate() {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
        assert!(rel < MAX_REL, "{what}[{i}]: analytic {a}, numeric {n}, rel {rel:e}");
    }
}

struct Geo {
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

fn geo(rng: &mut Rng) -> Geo {
    let k = range(rng, 1, 3);
    let pad = range(rng, 0, k / 2);
    let lo = k.saturating_sub(2 * pad).max(1);
    Geo {
        n: range(rng, 1, 2),
        h: range(rng, lo, 5),
        w: range(rng, lo, 5),
        k,
        stride: range(rng, 1, 2),
        pad,
    }
}

pub fn conv2d_backward_matches() {
    let mut rng = Rng::new(11);
    for _ in 0..SHAPES {
        let g = geo(&mut rng);
        let (ci, co) = (range(&mut rng, 1, 3), range(&mut rng, 1, 3));
        let x = rand_t(&mut rng, &[g.n, g.h, g.w, ci]);
        let p = ConvParams {
            kernel: rand_t(&mut rng, &[g.k, g.k, ci, co]),
            bias: rand_t(&mut rng, &[co]),
            stride: g.stride,
            padding: g.pad,
        };
        let out = conv2d(&x, &p).unwrap();
        let r = rand_t(&mut rng, out.shape());
        let grads = conv2d_backward(&x, &p, &r).unwrap();
        check("conv input", &grads.input, &numeric(&x, |x| dot(&conv2d(x, &p).unwrap(), &r)));
        check(
            "conv kernel",
            &grads.kernel,
            &numeric(&p.kernel, |k| dot(&conv2d(&x, &ConvParams { kernel: k.clone(), ..p.clone() }).unwrap(), &r)),
        );
        check(
            "conv bias",
            &grads.bias,
            &numeric(&p.bias, |b| dot(&conv2d(&x, &ConvParams { bias: b.clone(), ..p.clone() }).unwrap(), &r)),
        );
    }
}

pub fn depthwise_backward_matches() {
    let mut rng = Rng::new(12);
    for _ in 0..SHAPES {
        let g = geo(&mut rng);
        let c = range(&mut rng, 1, 4);
        let x = rand_t(&mut rng, &[g.n, g.h, g.w, c]);
        let p = DepthwiseParams {
            kernel: rand_t(&mut rng, &[g.k, g.k, c]),
            bias: rand_t(&mut rng, &[c]),
            stride: g.stride,
            padding: g.pad,
        };
        let out = depthwise_conv2d(&x, &p).unwrap();
        let r = rand_t(&mut rng, out.shape());
        let grads = depthwise_conv2d_backward(&x, &p, &r).unwrap();
        let f = |p: &DepthwiseParams<f64>, x: &T64| dot(&depthwise_conv2d(x, p).unwrap(), &r);
        check("depthwise input", &grads.input, &numeric(&x, |x| f(&p, x)));
        check(
            "depthwise kernel",
            &grads.kernel,
            &numeric(&p.kernel, |k| f(&DepthwiseParams { kernel: k.clone(), ..p.clone() }, &x)),
        );
        check(
            "depthwise bias",
            &grads.bias,
            &numeric(&p.bias, |b| f(&DepthwiseParams { bias: b.clone(), ..p.clone() }, &x)),
        );
    }
}

pub fn dense_backward_matches() {
    let mut rng = Rng::new(13);
    for _ in 0..SHAPES {
        let (b, ni, no) = (range(&mut rng, 1, 3), range(&mut rng, 1, 8), range(&mut rng, 1, 5));
        let x = rand_t(&mut rng, &[b, ni]);
        let p = DenseParams {
            weight: rand_t(&mut rng, &[ni, no]),
            bias: rand_t(&mut rng, &[no]),
        };
        let r = rand_t(&mut rng, &[b, no]);
        let grads = dense_backward(&x, &p, &r).unwrap();
        let f = |p: &DenseParams<f64>, x: &T64| dot(&dense(x, p, Activation::None).unwrap(), &r);
        check("dense input", &grads.input, &numeric(&x, |x| f(&p, x)));
        check(
            "dense weight",
            &grads.weight,
            &numeric(&p.weight, |w| f(&DenseParams { weight: w.clone(), bias: p.bias.clone() }, &x)),
        );
        check(
            "dense bias",
            &grads.bias,
            &numeric(&p.bias, |b| f(&DenseParams { weight: p.weight.clone(), bias: b.clone() }, &x)),
        );
    }
}

pub fn batchnorm_backward_matches() {
    let mut rng = Rng::new(14);
    for _ in 0..SHAPES {
        let (rows, c) = (range(&mut rng, 2, 12), range(&mut rng, 1, 4));
        let x = rand_t(&mut rng, &[rows, 1, 1, c]);
        let mut p = BatchNormParams::<f64>::identity(c).unwrap();
        p.gamma = rand_t(&mut rng, &[c]);
        p.beta = rand_t(&mut rng, &[c]);
        let r = rand_t(&mut rng, x.shape());
        let f = |p: &BatchNormParams<f64>, x: &T64| {
            let mut q = p.clone();
            dot(&batchnorm_train(x, &mut q).unwrap().0, &r)
        };
        let (_, cache) = batchnorm_train(&x, &mut p.clone()).unwrap();
        let grads = batchnorm_backward(&r, &p, &cache).unwrap();
        check("batchnorm input", &grads.input, &numeric(&x, |x| f(&p, x)));
        check(
            "batchnorm gamma",
            &grads.gamma,
            &numeric(&p.gamma, |gm| f(&BatchNormParams { gamma: gm.clone(), ..p.clone() }, &x)),
        );
        check(
            "batchnorm beta",
            &grads.beta,
            &numeric(&p.beta, |bt| f(&BatchNormParams { beta: bt.clone(), ..p.clone() }, &x)),
        );
    }
}

pub fn pool_backward_matches() {
    let mut rng = Rng::new(15);
    for i in 0..2 * SHAPES {
        let window = range(&mut rng, 1, 3);
        let spec = PoolSpec {
            kind: if i % 2 == 0 { PoolKind::Avg } else { PoolKind::Max },
            window,
            stride: range(&mut rng, 1, 2),
            padding: range(&mut rng, 0, window - 1),
        };
        let lo = window.saturating_sub(2 * spec.padding).max(1);
        let shape = [range(&mut rng, 1, 2), range(&mut rng, lo, 5), range(&mut rng, lo, 5), range(&mut rng, 1, 3)];
        let x = rand_t(&mut rng, &shape);
        let out = pool(&x, &spec).unwrap();
        let r = rand_t(&mut rng, out.shape());
        let g = pool_backward(&x, &spec, &r).unwrap();
        check("pool input", &g, &numeric(&x, |x| dot(&pool(x, &spec).unwrap(), &r)));
    }
}

pub fn activation_backwards_match() {
    let mut rng = Rng::new(16);
    for _ in 0..SHAPES {
        let shape = [range(&mut rng, 1, 2), range(&mut rng, 1, 4), range(&mut rng, 1, 4), range(&mut rng, 1, 3)];
        let x = rand_t(&mut rng, &shape);
        let r = rand_t(&mut rng, &shape);
        check(
            "relu",
            &relu_backward(&x, &r).unwrap(),
            &numeric(&x, |x| dot(&relu(x), &r)),
        );

        let mut other = shape;
        other[3] = range(&mut rng, 1, 3);
        let y = rand_t(&mut rng, &other);
        let cat = concat_channels(&[&x, &y]).unwrap();
        let rc = rand_t(&mut rng, cat.shape());
        let parts = concat_channels_backward(&rc, &[shape[3], other[3]]).unwrap();
        check("concat a", &parts[0], &numeric(&x, |x| dot(&concat_channels(&[x, &y]).unwrap(), &rc)));
        check("concat b", &parts[1], &numeric(&y, |y| dot(&concat_channels(&[&x, y]).unwrap(), &rc)));

        let seed = rng.next_u64();
        let (_, mask) = dropout_train(&x, 0.3, &mut Rng::new(seed)).unwrap();
        check(
            "dropout",
            &dropout_backward(&mask, &r).unwrap(),
            &numeric(&x, |x| dot(&dropout_train(x, 0.3, &mut Rng::new(seed)).unwrap().0, &r)),
        );

        let n = range(&mut rng, 2, 8);
        let logits = rand_t(&mut rng, &[n]);
        let label = rng.below(n as u64) as usize;
        let (probs, _) = softmax_xent(&logits, label).unwrap();
        check(
            "softmax cross-entropy",
            &softmax_xent_backward(&probs, label).unwrap(),
            &numeric(&logits, |l| softmax_xent(l, label).unwrap().1),
        );
    }
}

/// Every learnable scalar of a model containing each layer kind.
pub fn whole_model_backward_matches() {
    let text = "\
input input h=6 w=6 c=2
stem conv k=3 stride=1 pad=1 c_out=4 block=stem <- input
stem_bn batchnorm block=stem <- stem
stem_relu relu block=stem <- stem_bn
dw depthwise k=3 pad=1 block=mobile1 <- stem_relu
pw pointwise c_out=4 block=mobile1 <- dw
side maxpool k=3 stride=1 pad=1 <- stem_relu
sum add block=residual1 <- pw, side
cat concat <- sum, stem_relu
pool avgpool k=2 <- cat
fc1 dense units=6 <- pool
fc1_relu relu <- fc1
drop dropout rate=0.2 <- fc1_relu
fc2 dense units=3 <- drop
softmax softmax <- fc2
";
    let graph = parse_graph(text).unwrap();
    let mut rng = Rng::new(17);
    let batch = rand_t(&mut rng, &[3, 6, 6, 2]);
    let labels = [0, 2, 1];
    let base = WeightStore::<f32>::init(&graph, 5).cast::<f64>();
    let loss_of = |store: &WeightStore<f64>| {
        let mut s = store.clone();
        let mut pass = TrainingPass::new();
        pass.forward(&graph, &mut s, &batch, &mut Rng::new(99)).unwrap();
        pass.loss(&labels).unwrap()
    };
    let mut s = base.clone();
    let mut pass = TrainingPass::new();
    pass.forward(&graph, &mut s, &batch, &mut Rng::new(99)).unwrap();
    let grads = pass.backward(&graph, &base, &labels).unwrap();
    let mut checked = 0;
    for (layer, param, g) in grads.iter() {
        let t = base.get(layer, param).unwrap();
        let num = numeric(t, |v| {
            let mut st = base.clone();
            *st.get_mut(layer, param).unwrap() = v.clone();
            loss_of(&st)
        });
        check(&format!("{layer}.{param}"), g, &num);
        checked += g.len();
    }
    assert!(checked > 100);
}

/// The same check on a desk-scale ResMoNet, sampling a few scalars per
/// parameter tensor to keep the runtime small.
pub fn resmonet_backward_matches_sampled() {
    let graph = crate::common::corpus()
        .into_iter()
        .find(|(n, _)| n == "desk32 m=1 r=1")
        .unwrap()
        .1;
    let mut rng = Rng::new(18);
    let batch = rand_t(&mut rng, &[2, 32, 32, 3]);
    let labels = [4, 1];
    let base = WeightStore::<f32>::init(&graph, 8).cast::<f64>();
    let loss_of = |store: &WeightStore<f64>| {
        let mut s = store.clone();
        let mut pass = TrainingPass::new();
        pass.forward(&graph, &mut s, &batch, &mut Rng::new(3)).unwrap();
        pass.loss(&labels).unwrap()
    };
    let mut s = base.clone();
    let mut pass = TrainingPass::new();
    pass.forward(&graph, &mut s, &batch, &mut Rng::new(3)).unwrap();
    let grads = pass.backward(&graph, &base, &labels).unwrap();
    for (layer, param, g) in grads.iter() {
        for _ in 0..3 {
            let i = rng.below(g.len() as u64) as usize;
            let mut up = base.clone();
            up.get_mut(layer, param).unwrap().data_mut()[i] += H;
            let mut down = base.clone();
            down.get_mut(layer, param).unwrap().data_mut()[i] -= H;
            let n = (loss_of(&up) - loss_of(&down)) / (2.0 * H);
            let a = g.data()[i];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
            assert!(rel < MAX_REL, "{layer}.{param}[{i}]: analytic {a}, numeric {n}");
        }
    }
}
