//! Every layer forward against a direct loop over explicit indices, on 100
//! random shapes per layer.

use resmonet_core::rng::Rng;
use resmonet_core::tensor::{
    add, batchnorm, batchnorm_train, concat_channels, conv2d, dense, depthwise_conv2d,
    pointwise_conv2d, pool, relu, softmax, Activation, BatchNormParams, ConvParams, DenseParams,
    DepthwiseParams, PoolKind, PoolSpec,
};
use resmonet_core::Tensor;

const SHAPES: usize = 100;
const TOL: f64 = 1e-5;

fn rand_vec(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()
}

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape, rand_vec(rng, shape.iter().product())).unwrap()
}

fn range(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

fn assert_close(name: &str, got: &Tensor, want: &[f64], shape: &[usize]) {
    assert_eq!(got.shape(), shape, "{name}: shape");
    for (i, (&g, &w)) in got.data().iter().zip(want).enumerate() {
        let err = (g as f64 - w).abs() / w.abs().max(1.0);
        assert!(err <= TOL, "{name}: element {i}: got {g}, want {w}");
    }
}

/// Reads `x[n, y, x, c]` with zero outside the image.
fn at(x: &Tensor, n: usize, yy: isize, xx: isize, c: usize) -> f64 {
    let s = x.shape();
    let (h, w, ch) = (s[1] as isize, s[2] as isize, s[3]);
    if yy < 0 || xx < 0 || yy >= h || xx >= w {
        return 0.0;
    }
    x.data()[((n * s[1] + yy as usize) * s[2] + xx as usize) * ch + c] as f64
}

struct Geo {
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geo {
    fn random(rng: &mut Rng) -> Geo {
        let k = range(rng, 1, 5);
        let pad = range(rng, 0, k / 2);
        let h = range(rng, k.saturating_sub(2 * pad).max(1), 9);
        let w = range(rng, k.saturating_sub(2 * pad).max(1), 9);
        Geo {
            n: range(rng, 1, 3),
            h,
            w,
            k,
            stride: range(rng, 1, 3),
            pad,
        }
    }

    fn out(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn src(&self, o: usize, t: usize) -> isize {
        (o * self.stride + t) as isize - self.pad as isize
    }
}

pub fn conv2d_matches_loops() {
    let mut rng = Rng::new(1);
    for _ in 0..SHAPES {
        let g = Geo::random(&mut rng);
        let (ci, co) = (range(&mut rng, 1, 5), range(&mut rng, 1, 5));
        let x = rand_tensor(&mut rng, &[g.n, g.h, g.w, ci]);
        let p = ConvParams {
            kernel: rand_tensor(&mut rng, &[g.k, g.k, ci, co]),
            bias: rand_tensor(&mut rng, &[co]),
            stride: g.stride,
            padding: g.pad,
        };
        let (oh, ow) = g.out();
        let mut want = Vec::new();
        for n in 0..g.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..co {
                        let mut acc = p.bias.data()[o] as f64;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                for c in 0..ci {
                                    let wv = p.kernel.data()[((ky * g.k + kx) * ci + c) * co + o];
                                    acc += wv as f64 * at(&x, n, g.src(oy, ky), g.src(ox, kx), c);
                                }
                            }
                        }
                        want.push(acc);
                    }
                }
            }
        }
        assert_close("conv2d", &conv2d(&x, &p).unwrap(), &want, &[g.n, oh, ow, co]);
    }
}

pub fn depthwise_matches_loops() {
    let mut rng = Rng::new(2);
    for _ in 0..SHAPES {
        let g = Geo::random(&mut rng);
        let c = range(&mut rng, 1, 6);
        let x = rand_tensor(&mut rng, &[g.n, g.h, g.w, c]);
        let p = DepthwiseParams {
            kernel: rand_tensor(&mut rng, &[g.k, g.k, c]),
            bias: rand_tensor(&mut rng, &[c]),
            stride: g.stride,
            padding: g.pad,
        };
        let (oh, ow) = g.out();
        let mut want = Vec::new();
        for n in 0..g.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut acc = p.bias.data()[ch] as f64;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let wv = p.kernel.data()[(ky * g.k + kx) * c + ch];
                                acc += wv as f64 * at(&x, n, g.src(oy, ky), g.src(ox, kx), ch);
                            }
                        }
                        want.push(acc);
                    }
                }
            }
        }
        assert_close("depthwise", &depthwise_conv2d(&x, &p).unwrap(), &want, &[g.n, oh, ow, c]);
    }
}

pub fn pointwise_matches_loops() {
    let mut rng = Rng::new(3);
    for _ in 0..SHAPES {
        let (n, h, w) = (range(&mut rng, 1, 3), range(&mut rng, 1, 7), range(&mut rng, 1, 7));
        let (ci, co) = (range(&mut rng, 1, 8), range(&mut rng, 1, 8));
        let x = rand_tensor(&mut rng, &[n, h, w, ci]);
        let p = ConvParams {
            kernel: rand_tensor(&mut rng, &[1, 1, ci, co]),
            bias: rand_tensor(&mut rng, &[co]),
            stride: 1,
            padding: 0,
        };
        let mut want = Vec::new();
        for pix in x.data().chunks(ci) {
            for o in 0..co {
                let mut acc = p.bias.data()[o] as f64;
                for c in 0..ci {
                    acc += pix[c] as f64 * p.kernel.data()[c * co + o] as f64;
                }
                want.push(acc);
            }
        }
        assert_close("pointwise", &pointwise_conv2d(&x, &p).unwrap(), &want, &[n, h, w, co]);
    }
}

pub fn dense_matches_loops() {
    let mut rng = Rng::new(4);
    for i in 0..SHAPES {
        let (b, ni, no) = (range(&mut rng, 1, 4), range(&mut rng, 1, 20), range(&mut rng, 1, 10));
        let x = rand_tensor(&mut rng, &[b, ni]);
        let p = DenseParams {
            weight: rand_tensor(&mut rng, &[ni, no]),
            bias: rand_tensor(&mut rng, &[no]),
        };
        let act = if i % 2 == 0 { Activation::None } else { Activation::Relu };
        let mut want = Vec::new();
        for r in 0..b {
            for o in 0..no {
                let mut acc = p.bias.data()[o] as f64;
                for j in 0..ni {
                    acc += x.data()[r * ni + j] as f64 * p.weight.data()[j * no + o] as f64;
                }
                want.push(if act == Activation::Relu { acc.max(0.0) } else { acc });
            }
        }
        assert_close("dense", &dense(&x, &p, act).unwrap(), &want, &[b, no]);
    }
}

pub fn pools_match_loops() {
    let mut rng = Rng::new(5);
    for i in 0..SHAPES {
        let window = range(&mut rng, 1, 4);
        let pad = range(&mut rng, 0, window - 1);
        let spec = PoolSpec {
            kind: if i % 2 == 0 { PoolKind::Avg } else { PoolKind::Max },
            window,
            stride: range(&mut rng, 1, 3),
            padding: pad,
        };
        let g = Geo {
            n: range(&mut rng, 1, 2),
            h: range(&mut rng, window.saturating_sub(2 * pad).max(1), 8),
            w: range(&mut rng, window.saturating_sub(2 * pad).max(1), 8),
            k: window,
            stride: spec.stride,
            pad,
        };
        let c = range(&mut rng, 1, 4);
        let x = rand_tensor(&mut rng, &[g.n, g.h, g.w, c]);
        let (oh, ow) = g.out();
        let mut want = Vec::new();
        for n in 0..g.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let (mut sum, mut max) = (0.0, f64::NEG_INFINITY);
                        for ky in 0..window {
                            for kx in 0..window {
                                let (yy, xx) = (g.src(oy, ky), g.src(ox, kx));
                                if yy >= 0 && xx >= 0 && (yy as usize) < g.h && (xx as usize) < g.w {
                                    let v = at(&x, n, yy, xx, ch);
                                    sum += v;
                                    max = max.max(v);
                                }
                            }
                        }
                        want.push(match spec.kind {
                            PoolKind::Avg => sum / (window * window) as f64,
                            PoolKind::Max => max,
                        });
                    }
                }
            }
        }
        assert_close("pool", &pool(&x, &spec).unwrap(), &want, &[g.n, oh, ow, c]);
    }
}

pub fn batchnorm_matches_loops() {
    let mut rng = Rng::new(6);
    for _ in 0..SHAPES {
        let (rows, c) = (range(&mut rng, 2, 30), range(&mut rng, 1, 6));
        let x = rand_tensor(&mut rng, &[rows, 1, 1, c]);
        let mut p = BatchNormParams::<f32>::identity(c).unwrap();
        p.gamma = rand_tensor(&mut rng, &[c]);
        p.beta = rand_tensor(&mut rng, &[c]);
        p.running_mean = rand_tensor(&mut rng, &[c]);
        p.running_var = Tensor::new(&[c], (0..c).map(|_| rng.uniform(0.2, 2.0) as f32).collect()).unwrap();
        let col = |ch: usize| -> Vec<f64> { (0..rows).map(|r| x.data()[r * c + ch] as f64).collect() };

        let mut want = vec![0.0; rows * c];
        for ch in 0..c {
            let scale = p.gamma.data()[ch] as f64 / (p.running_var.data()[ch] as f64 + p.epsilon).sqrt();
            for (r, v) in col(ch).into_iter().enumerate() {
                want[r * c + ch] = scale * (v - p.running_mean.data()[ch] as f64) + p.beta.data()[ch] as f64;
            }
        }
        assert_close("batchnorm", &batchnorm(&x, &p).unwrap(), &want, &[rows, 1, 1, c]);

        let before = p.clone();
        let (out, _) = batchnorm_train(&x, &mut p).unwrap();
        for ch in 0..c {
            let v = col(ch);
            let mean = v.iter().sum::<f64>() / rows as f64;
            let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / rows as f64;
            for (r, a) in v.iter().enumerate() {
                want[r * c + ch] = before.gamma.data()[ch] as f64 * (a - mean) / (var + p.epsilon).sqrt()
                    + before.beta.data()[ch] as f64;
            }
            let m = p.momentum;
            let rm = m * before.running_mean.data()[ch] as f64 + (1.0 - m) * mean;
            let rv = m * before.running_var.data()[ch] as f64 + (1.0 - m) * var;
            assert!((p.running_mean.data()[ch] as f64 - rm).abs() < TOL);
            assert!((p.running_var.data()[ch] as f64 - rv).abs() < TOL);
        }
        assert_close("batchnorm_train", &out, &want, &[rows, 1, 1, c]);
    }
}

pub fn elementwise_ops_match_loops() {
    let mut rng = Rng::new(7);
    for _ in 0..SHAPES {
        let shape = [range(&mut rng, 1, 3), range(&mut rng, 1, 5), range(&mut rng, 1, 5), range(&mut rng, 1, 4)];
        let a = rand_tensor(&mut rng, &shape);
        let b = rand_tensor(&mut rng, &shape);
        let want: Vec<f64> = a.data().iter().map(|&v| (v as f64).max(0.0)).collect();
        assert_close("relu", &relu(&a), &want, &shape);
        let want: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 + y as f64).collect();
        assert_close("add", &add(&a, &b).unwrap(), &want, &shape);

        let c2 = range(&mut rng, 1, 4);
        let mut shape2 = shape;
        shape2[3] = c2;
        let d = rand_tensor(&mut rng, &shape2);
        let (c1, pixels) = (shape[3], shape[0] * shape[1] * shape[2]);
        let mut want = Vec::new();
        for p in 0..pixels {
            want.extend(a.data()[p * c1..][..c1].iter().map(|&v| v as f64));
            want.extend(d.data()[p * c2..][..c2].iter().map(|&v| v as f64));
        }
        let mut out_shape = shape;
        out_shape[3] = c1 + c2;
        assert_close("concat", &concat_channels(&[&a, &d]).unwrap(), &want, &out_shape);

        let (rows, n) = (range(&mut rng, 1, 4), range(&mut rng, 1, 9));
        let logits = Tensor::new(&[rows, n], rand_vec(&mut rng, rows * n).iter().map(|v| v * 10.0).collect()).unwrap();
        let mut want = Vec::new();
        for r in logits.data().chunks(n) {
            let z: f64 = r.iter().map(|&v| (v as f64).exp()).sum();
            want.extend(r.iter().map(|&v| (v as f64).exp() / z));
        }
        assert_close("softmax", &softmax(&logits).unwrap(), &want, &[rows, n]);
    }
}
