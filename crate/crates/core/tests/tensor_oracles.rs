//! Tape primitives against direct loop implementations, plus algebraic
//! properties of the forward pass.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use triresnet_core::nn::Mode;
use triresnet_core::stream::build_stream;
use triresnet_core::tensor::BnMode;
use triresnet_core::{StreamConfig, Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn at(t: &Tensor<f64>, i: [usize; 4]) -> f64 {
    let s = t.shape();
    t.data()[((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]]
}

fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * o * oh * ow);
    for bi in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += at(x, [bi, ic, iy as usize, ix as usize]) * at(w, [oc, ic, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::from_vec(vec![n, o, oh, ow], out).unwrap()
}

fn direct_max_pool(x: &Tensor<f64>, k: usize, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                m = m.max(at(x, [b, ch, iy as usize, ix as usize]));
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::from_vec(vec![n, c, oh, ow], out).unwrap()
}

fn conv_via_tape(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
    tape.value(y).clone()
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn conv_matches_direct_loops() {
    let cases = [(3, 7, 2, 3), (4, 3, 1, 1), (4, 3, 2, 1), (5, 1, 2, 0), (2, 3, 1, 0)];
    for (seed, &(c, k, stride, pad)) in cases.iter().enumerate() {
        let x = random(&[2, c, 13, 11], seed as u64);
        let w = random(&[6, c, k, k], 100 + seed as u64);
        let b = random(&[6], 200 + seed as u64);
        assert_close(&conv_via_tape(&x, &w, Some(&b), stride, pad), &direct_conv(&x, &w, Some(&b), stride, pad), 1e-12);
        assert_close(&conv_via_tape(&x, &w, None, stride, pad), &direct_conv(&x, &w, None, stride, pad), 1e-12);
    }
}

#[test]
fn max_pool_matches_direct_loops() {
    for (seed, (k, stride, pad)) in [(3, 2, 1), (2, 2, 0), (3, 1, 1)].into_iter().enumerate() {
        let x = random(&[2, 3, 9, 10], seed as u64);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = tape.max_pool2d(xv, k, stride, pad).unwrap();
        assert_close(tape.value(y), &direct_max_pool(&x, k, stride, pad), 0.0);
    }
}

#[test]
fn batch_norm_train_statistics() {
    let x = random(&[3, 2, 4, 5], 7);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::from_vec(vec![2], vec![1.5, -0.5]).unwrap());
    let b = tape.constant(Tensor::from_vec(vec![2], vec![0.25, 2.0]).unwrap());
    let (y, stats) = tape.batch_norm2d(xv, g, b, BnMode::Train { eps: 1e-5 }).unwrap();
    let stats = stats.unwrap();
    for ch in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|n| (0..4).flat_map(move |i| (0..5).map(move |j| (n, i, j))))
            .map(|(n, i, j)| at(&x, [n, ch, i, j]))
            .collect();
        let m = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / m;
        let ss: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum();
        assert!((stats.mean[ch] - mean).abs() < 1e-12);
        assert!((stats.var[ch] - ss / (m - 1.0)).abs() < 1e-12);
        let (gamma, beta) = ([1.5, -0.5][ch], [0.25, 2.0][ch]);
        let inv = 1.0 / (ss / m + 1e-5).sqrt();
        for n in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let want = gamma * (at(&x, [n, ch, i, j]) - mean) * inv + beta;
                    assert!((at(tape.value(y), [n, ch, i, j]) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn stream_output_is_feature_vector_per_image() {
    let s = build_stream::<f64>(&StreamConfig::tiny(), 3).unwrap();
    let x = random(&[2, 3, 32, 32], 1);
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let f = s.forward(&mut tape, xv, Mode::Eval).unwrap();
    assert_eq!(tape.value(f).shape(), &[2, 64]);
    // eval mode treats batch items independently
    let mut tape = Tape::inference();
    let one = tape.constant(x.batch_item(1).unwrap());
    let f1 = s.forward(&mut tape, one, Mode::Eval).unwrap();
    let both = {
        let mut t = Tape::inference();
        let xv = t.constant(x);
        let f = s.forward(&mut t, xv, Mode::Eval).unwrap();
        t.value(f).clone()
    };
    for (a, b) in tape.value(f1).data().iter().zip(&both.data()[64..]) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_is_linear_in_input(seed in any::<u64>(), alpha in -3.0f64..3.0, stride in 1usize..3, pad in 0usize..2) {
        let x1 = random(&[1, 2, 7, 8], seed);
        let x2 = random(&[1, 2, 7, 8], seed ^ 1);
        let w = random(&[3, 2, 3, 3], seed ^ 2);
        let mix = Tensor::from_vec(
            vec![1, 2, 7, 8],
            x1.data().iter().zip(x2.data()).map(|(a, b)| alpha * a + b).collect(),
        ).unwrap();
        let y1 = conv_via_tape(&x1, &w, None, stride, pad);
        let y2 = conv_via_tape(&x2, &w, None, stride, pad);
        let ym = conv_via_tape(&mix, &w, None, stride, pad);
        for ((a, b), m) in y1.data().iter().zip(y2.data()).zip(ym.data()) {
            prop_assert!((alpha * a + b - m).abs() < 1e-10);
        }
    }

    #[test]
    fn conv_output_shape(h in 1usize..20, w in 1usize..20, k in 1usize..6, stride in 1usize..4, pad in 0usize..3) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let x = random(&[2, 1, h, w], 0);
        let kernel = random(&[4, 1, k, k], 1);
        let y = conv_via_tape(&x, &kernel, None, stride, pad);
        prop_assert_eq!(y.shape(), &[2, 4, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let s = build_stream::<f32>(&StreamConfig::tiny(), seed).unwrap();
        let again = build_stream::<f32>(&StreamConfig::tiny(), seed).unwrap();
        let x = Tensor::<f32>::from_f64(vec![1, 3, 32, 32], random(&[1, 3, 32, 32], seed).data()).unwrap();
        let run = |s: &triresnet_core::StreamWeights<f32>| {
            let mut t = Tape::inference();
            let xv = t.constant(x.clone());
            let f = s.forward(&mut t, xv, Mode::Eval).unwrap();
            t.value(f).clone()
        };
        prop_assert!(run(&s).bit_eq(&run(&again)));
    }
}
