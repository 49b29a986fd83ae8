use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;
use crate::error::Error;

const H: f64 = 1e-5;

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so kinks are never straddled by ±h.
fn rand_param_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::param(shape, data).unwrap()
}

fn assert_grad_ok<F>(inputs: &[Tensor<f64>], f: F, tol: f64)
where
    F: Fn(&[Tensor<f64>]) -> crate::Result<Tensor<f64>>,
{
    let r = check_gradients(inputs, f, H).unwrap();
    assert!(r.passes(tol), "gradient check failed: {r:?}");
}

#[test]
fn identity_matmul() {
    let i3 = Tensor::<f64>::from_f64(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let b = Tensor::<f64>::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
    assert_eq!(i3.matmul(&b).unwrap().to_vec(), b.to_vec());
    let a = Tensor::<f64>::from_f64(&[1, 1], &[2.]).unwrap();
    let c = Tensor::<f64>::from_f64(&[1, 1], &[3.]).unwrap();
    assert_eq!(a.matmul(&c).unwrap().to_vec(), vec![6.0]);
}

#[test]
fn matmul_shape_error_names_both() {
    let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
    let b = Tensor::<f64>::zeros(&[4, 2]).unwrap();
    let msg = a.matmul(&b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let a = rand_param(&mut rng, &[4, 5]);
        let b = rand_param(&mut rng, &[5, 3]);
        assert_grad_ok(&[a, b], |x| Ok(x[0].matmul(&x[1])?.sum()), 1e-6);
    }
}

#[test]
fn conv_identity_and_box() {
    let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
    let k = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[1.]).unwrap();
    assert_eq!(x.conv2d(&k, 1, 0).unwrap().to_vec(), x.to_vec());

    let ones = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &[1.; 9]).unwrap();
    let k3 = Tensor::<f64>::from_f64(&[1, 1, 3, 3], &[1.; 9]).unwrap();
    let y = ones.conv2d(&k3, 1, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.to_vec(), vec![9.0]);
}

#[test]
fn conv_output_size_and_errors() {
    let x = Tensor::<f64>::zeros(&[2, 3, 7, 6]).unwrap();
    let k = Tensor::<f64>::zeros(&[4, 3, 3, 3]).unwrap();
    assert_eq!(x.conv2d(&k, 2, 1).unwrap().shape(), &[2, 4, 4, 3]);
    let big = Tensor::<f64>::zeros(&[1, 3, 9, 9]).unwrap();
    assert!(matches!(x.conv2d(&big, 1, 0), Err(Error::Dimension(_))));
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_param(&mut rng, &[2, 2, 5, 4]);
    let k = rand_param(&mut rng, &[3, 2, 3, 2]);
    let (stride, pad) = (2, 1);
    let y = x.conv2d(&k, stride, pad).unwrap();
    let [_, _, oh, ow] = *y.shape() else { unreachable!() };
    let (xd, kd, yd) = (x.to_vec(), k.to_vec(), y.to_vec());
    for b in 0..2 {
        for co in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..2 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && iy < 5 && ix < 4 {
                                    acc += xd[((b * 2 + ci) * 5 + iy as usize) * 4 + ix as usize]
                                        * kd[((co * 2 + ci) * 3 + ky) * 2 + kx];
                                }
                            }
                        }
                    }
                    let got = yd[((b * 3 + co) * oh + oy) * ow + ox];
                    assert!((acc - got).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (1, 2), (2, 0)] {
        let x = rand_param(&mut rng, &[2, 2, 5, 5]);
        let k = rand_param(&mut rng, &[3, 2, 3, 3]);
        let w = rand_param(&mut rng, &[1]);
        assert_grad_ok(
            &[x, k, w],
            |t| {
                let y = t[0].conv2d(&t[1], stride, pad)?;
                // Weight the output non-uniformly so every position matters.
                let n = y.numel();
                let coeff = Tensor::from_f64(y.shape(), &(0..n).map(|i| (i % 7) as f64 - 3.0).collect::<Vec<_>>())?;
                Ok(y.mul(&coeff)?.sum().mul_scalar(&t[2].reshape(&[])?)?)
            },
            1e-6,
        );
    }
}

#[test]
fn softmax_cross_entropy_values() {
    let u = Tensor::<f64>::from_f64(&[1, 4], &[0.3; 4]).unwrap();
    let l = u.softmax_cross_entropy(&[2]).unwrap().item();
    assert!((l - 4f64.ln()).abs() < 1e-12);
    let sharp = Tensor::<f64>::from_f64(&[1, 3], &[0., 1000., 0.]).unwrap();
    assert!(sharp.softmax_cross_entropy(&[1]).unwrap().item().abs() < 1e-12);
    assert!(matches!(u.softmax_cross_entropy(&[4]), Err(Error::Label { label: 4, classes: 4 })));
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let x = rand_param(&mut rng, &[2, 5]);
        let t = [rng.gen_range(0..5), rng.gen_range(0..5)];
        assert_grad_ok(&[x], |p| p[0].scale(3.0).softmax_cross_entropy(&t), 1e-6);
    }
}

#[test]
fn cosine_basics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = rand_param(&mut rng, &[6]);
    assert!((v.cosine_similarity(&v).unwrap().item() - 1.0).abs() < 1e-12);
    let e1 = Tensor::<f64>::from_f64(&[3], &[1., 0., 0.]).unwrap();
    let e2 = Tensor::<f64>::from_f64(&[3], &[0., 1., 0.]).unwrap();
    assert_eq!(e1.cosine_similarity(&e2).unwrap().item(), 0.0);
    let u = rand_param(&mut rng, &[6]);
    let base = u.cosine_similarity(&v).unwrap().item();
    for alpha in [0.5, 3.0, 100.0] {
        let c = u.scale(alpha).cosine_similarity(&v).unwrap().item();
        assert!((c - base).abs() < 1e-9);
    }
}

#[test]
fn cosine_zero_vector_is_zero_with_zero_gradient() {
    take_zero_norm_events();
    let z = Tensor::<f64>::param(&[3], vec![0.0; 3]).unwrap();
    let v = Tensor::<f64>::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let c = z.cosine_similarity(&v).unwrap();
    assert_eq!(c.item(), 0.0);
    c.backward().unwrap();
    assert_eq!(z.grad().unwrap(), vec![0.0; 3]);
    assert_eq!(v.grad().unwrap(), vec![0.0; 3]);
    assert_eq!(take_zero_norm_events(), 1);
}

#[test]
fn cosine_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let u = rand_param(&mut rng, &[7]);
        let v = rand_param(&mut rng, &[7]);
        assert_grad_ok(&[u, v], |p| p[0].cosine_similarity(&p[1]), 1e-6);
    }
}

#[test]
fn elementwise_values() {
    let x = Tensor::<f64>::from_f64(&[3], &[0.0, -3.0, 3.0]).unwrap();
    assert_eq!(x.sigmoid().to_vec()[0], 0.5);
    assert_eq!(x.relu().to_vec(), vec![0.0, 0.0, 3.0]);
    assert!(matches!(x.log(), Err(Error::Domain(_))));
    let big = Tensor::<f64>::from_f64(&[2], &[800.0, -800.0]).unwrap().sigmoid().to_vec();
    assert!(big.iter().all(|v| v.is_finite()));
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let a = rand_param_off_zero(&mut rng, &[2, 3]);
        let b = rand_param_off_zero(&mut rng, &[2, 3]);
        let pos = Tensor::param(&[2, 3], (0..6).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap();
        assert_grad_ok(&[a.clone()], |p| Ok(p[0].relu().sum()), 1e-6);
        assert_grad_ok(&[a.clone()], |p| Ok(p[0].sigmoid().sum()), 1e-6);
        assert_grad_ok(&[pos], |p| Ok(p[0].log()?.sum()), 1e-6);
        assert_grad_ok(&[a.clone(), b.clone()], |p| Ok(p[0].add(&p[1])?.mul(&p[0])?.mean()), 1e-6);
        assert_grad_ok(&[a.clone(), b.clone()], |p| Ok(p[0].sub(&p[1])?.exp().sum()), 1e-6);
        assert_grad_ok(&[a.clone()], |p| Ok(p[0].l2_norm()), 1e-6);
        let bias = rand_param(&mut rng, &[3]);
        assert_grad_ok(&[a, bias], |p| Ok(p[0].add_row_bias(&p[1])?.relu().sum()), 1e-6);
    }
}

#[test]
fn structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let a = rand_param(&mut rng, &[6, 3]);
        let b = rand_param(&mut rng, &[6, 2]);
        let w = rand_param(&mut rng, &[5, 4]);
        assert_grad_ok(
            &[a.clone(), b.clone(), w],
            |p| {
                let cat = Tensor::concat_cols(&[p[0].clone(), p[1].clone()])?;
                let g = cat.gather_rows(&[5, 0, 0, 3])?;
                let t = g.transpose()?.matmul(&p[2].transpose()?)?;
                Ok(t.mul(&t)?.sum())
            },
            1e-6,
        );
        assert_grad_ok(
            &[a.clone()],
            |p| {
                let m = p[0].group_mean_rows(3)?;
                Ok(m.mul(&m)?.sum().add(&p[0].mean_rows()?.element(1)?)?)
            },
            1e-6,
        );
        assert_grad_ok(
            &[a.clone()],
            |p| {
                let s = p[0].scale(2.0).softmax_rows()?;
                let coeff = Tensor::from_f64(&[6, 3], &(0..18).map(|i| i as f64 * 0.1).collect::<Vec<_>>())?;
                Ok(s.mul(&coeff)?.sum())
            },
            1e-6,
        );
        assert_grad_ok(
            &[a],
            |p| {
                let n = p[0].normalize_rows()?;
                let coeff = Tensor::from_f64(&[6, 3], &(0..18).map(|i| (i % 5) as f64 - 2.0).collect::<Vec<_>>())?;
                Ok(n.mul(&coeff)?.sum())
            },
            1e-6,
        );
    }
}

#[test]
fn pooling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..5 {
        let x = rand_param(&mut rng, &[2, 2, 5, 4]);
        assert_grad_ok(
            &[x],
            |p| {
                let y = p[0].max_pool2()?;
                let z = y.global_avg_pool()?;
                Ok(z.mul(&z)?.sum().add(&y.sum())?)
            },
            1e-6,
        );
    }
}

#[test]
fn nll_from_probs_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let x = rand_param(&mut rng, &[3, 4]);
        assert_grad_ok(&[x], |p| p[0].softmax_rows()?.nll_from_probs(&[0, 3, 1]), 1e-6);
    }
}

#[test]
fn backward_basics() {
    let x = Tensor::<f64>::param(&[], vec![3.0]).unwrap();
    x.reshape(&[]).unwrap().backward().unwrap();
    assert_eq!(x.take_grad().unwrap(), vec![1.0]);
    x.mul(&x).unwrap().backward().unwrap();
    assert_eq!(x.take_grad().unwrap(), vec![6.0]);
    let v = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(v.relu().backward(), Err(Error::Contract(_))));
}

#[test]
fn fan_out_accumulates_all_paths() {
    let x = Tensor::<f64>::param(&[], vec![0.7]).unwrap();
    // y = sigmoid(x) + x·x, shared input used by three branches
    let run = |x: &Tensor<f64>| x.sigmoid().add(&x.mul(x).unwrap()).unwrap();
    run(&x).backward().unwrap();
    let analytic = x.take_grad().unwrap()[0];
    let s = 1.0 / (1.0 + (-0.7f64).exp());
    assert!((analytic - (s * (1.0 - s) + 1.4)).abs() < 1e-12);
    assert_grad_ok(&[x], |p| Ok(run(&p[0])), 1e-8);
}

#[test]
fn repeated_backward_does_not_double_count_intermediates() {
    let x = Tensor::<f64>::param(&[], vec![2.0]).unwrap();
    let y = x.mul(&x).unwrap().scale(3.0);
    y.backward().unwrap();
    y.backward().unwrap();
    // leaves accumulate: 2 × 12
    assert_eq!(x.grad().unwrap(), vec![24.0]);
}

#[test]
fn deterministic_forward() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::new(&[2, 3, 8, 8], (0..384).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let k = Tensor::<f32>::new(&[4, 3, 3, 3], (0..108).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        x.conv2d(&k, 1, 1).unwrap().relu().max_pool2().unwrap().to_vec()
    };
    let (a, b) = (build(), build());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn forward_outputs_stay_finite(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let x = Tensor::<f64>::new(&[3, 4], vals).unwrap();
            let outs = [
                x.sigmoid(), x.relu(), x.softmax_rows().unwrap(), x.normalize_rows().unwrap(),
                x.softmax_cross_entropy(&[0, 1, 3]).unwrap(), x.l2_norm(),
            ];
            for o in outs {
                prop_assert!(o.data().iter().all(|v| v.is_finite()));
            }
        }

        #[test]
        fn cosine_in_unit_interval(u in proptest::collection::vec(-10.0f64..10.0, 5),
                                   v in proptest::collection::vec(-10.0f64..10.0, 5)) {
            let c = Tensor::<f64>::new(&[5], u).unwrap()
                .cosine_similarity(&Tensor::new(&[5], v).unwrap()).unwrap().item();
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
