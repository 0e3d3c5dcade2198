//! Eager versions of the tape ops for callers that need values only.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn eager1(x: &Tensor, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let out = tape.matmul(va, vb)?;
    Ok(tape.value(out).clone())
}

pub fn dwconv2d(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (vx, vk) = (tape.constant(x), tape.constant(kernels));
    let out = tape.dwconv2d(vx, vk)?;
    Ok(tape.value(out).clone())
}

pub fn gap2d(x: &Tensor) -> Result<Tensor> {
    eager1(x, |t, v| t.gap2d(v))
}

pub fn softmax(v: &Tensor) -> Result<Tensor> {
    eager1(v, |t, x| t.softmax(x))
}

pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (vx, vw, vb) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let out = tape.affine(vx, vw, vb)?;
    Ok(tape.value(out).clone())
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    eager1(x, |t, v| t.gelu(v))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;
    use crate::gradcheck::{check_gradients, weighted_sum, GradCheckConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn strict() -> GradCheckConfig {
        GradCheckConfig {
            rel_tolerance: 1e-6,
            ..GradCheckConfig::default()
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = Tensor::randn(&[3, 4], 1.0, &mut rng(1));
        assert!(matmul(&Tensor::eye(3), &b).unwrap().bit_eq(&b));

        let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let c = Tensor::matrix(&[&[1.0], &[1.0]]).unwrap();
        let out = matmul(&a, &c).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        match err {
            Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn matmul_gradcheck() {
        let mut r = rng(2);
        let inputs = [
            Tensor::randn(&[4, 5], 1.0, &mut r),
            Tensor::randn(&[5, 3], 1.0, &mut r),
        ];
        let w = Tensor::randn(&[4, 3], 1.0, &mut r);
        let rep = check_gradients(
            &inputs,
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, &w)
            },
            &strict(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn dwconv_zero_padding_arithmetic() {
        let x = Tensor::ones(&[1, 5, 5]);
        let k = Tensor::ones(&[1, 3, 3]);
        let y = dwconv2d(&x, &k).unwrap();
        assert_eq!(y.get(&[0, 2, 2]), 9.0);
        assert_eq!(y.get(&[0, 0, 0]), 4.0);
        assert_eq!(y.get(&[0, 0, 2]), 6.0);
    }

    #[test]
    fn dwconv_delta_kernel_is_identity() {
        let x = Tensor::randn(&[3, 6, 7], 1.0, &mut rng(3));
        for ks in [1, 3, 5, 7] {
            let mut k = Tensor::zeros(&[3, ks, ks]);
            for c in 0..3 {
                k.set(&[c, ks / 2, ks / 2], 1.0);
            }
            assert!(dwconv2d(&x, &k).unwrap().bit_eq(&x));
        }
    }

    #[test]
    fn dwconv_even_kernel_is_config_error() {
        let err = dwconv2d(&Tensor::zeros(&[1, 4, 4]), &Tensor::zeros(&[1, 2, 2])).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn dwconv_channel_mismatch_is_dimension_error() {
        let err = dwconv2d(&Tensor::zeros(&[2, 4, 4]), &Tensor::zeros(&[3, 3, 3])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn dwconv_matches_naive_loop() {
        let mut r = rng(4);
        let x = Tensor::randn(&[2, 5, 6], 1.0, &mut r);
        let k = Tensor::randn(&[2, 5, 5], 1.0, &mut r);
        let y = dwconv2d(&x, &k).unwrap();
        for c in 0..2 {
            for i in 0..5i64 {
                for j in 0..6i64 {
                    let mut acc = 0.0;
                    for a in 0..5i64 {
                        for b in 0..5i64 {
                            let (si, sj) = (i + a - 2, j + b - 2);
                            if (0..5).contains(&si) && (0..6).contains(&sj) {
                                acc += k.get(&[c, a as usize, b as usize])
                                    * x.get(&[c, si as usize, sj as usize]);
                            }
                        }
                    }
                    let got = y.get(&[c, i as usize, j as usize]);
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dwconv_gradcheck() {
        let mut r = rng(5);
        let inputs = [
            Tensor::randn(&[2, 6, 6], 1.0, &mut r),
            Tensor::randn(&[2, 5, 5], 1.0, &mut r),
        ];
        let w = Tensor::randn(&[2, 6, 6], 1.0, &mut r);
        let rep = check_gradients(
            &inputs,
            |t, v| {
                let y = t.dwconv2d(v[0], v[1])?;
                weighted_sum(t, y, &w)
            },
            &strict(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn gap_constant_and_permutation() {
        let x = Tensor::full(&[2, 3, 3], 1.5);
        assert_eq!(gap2d(&x).unwrap().data(), &[1.5, 1.5]);

        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng(6));
        // reverse the spatial order of every channel
        let mut p = x.clone();
        for c in 0..2 {
            let src = &x.data()[c * 12..(c + 1) * 12];
            let rev: Vec<f64> = src.iter().rev().copied().collect();
            p.data_mut()[c * 12..(c + 1) * 12].copy_from_slice(&rev);
        }
        let (a, b) = (gap2d(&x).unwrap(), gap2d(&p).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn gap_matches_explicit_loop() {
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng(7));
        let g = gap2d(&x).unwrap();
        for c in 0..3 {
            let mut s = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    s += x.get(&[c, i, j]);
                }
            }
            assert!((g.data()[c] - s / 16.0).abs() < 1e-14);
        }
    }

    #[test]
    fn gap_gradcheck() {
        let mut r = rng(8);
        let inputs = [Tensor::randn(&[3, 4, 4], 1.0, &mut r)];
        let w = Tensor::randn(&[3], 1.0, &mut r);
        let rep = check_gradients(
            &inputs,
            |t, v| {
                let y = t.gap2d(v[0])?;
                weighted_sum(t, y, &w)
            },
            &strict(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn softmax_symmetry_and_shift() {
        let s = softmax(&Tensor::vector(&[0.0, 0.0, 0.0])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for t in [-50.0, 0.0, 3.7, 700.0] {
            let s = softmax(&Tensor::vector(&[t, t + 2f64.ln()])).unwrap();
            assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-12);
            assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradcheck() {
        let mut r = rng(9);
        let inputs = [Tensor::randn(&[8], 2.0, &mut r)];
        let w = Tensor::randn(&[8], 1.0, &mut r);
        let rep = check_gradients(
            &inputs,
            |t, v| {
                let y = t.softmax(v[0])?;
                weighted_sum(t, y, &w)
            },
            &strict(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn affine_trivial_cases() {
        let x = Tensor::vector(&[1.0, -2.0, 0.5]);
        let b0 = Tensor::vector(&[0.25, 4.0, -1.0]);
        assert_eq!(affine(&x, &Tensor::zeros(&[3, 3]), &b0).unwrap().data(), b0.data());
        assert_eq!(
            affine(&x, &Tensor::eye(3), &Tensor::zeros(&[3])).unwrap().data(),
            x.data()
        );
        assert!(affine(&x, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3])).is_err());
        assert!(affine(&x, &Tensor::zeros(&[3, 3]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn affine_gradcheck() {
        let mut r = rng(10);
        let inputs = [
            Tensor::randn(&[5], 1.0, &mut r),
            Tensor::randn(&[5, 4], 1.0, &mut r),
            Tensor::randn(&[4], 1.0, &mut r),
        ];
        let w = Tensor::randn(&[4], 1.0, &mut r);
        let rep = check_gradients(
            &inputs,
            |t, v| {
                let y = t.affine(v[0], v[1], v[2])?;
                weighted_sum(t, y, &w)
            },
            &strict(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(&Tensor::vector(&[0.0])).unwrap().data(), &[0.0]);
        for x in [6.0, 7.5, 10.0, 40.0] {
            let y = gelu(&Tensor::vector(&[x])).unwrap().data()[0];
            assert!((y - x).abs() <= 1e-6, "gelu({x}) = {y}");
        }
        let xs: Vec<f64> = (0..200).map(|i| -0.75 + i as f64 * 0.05).collect();
        let ys = gelu(&Tensor::vector(&xs)).unwrap();
        assert!(ys.data().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn gelu_gradcheck() {
        let mut r = rng(11);
        let inputs = [Tensor::randn(&[8], 2.0, &mut r)];
        let w = Tensor::randn(&[8], 1.0, &mut r);
        let rep = check_gradients(
            &inputs,
            |t, v| {
                let y = t.gelu(v[0])?;
                weighted_sum(t, y, &w)
            },
            &strict(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn backward_sum_and_path_summation() {
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng(12));
        let c = Tensor::randn(&[2, 3], 1.0, &mut rng(13));

        let mut tape = Tape::new();
        let vx = tape.variable(&x);
        let s = tape.sum(vx).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(vx).unwrap().iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let vx = tape.variable(&x);
        let vc = tape.constant(&c);
        let a = tape.mul(vx, vc).unwrap();
        let b = tape.mul(vx, vc).unwrap();
        let ab = tape.add(a, b).unwrap();
        let s = tape.sum(ab).unwrap();
        tape.backward(s).unwrap();
        for (g, cv) in tape.grad(vx).unwrap().iter().zip(c.data()) {
            assert_eq!(*g, 2.0 * cv);
        }
        assert!(tape.grad(vc).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let v = tape.variable(&Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn remaining_ops_gradcheck() {
        let mut r = rng(14);
        let inputs = [
            Tensor::randn(&[4, 6], 1.0, &mut r),
            Tensor::randn(&[4], 1.0, &mut r),
            Tensor::randn(&[4], 1.0, &mut r),
            Tensor::randn(&[6], 1.0, &mut r),
        ];
        let w = Tensor::randn(&[6, 4], 1.0, &mut r);
        let rep = check_gradients(
            &inputs,
            |t, v| {
                let n = t.layer_norm_channels(v[0], v[1], v[2])?;
                let b = t.add_channel_bias(n, v[1])?;
                let m = t.mul_positions(b, v[3])?;
                let s = t.sigmoid(m)?;
                let tr = t.transpose(s)?;
                let sm = t.softmax(tr)?;
                let g = t.gather(sm, (0..24).rev().collect(), &[6, 4])?;
                let d = t.sub(g, tr)?;
                let q = t.scale(d, 0.7)?;
                weighted_sum(t, q, &w)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn mask_and_cross_entropy_gradcheck() {
        let mut r = rng(15);
        let inputs = [
            Tensor::rand_uniform(&[5], 0.1, 1.0, &mut r),
            Tensor::randn(&[3, 4], 1.0, &mut r),
        ];
        let w = Tensor::randn(&[5], 1.0, &mut r);
        let keep = vec![true, false, true, true, false];
        let rep = check_gradients(
            &inputs,
            |t, v| {
                let m = t.mask(v[0], keep.clone(), true)?;
                let a = weighted_sum(t, m, &w)?;
                let ce = t.cross_entropy(v[1], &[0, 2, 1, 1])?;
                t.add(a, ce)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn ops_are_bitwise_deterministic() {
        let mut r = rng(16);
        let x = Tensor::randn(&[3, 8, 8], 1.0, &mut r);
        let k = Tensor::randn(&[3, 7, 7], 1.0, &mut r);
        assert!(dwconv2d(&x, &k).unwrap().bit_eq(&dwconv2d(&x, &k).unwrap()));
    }
}
