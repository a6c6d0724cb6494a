use proptest::prelude::*;
use qta_core::numerics::{fft1, ifft1, softmax, ComplexVector, Rng, Tensor};

fn naive_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        for (t, v) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            re[k] += v * ang.cos();
            im[k] += v * ang.sin();
        }
    }
    (re, im)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn fft_matches_naive_dft(x in prop::collection::vec(-10.0f64..10.0, 1..48)) {
        let f = fft1(&ComplexVector::from_real(&x)).unwrap();
        let (re, im) = naive_dft(&x);
        prop_assert!(close(&f.re(), &re, 1e-9));
        prop_assert!(close(&f.im(), &im, 1e-9));
    }

    #[test]
    fn fft_round_trip(re in prop::collection::vec(-5.0f64..5.0, 1..64), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let im: Vec<f64> = re.iter().map(|_| rng.uniform_range(-5.0, 5.0)).collect();
        let back = ifft1(&fft1(&ComplexVector::from_parts(&re, &im)).unwrap()).unwrap();
        prop_assert!(close(&back.re(), &re, 1e-9));
        prop_assert!(close(&back.im(), &im, 1e-9));
    }

    #[test]
    fn fft_is_linear(pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..40), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = fft1(&ComplexVector::from_real(&x)).unwrap();
        let fy = fft1(&ComplexVector::from_real(&y)).unwrap();
        let fm = fft1(&ComplexVector::from_real(&mix)).unwrap();
        let want: Vec<f64> = fx.re().iter().zip(fy.re()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(close(&fm.re(), &want, 1e-9));
    }

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-50.0f64..50.0, 12)) {
        let s = softmax(&Tensor::matrix(3, 4, data).unwrap());
        for r in 0..3 {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_triple_loop(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 12)) {
        let ta = Tensor::matrix(2, 3, a.clone()).unwrap();
        let tb = Tensor::matrix(3, 4, b.clone()).unwrap();
        let c = ta.matmul(&tb).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                prop_assert!((c.row(i)[j] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_survives_huge_logits() {
    let s = softmax(&Tensor::vector(&[1000.0, 1000.0, -1000.0]));
    assert!((s.data()[0] - 0.5).abs() < 1e-12);
    assert_eq!(s.data()[2], 0.0);
}
