use proptest::prelude::*;
use qta_core::metrics::{confusion, evaluate, harmonic_mean, mpt};

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("type{i}")).collect()
}

fn rows() -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
    prop::collection::vec((0usize..4, 0usize..4, 0usize..3), 1..60)
}

proptest! {
    #[test]
    fn evaluate_ignores_sample_order(data in rows(), seed in any::<u64>()) {
        let perm = qta_core::numerics::Rng::new(seed).permutation(data.len());
        let split = |d: &[(usize, usize, usize)]| {
            (
                d.iter().map(|r| r.0).collect::<Vec<_>>(),
                d.iter().map(|r| r.1).collect::<Vec<_>>(),
                d.iter().map(|r| r.2).collect::<Vec<_>>(),
            )
        };
        let shuffled: Vec<_> = perm.iter().map(|&i| data[i]).collect();
        let (p, t, q) = split(&data);
        let (p2, t2, q2) = split(&shuffled);
        let a = evaluate(&p, &t, &q, &names(3)).unwrap();
        let b = evaluate(&p2, &t2, &q2, &names(3)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn report_invariants(data in rows()) {
        let p: Vec<usize> = data.iter().map(|r| r.0).collect();
        let t: Vec<usize> = data.iter().map(|r| r.1).collect();
        let q: Vec<usize> = data.iter().map(|r| r.2).collect();
        let r = evaluate(&p, &t, &q, &names(3)).unwrap();
        prop_assert!(r.harmonic_mpt <= r.arithmetic_mpt + 1e-12);
        prop_assert!(r.per_type_acc.values().all(|a| (0.0..=100.0).contains(a)));
        prop_assert_eq!(r.per_type_acc.len() + r.absent_types.len(), 3);
        let hits = p.iter().zip(&t).filter(|(a, b)| a == b).count();
        prop_assert!((r.overall_acc - 100.0 * hits as f64 / p.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn harmonic_never_exceeds_arithmetic(v in prop::collection::vec(0.0f64..100.0, 1..12)) {
        let (a, h) = mpt(&v).unwrap();
        prop_assert!(h <= a + 1e-9);
    }

    #[test]
    fn confusion_rows_sum_to_100(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..80)) {
        let p: Vec<usize> = pairs.iter().map(|x| x.0).collect();
        let t: Vec<usize> = pairs.iter().map(|x| x.1).collect();
        let m = confusion(&p, &t, &names(5)).unwrap();
        for (i, row) in m.normalized.iter().enumerate() {
            let n: usize = m.counts[i].iter().sum();
            let s: f64 = row.iter().sum();
            if n > 0 {
                prop_assert!((s - 100.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(s, 0.0);
            }
        }
        prop_assert_eq!(m.counts.iter().flatten().sum::<usize>(), pairs.len());
    }
}

#[test]
fn zero_accuracy_type_zeroes_harmonic_mpt() {
    let r = evaluate(&[1, 1], &[1, 0], &[0, 1], &names(2)).unwrap();
    assert_eq!(r.per_type_acc["type1"], 0.0);
    assert_eq!(r.harmonic_mpt, 0.0);
    assert_eq!(r.arithmetic_mpt, 50.0);
    assert_eq!(harmonic_mean(&[40.0, 0.0, 90.0]).unwrap(), 0.0);
}

#[test]
fn published_mcb_qta_column() {
    let col = [93.56, 95.70, 59.82, 54.06, 60.55, 34.00, 87.00, 100.00, 37.04, 94.34, 53.99, 65.65];
    let (a, h) = mpt(&col).unwrap();
    assert!((a - 69.69).abs() <= 0.15, "{a}");
    assert!((h - 61.56).abs() <= 0.25, "{h}");
}
