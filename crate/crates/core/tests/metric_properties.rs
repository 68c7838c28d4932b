use cct::metrics::{classification_report, multiclass_roc, roc_curve, topk_accuracy, ConfusionMatrix};
use cct::Tensor;
use proptest::prelude::*;

fn mann_whitney(scores: &[f32], positive: &[bool]) -> f64 {
    let pos: Vec<f32> = scores.iter().zip(positive).filter(|p| *p.1).map(|p| *p.0).collect();
    let neg: Vec<f32> = scores.iter().zip(positive).filter(|p| !*p.1).map(|p| *p.0).collect();
    let wins: f64 = pos
        .iter()
        .flat_map(|&p| neg.iter().map(move |&n| if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 }))
        .sum();
    wins / (pos.len() * neg.len()) as f64
}

fn binary_problem() -> impl Strategy<Value = (Vec<f32>, Vec<bool>)> {
    (2usize..100).prop_flat_map(|n| {
        (prop::collection::vec(0u8..12, n), prop::collection::vec(any::<bool>(), n)).prop_map(|(s, mut p)| {
            p[0] = true;
            p[1] = false;
            (s.into_iter().map(|v| v as f32 / 3.0).collect(), p)
        })
    })
}

fn multiclass_problem() -> impl Strategy<Value = (usize, Vec<usize>, Vec<f32>)> {
    (2usize..6, 1usize..40).prop_flat_map(|(k, n)| {
        (Just(k), prop::collection::vec(0..k, n), prop::collection::vec(0u8..4, n * k))
            .prop_map(|(k, l, s)| (k, l, s.into_iter().map(|v| v as f32 / 4.0).collect()))
    })
}

proptest! {
    #[test]
    fn auc_is_mann_whitney((scores, positive) in binary_problem()) {
        let roc = roc_curve(&scores, &positive).unwrap();
        prop_assert!((roc.auc - mann_whitney(&scores, &positive)).abs() < 1e-12);
        prop_assert!(roc.fpr.windows(2).all(|w| w[0] <= w[1]) && roc.tpr.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!((roc.fpr[0], roc.tpr[0]), (0.0, 0.0));
        prop_assert_eq!((*roc.fpr.last().unwrap(), *roc.tpr.last().unwrap()), (1.0, 1.0));
    }

    #[test]
    fn auc_flips_with_the_scores((scores, positive) in binary_problem()) {
        let negated: Vec<f32> = scores.iter().map(|s| -s).collect();
        let a = roc_curve(&scores, &positive).unwrap().auc;
        let b = roc_curve(&negated, &positive).unwrap().auc;
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_sample_order((k, labels, scores) in multiclass_problem(), rot in 0usize..40) {
        let n = labels.len();
        let r = rot % n;
        let perm: Vec<usize> = (0..n).map(|i| (i + r) % n).collect();
        let labels2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let scores2: Vec<f32> = perm.iter().flat_map(|&i| scores[i * k..(i + 1) * k].to_vec()).collect();
        let (s1, s2) = (Tensor::new([n, k], scores).unwrap(), Tensor::new([n, k], scores2).unwrap());
        for kk in 1..=k {
            prop_assert_eq!(topk_accuracy(&s1, &labels, kk).unwrap(), topk_accuracy(&s2, &labels2, kk).unwrap());
        }
        let (a, b) = (multiclass_roc(&s1, &labels).unwrap(), multiclass_roc(&s2, &labels2).unwrap());
        prop_assert!((a.micro.auc - b.micro.auc).abs() < 1e-12);
        for (x, y) in a.per_class.iter().zip(&b.per_class) {
            prop_assert_eq!(x.is_some(), y.is_some());
            if let (Some(x), Some(y)) = (x, y) {
                prop_assert!((x.auc - y.auc).abs() < 1e-12);
            }
        }
        prop_assert!((topk_accuracy(&s1, &labels, k).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_supports_sum_to_total(k in 2usize..9, pairs in prop::collection::vec((0usize..8, 0usize..8), 1..80)) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0 % k).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1 % k).collect();
        let cm = ConfusionMatrix::new(&truth, &pred, k).unwrap();
        let report = classification_report(&cm).unwrap();
        prop_assert_eq!(report.classes.iter().map(|c| c.support).sum::<u64>(), truth.len() as u64);
        prop_assert_eq!(cm.total(), truth.len() as u64);
        prop_assert!(report.classes.iter().all(|c| (0.0..=1.0).contains(&c.f1)));
        let macro_f1 = report.classes.iter().map(|c| c.f1).sum::<f64>() / k as f64;
        prop_assert!((report.macro_avg.f1 - macro_f1).abs() < 1e-12);
    }
}
