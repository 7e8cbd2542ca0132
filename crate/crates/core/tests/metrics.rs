use proptest::prelude::*;
use prospectr::metrics::{
    anova_oneway, auprc, auroc, average_ranks, score_metrics, studentized_range_critical, tukey_hsd, ConfusionCounts,
    EvalReport, MethodSummary, Metrics, SeedRow, IMBALANCE_CAVEAT,
};
use prospectr::{Error, RngStream};

fn pairwise_auroc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn distinct_desc(s: &[f64]) -> Vec<f64> {
    let mut t = s.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn rates(s: &[f64], y: &[bool], t: f64) -> (f64, f64, f64) {
    let (mut tp, mut fp) = (0.0, 0.0);
    for (&si, &yi) in s.iter().zip(y) {
        if si >= t {
            if yi { tp += 1.0 } else { fp += 1.0 }
        }
    }
    let pos = y.iter().filter(|&&v| v).count() as f64;
    let neg = y.len() as f64 - pos;
    (tp / pos, fp / neg, tp / (tp + fp))
}

/// Trapezoids under the ROC curve through every threshold.
fn trapezoid_auroc(s: &[f64], y: &[bool]) -> f64 {
    let mut pts = vec![(0.0, 0.0)];
    pts.extend(distinct_desc(s).into_iter().map(|t| {
        let (tpr, fpr, _) = rates(s, y, t);
        (fpr, tpr)
    }));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Right-step area over the PR points of every threshold.
fn threshold_auprc(s: &[f64], y: &[bool]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for t in distinct_desc(s) {
        let (r, _, p) = rates(s, y, t);
        area += (r - prev) * p;
        prev = r;
    }
    area
}

fn scored(seed: u64, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
    let mut rng = RngStream::from_seed(seed);
    loop {
        let s: Vec<f64> = (0..n).map(|_| rng.below(levels as usize + 1) as f64 / levels as f64).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
        if y.iter().any(|&v| v) && y.iter().any(|&v| !v) {
            return (s, y);
        }
    }
}

#[test]
fn curve_metrics_match_brute_force_on_a_thousand_instances() {
    let start = std::time::Instant::now();
    let mut rng = RngStream::from_seed(2024);
    for case in 0..1000 {
        let n = 2 + rng.below(49);
        // Coarse score levels force plenty of ties.
        let levels = [4, 10, 1000][case % 3];
        let (s, y) = scored(case as u64 * 7919 + 1, n, levels);
        let a = auroc(&s, &y).unwrap();
        assert!((a - pairwise_auroc(&s, &y)).abs() < 1e-12, "case {case}");
        assert!((a - trapezoid_auroc(&s, &y)).abs() < 1e-12, "case {case}");
        assert!((auprc(&s, &y).unwrap() - threshold_auprc(&s, &y)).abs() < 1e-12, "case {case}");
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn confusion_fixture_is_exact() {
    let c = ConfusionCounts::new(2, 3, 1, 1);
    assert_eq!(c.f1().unwrap(), 4.0 / 6.0);
    assert_eq!(c.acc().unwrap(), 5.0 / 7.0);
    assert_eq!(c.bacc().unwrap(), (2.0 / 3.0 + 3.0 / 4.0) / 2.0);
    assert_eq!(c.mcc().unwrap(), 5.0 / 12.0);
}

#[test]
fn perfect_and_chance_counts() {
    let p = ConfusionCounts::new(4, 9, 0, 0);
    for v in [p.f1(), p.acc(), p.bacc(), p.mcc()] {
        assert_eq!(v.unwrap(), 1.0);
    }
    let c = ConfusionCounts::new(25, 25, 25, 25);
    assert_eq!(c.mcc().unwrap(), 0.0);
    assert_eq!(c.acc().unwrap(), 0.5);
    assert_eq!(c.bacc().unwrap(), 0.5);
}

#[test]
fn degenerate_counts() {
    assert!(matches!(ConfusionCounts::default().f1(), Err(Error::Contract(_))));
    let none = ConfusionCounts::new(0, 10, 0, 0);
    assert_eq!(none.f1().unwrap(), 0.0);
    assert_eq!(none.mcc().unwrap(), 0.0);
    assert_eq!(none.bacc().unwrap(), 1.0);
}

#[test]
fn counts_use_inclusive_threshold() {
    let c = ConfusionCounts::from_scores(&[0.5, 0.49, 0.9, 0.1], &[true, true, false, false], 0.5).unwrap();
    assert_eq!(c, ConfusionCounts::new(1, 1, 1, 1));
    assert!(matches!(ConfusionCounts::from_scores(&[0.5], &[], 0.5), Err(Error::Shape(_))));
}

#[test]
fn curve_examples() {
    let y = [true, false, true, false, false];
    let s: Vec<f64> = y.iter().map(|&v| v as u8 as f64).collect();
    assert_eq!(auroc(&s, &y).unwrap(), 1.0);
    assert_eq!(auprc(&s, &y).unwrap(), 1.0);
    let flat = [0.3; 5];
    assert_eq!(auroc(&flat, &y).unwrap(), 0.5);
    assert!((auprc(&flat, &y).unwrap() - 0.4).abs() < 1e-15);
    assert!(matches!(auroc(&flat, &[false; 5]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(auprc(&flat, &[false; 5]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(auroc(&[f64::NAN, 0.1], &[true, false]), Err(Error::UndefinedMetric(_))));
}

#[test]
fn ties_share_average_ranks() {
    assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
}

proptest! {
    #[test]
    fn auroc_is_invariant_under_monotone_maps(seed in any::<u64>(), n in 2usize..50, a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let (s, y) = scored(seed, n, 20);
        let m: Vec<f64> = s.iter().map(|v| (a * v + b).exp() + v.powi(3)).collect();
        prop_assert!((auroc(&s, &y).unwrap() - auroc(&m, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_stay_in_range(tp in 0u64..50, tn in 0u64..50, fp in 0u64..50, fn_ in 0u64..50) {
        let c = ConfusionCounts::new(tp, tn, fp, fn_);
        prop_assume!(c.total() > 0);
        for v in [c.f1().unwrap(), c.acc().unwrap(), c.bacc().unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((-1.0..=1.0).contains(&c.mcc().unwrap()));
    }

    #[test]
    fn curve_metrics_stay_in_range(seed in any::<u64>(), n in 2usize..50) {
        let (s, y) = scored(seed, n, 7);
        prop_assert!((0.0..=1.0).contains(&auroc(&s, &y).unwrap()));
        prop_assert!((0.0..=1.0).contains(&auprc(&s, &y).unwrap()));
    }

    #[test]
    fn swapping_classes_and_scores(seed in any::<u64>(), n in 2usize..50) {
        // Odd denominators keep scores off the 0.5 threshold.
        let (s, y) = scored(seed, n, 9);
        let s2: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let y2: Vec<bool> = y.iter().map(|v| !v).collect();
        prop_assert!((auroc(&s, &y).unwrap() - auroc(&s2, &y2).unwrap()).abs() < 1e-12);
        let (m1, _) = score_metrics(&s, &y, 0.5).unwrap();
        let (m2, _) = score_metrics(&s2, &y2, 0.5).unwrap();
        prop_assert!((m1.mcc - m2.mcc).abs() < 1e-12);
    }

    #[test]
    fn two_group_anova_is_squared_t(seed in any::<u64>(), n1 in 2usize..12, n2 in 2usize..12, shift in -2.0f64..2.0) {
        let mut rng = RngStream::from_seed(seed);
        let a: Vec<f64> = (0..n1).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..n2).map(|_| rng.normal() + shift).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ss = |v: &[f64]| { let m = mean(v); v.iter().map(|x| (x - m).powi(2)).sum::<f64>() };
        let sp2 = (ss(&a) + ss(&b)) / (n1 + n2 - 2) as f64;
        let t = (mean(&a) - mean(&b)) / (sp2 * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
        let f = anova_oneway(&[a, b]).unwrap().f;
        prop_assert!((f - t * t).abs() <= 1e-9 * (1.0 + f));
    }
}

fn textbook() -> Vec<Vec<f64>> {
    vec![
        vec![6.0, 8.0, 4.0, 5.0, 3.0, 4.0],
        vec![8.0, 12.0, 9.0, 11.0, 6.0, 8.0],
        vec![13.0, 9.0, 11.0, 8.0, 7.0, 12.0],
    ]
}

#[test]
fn anova_textbook_fixture() {
    // Hand table: means 5, 9, 10 around 8; SSB = 84 on 2 df, SSW = 68 on 15 df.
    let a = anova_oneway(&textbook()).unwrap();
    assert_eq!((a.df_between, a.df_within), (2, 15));
    assert!((a.ms_between - 42.0).abs() < 1e-12);
    assert!((a.ms_within - 68.0 / 15.0).abs() < 1e-12);
    assert!((a.f - 9.3).abs() < 0.1, "{}", a.f);
    assert!(a.p < 0.01);
}

#[test]
fn anova_trivial_and_degenerate() {
    let a = anova_oneway(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap();
    assert!(a.f.abs() < 1e-12);
    assert!((a.p - 1.0).abs() < 1e-9);
    assert!(matches!(anova_oneway(&[vec![1.0, 1.0], vec![2.0, 2.0]]), Err(Error::Degenerate(_))));
    assert!(matches!(anova_oneway(&[vec![1.0, 2.0]]), Err(Error::Degenerate(_))));
    assert!(matches!(anova_oneway(&[vec![1.0], vec![2.0, 3.0]]), Err(Error::Degenerate(_))));
}

#[test]
fn tukey_flags_the_extreme_pair() {
    let names: Vec<String> = ["g1", "g2", "g3"].map(String::from).to_vec();
    let t = tukey_hsd(&names, &textbook(), 0.05).unwrap();
    // q(0.05, 3, 15) = 3.673, HSD = 3.673 sqrt((68/15) / 6).
    let hsd = 3.673 * (68.0 / 15.0 / 6.0f64).sqrt();
    let find = |a: &str, b: &str| t.iter().find(|p| p.a == a && p.b == b).unwrap();
    assert!((find("g1", "g3").hsd - hsd).abs() < 1e-12);
    assert!(find("g1", "g3").significant);
    assert!(find("g1", "g2").significant);
    assert!(!find("g2", "g3").significant);
}

#[test]
fn tukey_ordering_and_identical_groups() {
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let g = textbook();
    let fwd = tukey_hsd(&names, &g, 0.05).unwrap();
    let rn: Vec<String> = names.iter().rev().cloned().collect();
    let rg: Vec<Vec<f64>> = g.iter().rev().cloned().collect();
    let rev = tukey_hsd(&rn, &rg, 0.05).unwrap();
    for p in &fwd {
        let q = rev.iter().find(|q| q.a == p.b && q.b == p.a).unwrap();
        assert_eq!(p.significant, q.significant);
        assert!((p.diff + q.diff).abs() < 1e-12 && (p.hsd - q.hsd).abs() < 1e-12);
    }
    let same = vec![vec![1.0, 2.0, 3.0]; 3];
    assert!(tukey_hsd(&names, &same, 0.05).unwrap().iter().all(|p| !p.significant));
}

#[test]
fn studentized_range_table_bounds() {
    assert_eq!(studentized_range_critical(0.05, 3, 15).unwrap(), 3.673);
    // Untabulated df falls back to the next lower row.
    assert_eq!(studentized_range_critical(0.05, 2, 25).unwrap(), 2.919);
    assert_eq!(studentized_range_critical(0.01, 10, 500).unwrap(), 5.299);
    assert!(matches!(studentized_range_critical(0.05, 11, 20), Err(Error::Unsupported(_))));
    assert!(matches!(studentized_range_critical(0.05, 3, 1), Err(Error::Unsupported(_))));
    assert!(matches!(studentized_range_critical(0.1, 3, 20), Err(Error::Unsupported(_))));
}

fn rows(seed: u64, n: usize, skill: f64) -> Vec<SeedRow> {
    (0..n as u64)
        .map(|k| {
            let mut rng = RngStream::from_seed(seed + k);
            let y: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
            let s: Vec<f64> = y.iter().map(|&v| (0.5 + skill * (v as u8 as f64 - 0.5) + 0.3 * rng.normal()).clamp(0.0, 1.0)).collect();
            let (metrics, counts) = score_metrics(&s, &y, 0.5).unwrap();
            SeedRow { seed: k, metrics, counts }
        })
        .collect()
}

#[test]
fn perfect_scores_give_perfect_metrics() {
    let y = [true, false, false, true, false];
    let s: Vec<f64> = y.iter().map(|&v| if v { 0.9 } else { 0.1 }).collect();
    let (m, _) = score_metrics(&s, &y, 0.5).unwrap();
    assert_eq!(m.values(), [1.0; 6]);
}

#[test]
fn summary_matches_hand_aggregation() {
    let r = rows(10, 5, 0.4);
    let s = MethodSummary::new("m", r.clone(), None).unwrap();
    for col in 0..6 {
        let v: Vec<f64> = r.iter().map(|x| x.metrics.values()[col]).collect();
        let mean = v.iter().sum::<f64>() / 5.0;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((s.mean.values()[col] - mean).abs() < 1e-12);
        assert!((s.std.values()[col] - sd).abs() < 1e-12);
    }
    let one = MethodSummary::new("m", r[..1].to_vec(), None).unwrap();
    assert_eq!(one.std, Metrics::default());
    assert!(matches!(MethodSummary::new("m", vec![], None), Err(Error::Contract(_))));
}

#[test]
fn report_round_trips_and_exports() {
    let methods = vec![
        MethodSummary::new("strong", rows(1, 5, 0.6), None).unwrap(),
        MethodSummary::new("weak", rows(50, 5, 0.05), None).unwrap(),
    ];
    let report = EvalReport::new(methods, 0.5, 0.05);
    assert_eq!(report.caveat, IMBALANCE_CAVEAT);
    assert_eq!(report.significance.len(), 6);
    let auroc_sig = &report.significance["AUROC†"];
    assert!(auroc_sig.anova.as_ref().unwrap().p < 0.01);
    assert!(auroc_sig.tukey[0].significant);
    let back = EvalReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);

    let dir = tempfile::tempdir().unwrap();
    report.summary_csv(&dir.path().join("s.csv")).unwrap();
    report.seeds_csv(&dir.path().join("r.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("method,F1,MCC,AUPRC,B.ACC,AUROC†,ACC†"), "{header}");
    assert_eq!(text.lines().count(), 3);
    let seeds = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(seeds.lines().count(), 11);
}
