use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rbfood::metrics::{accuracy, auroc, average_precision, fpr95, fpr_at_tpr, ScoredSample};

pub type Check = Result<(), String>;

/// Runs `test` on `cases` deterministic draws from `strategy`.
fn check<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Check {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

const INSTANCES: usize = 1000;
const TOL: f64 = 1e-12;

fn oracle_auroc(s: &[ScoredSample]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0.0;
    for p in s.iter().filter(|x| x.label) {
        for n in s.iter().filter(|x| !x.label) {
            pairs += 1.0;
            total += if p.score > n.score {
                1.0
            } else if p.score == n.score {
                0.5
            } else {
                0.0
            };
        }
    }
    total / pairs
}

fn oracle_ap(s: &[ScoredSample]) -> f64 {
    let positives: Vec<&ScoredSample> = s.iter().filter(|x| x.label).collect();
    let mut sum = 0.0;
    for p in &positives {
        let at_or_above: Vec<&ScoredSample> = s.iter().filter(|x| x.score >= p.score).collect();
        let hits = at_or_above.iter().filter(|x| x.label).count();
        sum += hits as f64 / at_or_above.len() as f64;
    }
    sum / positives.len() as f64
}

fn rate(s: &[ScoredSample], label: bool, t: f64) -> f64 {
    let class: Vec<&ScoredSample> = s.iter().filter(|x| x.label == label).collect();
    class.iter().filter(|x| x.score >= t).count() as f64 / class.len() as f64
}

fn oracle_fpr(s: &[ScoredSample], target: f64) -> f64 {
    let mut thresholds: Vec<f64> = s.iter().map(|x| x.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let t = thresholds
        .into_iter()
        .find(|&t| rate(s, true, t) >= target)
        .expect("the lowest score reaches every target");
    rate(s, false, t)
}

/// Scores from a coarse grid half the time so that ties are common.
fn instance(rng: &mut ChaCha8Rng) -> Vec<ScoredSample> {
    let n = rng.gen_range(2..=50);
    let coarse = rng.gen_bool(0.5);
    let mut s: Vec<ScoredSample> = (0..n)
        .map(|_| {
            let score = if coarse {
                rng.gen_range(0..6) as f64 / 5.0
            } else {
                rng.gen::<f64>()
            };
            ScoredSample::new(score, rng.gen_bool(0.4))
        })
        .collect();
    s[0].label = true;
    s[1].label = false;
    s
}

pub fn ranking_metrics_match_enumeration() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E);
    for _ in 0..INSTANCES {
        let s = instance(&mut rng);
        let target = [0.95, 0.5, 1.0, rng.gen::<f64>()][rng.gen_range(0..4)];
        let pairs = [
            ("auroc", auroc(&s), oracle_auroc(&s)),
            ("ap", average_precision(&s), oracle_ap(&s)),
            ("fpr", fpr_at_tpr(&s, target), oracle_fpr(&s, target)),
        ];
        for (name, got, want) in pairs {
            let got = got.map_err(|e| e.to_string())?;
            if (got - want).abs() > TOL {
                return Err(format!("{name}: {got} vs oracle {want} on {s:?}"));
            }
        }
    }
    Ok(())
}

pub fn accuracy_matches_counting() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC);
    for _ in 0..INSTANCES {
        let n = rng.gen_range(1..=50);
        let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let l: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let hits = (0..n).filter(|&i| p[i] == l[i]).count();
        let got = accuracy(&p, &l).map_err(|e| e.to_string())?;
        if got != hits as f64 / n as f64 {
            return Err(format!("accuracy {got} for {hits} of {n}"));
        }
    }
    Ok(())
}

pub fn worked_examples() -> Check {
    let set = |pos: &[f64], neg: &[f64]| -> Vec<ScoredSample> {
        pos.iter()
            .map(|&s| ScoredSample::new(s, true))
            .chain(neg.iter().map(|&s| ScoredSample::new(s, false)))
            .collect()
    };
    let cases = [
        ("auroc", auroc(&set(&[0.9, 0.4], &[0.6, 0.1])), 0.75),
        ("ap", average_precision(&set(&[0.9, 0.4], &[0.5])), 5.0 / 6.0),
        ("fpr95", fpr95(&set(&[0.9, 0.2], &[0.5, 0.1])), 0.5),
    ];
    for (name, got, want) in cases {
        let got = got.map_err(|e| e.to_string())?;
        if (got - want).abs() > TOL {
            return Err(format!("{name}: {got}, expected {want}"));
        }
    }
    Ok(())
}

fn samples() -> impl Strategy<Value = Vec<ScoredSample>> {
    prop::collection::vec((0u32..20, any::<bool>()), 2..40).prop_map(|v| {
        let mut s: Vec<ScoredSample> = v
            .into_iter()
            .map(|(k, l)| ScoredSample::new(k as f64 / 19.0, l))
            .collect();
        s[0].label = true;
        s[1].label = false;
        s
    })
}

pub fn auroc_invariant_under_increasing_maps() -> Check {
    check(256, (samples(), 0.1f64..5.0, -3.0f64..3.0), |(s, a, b)| {
        let mapped: Vec<ScoredSample> = s
            .iter()
            .map(|x| ScoredSample::new((a * x.score + b).exp(), x.label))
            .collect();
        prop_assert!((auroc(&s).unwrap() - auroc(&mapped).unwrap()).abs() <= TOL);
        Ok(())
    })
}

pub fn flipping_labels_complements_auroc() -> Check {
    check(
        256,
        (
            Just((0..30).collect::<Vec<u32>>()).prop_shuffle(),
            prop::collection::vec(any::<bool>(), 30),
        ),
        |(perm, labels)| {
            let mut s: Vec<ScoredSample> = perm
                .iter()
                .zip(&labels)
                .map(|(&k, &l)| ScoredSample::new(k as f64, l))
                .collect();
            s[0].label = true;
            s[1].label = false;
            let flipped: Vec<ScoredSample> = s.iter().map(|x| ScoredSample::new(x.score, !x.label)).collect();
            prop_assert!((auroc(&flipped).unwrap() - (1.0 - auroc(&s).unwrap())).abs() <= TOL);
            Ok(())
        },
    )
}

pub fn ap_is_one_iff_positives_outrank_negatives() -> Check {
    check(256, samples(), |s| {
        let min_pos = s
            .iter()
            .filter(|x| x.label)
            .map(|x| x.score)
            .fold(f64::INFINITY, f64::min);
        let max_neg = s
            .iter()
            .filter(|x| !x.label)
            .map(|x| x.score)
            .fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(average_precision(&s).unwrap() == 1.0, min_pos > max_neg);
        Ok(())
    })
}

pub fn lower_tpr_target_never_raises_fpr() -> Check {
    check(256, (samples(), 0.0f64..=1.0, 0.0f64..=1.0), |(s, a, b)| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(fpr_at_tpr(&s, lo).unwrap() <= fpr_at_tpr(&s, hi).unwrap());
        Ok(())
    })
}

#[allow(dead_code)]
pub const CHECKS: &[(&str, fn() -> Check)] = &[
    ("worked_examples", worked_examples),
    ("accuracy_matches_counting", accuracy_matches_counting),
    ("ranking_metrics_match_enumeration", ranking_metrics_match_enumeration),
    (
        "auroc_invariant_under_increasing_maps",
        auroc_invariant_under_increasing_maps,
    ),
    ("flipping_labels_complements_auroc", flipping_labels_complements_auroc),
    (
        "ap_is_one_iff_positives_outrank_negatives",
        ap_is_one_iff_positives_outrank_negatives,
    ),
    ("lower_tpr_target_never_raises_fpr", lower_tpr_target_never_raises_fpr),
];
