use color_core::metrics::{average_accuracy, average_accuracy_task_mean, forgetting, mean_std, AccuracyMatrix};
use color_core::Error;
use proptest::prelude::*;

#[test]
fn pooled_accuracy_hand_count() {
    let mut m = AccuracyMatrix::new(vec![10, 20]).unwrap();
    m.record(1, 1, 9).unwrap();
    m.record(2, 1, 8).unwrap();
    m.record(2, 2, 14).unwrap();
    assert!((average_accuracy(&m, 2).unwrap() - 22.0 / 30.0).abs() < 1e-15);
    assert!((average_accuracy_task_mean(&m, 2).unwrap() - (0.8 + 0.7) / 2.0).abs() < 1e-15);
}

#[test]
fn perfect_rows_average_to_one() {
    let mut m = AccuracyMatrix::new(vec![5, 7, 9]).unwrap();
    for t in 1..=3 {
        for tau in 1..=t {
            m.record(t, tau, m.test_set_sizes()[tau - 1]).unwrap();
        }
    }
    assert_eq!(average_accuracy(&m, 3).unwrap(), 1.0);
    assert_eq!(forgetting(&m, 3).unwrap(), 0.0);
}

#[test]
fn forgetting_hand_formula() {
    let mut m = AccuracyMatrix::new(vec![10, 10]).unwrap();
    m.record(1, 1, 9).unwrap();
    m.record(2, 1, 8).unwrap();
    m.record(2, 2, 10).unwrap();
    assert!((forgetting(&m, 2).unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn forgetting_uses_the_best_earlier_accuracy() {
    let mut m = AccuracyMatrix::new(vec![10, 10, 10]).unwrap();
    m.record(1, 1, 6).unwrap();
    m.record(2, 1, 9).unwrap();
    m.record(2, 2, 7).unwrap();
    m.record(3, 1, 5).unwrap();
    m.record(3, 2, 7).unwrap();
    m.record(3, 3, 10).unwrap();
    // dataset 1: 0.9 − 0.5; dataset 2: 0.7 − 0.7
    assert!((forgetting(&m, 3).unwrap() - 0.2).abs() < 1e-12);
}

#[test]
fn contract_errors() {
    let mut m = AccuracyMatrix::new(vec![10, 10]).unwrap();
    assert!(matches!(forgetting(&m, 1), Err(Error::Contract(_))));
    assert!(matches!(average_accuracy(&m, 2), Err(Error::Contract(_))));
    assert!(m.record(1, 2, 3).is_err());
    assert!(m.record(1, 1, 11).is_err());
    assert!(AccuracyMatrix::new(vec![0]).is_err());
}

#[test]
fn sample_std() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!(m, 2.0);
    assert!((s - 1.0).abs() < 1e-15);
    assert_eq!(mean_std(&[4.0]).1, 0.0);
}

proptest! {
    #[test]
    fn equal_sizes_make_pooled_equal_task_mean(
        size in 1usize..50,
        hits in prop::collection::vec(0.0f64..1.0, 1..8),
    ) {
        let t = hits.len();
        let mut m = AccuracyMatrix::new(vec![size; t]).unwrap();
        for tt in 1..=t {
            for tau in 1..=tt {
                m.record(tt, tau, (hits[tau - 1] * size as f64) as usize).unwrap();
            }
        }
        let pooled = average_accuracy(&m, t).unwrap();
        let mean = average_accuracy_task_mean(&m, t).unwrap();
        prop_assert!((pooled - mean).abs() <= 1e-12);
        if t >= 2 {
            prop_assert_eq!(forgetting(&m, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn forgetting_is_non_negative_without_later_gains(
        first in prop::collection::vec(0usize..=10, 3),
        drops in prop::collection::vec(0usize..=3, 6),
    ) {
        let mut m = AccuracyMatrix::new(vec![10, 10, 10]).unwrap();
        let mut i = 0;
        for t in 1..=3 {
            for tau in 1..=t {
                let prev = if t == tau { first[tau - 1] } else { m.correct(t - 1, tau).unwrap() };
                let c = if t == tau { prev } else { prev.saturating_sub(drops[i]) };
                m.record(t, tau, c).unwrap();
                i += 1;
            }
        }
        prop_assert!(forgetting(&m, 3).unwrap() >= 0.0);
        prop_assert!(forgetting(&m, 2).unwrap() >= 0.0);
    }
}

#[test]
fn later_gains_make_forgetting_negative() {
    let mut m = AccuracyMatrix::new(vec![10, 10]).unwrap();
    m.record(1, 1, 5).unwrap();
    m.record(2, 1, 7).unwrap();
    m.record(2, 2, 7).unwrap();
    assert!((forgetting(&m, 2).unwrap() + 0.2).abs() < 1e-12);
}
