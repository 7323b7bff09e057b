//! Discrete-time survival machinery: interval scheme, label vectors, the
//! negative log-likelihood loss, RFS decoding, and Harrell's C-index.
//!
//! The model predicts conditional probabilities `S_pred[k]` of surviving
//! interval `k` given survival up to its start. Expected RFS is decoded from
//! the running products of those probabilities and serves as the survival
//! score everywhere a ranking is needed.

use crate::tensor::{Element, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum SurvivalError {
    #[error("interval scheme needs at least 2 intervals, got {0}")]
    TooFewIntervals(usize),
    #[error("{distinct} distinct times cannot fill {n} intervals; use a smaller n")]
    TooFewDistinctTimes { distinct: usize, n: usize },
    #[error("time-to-event must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("no comparable pairs: need at least one uncensored record with a strictly smaller time")]
    NoComparablePairs,
    #[error("survival probabilities must lie in (0,1); element {index} is {value}")]
    OutOfRangePrediction { index: usize, value: f64 },
    #[error("expected {expected} predictions per record, got {got}")]
    PredictionLength { expected: usize, got: usize },
}

/// Time-to-event in days plus censoring status (`censored == true` means the
/// event was not observed; the time is a lower bound).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SurvivalRecord {
    pub time_days: f64,
    pub censored: bool,
}

impl SurvivalRecord {
    pub fn observed(time_days: f64) -> Self {
        SurvivalRecord {
            time_days,
            censored: false,
        }
    }

    pub fn censored(time_days: f64) -> Self {
        SurvivalRecord {
            time_days,
            censored: true,
        }
    }
}

/// `n + 1` strictly increasing edges starting at 0. Interval `k` (1-indexed)
/// spans `(edges[k-1], edges[k]]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IntervalScheme {
    pub edges: Vec<f64>,
}

impl IntervalScheme {
    pub fn n_intervals(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn durations(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// 1-indexed interval containing `t` (right-inclusive edges), or `n + 1`
    /// when `t` lies beyond the last edge.
    pub fn interval_of(&self, t: f64) -> usize {
        let n = self.n_intervals();
        if t > self.edges[n] {
            return n + 1;
        }
        // Smallest k with t <= edges[k].
        let mut lo = 1;
        let mut hi = n;
        while lo < hi {
            let mid = (lo + hi) / 2;
            if t <= self.edges[mid] {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }
}

/// Quantile interval edges: the observed times distribute as evenly as
/// possible over `n` intervals. `edges[0]` is forced to 0 and the last edge is
/// the maximum time; duplicate edges are nudged up by one representable step.
pub fn build_intervals(times: &[f64], n: usize) -> Result<IntervalScheme, SurvivalError> {
    if n < 2 {
        return Err(SurvivalError::TooFewIntervals(n));
    }
    if let Some(&bad) = times.iter().find(|&&t| t <= 0.0) {
        return Err(SurvivalError::NonPositiveTime(bad));
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = if sorted.is_empty() { 0 } else { 1 };
    for w in sorted.windows(2) {
        if w[1] > w[0] {
            distinct += 1;
        }
    }
    if distinct < n {
        return Err(SurvivalError::TooFewDistinctTimes { distinct, n });
    }
    let len = sorted.len();
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(0.0);
    for k in 1..=n {
        let rank = (k * len) / n; // 1-indexed order statistic
        edges.push(sorted[rank - 1]);
    }
    edges[n] = sorted[len - 1];
    for k in 1..=n {
        if edges[k] <= edges[k - 1] {
            edges[k] = edges[k - 1].next_up();
        }
    }
    Ok(IntervalScheme { edges })
}

/// Label vectors for one record: `survived` is a prefix of ones over the fully
/// survived intervals; `event` marks the event interval for uncensored records
/// and is all-zero otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalLabels {
    pub survived: Vec<u8>,
    pub event: Vec<u8>,
}

pub fn make_labels(
    rec: &SurvivalRecord,
    scheme: &IntervalScheme,
) -> Result<SurvivalLabels, SurvivalError> {
    if rec.time_days <= 0.0 {
        return Err(SurvivalError::NonPositiveTime(rec.time_days));
    }
    let n = scheme.n_intervals();
    let k_raw = scheme.interval_of(rec.time_days);
    let mut survived = vec![0u8; n];
    let mut event = vec![0u8; n];
    if rec.censored {
        for (i, s) in survived.iter_mut().enumerate() {
            if i + 1 < k_raw {
                *s = 1;
            }
        }
    } else {
        // Events beyond the training horizon clamp into the last interval.
        let k = k_raw.min(n);
        for (i, s) in survived.iter_mut().enumerate() {
            if i + 1 < k {
                *s = 1;
            }
        }
        event[k - 1] = 1;
    }
    Ok(SurvivalLabels { survived, event })
}

/// Discrete-time negative log-likelihood over a batch.
///
/// Per record, with `S` the survived-prefix vector and `S̄` the event vector:
/// `L = -Σ_k [ log(max(1 + S_k (p_k - 1), ε)) + log(max(1 - S̄_k p_k, ε)) ]`,
/// averaged over the batch. `s_pred` has shape `[B, N]` and stays on the tape.
pub fn survival_loss<E: Element>(
    s_pred: &Tensor<E>,
    labels: &[SurvivalLabels],
    eps: f64,
) -> Result<Tensor<E>, SurvivalError> {
    let (b, n) = match *s_pred.shape() {
        [b, n] => (b, n),
        [n] => (1, n),
        _ => {
            return Err(SurvivalError::PredictionLength {
                expected: labels.first().map(|l| l.survived.len()).unwrap_or(0),
                got: s_pred.numel(),
            })
        }
    };
    if labels.len() != b || labels.iter().any(|l| l.survived.len() != n) {
        return Err(SurvivalError::PredictionLength {
            expected: labels.len() * labels.first().map(|l| l.survived.len()).unwrap_or(0),
            got: b * n,
        });
    }
    for (i, &v) in s_pred.data().iter().enumerate() {
        let v = v.as_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(SurvivalError::OutOfRangePrediction { index: i, value: v });
        }
    }
    let mut s = Vec::with_capacity(b * n);
    let mut one_minus_s = Vec::with_capacity(b * n);
    let mut sbar = Vec::with_capacity(b * n);
    for l in labels {
        for k in 0..n {
            s.push(E::of_f64(l.survived[k] as f64));
            one_minus_s.push(E::of_f64(1.0 - l.survived[k] as f64));
            sbar.push(E::of_f64(l.event[k] as f64));
        }
    }
    let shape = s_pred.shape().to_vec();
    let s = Tensor::from_data(&shape, s, false);
    let one_minus_s = Tensor::from_data(&shape, one_minus_s, false);
    let sbar = Tensor::from_data(&shape, sbar, false);
    let e = E::of_f64(eps);

    // 1 + S (p - 1) == S p + (1 - S)
    let term1 = s
        .mul(s_pred)
        .unwrap()
        .add(&one_minus_s)
        .unwrap()
        .clamp_min(e)
        .log();
    // 1 - S̄ p
    let term2 = sbar
        .mul(s_pred)
        .unwrap()
        .neg()
        .add_scalar(E::one())
        .clamp_min(e)
        .log();
    let total = term1.add(&term2).unwrap().sum();
    Ok(total.mul_scalar(E::of_f64(-1.0 / b as f64)))
}

/// Expected RFS decoded from conditional survival probabilities:
/// `Σ_k (Π_{i<=k} p_i) T_k`. Higher means longer predicted survival.
pub fn predict_rfs(s_pred: &[f64], scheme: &IntervalScheme) -> f64 {
    let durations = scheme.durations();
    debug_assert_eq!(s_pred.len(), durations.len());
    let mut cum = 1.0;
    let mut rfs = 0.0;
    for (p, t) in s_pred.iter().zip(durations) {
        cum *= p;
        rfs += cum * t;
    }
    rfs
}

/// Harrell's concordance index. `scores` follow the RFS convention: higher
/// score predicts longer survival. A pair is comparable when the two times
/// differ and the smaller time belongs to an uncensored record; tied scores
/// count one half.
pub fn concordance_index(
    scores: &[f64],
    records: &[SurvivalRecord],
) -> Result<f64, SurvivalError> {
    assert_eq!(scores.len(), records.len());
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].time_days.partial_cmp(&records[b].time_days).unwrap());

    let mut comparable = 0u64;
    let mut concordant = 0u64;
    let mut tied = 0u64;
    for (pos, &i) in order.iter().enumerate() {
        if records[i].censored {
            continue;
        }
        let ti = records[i].time_days;
        for &j in &order[pos + 1..] {
            if records[j].time_days == ti {
                continue;
            }
            comparable += 1;
            if scores[i] == scores[j] {
                tied += 1;
            } else if scores[i] < scores[j] {
                concordant += 1;
            }
        }
    }
    if comparable == 0 {
        return Err(SurvivalError::NoComparablePairs);
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct term-by-term reference for the loss, independent of the tape.
    pub(crate) fn survival_loss_reference(
        s_pred: &[f64],
        labels: &SurvivalLabels,
        eps: f64,
    ) -> f64 {
        let mut total = 0.0;
        for k in 0..s_pred.len() {
            let s = labels.survived[k] as f64;
            let sbar = labels.event[k] as f64;
            total += (1.0 + s * (s_pred[k] - 1.0)).max(eps).ln();
            total += (1.0 - sbar * s_pred[k]).max(eps).ln();
        }
        -total
    }

    fn random_records(rng: &mut ChaCha8Rng, n: usize) -> Vec<SurvivalRecord> {
        (0..n)
            .map(|_| SurvivalRecord {
                time_days: rng.gen_range(1.0..2000.0),
                censored: rng.gen_bool(0.4),
            })
            .collect()
    }

    #[test]
    fn intervals_uniform_deciles() {
        let times: Vec<f64> = (1..=10).map(|t| t as f64).collect();
        let scheme = build_intervals(&times, 10).unwrap();
        assert_eq!(scheme.edges.len(), 11);
        assert_eq!(scheme.edges[0], 0.0);
        // Each interval holds exactly one sample.
        let mut counts = vec![0usize; 10];
        for &t in &times {
            counts[scheme.interval_of(t) - 1] += 1;
        }
        assert!(counts.iter().all(|&c| c == 1), "{:?}", counts);
    }

    #[test]
    fn intervals_all_equal_times_error() {
        let times = vec![5.0; 20];
        assert!(matches!(
            build_intervals(&times, 10),
            Err(SurvivalError::TooFewDistinctTimes { .. })
        ));
    }

    #[test]
    fn intervals_balanced_counts_on_random_times() {
        // 386 mirrors the training-set size the defaults are tuned for.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let times: Vec<f64> = (0..386).map(|_| rng.gen_range(10.0..3000.0)).collect();
        let scheme = build_intervals(&times, 10).unwrap();
        // Brute-force counting oracle.
        let mut counts = vec![0usize; 10];
        for &t in &times {
            let mut k = 0;
            while k < 10 && t > scheme.edges[k + 1] {
                k += 1;
            }
            counts[k.min(9)] += 1;
        }
        let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(mx - mn <= 1, "uneven counts {:?}", counts);
    }

    #[test]
    fn labels_event_interval_four_of_ten() {
        let times: Vec<f64> = (1..=10).map(|t| t as f64 * 10.0).collect();
        let scheme = build_intervals(&times, 10).unwrap();
        // t = 35 lies in interval 4 ((30, 40]).
        let labels = make_labels(&SurvivalRecord::observed(35.0), &scheme).unwrap();
        assert_eq!(labels.survived, vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(labels.event, vec![0, 0, 0, 1, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn labels_censored_beyond_horizon() {
        let times: Vec<f64> = (1..=10).map(|t| t as f64 * 10.0).collect();
        let scheme = build_intervals(&times, 10).unwrap();
        let labels = make_labels(&SurvivalRecord::censored(250.0), &scheme).unwrap();
        assert_eq!(labels.survived, vec![1; 10]);
        assert_eq!(labels.event, vec![0; 10]);
    }

    #[test]
    fn labels_invariants_hold_on_random_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let times: Vec<f64> = (0..200).map(|_| rng.gen_range(1.0..1500.0)).collect();
        let scheme = build_intervals(&times, 10).unwrap();
        for _ in 0..100 {
            let rec = SurvivalRecord {
                time_days: rng.gen_range(0.5..2500.0),
                censored: rng.gen_bool(0.5),
            };
            let l = make_labels(&rec, &scheme).unwrap();
            // S is a prefix of ones.
            let first_zero = l.survived.iter().position(|&s| s == 0).unwrap_or(10);
            assert!(l.survived[first_zero..].iter().all(|&s| s == 0));
            // S̄ has at most one 1, none when censored.
            let ones: usize = l.event.iter().map(|&e| e as usize).sum();
            assert!(ones <= 1);
            if rec.censored {
                assert_eq!(ones, 0);
            } else {
                assert_eq!(ones, 1);
                let k = l.event.iter().position(|&e| e == 1).unwrap();
                assert!(l.survived[..k].iter().all(|&s| s == 1));
                assert_eq!(l.survived[k], 0);
            }
        }
    }

    #[test]
    fn labels_roundtrip_event_interval_contains_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let times: Vec<f64> = (0..200).map(|_| rng.gen_range(1.0..1500.0)).collect();
        let scheme = build_intervals(&times, 10).unwrap();
        for _ in 0..200 {
            let t = rng.gen_range(0.5..1400.0);
            let l = make_labels(&SurvivalRecord::observed(t), &scheme).unwrap();
            let k = l.event.iter().position(|&e| e == 1).unwrap();
            assert!(scheme.edges[k] < t && t <= scheme.edges[k + 1]);
        }
    }

    #[test]
    fn loss_perfect_censored_prediction_tends_to_zero() {
        let labels = SurvivalLabels {
            survived: vec![1; 10],
            event: vec![0; 10],
        };
        for delta in [1e-3, 1e-5, 1e-7] {
            let pred = Tensor::<f64>::from_data(&[10], vec![1.0 - delta; 10], false);
            let loss = survival_loss(&pred, &[labels.clone()], 1e-7).unwrap().item();
            assert!(loss < 10.0 * delta * 2.0 + 1e-9, "delta {} loss {}", delta, loss);
        }
    }

    #[test]
    fn loss_perfect_uncensored_prediction_is_zero() {
        let labels = SurvivalLabels {
            survived: vec![1, 1, 1, 0, 0, 0, 0, 0, 0, 0],
            event: vec![0, 0, 0, 1, 0, 0, 0, 0, 0, 0],
        };
        let mut pred = vec![1.0; 10];
        pred[3] = 0.0;
        let pred = Tensor::<f64>::from_data(&[10], pred, false);
        let loss = survival_loss(&pred, &[labels], 1e-7).unwrap().item();
        assert!(loss.abs() < 1e-12, "loss {}", loss);
    }

    #[test]
    fn loss_matches_reference_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = 10;
            let survived_len = rng.gen_range(0..=n);
            let censored = rng.gen_bool(0.5);
            let mut survived = vec![0u8; n];
            let mut event = vec![0u8; n];
            for s in survived.iter_mut().take(survived_len) {
                *s = 1;
            }
            if !censored && survived_len < n {
                event[survived_len] = 1;
            }
            let labels = SurvivalLabels { survived, event };
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.001..0.999)).collect();
            let want = survival_loss_reference(&pred, &labels, 1e-7);
            let got = survival_loss(
                &Tensor::<f64>::from_data(&[n], pred, false),
                &[labels],
                1e-7,
            )
            .unwrap()
            .item();
            assert!((want - got).abs() < 1e-6, "{} vs {}", got, want);
        }
    }

    #[test]
    fn loss_rejects_out_of_range() {
        let labels = SurvivalLabels {
            survived: vec![1, 0],
            event: vec![0, 1],
        };
        let pred = Tensor::<f64>::from_data(&[2], vec![0.5, 1.5], false);
        assert!(matches!(
            survival_loss(&pred, &[labels], 1e-7),
            Err(SurvivalError::OutOfRangePrediction { index: 1, .. })
        ));
    }

    #[test]
    fn rfs_all_ones_gives_full_horizon() {
        let scheme = IntervalScheme {
            edges: vec![0.0, 10.0, 30.0, 60.0],
        };
        let rfs = predict_rfs(&[1.0, 1.0, 1.0], &scheme);
        assert!((rfs - 60.0).abs() < 1e-12);
    }

    #[test]
    fn rfs_truncates_after_zero() {
        let scheme = IntervalScheme {
            edges: vec![0.0, 10.0, 30.0, 60.0],
        };
        let rfs = predict_rfs(&[1.0, 0.0, 0.7], &scheme);
        assert!((rfs - 10.0).abs() < 1e-12);
    }

    #[test]
    fn rfs_matches_cumprod_reference_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let scheme = build_intervals(
            &(0..50).map(|_| rng.gen_range(1.0..100.0)).collect::<Vec<_>>(),
            10,
        )
        .unwrap();
        let durations = scheme.durations();
        for _ in 0..50 {
            let pred: Vec<f64> = (0..10).map(|_| rng.gen_range(0.01..0.99)).collect();
            // Reference: explicit cumulative products.
            let mut want = 0.0;
            for k in 0..10 {
                let prod: f64 = pred[..=k].iter().product();
                want += prod * durations[k];
            }
            let got = predict_rfs(&pred, &scheme);
            assert!((want - got).abs() < 1e-6);
            // Monotone in each coordinate.
            for i in 0..10 {
                let mut up = pred.clone();
                up[i] = (up[i] + 0.01).min(0.999);
                assert!(predict_rfs(&up, &scheme) > got);
            }
        }
    }

    #[test]
    fn cindex_perfect_and_inverted() {
        let records: Vec<SurvivalRecord> =
            (1..=20).map(|t| SurvivalRecord::observed(t as f64)).collect();
        let scores: Vec<f64> = (1..=20).map(|t| t as f64).collect();
        assert_eq!(concordance_index(&scores, &records).unwrap(), 1.0);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        assert_eq!(concordance_index(&neg, &records).unwrap(), 0.0);
    }

    #[test]
    fn cindex_errors_without_comparable_pairs() {
        let records = vec![
            SurvivalRecord::censored(10.0),
            SurvivalRecord::censored(20.0),
        ];
        assert!(matches!(
            concordance_index(&[1.0, 2.0], &records),
            Err(SurvivalError::NoComparablePairs)
        ));
    }

    #[test]
    fn cindex_matches_bruteforce_enumeration() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let records = random_records(&mut rng, 50);
            let scores: Vec<f64> = (0..50).map(|_| rng.gen_range(-5.0..5.0)).collect();

            // O(n^2) oracle straight from the definition.
            let mut comparable = 0u64;
            let mut num = 0.0f64;
            for i in 0..records.len() {
                for j in 0..records.len() {
                    if i == j {
                        continue;
                    }
                    let (a, b) = (&records[i], &records[j]);
                    if a.time_days < b.time_days && !a.censored {
                        comparable += 1;
                        if scores[i] < scores[j] {
                            num += 1.0;
                        } else if scores[i] == scores[j] {
                            num += 0.5;
                        }
                    }
                }
            }
            let want = num / comparable as f64;
            let got = concordance_index(&scores, &records).unwrap();
            assert_eq!(got, want, "seed {}", seed);
        }
    }

    #[test]
    fn cindex_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let records = random_records(&mut rng, 40);
        let scores: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let base = concordance_index(&scores, &records).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() + 7.0).collect();
        let same = concordance_index(&warped, &records).unwrap();
        assert_eq!(base, same);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn loss_is_nonnegative(
                pred in proptest::collection::vec(0.001f64..0.999, 10),
                survived_len in 0usize..=10,
                censored in proptest::bool::ANY,
            ) {
                let mut survived = vec![0u8; 10];
                let mut event = vec![0u8; 10];
                for s in survived.iter_mut().take(survived_len) { *s = 1; }
                if !censored && survived_len < 10 { event[survived_len] = 1; }
                let labels = SurvivalLabels { survived, event };
                let loss = survival_loss(
                    &Tensor::<f64>::from_data(&[10], pred, false),
                    &[labels],
                    1e-7,
                ).unwrap().item();
                prop_assert!(loss >= -1e-12);
            }

            #[test]
            fn rfs_bounded_by_horizon(pred in proptest::collection::vec(0.0f64..=1.0, 10)) {
                let scheme = IntervalScheme {
                    edges: (0..=10).map(|i| i as f64 * 13.0).collect(),
                };
                let rfs = predict_rfs(&pred, &scheme);
                prop_assert!(rfs >= 0.0 && rfs <= 130.0 + 1e-9);
            }
        }
    }
}
