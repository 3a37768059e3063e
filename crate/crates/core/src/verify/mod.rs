//! Public verification kernels: coincidence histogramming, CAR gating,
//! chi-square goodness-of-fit checks, and the NIST SP 800-22 subset.
//!
//! Everything here is a pure function of the revealed data, so any
//! participant can recompute a verdict from the public transcript.

pub mod nist;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{BinSampler, PumpShape};
use crate::special::gamma_q;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Parameters the verification kernels need from the public session
/// agreement.
#[derive(Debug, Clone, Copy)]
pub struct VerifyParams {
    pub car_threshold: f64,
    pub gof_alpha: f64,
    pub pump_shape: PumpShape,
    pub bins_per_period: u32,
    /// Accidental-estimation window: offsets ±1..=max_offset periods.
    pub max_offset: u32,
    /// In-window coincidence tolerance in bins (jitter-split pairs).
    pub window_bins: u32,
}

/// Counts of equal-bin matches per relative pulse-index offset.
///
/// `counts[k]` holds the matches at offset `k as i64 - max_offset as i64`;
/// offset 0 is the true-coincidence peak, every other offset estimates the
/// accidental-coincidence level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoincidenceHistogram {
    pub max_offset: u32,
    pub counts: Vec<u64>,
}

impl CoincidenceHistogram {
    pub fn offset_count(&self, offset: i64) -> u64 {
        let idx = offset + self.max_offset as i64;
        self.counts[idx as usize]
    }

    /// True-coincidence peak (offset 0).
    pub fn peak(&self) -> u64 {
        self.offset_count(0)
    }

    /// Mean count over the non-zero offsets.
    pub fn mean_accidental(&self) -> f64 {
        let n = self.counts.len() - 1;
        if n == 0 {
            return 0.0;
        }
        let sum: u64 = self.counts.iter().sum::<u64>() - self.peak();
        sum as f64 / n as f64
    }

    /// Rows of `offset,count` CSV.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "offset,count")?;
        for (k, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{}", k as i64 - self.max_offset as i64, c)?;
        }
        Ok(())
    }
}

/// Count equal-bin matches between two index-sorted reveals at every pulse
/// offset in `[-max_offset, +max_offset]`: entry `d` counts pairs where the
/// second list detected at `index + d` with the same bin as the first at
/// `index`.
pub fn coincidence_histogram(
    indices_a: &[u64],
    bins_a: &[u32],
    indices_b: &[u64],
    bins_b: &[u32],
    max_offset: u32,
) -> CoincidenceHistogram {
    assert_eq!(indices_a.len(), bins_a.len());
    assert_eq!(indices_b.len(), bins_b.len());
    let span = 2 * max_offset as usize + 1;
    let mut counts = vec![0u64; span];
    for (slot, count) in counts.iter_mut().enumerate() {
        let d = slot as i64 - max_offset as i64;
        let mut i = 0;
        let mut j = 0;
        let mut matches = 0u64;
        while i < indices_a.len() && j < indices_b.len() {
            // Compare index_a + d with index_b without underflow.
            let lhs = indices_a[i] as i128 + d as i128;
            let rhs = indices_b[j] as i128;
            match lhs.cmp(&rhs) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    if bins_a[i] == bins_b[j] {
                        matches += 1;
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
        *count = matches;
    }
    CoincidenceHistogram { max_offset, counts }
}

/// Coincidence-to-accidental ratio: the offset-0 peak divided by the mean
/// non-zero-offset count. No coincidences at all is 0; coincidences with a
/// clean background is the +infinity sentinel.
pub fn compute_car(histogram: &CoincidenceHistogram) -> f64 {
    assert!(histogram.counts.len() >= 3, "need at least offsets -1, 0, +1");
    let peak = histogram.peak();
    if peak == 0 {
        return 0.0;
    }
    let mean = histogram.mean_accidental();
    if mean == 0.0 {
        f64::INFINITY
    } else {
        peak as f64 / mean
    }
}

/// Result of a chi-square goodness-of-fit comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofReport {
    pub statistic: f64,
    pub dof: u64,
    pub p_value: f64,
    pub passed: bool,
}

/// Pearson chi-square test of observed counts against an expected pdf.
///
/// Adjacent categories are merged until each expected count reaches 5
/// (Cochran's rule); the tail remainder folds into the last category. The
/// p-value is the regularized upper incomplete gamma function.
pub fn chi_square_gof(
    observed: &[u64],
    expected_pdf: &[f64],
    alpha: f64,
) -> Result<GofReport, StatsError> {
    if observed.len() != expected_pdf.len() {
        return Err(StatsError::InvalidInput(format!(
            "observed has {} categories, expected_pdf has {}",
            observed.len(),
            expected_pdf.len()
        )));
    }
    if observed.len() < 2 {
        return Err(StatsError::InvalidInput("need at least 2 categories".into()));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(StatsError::InvalidInput(format!("alpha {alpha} outside (0, 1)")));
    }
    if expected_pdf.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(StatsError::InvalidInput("expected_pdf entries must be >= 0".into()));
    }
    let total: u64 = observed.iter().sum();
    if total == 0 {
        return Err(StatsError::InvalidInput("all observed counts are zero".into()));
    }
    let mass: f64 = expected_pdf.iter().sum();
    if mass <= 0.0 {
        return Err(StatsError::InvalidInput("expected_pdf has no mass".into()));
    }

    // Merge forward until each category's expected count is >= 5.
    let mut merged: Vec<(f64, f64)> = Vec::new(); // (observed, expected)
    let mut acc_obs = 0.0;
    let mut acc_exp = 0.0;
    for (&o, &p) in observed.iter().zip(expected_pdf) {
        acc_obs += o as f64;
        acc_exp += p / mass * total as f64;
        if acc_exp >= 5.0 {
            merged.push((acc_obs, acc_exp));
            acc_obs = 0.0;
            acc_exp = 0.0;
        }
    }
    if acc_exp > 0.0 || acc_obs > 0.0 {
        if let Some(last) = merged.last_mut() {
            last.0 += acc_obs;
            last.1 += acc_exp;
        }
    }
    if merged.len() < 2 {
        return Err(StatsError::InvalidInput(format!(
            "too few samples ({total}) to form 2 categories with expected counts >= 5"
        )));
    }

    let statistic: f64 = merged
        .iter()
        .map(|(o, e)| {
            let d = o - e;
            d * d / e
        })
        .sum();
    let dof = (merged.len() - 1) as u64;
    let p_value = gamma_q(dof as f64 / 2.0, statistic / 2.0);
    Ok(GofReport { statistic, dof, p_value, passed: p_value >= alpha })
}

mod car_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    // JSON has no infinity literal, so the sentinel goes through as "inf".
    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            "inf".serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad car value '{t}'"))),
        }
    }
}

/// Per channel-pair verification outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairVerdict {
    /// Participant pair (i, j) with i < j.
    pub pair: (usize, usize),
    /// Exact (index, bin) matches at offset 0.
    pub coincidences: u64,
    /// Index matches with bins within ±window_bins (jitter tolerance).
    pub window_coincidences: u64,
    /// Mean equal-bin count per non-zero offset.
    pub accidentals: f64,
    /// coincidences / accidentals; "inf" when the background is empty.
    #[serde(with = "car_serde")]
    pub car: f64,
    /// Index matches with disagreeing bins (beyond the window).
    pub discord: u64,
    pub gof: GofReport,
    pub passed: bool,
}

/// Verify one channel pair: CAR gate plus bin-distribution check of the
/// matched values against the declared pump shape.
pub fn verify_pair(
    pair: (usize, usize),
    indices_a: &[u64],
    bins_a: &[u32],
    indices_b: &[u64],
    bins_b: &[u32],
    params: &VerifyParams,
) -> PairVerdict {
    let histogram =
        coincidence_histogram(indices_a, bins_a, indices_b, bins_b, params.max_offset);
    let car = compute_car(&histogram);

    let mut coincidences = 0u64;
    let mut window = 0u64;
    let mut discord = 0u64;
    let mut matched_bins = vec![0u64; params.bins_per_period as usize];
    let mut i = 0;
    let mut j = 0;
    while i < indices_a.len() && j < indices_b.len() {
        match indices_a[i].cmp(&indices_b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let (ba, bb) = (bins_a[i], bins_b[j]);
                if ba == bb {
                    coincidences += 1;
                    window += 1;
                    matched_bins[ba as usize] += 1;
                } else if ba.abs_diff(bb) <= params.window_bins {
                    window += 1;
                } else {
                    discord += 1;
                }
                i += 1;
                j += 1;
            }
        }
    }

    let gof = match BinSampler::new(&params.pump_shape, params.bins_per_period) {
        Ok(sampler) => chi_square_gof(&matched_bins, sampler.pmf(), params.gof_alpha)
            .unwrap_or(GofReport { statistic: 0.0, dof: 0, p_value: 0.0, passed: false }),
        Err(_) => GofReport { statistic: 0.0, dof: 0, p_value: 0.0, passed: false },
    };

    let passed = car >= params.car_threshold && gof.passed;
    PairVerdict {
        pair,
        coincidences,
        window_coincidences: window,
        accidentals: histogram.mean_accidental(),
        car,
        discord,
        gof,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_round, DetectionRecord, SourceConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn split_records(records: &[DetectionRecord]) -> (Vec<u64>, Vec<u32>) {
        (records.iter().map(|r| r.index).collect(), records.iter().map(|r| r.bin).collect())
    }

    fn test_params() -> VerifyParams {
        VerifyParams {
            car_threshold: 50.0,
            gof_alpha: 0.01,
            pump_shape: PumpShape::Uniform,
            bins_per_period: 400,
            max_offset: 10,
            window_bins: 2,
        }
    }

    #[test]
    fn identical_lists_peak_at_zero_offset() {
        let indices: Vec<u64> = (0..500).map(|i| i * 3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bins: Vec<u32> = (0..500).map(|_| rng.random_range(0..400)).collect();
        let h = coincidence_histogram(&indices, &bins, &indices, &bins, 10);
        assert_eq!(h.peak(), 500);
        for d in 1..=10i64 {
            assert!(h.offset_count(d) < 20);
            assert!(h.offset_count(-d) < 20);
        }
    }

    #[test]
    fn independent_uniform_lists_match_accidental_oracle() {
        // Occupancy p = m / n_pulses per list; equal bins with prob 1/400.
        // E[count per offset] ~ n_pulses * p^2 / 400 = m^2 / (400 n_pulses).
        let n_pulses = 100_000u64;
        let m = 20_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut make = |rng: &mut ChaCha8Rng| {
            let mut idx: Vec<u64> = Vec::with_capacity(m);
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < m {
                seen.insert(rng.random_range(0..n_pulses));
            }
            idx.extend(seen.iter());
            let bins: Vec<u32> = (0..m).map(|_| rng.random_range(0..400)).collect();
            (idx, bins)
        };
        let (ia, ba) = make(&mut rng);
        let (ib, bb) = make(&mut rng);
        let h = coincidence_histogram(&ia, &ba, &ib, &bb, 10);
        let expected = (m as f64).powi(2) / (400.0 * n_pulses as f64);
        let sigma = expected.sqrt();
        for (k, &c) in h.counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() <= 5.0 * sigma,
                "offset {} count {} vs expected {:.1}",
                k as i64 - 10,
                c,
                expected
            );
        }
    }

    #[test]
    fn car_arithmetic_examples() {
        let mut counts = vec![10u64; 21];
        counts[10] = 500;
        let h = CoincidenceHistogram { max_offset: 10, counts };
        assert!((compute_car(&h) - 50.0).abs() < 1e-12);

        let flat = CoincidenceHistogram { max_offset: 10, counts: vec![7; 21] };
        assert!((compute_car(&flat) - 1.0).abs() < 1e-12);

        let mut clean = vec![0u64; 21];
        clean[10] = 42;
        let h = CoincidenceHistogram { max_offset: 10, counts: clean };
        assert!(compute_car(&h).is_infinite());
        assert!(compute_car(&h) >= 1e9);

        let empty = CoincidenceHistogram { max_offset: 10, counts: vec![0; 21] };
        assert_eq!(compute_car(&empty), 0.0);
    }

    #[test]
    fn simulated_round_passes_car_gate() {
        let cfg = SourceConfig::defaults(4, 20_000, 31);
        let records = generate_round(&cfg).unwrap();
        let params = test_params();
        for i in 0..4 {
            for j in (i + 1)..4 {
                let (ia, ba) = split_records(&records[i]);
                let (ib, bb) = split_records(&records[j]);
                let verdict = verify_pair((i, j), &ia, &ba, &ib, &bb, &params);
                assert!(
                    verdict.car >= params.car_threshold,
                    "pair ({i},{j}) car {}",
                    verdict.car
                );
                assert!(verdict.passed, "pair ({i},{j}) {verdict:?}");
                assert!(verdict.window_coincidences >= verdict.coincidences);
            }
        }
    }

    #[test]
    fn fabricated_reveal_fails_car_gate() {
        let cfg = SourceConfig::defaults(2, 20_000, 37);
        let records = generate_round(&cfg).unwrap();
        let (ia, ba) = split_records(&records[0]);
        // Fabricate a same-sized reveal, independent of the source.
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let m = records[1].len();
        let mut idx = std::collections::BTreeSet::new();
        while idx.len() < m {
            idx.insert(rng.random_range(0..cfg.n_pulses));
        }
        let ib: Vec<u64> = idx.into_iter().collect();
        let bb: Vec<u32> = (0..m).map(|_| rng.random_range(0..400)).collect();
        let verdict = verify_pair((0, 1), &ia, &ba, &ib, &bb, &test_params());
        assert!(verdict.car < 5.0, "fabricated data showed car {}", verdict.car);
        assert!(!verdict.passed);
    }

    #[test]
    fn gof_perfect_fit_is_p_one() {
        let observed = vec![50u64; 8];
        let expected = vec![0.125f64; 8];
        let r = chi_square_gof(&observed, &expected, 0.01).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
        assert!(r.passed);
        assert_eq!(r.dof, 7);
    }

    #[test]
    fn gof_uniform_draws_against_uniform_pass_rate() {
        let expected = vec![1.0 / 400.0; 400];
        let mut passes = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut observed = vec![0u64; 400];
            for _ in 0..100_000 {
                observed[rng.random_range(0..400usize)] += 1;
            }
            if chi_square_gof(&observed, &expected, 0.01).unwrap().passed {
                passes += 1;
            }
        }
        assert!(passes >= 98, "only {passes}/100 uniform trials passed");
    }

    #[test]
    fn gof_rejects_wrong_shape() {
        let sampler =
            BinSampler::new(&PumpShape::Gaussian { mean_bin: 200.0, sigma_bins: 50.0 }, 400)
                .unwrap();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut observed = vec![0u64; 400];
            for _ in 0..100_000 {
                observed[sampler.sample(&mut rng) as usize] += 1;
            }
            let uniform = vec![1.0 / 400.0; 400];
            let r = chi_square_gof(&observed, &uniform, 0.01).unwrap();
            assert!(r.p_value < 0.01, "gaussian draws passed against uniform: {r:?}");
        }
    }

    #[test]
    fn gof_invalid_inputs() {
        assert!(chi_square_gof(&[0, 0, 0], &[0.3, 0.3, 0.4], 0.01).is_err());
        assert!(chi_square_gof(&[5, 5], &[0.5, 0.4, 0.1], 0.01).is_err());
        assert!(chi_square_gof(&[3, 1], &[0.5, 0.5], 0.01).is_err());
        assert!(chi_square_gof(&[50, 50], &[0.5, 0.5], 1.5).is_err());
    }

    #[test]
    fn gof_p_values_uniform_under_null() {
        // Kolmogorov-Smirnov sanity check on the p-value distribution.
        let expected = vec![1.0 / 256.0; 256];
        let mut p_values: Vec<f64> = (0..1000u64)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(777));
                let mut observed = vec![0u64; 256];
                for _ in 0..5120 {
                    observed[rng.random_range(0..256usize)] += 1;
                }
                chi_square_gof(&observed, &expected, 0.01).unwrap().p_value
            })
            .collect();
        p_values.sort_by(f64::total_cmp);
        let n = p_values.len() as f64;
        let mut d_stat = 0.0f64;
        for (i, p) in p_values.iter().enumerate() {
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            d_stat = d_stat.max((p - lo).abs()).max((hi - p).abs());
        }
        // Critical value at alpha = 0.001: 1.9495 / sqrt(n).
        assert!(d_stat <= 1.9495 / n.sqrt(), "KS statistic {d_stat}");
    }

    #[test]
    fn car_decreases_with_dark_rate() {
        let mut mean_cars = Vec::new();
        for dark in [0.001, 0.01, 0.1, 1.0] {
            let mut sum = 0.0;
            for seed in 0..20u64 {
                let mut cfg = SourceConfig::defaults(2, 20_000, 9000 + seed);
                cfg.dark_rate_per_node = vec![dark; 2];
                let records = generate_round(&cfg).unwrap();
                let (ia, ba) = split_records(&records[0]);
                let (ib, bb) = split_records(&records[1]);
                let h = coincidence_histogram(&ia, &ba, &ib, &bb, 10);
                let car = compute_car(&h);
                assert!(car.is_finite(), "degenerate car at dark {dark}");
                sum += car;
            }
            mean_cars.push(sum / 20.0);
        }
        for w in mean_cars.windows(2) {
            assert!(w[1] < w[0], "mean CAR not decreasing: {mean_cars:?}");
        }
    }

    #[test]
    fn histogram_csv_output() {
        let h = CoincidenceHistogram { max_offset: 2, counts: vec![1, 2, 30, 4, 5] };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "offset,count\n-2,1\n-1,2\n0,30\n1,4\n2,5\n");
    }

    #[test]
    fn verdict_serde_handles_infinite_car() {
        let v = PairVerdict {
            pair: (0, 1),
            coincidences: 10,
            window_coincidences: 11,
            accidentals: 0.0,
            car: f64::INFINITY,
            discord: 0,
            gof: GofReport { statistic: 1.0, dof: 3, p_value: 0.8, passed: true },
            passed: true,
        };
        let json = serde_json::to_string(&v).unwrap();
        assert!(json.contains("\"car\":\"inf\""));
        let back: PairVerdict = serde_json::from_str(&json).unwrap();
        assert!(back.car.is_infinite());
        assert_eq!(back, v);
    }
}
