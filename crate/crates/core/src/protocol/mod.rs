//! The five-phase consensus round as an explicit state machine.
//!
//! A [`Session`] walks `RevealClassical -> QuantumMeasure -> QuantumReveal
//! -> Verify -> Output` and never backwards. Classical lists close before
//! any quantum value exists, which is what neutralizes the last-revealer
//! problem: by the time measurement results are public, the index
//! selection R^c is already fixed.
//!
//! All set algebra is keyed by pulse index, so reveal submission order
//! within a phase never changes the outcome.

pub mod transcript;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{BinSampler, DetectionRecord, PumpShape};
use crate::verify::{verify_pair, PairVerdict, VerifyParams};

pub type ParticipantId = usize;

/// Display label for a participant: A, B, C, ... then P26, P27, ...
pub fn participant_label(id: ParticipantId) -> String {
    if id < 26 {
        char::from(b'A' + id as u8).to_string()
    } else {
        format!("P{id}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFn {
    /// Sum of selected values modulo the output range.
    SumMod,
    /// XOR of selected values folded to the range's bit width, then
    /// reduced modulo the range (bias <= range / value-space, documented).
    XorFold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    RevealClassical,
    QuantumMeasure,
    QuantumReveal,
    Verify,
    Output,
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid session parameters: {0}")]
    InvalidParams(String),
    #[error("{operation} not allowed in phase {found:?}")]
    PhaseViolation { operation: &'static str, found: Phase },
    #[error("participant {0} already revealed in this phase")]
    DuplicateReveal(ParticipantId),
    #[error("malformed reveal from participant {participant}: {reason}")]
    MalformedReveal { participant: ParticipantId, reason: String },
    #[error("verification has not been run for this round")]
    VerificationPending,
    #[error("verification failed for pairs {0:?}")]
    VerificationFailed(Vec<(ParticipantId, ParticipantId)>),
    #[error("no index survived the classical-quantum intersection; rerun with larger m or longer collection")]
    EmptySelection,
    #[error("round selected {got} values but the output needs {needed}")]
    InsufficientEntropy { needed: usize, got: usize },
}

/// The public session agreement: everything every participant must know
/// before the round starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionParams {
    /// Participant count N.
    pub n: usize,
    /// Output length l.
    pub l: usize,
    /// Inclusive output bounds B.
    #[serde(with = "transcript::json_u64::scalar")]
    pub b_lo: u64,
    #[serde(with = "transcript::json_u64::scalar")]
    pub b_hi: u64,
    /// Classical list length per participant.
    pub m: usize,
    /// Optional selection weights; when present the output is a
    /// participant index drawn through the inverse CDF of these weights.
    pub weights: Option<Vec<f64>>,
    pub agg_fn: AggFn,
    pub car_threshold: f64,
    pub gof_alpha: f64,
    /// Reference periods per round; classical values and pulse indices
    /// share this domain `[0, n_pulses)`.
    #[serde(with = "transcript::json_u64::scalar")]
    pub n_pulses: u64,
    pub bins_per_period: u32,
    /// Declared pump shape every pair's matched bins are tested against.
    pub pump_shape: PumpShape,
    /// Accidental-estimation window (offsets ±1..=max_offset).
    pub max_offset: u32,
    /// Bin tolerance for in-window coincidence counting.
    pub window_bins: u32,
}

impl SessionParams {
    /// Number of distinct channel pairs N(N-1)/2.
    pub fn p_num(&self) -> usize {
        self.n * (self.n - 1) / 2
    }

    /// Size of the output range.
    pub fn range_size(&self) -> u64 {
        self.b_hi - self.b_lo + 1
    }

    pub fn verify_params(&self) -> VerifyParams {
        VerifyParams {
            car_threshold: self.car_threshold,
            gof_alpha: self.gof_alpha,
            pump_shape: self.pump_shape,
            bins_per_period: self.bins_per_period,
            max_offset: self.max_offset,
            window_bins: self.window_bins,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let err = |msg: String| Err(ProtocolError::InvalidParams(msg));
        if self.n < 2 {
            return err(format!("need at least 2 participants, got {}", self.n));
        }
        if self.l < 1 || self.m < self.l {
            return err(format!("need m >= l >= 1, got m={}, l={}", self.m, self.l));
        }
        if self.b_hi < self.b_lo {
            return err(format!("empty output range [{}, {}]", self.b_lo, self.b_hi));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.n {
                return err(format!("{} weights for {} participants", w.len(), self.n));
            }
            if w.iter().any(|x| *x < 0.0 || !x.is_finite()) {
                return err("weights must be finite and >= 0".into());
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return err(format!("weights sum to {sum}, expected 1"));
            }
            // Winner outputs are participant indices, which must fit B.
            if self.b_lo != 0 || self.b_hi < (self.n - 1) as u64 {
                return err(format!(
                    "weighted selection outputs participant indices; B=[{}, {}] cannot hold 0..{}",
                    self.b_lo,
                    self.b_hi,
                    self.n - 1
                ));
            }
        }
        if !(self.car_threshold > 0.0) || !self.car_threshold.is_finite() {
            return err(format!("car_threshold must be positive, got {}", self.car_threshold));
        }
        if !(0.0..1.0).contains(&self.gof_alpha) || self.gof_alpha <= 0.0 {
            return err(format!("gof_alpha must be in (0, 1), got {}", self.gof_alpha));
        }
        if self.n_pulses == 0 {
            return err("n_pulses must be >= 1".into());
        }
        if self.bins_per_period < 2 {
            return err("bins_per_period must be >= 2".into());
        }
        if self.max_offset < 1 {
            return err("max_offset must be >= 1".into());
        }
        if BinSampler::new(&self.pump_shape, self.bins_per_period).is_err() {
            return err(format!("invalid pump shape {:?}", self.pump_shape));
        }
        Ok(())
    }
}

/// A participant's published classical list R^c_i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalReveal {
    pub participant: ParticipantId,
    #[serde(with = "transcript::json_u64::vec")]
    pub values: Vec<u64>,
    pub weight: Option<f64>,
}

/// A participant's published quantum results (I_i, R^q_i), index-sorted
/// and index-unique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantumReveal {
    pub participant: ParticipantId,
    #[serde(with = "transcript::json_u64::vec")]
    pub indices: Vec<u64>,
    pub bins: Vec<u32>,
}

impl QuantumReveal {
    pub fn from_records(
        participant: ParticipantId,
        records: &[DetectionRecord],
    ) -> Result<Self, String> {
        let mut indices = Vec::with_capacity(records.len());
        let mut bins = Vec::with_capacity(records.len());
        for r in records {
            if r.node as usize != participant {
                return Err(format!(
                    "record for node {} in reveal of participant {participant}",
                    r.node
                ));
            }
            if let Some(&last) = indices.last() {
                if r.index <= last {
                    return Err("indices must be strictly ascending".into());
                }
            }
            indices.push(r.index);
            bins.push(r.bin);
        }
        Ok(QuantumReveal { participant, indices, bins })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Result of intersecting one channel pair's reveals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIntersection {
    /// I_ij: indices present in both reveals with agreeing bins.
    pub indices: Vec<u64>,
    /// R^q_ij: the agreed bin values.
    pub bins: Vec<u32>,
    /// Indices present in both reveals with disagreeing bins.
    pub discord: u64,
}

/// Intersect two index-sorted reveals: matches are indices present in both
/// lists with equal bins; disagreeing bins are counted and excluded.
pub fn pairwise_intersect(a: &QuantumReveal, b: &QuantumReveal) -> PairIntersection {
    let mut indices = Vec::new();
    let mut bins = Vec::new();
    let mut discord = 0u64;
    let mut i = 0;
    let mut j = 0;
    while i < a.indices.len() && j < b.indices.len() {
        match a.indices[i].cmp(&b.indices[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                if a.bins[i] == b.bins[j] {
                    indices.push(a.indices[i]);
                    bins.push(a.bins[i]);
                } else {
                    discord += 1;
                }
                i += 1;
                j += 1;
            }
        }
    }
    PairIntersection { indices, bins, discord }
}

/// Index-keyed union (I, R^q) of all channel-pair intersections.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergedReveal {
    pub indices: Vec<u64>,
    pub bins: Vec<u32>,
    /// Indices dropped because two pairs disagreed on the bin value.
    pub union_discord: u64,
}

/// Union the pair intersections, keeping one record per index. An index
/// claimed by several pairs must carry the same bin everywhere; conflicts
/// count as discord and are excluded.
pub fn merge_pair_intersections(pairs: &[PairIntersection]) -> MergedReveal {
    let mut by_index: BTreeMap<u64, Option<u32>> = BTreeMap::new();
    for p in pairs {
        for (&idx, &bin) in p.indices.iter().zip(&p.bins) {
            by_index
                .entry(idx)
                .and_modify(|slot| {
                    if *slot != Some(bin) {
                        *slot = None;
                    }
                })
                .or_insert(Some(bin));
        }
    }
    let mut merged = MergedReveal::default();
    for (idx, slot) in by_index {
        match slot {
            Some(bin) => {
                merged.indices.push(idx);
                merged.bins.push(bin);
            }
            None => merged.union_discord += 1,
        }
    }
    merged
}

/// I_final = I ∩ R^c and the bins selected by it, in index order.
pub fn select_final(merged: &MergedReveal, classical: &BTreeSet<u64>) -> (Vec<u64>, Vec<u32>) {
    let mut i_final = Vec::new();
    let mut r_qc = Vec::new();
    for (&idx, &bin) in merged.indices.iter().zip(&merged.bins) {
        if classical.contains(&idx) {
            i_final.push(idx);
            r_qc.push(bin);
        }
    }
    (i_final, r_qc)
}

/// Aggregate the selected values into the final output list R.
///
/// The value list splits into `l` contiguous chunks of near-equal size;
/// each chunk reduces through the agreed function onto `[b_lo, b_hi]`.
/// With weights present, the uniform aggregate maps through the inverse
/// CDF onto a participant index. Pure function of its inputs, so anyone
/// can recompute R from the transcript.
pub fn aggregate_output(params: &SessionParams, r_qc: &[u32]) -> Result<Vec<u64>, ProtocolError> {
    if r_qc.len() < params.l {
        return Err(ProtocolError::InsufficientEntropy { needed: params.l, got: r_qc.len() });
    }
    let range = params.range_size();
    let base = r_qc.len() / params.l;
    let rem = r_qc.len() % params.l;
    let mut output = Vec::with_capacity(params.l);
    let mut start = 0;
    for c in 0..params.l {
        let size = base + usize::from(c < rem);
        let chunk = &r_qc[start..start + size];
        start += size;
        let agg = match params.agg_fn {
            AggFn::SumMod => {
                let sum: u128 = chunk.iter().map(|&v| v as u128).sum();
                (sum % range as u128) as u64
            }
            AggFn::XorFold => {
                let x = chunk.iter().fold(0u64, |acc, &v| acc ^ v as u64);
                xor_fold(x, range) % range
            }
        };
        let value = match &params.weights {
            Some(weights) => winner_from_aggregate(weights, agg, range),
            None => params.b_lo + agg,
        };
        output.push(value);
    }
    Ok(output)
}

/// Fold a 64-bit value down to the range's bit width by XOR-ing slices.
fn xor_fold(mut x: u64, range: u64) -> u64 {
    if range <= 1 {
        return 0;
    }
    let k = 64 - (range - 1).leading_zeros();
    let mask = if k >= 64 { u64::MAX } else { (1u64 << k) - 1 };
    while x > mask {
        x = (x >> k) ^ (x & mask);
    }
    x
}

/// Map a uniform aggregate in [0, range) through the inverse CDF of the
/// weight vector onto a participant index.
fn winner_from_aggregate(weights: &[f64], agg: u64, range: u64) -> u64 {
    let u = agg as f64 / range as f64;
    let mut cum = 0.0;
    for (k, w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return k as u64;
        }
    }
    (weights.len() - 1) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseTransition {
    pub from: Phase,
    pub to: Phase,
}

/// Single-writer state machine for one protocol round.
#[derive(Debug, Clone)]
pub struct Session {
    params: SessionParams,
    phase: Phase,
    classical: BTreeMap<ParticipantId, ClassicalReveal>,
    combined_classical: BTreeSet<u64>,
    quantum: BTreeMap<ParticipantId, QuantumReveal>,
    verdicts: Option<Vec<PairVerdict>>,
    merged: Option<MergedReveal>,
    i_final: Option<Vec<u64>>,
    r_qc: Option<Vec<u32>>,
    output: Option<Vec<u64>>,
    phase_log: Vec<PhaseTransition>,
}

impl Session {
    pub fn new(params: SessionParams) -> Result<Self, ProtocolError> {
        params.validate()?;
        Ok(Session {
            params,
            phase: Phase::RevealClassical,
            classical: BTreeMap::new(),
            combined_classical: BTreeSet::new(),
            quantum: BTreeMap::new(),
            verdicts: None,
            merged: None,
            i_final: None,
            r_qc: None,
            output: None,
            phase_log: Vec::new(),
        })
    }

    pub fn params(&self) -> &SessionParams {
        &self.params
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn phase_log(&self) -> &[PhaseTransition] {
        &self.phase_log
    }

    pub fn classical_reveals(&self) -> &BTreeMap<ParticipantId, ClassicalReveal> {
        &self.classical
    }

    pub fn quantum_reveals(&self) -> &BTreeMap<ParticipantId, QuantumReveal> {
        &self.quantum
    }

    /// R^c as a set, available once the classical phase closed.
    pub fn combined_classical(&self) -> &BTreeSet<u64> {
        &self.combined_classical
    }

    pub fn verdicts(&self) -> Option<&[PairVerdict]> {
        self.verdicts.as_deref()
    }

    pub fn i_final(&self) -> Option<&[u64]> {
        self.i_final.as_deref()
    }

    pub fn r_qc(&self) -> Option<&[u32]> {
        self.r_qc.as_deref()
    }

    pub fn output(&self) -> Option<&[u64]> {
        self.output.as_deref()
    }

    fn advance(&mut self, to: Phase) {
        self.phase_log.push(PhaseTransition { from: self.phase, to });
        self.phase = to;
    }

    fn check_participant(&self, id: ParticipantId) -> Result<(), ProtocolError> {
        if id >= self.params.n {
            return Err(ProtocolError::MalformedReveal {
                participant: id,
                reason: format!("unknown participant (n = {})", self.params.n),
            });
        }
        Ok(())
    }

    /// Record one classical reveal; closing the phase builds R^c and moves
    /// the session to quantum measurement.
    pub fn submit_classical(&mut self, reveal: ClassicalReveal) -> Result<Phase, ProtocolError> {
        if self.phase != Phase::RevealClassical {
            return Err(ProtocolError::PhaseViolation {
                operation: "classical reveal",
                found: self.phase,
            });
        }
        self.check_participant(reveal.participant)?;
        if self.classical.contains_key(&reveal.participant) {
            return Err(ProtocolError::DuplicateReveal(reveal.participant));
        }
        if reveal.values.len() != self.params.m {
            return Err(ProtocolError::MalformedReveal {
                participant: reveal.participant,
                reason: format!(
                    "classical list has {} values, agreed length is {}",
                    reveal.values.len(),
                    self.params.m
                ),
            });
        }
        if let Some(bad) = reveal.values.iter().find(|v| **v >= self.params.n_pulses) {
            return Err(ProtocolError::MalformedReveal {
                participant: reveal.participant,
                reason: format!(
                    "value {bad} outside the index domain [0, {})",
                    self.params.n_pulses
                ),
            });
        }
        match (&self.params.weights, reveal.weight) {
            (Some(w), Some(declared)) => {
                if (w[reveal.participant] - declared).abs() > 1e-12 {
                    return Err(ProtocolError::MalformedReveal {
                        participant: reveal.participant,
                        reason: format!(
                            "declared weight {declared} differs from agreed {}",
                            w[reveal.participant]
                        ),
                    });
                }
            }
            (Some(w), None) => {
                // Tolerated: the agreed weight vector is authoritative.
                let _ = w;
            }
            (None, Some(_)) => {
                return Err(ProtocolError::MalformedReveal {
                    participant: reveal.participant,
                    reason: "weight declared but the session has no weight vector".into(),
                });
            }
            (None, None) => {}
        }
        self.classical.insert(reveal.participant, reveal);
        if self.classical.len() == self.params.n {
            self.combined_classical =
                self.classical.values().flat_map(|r| r.values.iter().copied()).collect();
            self.advance(Phase::QuantumMeasure);
        }
        Ok(self.phase)
    }

    /// Record one quantum reveal; the first reveal moves measurement to
    /// the public reveal phase, the last one to verification.
    pub fn submit_quantum(
        &mut self,
        participant: ParticipantId,
        records: &[DetectionRecord],
    ) -> Result<Phase, ProtocolError> {
        if self.phase != Phase::QuantumMeasure && self.phase != Phase::QuantumReveal {
            return Err(ProtocolError::PhaseViolation {
                operation: "quantum reveal",
                found: self.phase,
            });
        }
        self.check_participant(participant)?;
        if self.quantum.contains_key(&participant) {
            return Err(ProtocolError::DuplicateReveal(participant));
        }
        let reveal = QuantumReveal::from_records(participant, records)
            .map_err(|reason| ProtocolError::MalformedReveal { participant, reason })?;
        if let Some(&last) = reveal.indices.last() {
            if last >= self.params.n_pulses {
                return Err(ProtocolError::MalformedReveal {
                    participant,
                    reason: format!(
                        "index {last} outside the agreed domain [0, {})",
                        self.params.n_pulses
                    ),
                });
            }
        }
        if let Some(bad) = reveal.bins.iter().find(|b| **b >= self.params.bins_per_period) {
            return Err(ProtocolError::MalformedReveal {
                participant,
                reason: format!("bin {bad} outside [0, {})", self.params.bins_per_period),
            });
        }
        if self.phase == Phase::QuantumMeasure {
            self.advance(Phase::QuantumReveal);
        }
        self.quantum.insert(participant, reveal);
        if self.quantum.len() == self.params.n {
            self.advance(Phase::Verify);
        }
        Ok(self.phase)
    }

    /// Run pairwise verification over all P_num channel pairs.
    pub fn run_verification(&mut self) -> Result<&[PairVerdict], ProtocolError> {
        if self.phase != Phase::Verify {
            return Err(ProtocolError::PhaseViolation {
                operation: "verification",
                found: self.phase,
            });
        }
        if self.verdicts.is_none() {
            let vp = self.params.verify_params();
            let mut verdicts = Vec::with_capacity(self.params.p_num());
            for i in 0..self.params.n {
                for j in (i + 1)..self.params.n {
                    let a = &self.quantum[&i];
                    let b = &self.quantum[&j];
                    verdicts.push(verify_pair(
                        (i, j),
                        &a.indices,
                        &a.bins,
                        &b.indices,
                        &b.bins,
                        &vp,
                    ));
                }
            }
            self.verdicts = Some(verdicts);
        }
        Ok(self.verdicts.as_deref().unwrap())
    }

    /// Merge all pair intersections, select I_final = I ∩ R^c, and move to
    /// the output phase. Requires every pair verdict to have passed.
    pub fn consensus2(&mut self) -> Result<(), ProtocolError> {
        if self.phase != Phase::Verify {
            return Err(ProtocolError::PhaseViolation {
                operation: "consensus 2",
                found: self.phase,
            });
        }
        let Some(verdicts) = &self.verdicts else {
            return Err(ProtocolError::VerificationPending);
        };
        let failed: Vec<(usize, usize)> =
            verdicts.iter().filter(|v| !v.passed).map(|v| v.pair).collect();
        if !failed.is_empty() {
            return Err(ProtocolError::VerificationFailed(failed));
        }
        let mut intersections = Vec::with_capacity(self.params.p_num());
        for i in 0..self.params.n {
            for j in (i + 1)..self.params.n {
                intersections.push(pairwise_intersect(&self.quantum[&i], &self.quantum[&j]));
            }
        }
        let merged = merge_pair_intersections(&intersections);
        let (i_final, r_qc) = select_final(&merged, &self.combined_classical);
        if i_final.is_empty() {
            return Err(ProtocolError::EmptySelection);
        }
        self.merged = Some(merged);
        self.i_final = Some(i_final);
        self.r_qc = Some(r_qc);
        self.advance(Phase::Output);
        Ok(())
    }

    /// Compute the output list R from the selected values.
    pub fn compute_output(&mut self) -> Result<&[u64], ProtocolError> {
        if self.phase != Phase::Output {
            return Err(ProtocolError::PhaseViolation {
                operation: "output computation",
                found: self.phase,
            });
        }
        if self.output.is_none() {
            let r_qc = self.r_qc.as_ref().expect("set on entering Output");
            self.output = Some(aggregate_output(&self.params, r_qc)?);
        }
        Ok(self.output.as_deref().unwrap())
    }

    /// Consume the completed session into its public transcript.
    pub fn into_transcript(self) -> Result<transcript::RoundTranscript, ProtocolError> {
        if self.output.is_none() {
            return Err(ProtocolError::PhaseViolation {
                operation: "transcript extraction",
                found: self.phase,
            });
        }
        Ok(transcript::RoundTranscript {
            params: self.params,
            classical: transcript::ClassicalSection {
                reveals: self.classical.into_values().collect(),
                combined: self.combined_classical.into_iter().collect(),
            },
            quantum: self.quantum.into_values().collect(),
            verdicts: self.verdicts.unwrap_or_default(),
            i_final: self.i_final.unwrap_or_default(),
            r_qc: self.r_qc.unwrap_or_default(),
            output: self.output.unwrap_or_default(),
            merged: self.merged.unwrap_or_default(),
            phase_log: self.phase_log,
        })
    }
}
