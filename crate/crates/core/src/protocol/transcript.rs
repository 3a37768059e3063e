//! The public round transcript: canonical serialization, hashing, and
//! independent recomputation.
//!
//! Canonical form is compact JSON with a fixed field order (params,
//! classical, quantum, verdicts, i_final, r_qc, output). Integers at or
//! above 2^53 serialize as decimal strings so the bytes survive JSON
//! implementations that parse numbers as doubles. The transcript hash is
//! SHA-256 over the canonical bytes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{
    ClassicalReveal, MergedReveal, PhaseTransition, ProtocolError, QuantumReveal, Session,
    SessionParams,
};
use crate::verify::PairVerdict;

/// Serde helpers that keep u64 values exact in JSON: plain numbers below
/// 2^53, decimal strings at or above it.
pub mod json_u64 {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    const SAFE_LIMIT: u64 = 1 << 53;

    struct Exact(u64);

    impl Serialize for Exact {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            if self.0 < SAFE_LIMIT {
                s.serialize_u64(self.0)
            } else {
                s.serialize_str(&self.0.to_string())
            }
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(u64),
        Text(String),
    }

    impl Raw {
        fn value<E: serde::de::Error>(self) -> Result<u64, E> {
            match self {
                Raw::Num(v) => Ok(v),
                Raw::Text(t) => t
                    .parse()
                    .map_err(|_| E::custom(format!("bad integer string '{t}'"))),
            }
        }
    }

    pub mod scalar {
        use super::*;

        pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
            Exact(*v).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
            Raw::deserialize(d)?.value()
        }
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[u64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&Exact(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u64>, D::Error> {
            Vec::<Raw>::deserialize(d)?.into_iter().map(Raw::value).collect()
        }
    }
}

/// Classical part of the transcript: every reveal plus the combined R^c.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalSection {
    pub reveals: Vec<ClassicalReveal>,
    #[serde(with = "json_u64::vec")]
    pub combined: Vec<u64>,
}

/// Complete public record of one protocol round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTranscript {
    pub params: SessionParams,
    pub classical: ClassicalSection,
    pub quantum: Vec<QuantumReveal>,
    pub verdicts: Vec<PairVerdict>,
    #[serde(with = "json_u64::vec")]
    pub i_final: Vec<u64>,
    pub r_qc: Vec<u32>,
    #[serde(with = "json_u64::vec")]
    pub output: Vec<u64>,
    /// Runtime detail, derivable from the reveals; not part of the
    /// canonical form.
    #[serde(skip)]
    pub merged: MergedReveal,
    #[serde(skip)]
    pub phase_log: Vec<PhaseTransition>,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("replay failed: {0}")]
    Replay(#[from] ProtocolError),
    #[error("transcript mismatch: {0}")]
    Mismatch(String),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl RoundTranscript {
    /// Canonical bytes: compact JSON, fixed field order.
    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("transcript serialization cannot fail")
    }

    /// SHA-256 of the canonical bytes, lowercase hex.
    pub fn hash_hex(&self) -> String {
        let digest = Sha256::digest(self.canonical_json());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Recompute the whole round from the raw reveals and compare against
    /// the recorded results. This is the public-verifiability operation:
    /// any participant can replay the transcript and must land on the
    /// same bytes.
    pub fn verify(&self) -> Result<(), TranscriptError> {
        let mut session = Session::new(self.params.clone())?;
        for reveal in &self.classical.reveals {
            session.submit_classical(reveal.clone())?;
        }
        for reveal in &self.quantum {
            let records: Vec<crate::sim::DetectionRecord> = reveal
                .indices
                .iter()
                .zip(&reveal.bins)
                .map(|(&index, &bin)| crate::sim::DetectionRecord {
                    node: reveal.participant as u32,
                    index,
                    bin,
                })
                .collect();
            session.submit_quantum(reveal.participant, &records)?;
        }
        session.run_verification()?;
        session.consensus2()?;
        session.compute_output()?;
        let replayed = session.into_transcript()?;
        if replayed.canonical_json() != self.canonical_json() {
            return Err(TranscriptError::Mismatch(
                "replayed transcript differs from the recorded one".into(),
            ));
        }
        Ok(())
    }
}
