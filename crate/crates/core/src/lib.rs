//! Decentralized quantum random number consensus at desk scale.
//!
//! The crate simulates an entangled-photon time-bin source feeding N
//! participant nodes, runs the five-phase consensus round over the
//! revealed data, verifies every channel pair publicly (coincidence /
//! accidental ratio plus distribution checks), models dishonest
//! participants, and certifies outputs with a NIST SP 800-22 subset.
//!
//! Modules:
//! - [`sim`]: statistical source simulation and detection records.
//! - [`protocol`]: the five-phase session state machine and transcripts.
//! - [`verify`]: coincidence histograms, CAR, chi-square, NIST subset.
//! - [`adversary`]: dishonest-participant strategies.
//! - [`transport`]: broadcast bus with loopback and TCP transports.
//! - [`experiment`]: seeded multi-round experiment runners.

pub mod adversary;
pub mod experiment;
pub mod protocol;
pub mod seed;
pub mod sim;
pub mod special;
pub mod transport;
pub mod verify;

pub use protocol::{
    aggregate_output, pairwise_intersect, participant_label, AggFn, ClassicalReveal, Phase,
    ProtocolError, QuantumReveal, Session, SessionParams,
};
pub use protocol::transcript::RoundTranscript;
pub use sim::{
    generate_round, quantize, sample_bin, BinSampler, DetectionRecord, PumpShape, SourceConfig,
};
pub use verify::nist::{nist_subset, NistReport};
pub use verify::{chi_square_gof, compute_car, coincidence_histogram, GofReport, PairVerdict};
