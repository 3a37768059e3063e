//! Statistical simulation of the entangled-pair time-bin source.
//!
//! One simulated round covers `n_pulses` periods of the synchronized
//! reference clock. Per period the source emits at most one photon pair;
//! the pair shares an arrival time drawn from the pump shape, each photon
//! is routed to a node through the splitter tree, survives its channel
//! loss, picks up detector jitter, and is quantized onto the time-bin
//! grid. Dark counts land uniformly. Each node keeps at most one
//! detection per period (the earliest arrival), so per-node record lists
//! are index-sorted and index-unique by construction.
//!
//! Determinism contract: a single `ChaCha8Rng` seeded from
//! `SourceConfig::seed` drives the whole round, and the draw order per
//! period is fixed (pair gate; bin + intra-bin offset; per photon: route,
//! survival, jitter; per node: dark counts). Survival and jitter draws are
//! consumed whether or not the photon is kept, so runs that differ only in
//! `loss_per_node` stay draw-aligned and record sets shrink monotonically
//! as loss grows.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid source configuration: {0}")]
    Config(String),
    #[error("arrival time {arrival_ps} ps outside period [0, {period_ps}) ps")]
    ArrivalOutOfRange { arrival_ps: f64, period_ps: f64 },
    #[error("detection CSV malformed at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Temporal profile of the pump driving the downconversion source, in bin
/// units. `Gaussian { mean_bin, sigma_bins }` is centered on the given bin;
/// `Rayleigh { sigma_bins }` has its continuous mode at `sigma_bins`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PumpShape {
    Uniform,
    Gaussian { mean_bin: f64, sigma_bins: f64 },
    Rayleigh { sigma_bins: f64 },
}

/// Full configuration of one simulated collection round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    pub n_nodes: usize,
    /// Number of reference periods in the round (the index domain).
    pub n_pulses: u64,
    /// Probability that a pair is emitted in a given period.
    pub pair_rate: f64,
    pub pump_shape: PumpShape,
    /// Reference period duration; 10 MHz reference = 100_000 ps.
    pub period_ps: u32,
    /// Time-bin width after quantization.
    pub bin_width_ps: u32,
    /// Per-node probability that a routed photon is lost.
    pub loss_per_node: Vec<f64>,
    /// Std-dev of the per-photon Gaussian timing jitter. The default 40 ps
    /// combines detector (33 ps) and digitizer (20 ps) jitter in quadrature.
    pub jitter_sigma_ps: f64,
    /// Expected dark counts per node per period.
    pub dark_rate_per_node: Vec<f64>,
    /// When set, the two photons of a pair are routed to two distinct
    /// nodes instead of independently. Diagnostic mode used to measure
    /// correlations without same-node losses.
    pub route_distinct: bool,
    pub seed: u64,
}

pub const DEFAULT_PERIOD_PS: u32 = 100_000;
pub const DEFAULT_BIN_WIDTH_PS: u32 = 250;
pub const DEFAULT_JITTER_SIGMA_PS: f64 = 40.0;

impl SourceConfig {
    /// Baseline desk-scale configuration: uniform pump, 10% loss and 0.01
    /// dark counts per period on every node.
    pub fn defaults(n_nodes: usize, n_pulses: u64, seed: u64) -> Self {
        SourceConfig {
            n_nodes,
            n_pulses,
            pair_rate: 0.5,
            pump_shape: PumpShape::Uniform,
            period_ps: DEFAULT_PERIOD_PS,
            bin_width_ps: DEFAULT_BIN_WIDTH_PS,
            loss_per_node: vec![0.1; n_nodes],
            jitter_sigma_ps: DEFAULT_JITTER_SIGMA_PS,
            dark_rate_per_node: vec![0.01; n_nodes],
            route_distinct: false,
            seed,
        }
    }

    pub fn bins_per_period(&self) -> u32 {
        self.period_ps / self.bin_width_ps
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |msg: String| Err(SimError::Config(msg));
        if self.n_nodes < 1 {
            return err("n_nodes must be >= 1".into());
        }
        if self.n_pulses == 0 {
            return err("n_pulses must be >= 1".into());
        }
        if self.bin_width_ps == 0 || self.period_ps == 0 {
            return err("period_ps and bin_width_ps must be positive".into());
        }
        if self.period_ps % self.bin_width_ps != 0 {
            return err(format!(
                "period_ps ({}) must be an integer multiple of bin_width_ps ({})",
                self.period_ps, self.bin_width_ps
            ));
        }
        if self.bins_per_period() < 2 {
            return err("bins_per_period must be >= 2".into());
        }
        if !(0.0..=1.0).contains(&self.pair_rate) {
            return err(format!("pair_rate {} outside [0, 1]", self.pair_rate));
        }
        if self.loss_per_node.len() != self.n_nodes {
            return err(format!(
                "loss_per_node has {} entries for {} nodes",
                self.loss_per_node.len(),
                self.n_nodes
            ));
        }
        if self.dark_rate_per_node.len() != self.n_nodes {
            return err(format!(
                "dark_rate_per_node has {} entries for {} nodes",
                self.dark_rate_per_node.len(),
                self.n_nodes
            ));
        }
        if self.loss_per_node.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return err("loss_per_node entries must be in [0, 1]".into());
        }
        if self.dark_rate_per_node.iter().any(|r| *r < 0.0 || !r.is_finite()) {
            return err("dark_rate_per_node entries must be finite and >= 0".into());
        }
        if self.jitter_sigma_ps < 0.0 || !self.jitter_sigma_ps.is_finite() {
            return err("jitter_sigma_ps must be finite and >= 0".into());
        }
        validate_shape(&self.pump_shape)?;
        Ok(())
    }
}

fn validate_shape(shape: &PumpShape) -> Result<(), SimError> {
    match *shape {
        PumpShape::Uniform => Ok(()),
        PumpShape::Gaussian { mean_bin, sigma_bins } => {
            if sigma_bins <= 0.0 || !sigma_bins.is_finite() || !mean_bin.is_finite() {
                Err(SimError::Config(format!(
                    "gaussian pump needs finite mean and positive sigma, got mean_bin={mean_bin}, sigma_bins={sigma_bins}"
                )))
            } else {
                Ok(())
            }
        }
        PumpShape::Rayleigh { sigma_bins } => {
            if sigma_bins <= 0.0 || !sigma_bins.is_finite() {
                Err(SimError::Config(format!(
                    "rayleigh pump needs positive sigma, got sigma_bins={sigma_bins}"
                )))
            } else {
                Ok(())
            }
        }
    }
}

/// One detected photon: owning node, reference-pulse index, quantized bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub node: u32,
    pub index: u64,
    pub bin: u32,
}

/// Discretized pump-shape distribution over the time bins of one period.
///
/// Gaussian and Rayleigh shapes integrate the continuous density over each
/// bin and renormalize over the period, so the table is exact at any bin
/// width. Sampling is inverse-CDF by binary search.
#[derive(Debug, Clone)]
pub struct BinSampler {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl BinSampler {
    pub fn new(shape: &PumpShape, bins_per_period: u32) -> Result<Self, SimError> {
        if bins_per_period < 2 {
            return Err(SimError::Config("bins_per_period must be >= 2".into()));
        }
        validate_shape(shape)?;
        let n = bins_per_period as usize;
        let mut pmf = vec![0.0f64; n];
        match *shape {
            PumpShape::Uniform => {
                pmf.fill(1.0 / n as f64);
            }
            PumpShape::Gaussian { mean_bin, sigma_bins } => {
                // Center the continuous mean on the middle of `mean_bin`.
                let mu = mean_bin + 0.5;
                let cdf = |x: f64| crate::special::normal_cdf((x - mu) / sigma_bins);
                for (b, p) in pmf.iter_mut().enumerate() {
                    *p = cdf(b as f64 + 1.0) - cdf(b as f64);
                }
            }
            PumpShape::Rayleigh { sigma_bins } => {
                let cdf = |x: f64| 1.0 - (-x * x / (2.0 * sigma_bins * sigma_bins)).exp();
                for (b, p) in pmf.iter_mut().enumerate() {
                    *p = cdf(b as f64 + 1.0) - cdf(b as f64);
                }
            }
        }
        let total: f64 = pmf.iter().sum();
        if total <= 0.0 {
            return Err(SimError::Config(
                "pump shape has no mass inside the period".into(),
            ));
        }
        for p in &mut pmf {
            *p /= total;
        }
        let mut cdf = Vec::with_capacity(n);
        let mut acc = 0.0;
        for p in &pmf {
            acc += p;
            cdf.push(acc);
        }
        *cdf.last_mut().unwrap() = 1.0;
        Ok(BinSampler { pmf, cdf })
    }

    /// Renormalized probability mass per bin.
    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    /// Bin with the largest probability mass.
    pub fn mode(&self) -> u32 {
        self.pmf
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(b, _)| b as u32)
            .unwrap()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        self.cdf.partition_point(|c| *c <= u) as u32
    }
}

/// Draw one time bin from the discretized pump shape.
///
/// Convenience wrapper that rebuilds the distribution table per call; bulk
/// generation should hold a [`BinSampler`].
pub fn sample_bin<R: Rng + ?Sized>(
    shape: &PumpShape,
    bins_per_period: u32,
    rng: &mut R,
) -> Result<u32, SimError> {
    Ok(BinSampler::new(shape, bins_per_period)?.sample(rng))
}

/// Quantize an arrival time onto the bin grid: `floor(arrival / width)`.
///
/// `arrival_ps` must already lie in `[0, period_ps)`; callers wrap modulo
/// the period first.
pub fn quantize(arrival_ps: f64, bin_width_ps: f64, period_ps: f64) -> Result<u32, SimError> {
    if !(0.0..period_ps).contains(&arrival_ps) {
        return Err(SimError::ArrivalOutOfRange { arrival_ps, period_ps });
    }
    Ok((arrival_ps / bin_width_ps) as u32)
}

/// Simulate one full collection round, returning each node's detection
/// list sorted by pulse index with at most one record per index.
pub fn generate_round(config: &SourceConfig) -> Result<Vec<Vec<DetectionRecord>>, SimError> {
    config.validate()?;
    let n = config.n_nodes;
    let period = config.period_ps as f64;
    let bin_width = config.bin_width_ps as f64;
    let sampler = BinSampler::new(&config.pump_shape, config.bins_per_period())?;
    let jitter = if config.jitter_sigma_ps > 0.0 {
        Some(Normal::new(0.0, config.jitter_sigma_ps).expect("validated sigma"))
    } else {
        None
    };
    let dark: Vec<Option<Poisson<f64>>> = config
        .dark_rate_per_node
        .iter()
        .map(|&r| {
            if r > 0.0 {
                Some(Poisson::new(r).expect("validated rate"))
            } else {
                None
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records: Vec<Vec<DetectionRecord>> = vec![Vec::new(); n];
    // Earliest arrival per node within the current period.
    let mut earliest: Vec<Option<f64>> = vec![None; n];

    for index in 0..config.n_pulses {
        earliest.fill(None);

        let pair_emitted = rng.random::<f64>() < config.pair_rate;
        if pair_emitted {
            let bin = sampler.sample(&mut rng);
            let offset: f64 = rng.random();
            let t0 = (bin as f64 + offset) * bin_width;
            let mut routed = [0usize; 2];
            if config.route_distinct {
                let first = rng.random_range(0..n);
                let other = if n == 1 {
                    first
                } else {
                    let shift = rng.random_range(1..n);
                    (first + shift) % n
                };
                routed = [first, other];
            } else {
                routed[0] = rng.random_range(0..n);
                routed[1] = rng.random_range(0..n);
            }
            for &node in &routed {
                // Survival and jitter draws always happen so the stream
                // stays aligned across loss settings.
                let survives = rng.random::<f64>() < 1.0 - config.loss_per_node[node];
                let jit = match &jitter {
                    Some(dist) => dist.sample(&mut rng),
                    None => 0.0,
                };
                if survives {
                    let mut arrival = (t0 + jit).rem_euclid(period);
                    if arrival >= period {
                        arrival = 0.0;
                    }
                    let slot = &mut earliest[node];
                    if slot.map_or(true, |t| arrival < t) {
                        *slot = Some(arrival);
                    }
                }
            }
        }

        for (node, dist) in dark.iter().enumerate() {
            let Some(dist) = dist else { continue };
            let count = dist.sample(&mut rng) as u64;
            for _ in 0..count {
                let arrival = rng.random::<f64>() * period;
                let slot = &mut earliest[node];
                if slot.map_or(true, |t| arrival < t) {
                    *slot = Some(arrival);
                }
            }
        }

        for (node, slot) in earliest.iter().enumerate() {
            if let Some(arrival) = slot {
                let bin = (arrival / bin_width) as u32;
                records[node].push(DetectionRecord {
                    node: node as u32,
                    index,
                    bin: bin.min(config.bins_per_period() - 1),
                });
            }
        }
    }
    Ok(records)
}

/// Write detection lists as CSV with header `node,index,bin`.
pub fn write_detections_csv<W: Write>(
    mut w: W,
    records: &[Vec<DetectionRecord>],
) -> std::io::Result<()> {
    writeln!(w, "node,index,bin")?;
    for node_records in records {
        for r in node_records {
            writeln!(w, "{},{},{}", r.node, r.index, r.bin)?;
        }
    }
    Ok(())
}

/// Read detection lists from CSV (`node,index,bin`), validating that each
/// node's records are strictly ascending in index.
pub fn read_detections_csv<R: BufRead>(
    reader: R,
    n_nodes: usize,
) -> Result<Vec<Vec<DetectionRecord>>, SimError> {
    let mut records: Vec<Vec<DetectionRecord>> = vec![Vec::new(); n_nodes];
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(header))) if header.trim() == "node,index,bin" => {}
        Some((_, Ok(other))) => {
            return Err(SimError::Csv {
                line: 1,
                reason: format!("expected header 'node,index,bin', got '{other}'"),
            })
        }
        Some((_, Err(e))) => return Err(e.into()),
        None => {
            return Err(SimError::Csv { line: 1, reason: "empty file".into() });
        }
    }
    for (i, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let parse_err = |reason: &str| SimError::Csv { line: i + 1, reason: reason.into() };
        let node: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| parse_err("bad node field"))?;
        let index: u64 = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| parse_err("bad index field"))?;
        let bin: u32 = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| parse_err("bad bin field"))?;
        if fields.next().is_some() {
            return Err(parse_err("too many fields"));
        }
        if node >= n_nodes {
            return Err(parse_err(&format!("node {node} out of range (n_nodes {n_nodes})")));
        }
        if let Some(last) = records[node].last() {
            if last.index >= index {
                return Err(parse_err("indices must be strictly ascending per node"));
            }
        }
        records[node].push(DetectionRecord { node: node as u32, index, bin });
    }
    Ok(records)
}
