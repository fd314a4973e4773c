//! Simulated message passing between computing parties.
//!
//! The transport follows a bulk-synchronous model: one call to
//! [`Transport::exchange`] is one protocol round in which every party sends one
//! payload to every other party. A simulated clock advances by the slowest link
//! of the round, `rtt + bytes * 8 / bandwidth`, so multi-minute wide-area runs
//! complete in milliseconds and are fully reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("party {party} aborted in round {round}")]
    PartyAbort { party: usize, round: u64 },
    #[error("expected {expected} payloads, got {got}")]
    PayloadCount { expected: usize, got: usize },
    #[error("unknown network preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid network preset: {0}")]
    InvalidPreset(String),
    #[error("preset is defined for {preset} parties, transport needs {parties}")]
    PartyCountMismatch { preset: usize, parties: usize },
}

/// Round-trip time and bandwidth of one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub rtt_ms: f64,
    pub bandwidth_bps: f64,
}

impl LinkProfile {
    pub fn new(rtt_ms: f64, bandwidth_bps: f64) -> Result<Self, TransportError> {
        if !(rtt_ms >= 0.0 && rtt_ms.is_finite()) {
            return Err(TransportError::InvalidPreset(format!(
                "rtt must be non-negative, got {rtt_ms}"
            )));
        }
        if !(bandwidth_bps > 0.0) {
            return Err(TransportError::InvalidPreset(format!(
                "bandwidth must be positive, got {bandwidth_bps}"
            )));
        }
        Ok(Self {
            rtt_ms,
            bandwidth_bps,
        })
    }

    /// Time to deliver `bytes` over this link in one round.
    pub fn transfer_ms(&self, bytes: u64) -> f64 {
        self.rtt_ms + bytes as f64 * 8.0 / self.bandwidth_bps * 1e3
    }
}

/// Published deployment regimes: `(name, rtt range ms, bandwidth range bps)`.
/// Single values are given as degenerate ranges.
type PresetRow = (&'static str, (f64, f64), (f64, f64));

const PRESETS: [PresetRow; 5] = [
    ("intra_zone", (0.20, 0.20), (4.9e9, 4.9e9)),
    ("inter_zone", (1.16, 1.16), (4.9e9, 4.9e9)),
    ("multi_zone_eu", (6.0, 32.0), (0.9e9, 2.7e9)),
    ("inter_continent", (250.0, 250.0), (120e6, 120e6)),
    ("global", (170.0, 295.0), (95e6, 180e6)),
];

/// Names of the built-in presets, ordered from fastest to slowest.
pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

/// A symmetric `K x K` link matrix with a zero-RTT diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPreset {
    pub name: String,
    /// Representative link: the midpoint of each published range.
    pub nominal: LinkProfile,
    links: Vec<Vec<LinkProfile>>,
}

impl NetworkPreset {
    /// Every off-diagonal link gets the same profile.
    pub fn uniform(name: &str, parties: usize, link: LinkProfile) -> Self {
        let links = (0..parties)
            .map(|i| {
                (0..parties)
                    .map(|j| {
                        if i == j {
                            LinkProfile {
                                rtt_ms: 0.0,
                                bandwidth_bps: link.bandwidth_bps,
                            }
                        } else {
                            link
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            name: name.to_string(),
            nominal: link,
            links,
        }
    }

    /// Builds a preset from an explicit matrix, validating symmetry and the diagonal.
    #[allow(clippy::needless_range_loop)] // symmetric (i, j) indexing
    pub fn from_matrix(name: &str, links: Vec<Vec<LinkProfile>>) -> Result<Self, TransportError> {
        let k = links.len();
        if k == 0 || links.iter().any(|row| row.len() != k) {
            return Err(TransportError::InvalidPreset("link matrix must be square".into()));
        }
        for i in 0..k {
            if links[i][i].rtt_ms != 0.0 {
                return Err(TransportError::InvalidPreset(format!(
                    "diagonal rtt of party {i} must be 0"
                )));
            }
            for j in 0..k {
                if links[i][j] != links[j][i] {
                    return Err(TransportError::InvalidPreset(format!(
                        "link ({i},{j}) is not symmetric"
                    )));
                }
                LinkProfile::new(links[i][j].rtt_ms, links[i][j].bandwidth_bps)?;
            }
        }
        let off: Vec<LinkProfile> = (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .map(|(i, j)| links[i][j])
            .collect();
        let nominal = if off.is_empty() {
            links[0][0]
        } else {
            LinkProfile {
                rtt_ms: off.iter().map(|l| l.rtt_ms).sum::<f64>() / off.len() as f64,
                bandwidth_bps: off.iter().map(|l| l.bandwidth_bps).sum::<f64>() / off.len() as f64,
            }
        };
        Ok(Self {
            name: name.to_string(),
            nominal,
            links,
        })
    }

    pub fn parties(&self) -> usize {
        self.links.len()
    }

    pub fn link(&self, from: usize, to: usize) -> LinkProfile {
        self.links[from][to]
    }

    /// Largest off-diagonal RTT.
    pub fn max_rtt_ms(&self) -> f64 {
        self.off_diagonal().map(|l| l.rtt_ms).fold(0.0, f64::max)
    }

    /// Smallest off-diagonal RTT.
    pub fn min_rtt_ms(&self) -> f64 {
        self.off_diagonal()
            .map(|l| l.rtt_ms)
            .fold(f64::INFINITY, f64::min)
    }

    fn off_diagonal(&self) -> impl Iterator<Item = LinkProfile> + '_ {
        let k = self.parties();
        (0..k).flat_map(move |i| (0..k).filter(move |&j| j != i).map(move |j| self.links[i][j]))
    }

    /// Loads a preset from flat key-value text:
    ///
    /// ```text
    /// name = lab
    /// rtt_ms = 5                      # scalar, or a matrix: 0,5;5,0
    /// bandwidth_bps = 1e9             # scalar or matrix
    /// ```
    pub fn from_kv(text: &str, parties: usize) -> Result<Self, TransportError> {
        let map = kv::parse(text).map_err(|e| TransportError::InvalidPreset(e.to_string()))?;
        let name = map.get("name").cloned().unwrap_or_else(|| "custom".to_string());
        let rtt = parse_matrix(&map, "rtt_ms", parties)?;
        let bw = parse_matrix(&map, "bandwidth_bps", parties)?;
        let links = (0..parties)
            .map(|i| {
                (0..parties)
                    .map(|j| LinkProfile {
                        rtt_ms: if i == j { 0.0 } else { rtt[i][j] },
                        bandwidth_bps: bw[i][j],
                    })
                    .collect()
            })
            .collect();
        Self::from_matrix(&name, links)
    }

    pub fn from_file(path: &Path, parties: usize) -> Result<Self, TransportError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TransportError::InvalidPreset(format!("{}: {e}", path.display())))?;
        Self::from_kv(&text, parties)
    }
}

fn parse_matrix(
    map: &BTreeMap<String, String>,
    key: &str,
    parties: usize,
) -> Result<Vec<Vec<f64>>, TransportError> {
    let raw = map
        .get(key)
        .ok_or_else(|| TransportError::InvalidPreset(format!("missing key `{key}`")))?;
    let bad = || TransportError::InvalidPreset(format!("cannot parse `{key}` = {raw:?}"));
    let rows: Vec<Vec<f64>> = raw
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    if rows.len() == 1 && rows[0].len() == 1 {
        return Ok(vec![vec![rows[0][0]; parties]; parties]);
    }
    if rows.len() != parties || rows.iter().any(|r| r.len() != parties) {
        return Err(TransportError::PartyCountMismatch {
            preset: rows.len(),
            parties,
        });
    }
    Ok(rows)
}

/// Loads one of the built-in deployment presets for `parties` computing parties.
///
/// Ranged presets spread their links evenly over the published range: the
/// `i`-th of `L` links gets `lo + (hi - lo) * i / (L - 1)` RTT and the matching
/// bandwidth counted down from the top of its range, so the slowest link pairs
/// the highest RTT with the lowest bandwidth. With three parties the middle
/// link is exactly the midpoint. The preset's `nominal` profile is the midpoint.
pub fn load_preset(name: &str, parties: usize) -> Result<NetworkPreset, TransportError> {
    let (_, rtt, bw) = PRESETS
        .iter()
        .find(|p| p.0 == name)
        .ok_or_else(|| TransportError::UnknownPreset(name.to_string()))?;
    if parties < 2 {
        let nominal = LinkProfile::new((rtt.0 + rtt.1) / 2.0, (bw.0 + bw.1) / 2.0)?;
        return Ok(NetworkPreset::uniform(name, parties.max(1), nominal));
    }
    let pairs: Vec<(usize, usize)> = (0..parties)
        .flat_map(|i| (i + 1..parties).map(move |j| (i, j)))
        .collect();
    let n = pairs.len();
    let mut links = vec![vec![LinkProfile::new(0.0, bw.1)?; parties]; parties];
    for (idx, &(i, j)) in pairs.iter().enumerate() {
        let t = if n == 1 { 0.5 } else { idx as f64 / (n - 1) as f64 };
        let link = LinkProfile::new(rtt.0 + (rtt.1 - rtt.0) * t, bw.1 - (bw.1 - bw.0) * t)?;
        links[i][j] = link;
        links[j][i] = link;
    }
    let mut preset = NetworkPreset::from_matrix(name, links)?;
    preset.nominal = LinkProfile::new((rtt.0 + rtt.1) / 2.0, (bw.0 + bw.1) / 2.0)?;
    Ok(preset)
}

/// Round and traffic accounting for one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLedger {
    pub rounds: u64,
    /// `bytes_sent[i][j]`: bytes party `i` sent to party `j`.
    pub bytes_sent: Vec<Vec<u64>>,
    pub elapsed_ms: f64,
}

/// The JSON export of a ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub rounds: u64,
    pub bytes_total: u64,
    pub elapsed_ms: f64,
}

impl RoundLedger {
    pub fn new(parties: usize) -> Self {
        Self {
            rounds: 0,
            bytes_sent: vec![vec![0; parties]; parties],
            elapsed_ms: 0.0,
        }
    }

    pub fn bytes_total(&self) -> u64 {
        self.bytes_sent.iter().flatten().sum()
    }

    /// Bytes sent by one party to all others.
    pub fn bytes_from(&self, party: usize) -> u64 {
        self.bytes_sent[party].iter().sum()
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            rounds: self.rounds,
            bytes_total: self.bytes_total(),
            elapsed_ms: self.elapsed_ms,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.summary()).expect("ledger summary serializes")
    }

    /// Difference `self - earlier` (round and byte deltas between two snapshots).
    pub fn since(&self, earlier: &RoundLedger) -> LedgerSummary {
        LedgerSummary {
            rounds: self.rounds - earlier.rounds,
            bytes_total: self.bytes_total() - earlier.bytes_total(),
            elapsed_ms: self.elapsed_ms - earlier.elapsed_ms,
        }
    }
}

/// One synchronous all-to-all communication step among `K` parties.
pub trait Transport {
    fn parties(&self) -> usize;

    /// Every party contributes one payload; every party receives all payloads
    /// (indexed by sender, its own included). Counts as one round.
    fn exchange(&mut self, payloads: Vec<Vec<u8>>) -> Result<Vec<Vec<Vec<u8>>>, TransportError>;

    fn ledger(&self) -> &RoundLedger;
}

/// Scheduled failure of one party.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub party: usize,
    /// Zero-based index of the round in which the party stops contributing.
    pub at_round: u64,
}

/// In-process transport with simulated latency and bandwidth.
#[derive(Debug, Clone)]
pub struct SimTransport {
    preset: NetworkPreset,
    ledger: RoundLedger,
    fault: Option<FaultPlan>,
    aborted: Option<usize>,
    transcript: Option<Vec<Vec<Vec<u8>>>>,
}

impl SimTransport {
    pub fn new(preset: NetworkPreset) -> Self {
        let k = preset.parties();
        Self {
            preset,
            ledger: RoundLedger::new(k),
            fault: None,
            aborted: None,
            transcript: None,
        }
    }

    /// Zero-latency, infinite-ish bandwidth network for functional tests.
    pub fn local(parties: usize) -> Self {
        Self::new(NetworkPreset::uniform(
            "local",
            parties,
            LinkProfile {
                rtt_ms: 0.0,
                bandwidth_bps: f64::INFINITY,
            },
        ))
    }

    pub fn with_fault(mut self, fault: FaultPlan) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn set_fault(&mut self, fault: Option<FaultPlan>) {
        self.fault = fault;
    }

    /// Keeps a copy of every payload each party receives from others.
    pub fn record_transcripts(mut self) -> Self {
        self.transcript = Some(vec![Vec::new(); self.preset.parties()]);
        self
    }

    /// Payloads received by `party` from other parties, in arrival order.
    pub fn transcript(&self, party: usize) -> Option<&[Vec<u8>]> {
        self.transcript.as_ref().map(|t| t[party].as_slice())
    }

    pub fn preset(&self) -> &NetworkPreset {
        &self.preset
    }

    pub fn aborted(&self) -> Option<usize> {
        self.aborted
    }
}

impl Transport for SimTransport {
    fn parties(&self) -> usize {
        self.preset.parties()
    }

    fn exchange(&mut self, payloads: Vec<Vec<u8>>) -> Result<Vec<Vec<Vec<u8>>>, TransportError> {
        let k = self.parties();
        let round = self.ledger.rounds;
        if let Some(party) = self.aborted {
            return Err(TransportError::PartyAbort { party, round });
        }
        if let Some(f) = self.fault {
            if f.at_round <= round {
                self.aborted = Some(f.party);
                return Err(TransportError::PartyAbort {
                    party: f.party,
                    round,
                });
            }
        }
        if payloads.len() != k {
            return Err(TransportError::PayloadCount {
                expected: k,
                got: payloads.len(),
            });
        }
        let mut round_ms: f64 = 0.0;
        for (i, p) in payloads.iter().enumerate() {
            for j in (0..k).filter(|&j| j != i) {
                let bytes = p.len() as u64;
                self.ledger.bytes_sent[i][j] += bytes;
                round_ms = round_ms.max(self.preset.link(i, j).transfer_ms(bytes));
            }
        }
        self.ledger.rounds += 1;
        self.ledger.elapsed_ms += round_ms;
        if let Some(t) = self.transcript.as_mut() {
            for (j, log) in t.iter_mut().enumerate() {
                for (i, p) in payloads.iter().enumerate() {
                    if i != j {
                        log.push(p.clone());
                    }
                }
            }
        }
        Ok(vec![payloads; k])
    }

    fn ledger(&self) -> &RoundLedger {
        &self.ledger
    }
}
