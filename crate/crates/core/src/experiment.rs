//! Experiment orchestration: one end-to-end protected inference job with
//! escrow settlement, and the latency, ensemble and fairness sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ensemble::{
    aggregate_phase, client_views, execute_models, plaintext_ensemble, EnsembleError, Scheme,
    WeightingConfig,
};
use crate::escrow::{party_keys, sign_completion, AccountId, CompletionProof, Escrow, EscrowError};
use crate::fixedpoint::RingParams;
use crate::incentive::{
    fairness, ideal_merit, reward_agreement_or_uniform, reward_confidence, reward_uniform,
    EvaluationBatch, FairnessRecord, IncentiveError, RewardScheme,
};
use crate::kv::{self, KvError};
use crate::partition::{dirichlet_partition, PartitionConfig, PartitionError, ALPHA_GRID};
use crate::secretsharing::{Dealer, Session, SharedTensor, SharingError};
use crate::secure_nn::{provision, secure_forward, share_input, ApproxConfig, SecureNnError};
use crate::tensor_nn::{
    self, argmax, build_with_dims, load_weights, synthetic_digits, train, Architecture, ImageShape,
    LabeledDataset, Matrix, ModelSpec, NnError, TrainConfig,
};
use crate::transport::{load_preset, preset_names, FaultPlan, LedgerSummary, SimTransport, TransportError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Secure(#[from] SecureNnError),
    #[error(transparent)]
    Incentive(#[from] IncentiveError),
    #[error(transparent)]
    Escrow(#[from] EscrowError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl From<SharingError> for ExperimentError {
    fn from(e: SharingError) -> Self {
        Self::Secure(SecureNnError::Sharing(e))
    }
}

impl ExperimentError {
    /// Errors caused by the configuration rather than by the run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Self::Config(_)
                | Self::Kv(_)
                | Self::Transport(TransportError::UnknownPreset(_) | TransportError::InvalidPreset(_))
                | Self::Nn(NnError::UnknownArchitecture(_))
                | Self::Partition(PartitionError::InvalidConfig(_))
                | Self::Ensemble(EnsembleError::UnknownScheme(_) | EnsembleError::InvalidConfig(_))
        )
    }
}

/// The five steps of one inference job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ShareInput = 1,
    EscrowCreate = 2,
    Execution = 3,
    Aggregation = 4,
    Settlement = 5,
}

impl Phase {
    pub const ALL: [Phase; 5] = [
        Self::ShareInput,
        Self::EscrowCreate,
        Self::Execution,
        Self::Aggregation,
        Self::Settlement,
    ];

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get((i as usize).checked_sub(1)?).copied()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// A party that stops during `phase`. In the communicating phases it stops
/// at the `offset`-th round of the phase, or at the phase's end if the phase
/// is shorter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub phase: Phase,
    pub party: usize,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: String,
    /// Number of data-owning clients, one model each.
    pub clients: usize,
    /// Number of computing parties holding shares.
    pub parties: usize,
    pub alphas: Vec<f64>,
    pub schemes: Vec<Scheme>,
    pub preset: String,
    pub presets: Vec<String>,
    /// Seeds per sweep cell, starting at `seed`.
    pub seeds: usize,
    pub queries: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub deposit: u64,
    pub weights: Vec<PathBuf>,
    pub secure_eval: bool,
    pub fault: Option<Fault>,
    pub train: TrainConfig,
    pub weighting: WeightingConfig,
    pub approx: ApproxConfig,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            model: "custom:64,32,10".into(),
            clients: 3,
            parties: 3,
            alphas: ALPHA_GRID.to_vec(),
            schemes: Scheme::ALL.to_vec(),
            preset: "intra_zone".into(),
            presets: preset_names().into_iter().map(String::from).collect(),
            seeds: 3,
            queries: 16,
            per_class: 40,
            test_per_class: 20,
            noise: 0.35,
            deposit: 9,
            weights: Vec::new(),
            secure_eval: false,
            fault: None,
            train: TrainConfig::default(),
            weighting: WeightingConfig::default(),
            approx: ApproxConfig::default(),
            out: None,
        }
    }

    /// Builds a config from flat key-value entries. `seed` is required.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, ExperimentError> {
        let seed: u64 = kv::require(map, "seed")?;
        let mut c = Self::with_seed(seed);
        let list = |key: &str| -> Option<Vec<String>> {
            map.get(key)
                .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
        };
        if let Some(v) = map.get("model") {
            c.model = v.clone();
        }
        c.clients = kv::get_or(map, "clients", c.clients)?;
        c.parties = kv::get_or(map, "parties", c.parties)?;
        if let Some(a) = list("alpha") {
            c.alphas = a
                .iter()
                .map(|s| s.parse().map_err(|_| ExperimentError::Config(format!("bad alpha {s:?}"))))
                .collect::<Result<_, _>>()?;
        }
        if let Some(s) = list("scheme") {
            c.schemes = s.iter().map(|s| s.parse()).collect::<Result<_, EnsembleError>>()?;
        }
        if let Some(p) = map.get("preset") {
            c.preset = p.clone();
        }
        if let Some(p) = list("presets") {
            c.presets = p;
        }
        c.seeds = kv::get_or(map, "seeds", c.seeds)?;
        c.queries = kv::get_or(map, "queries", c.queries)?;
        c.per_class = kv::get_or(map, "per_class", c.per_class)?;
        c.test_per_class = kv::get_or(map, "test_per_class", c.test_per_class)?;
        c.noise = kv::get_or(map, "noise", c.noise)?;
        c.deposit = kv::get_or(map, "deposit", c.deposit)?;
        c.secure_eval = kv::get_or(map, "secure_eval", c.secure_eval)?;
        if let Some(w) = list("weights") {
            c.weights = w.into_iter().map(PathBuf::from).collect();
        }
        if let Some(p) = map.get("abort_phase") {
            let idx: u8 = p.parse().map_err(|_| ExperimentError::Config(format!("bad abort_phase {p:?}")))?;
            c.fault = Some(Fault {
                phase: Phase::from_index(idx)
                    .ok_or_else(|| ExperimentError::Config(format!("abort_phase must be 1..5, got {idx}")))?,
                party: kv::get_or(map, "abort_party", 0)?,
                offset: kv::get_or(map, "abort_offset", 0)?,
            });
        }
        c.train.epochs = kv::get_or(map, "epochs", c.train.epochs)?;
        c.train.learning_rate = kv::get_or(map, "learning_rate", c.train.learning_rate)?;
        c.train.batch_size = kv::get_or(map, "batch_size", c.train.batch_size)?;
        c.weighting.beta = kv::get_or(map, "beta", c.weighting.beta)?;
        c.weighting.gamma = kv::get_or(map, "gamma", c.weighting.gamma)?;
        c.weighting.tta_views = kv::get_or(map, "tta_views", c.weighting.tta_views)?;
        c.weighting.rotation_deg = kv::get_or(map, "rotation_deg", c.weighting.rotation_deg)?;
        c.weighting.secure_squarings = kv::get_or(map, "secure_squarings", c.weighting.secure_squarings)?;
        c.approx.exp_iterations = kv::get_or(map, "exp_iterations", c.approx.exp_iterations)?;
        c.approx.reciprocal_newton_iters = kv::get_or(map, "reciprocal_iters", c.approx.reciprocal_newton_iters)?;
        c.approx.log_householder_iters = kv::get_or(map, "log_iters", c.approx.log_householder_iters)?;
        c.out = map.get("out").map(PathBuf::from);
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.clients == 0 {
            return bad("clients must be at least 1".into());
        }
        if self.parties == 0 {
            return bad("parties must be at least 1".into());
        }
        if self.schemes.is_empty() || self.alphas.is_empty() || self.seeds == 0 || self.queries == 0 {
            return bad("scheme, alpha, seeds and queries must be non-empty".into());
        }
        for p in std::iter::once(&self.preset).chain(&self.presets) {
            if !preset_names().contains(&p.as_str()) {
                return Err(TransportError::UnknownPreset(p.clone()).into());
            }
        }
        Architecture::from_name(&self.model)?;
        if let Some(f) = self.fault {
            if f.party >= self.parties {
                return bad(format!("abort_party {} but only {} parties", f.party, self.parties));
            }
        }
        self.weighting.validate()?;
        self.approx
            .validate(RingParams::default().frac_bits())
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }

    /// Short digest of every setting except the output path.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..6])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub git_hash: String,
    pub timestamp_unix: u64,
}

impl Provenance {
    pub fn now() -> Self {
        let git_hash = std::process::Command::new("git")
            .args(["rev-parse", "--short", "HEAD"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
            .unwrap_or_else(|| "unknown".into());
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self { git_hash, timestamp_unix }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub phase: Phase,
    pub rounds: u64,
    pub bytes: u64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortInfo {
    pub phase: Phase,
    pub party: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EscrowReport {
    pub job_id: String,
    pub created: bool,
    pub settled: bool,
    pub escrowed: u64,
    pub balances: BTreeMap<AccountId, u64>,
    pub journal: Vec<String>,
}

/// Report of one inference job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub scheme: Scheme,
    /// `None` when the job aborted.
    pub predictions: Option<Vec<usize>>,
    pub scores: Option<Matrix<f64>>,
    pub weights: Option<Vec<Vec<f64>>>,
    pub plaintext_predictions: Vec<usize>,
    pub agreement: Option<f64>,
    pub ledger: LedgerSummary,
    pub phases: Vec<PhaseCost>,
    pub escrow: EscrowReport,
    pub abort: Option<AbortInfo>,
    pub provenance: Provenance,
}

fn party_accounts(k: usize) -> Vec<AccountId> {
    (0..k).map(|i| format!("party{i}")).collect()
}

const CLIENT: &str = "client";

struct Orchestrator<'a> {
    cfg: &'a ExperimentConfig,
    escrow: Escrow,
    keys: Vec<ed25519_dalek::SigningKey>,
    job_id: Vec<u8>,
    phases: Vec<PhaseCost>,
    mark: LedgerSummary,
}

impl<'a> Orchestrator<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self, ExperimentError> {
        let keys = party_keys(cfg.parties, cfg.seed.wrapping_add(0x5eed));
        let mut escrow = Escrow::new();
        for (p, k) in party_accounts(cfg.parties).iter().zip(&keys) {
            escrow.register(p, &k.verifying_key())?;
        }
        escrow.fund(CLIENT, cfg.deposit)?;
        let job_id = Sha256::digest(format!("{}:{}", cfg.hash(), cfg.seed).as_bytes())[..16].to_vec();
        Ok(Self {
            cfg,
            escrow,
            keys,
            job_id,
            phases: Vec::new(),
            mark: LedgerSummary { rounds: 0, bytes_total: 0, elapsed_ms: 0.0 },
        })
    }

    fn close_phase(&mut self, phase: Phase, now: LedgerSummary) {
        self.phases.push(PhaseCost {
            phase,
            rounds: now.rounds - self.mark.rounds,
            bytes: now.bytes_total - self.mark.bytes_total,
            elapsed_ms: now.elapsed_ms - self.mark.elapsed_ms,
        });
        self.mark = now;
    }

    fn faulty(&self, phase: Phase) -> Option<Fault> {
        self.cfg.fault.filter(|f| f.phase == phase)
    }

    fn create_job(&mut self) -> Result<(), ExperimentError> {
        let parties = party_accounts(self.cfg.parties);
        self.escrow.create_job(&self.job_id, CLIENT, &parties, self.cfg.deposit)?;
        Ok(())
    }

    fn settle(&mut self) -> Result<(), ExperimentError> {
        let proof = CompletionProof {
            signatures: self.keys.iter().map(|k| sign_completion(k, &self.job_id, CLIENT)).collect(),
        };
        self.escrow.complete_job(&self.job_id, CLIENT, &proof)?;
        Ok(())
    }

    fn escrow_report(&self) -> EscrowReport {
        let job = self.escrow.job(&self.job_id);
        EscrowReport {
            job_id: hex::encode(&self.job_id),
            created: job.is_some(),
            settled: job.is_some_and(|j| j.completed),
            escrowed: self.escrow.state().escrowed(),
            balances: self.escrow.state().balances.clone(),
            journal: self.escrow.journal_lines(),
        }
    }
}

struct Outcome {
    predictions: Vec<usize>,
    scores: Matrix<f64>,
    weights: Vec<Vec<f64>>,
}

/// Runs one job through share → escrow → execute → aggregate →
/// reconstruct/settle with the first configured scheme. A party abort ends
/// the job without output and leaves the deposit escrowed.
pub fn run_infer(
    cfg: &ExperimentConfig,
    models: &[ModelSpec<f64>],
    x: &Matrix<f64>,
    image: Option<ImageShape>,
) -> Result<RunReport, ExperimentError> {
    cfg.validate()?;
    let scheme = cfg.schemes[0];
    let plain = plaintext_ensemble(models, x, image, None, scheme, &cfg.weighting, cfg.seed)?;
    let mut orch = Orchestrator::new(cfg)?;
    let (outcome, abort, ledger) = if cfg.parties == 1 {
        infer_single_party(&mut orch, models, x, image, scheme)?
    } else {
        infer_shared(&mut orch, models, x, image, scheme)?
    };
    let agreement = outcome.as_ref().map(|o| {
        let hits = o.predictions.iter().zip(&plain.predictions).filter(|(a, b)| a == b).count();
        hits as f64 / o.predictions.len().max(1) as f64
    });
    Ok(RunReport {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        scheme,
        predictions: outcome.as_ref().map(|o| o.predictions.clone()),
        scores: outcome.as_ref().map(|o| o.scores.clone()),
        weights: outcome.map(|o| o.weights),
        plaintext_predictions: plain.predictions,
        agreement,
        ledger,
        phases: orch.phases.clone(),
        escrow: orch.escrow_report(),
        abort,
        provenance: Provenance::now(),
    })
}

type InferParts = (Option<Outcome>, Option<AbortInfo>, LedgerSummary);

fn stop(
    orch: &mut Orchestrator<'_>,
    phase: Phase,
    party: usize,
    detail: String,
    now: LedgerSummary,
) -> Result<InferParts, ExperimentError> {
    orch.close_phase(phase, now.clone());
    Ok((None, Some(AbortInfo { phase, party, detail }), now))
}

/// One computing party: nothing to communicate, so the plaintext pipeline
/// runs as is and only the escrow flow remains.
fn infer_single_party(
    orch: &mut Orchestrator<'_>,
    models: &[ModelSpec<f64>],
    x: &Matrix<f64>,
    image: Option<ImageShape>,
    scheme: Scheme,
) -> Result<InferParts, ExperimentError> {
    let zero = LedgerSummary { rounds: 0, bytes_total: 0, elapsed_ms: 0.0 };
    let mut outcome = None;
    for phase in Phase::ALL {
        if let Some(f) = orch.faulty(phase) {
            orch.close_phase(phase, zero.clone());
            let abort = AbortInfo { phase, party: f.party, detail: "party stopped".into() };
            return Ok((None, Some(abort), zero));
        }
        match phase {
            Phase::EscrowCreate => orch.create_job()?,
            Phase::Execution => {
                outcome = Some(plaintext_ensemble(models, x, image, None, scheme, &orch.cfg.weighting, orch.cfg.seed)?)
            }
            Phase::Settlement => orch.settle()?,
            _ => {}
        }
        orch.close_phase(phase, zero.clone());
    }
    let o = outcome.expect("execution ran");
    Ok((
        Some(Outcome {
            predictions: o.predictions,
            scores: o.scores,
            weights: o.weights.iter().map(|w| w.w().to_vec()).collect(),
        }),
        None,
        zero,
    ))
}

fn infer_shared(
    orch: &mut Orchestrator<'_>,
    models: &[ModelSpec<f64>],
    x: &Matrix<f64>,
    image: Option<ImageShape>,
    scheme: Scheme,
) -> Result<InferParts, ExperimentError> {
    let cfg = orch.cfg;
    let k = cfg.parties;
    let params = RingParams::default();
    let transport = SimTransport::new(load_preset(&cfg.preset, k)?);
    let mut session = Session::new(params, transport, Dealer::new(k, cfg.seed)?)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    // model owners share their weights offline, before any job exists
    let pms = models
        .iter()
        .map(|m| provision(m, k, &params, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = |s: &Session| s.ledger().summary();

    // phase 1
    let inputs = client_views(x, image, None, scheme, &cfg.weighting, cfg.seed)?
        .iter()
        .map(|v| share_input(v, k, &params, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(f) = orch.faulty(Phase::ShareInput) {
        return stop(orch, Phase::ShareInput, f.party, "input share not delivered".into(), summary(&session));
    }
    orch.close_phase(Phase::ShareInput, summary(&session));

    // phase 2
    orch.create_job()?;
    if let Some(f) = orch.faulty(Phase::EscrowCreate) {
        return stop(orch, Phase::EscrowCreate, f.party, "job not verified".into(), summary(&session));
    }
    orch.close_phase(Phase::EscrowCreate, summary(&session));

    // phases 3 and 4 communicate; faults are scheduled on the transport
    let arm = |session: &mut Session, orch: &Orchestrator<'_>, phase: Phase| {
        let plan = orch.faulty(phase).map(|f| FaultPlan {
            party: f.party,
            at_round: session.ledger().rounds + f.offset,
        });
        session.transport_mut().set_fault(plan);
    };
    arm(&mut session, orch, Phase::Execution);
    let outputs = match execute_models(&mut session, &pms, &inputs) {
        Ok(o) => o,
        Err(e) => match e.aborted_party() {
            Some(p) => return stop(orch, Phase::Execution, p, e.to_string(), summary(&session)),
            None => return Err(e.into()),
        },
    };
    if let Some(f) = orch.faulty(Phase::Execution) {
        return stop(orch, Phase::Execution, f.party, "stopped at phase end".into(), summary(&session));
    }
    orch.close_phase(Phase::Execution, summary(&session));

    arm(&mut session, orch, Phase::Aggregation);
    let (agg, weights) = match aggregate_phase(&mut session, scheme, &outputs, &cfg.weighting, &cfg.approx) {
        Ok(r) => r,
        Err(e) => match e.aborted_party() {
            Some(p) => return stop(orch, Phase::Aggregation, p, e.to_string(), summary(&session)),
            None => return Err(e.into()),
        },
    };
    if let Some(f) = orch.faulty(Phase::Aggregation) {
        return stop(orch, Phase::Aggregation, f.party, "stopped at phase end".into(), summary(&session));
    }
    orch.close_phase(Phase::Aggregation, summary(&session));

    // phase 5: each party sends its result share and σ_k to the client
    let withheld = orch.faulty(Phase::Settlement).map(|f| f.party);
    let received: Vec<_> = agg
        .shares
        .shares()
        .iter()
        .filter(|s| Some(s.party_id) != withheld)
        .cloned()
        .collect();
    let shares = match SharedTensor::from_shares(received) {
        Ok(s) => s,
        Err(e) => {
            let party = withheld.unwrap_or(0);
            return stop(orch, Phase::Settlement, party, e.to_string(), summary(&session));
        }
    };
    let scores = crate::ensemble::Aggregate { shares, frac_bits: agg.frac_bits }.reveal();
    orch.settle()?;
    orch.close_phase(Phase::Settlement, summary(&session));
    Ok((
        Some(Outcome {
            predictions: (0..scores.rows()).map(|r| argmax(scores.row(r))).collect(),
            scores,
            weights: weights.iter().map(|w| w.w().to_vec()).collect(),
        }),
        None,
        summary(&session),
    ))
}

/// Train and test splits of the desk-scale digit task.
pub fn desk_data(cfg: &ExperimentConfig, seed: u64) -> (LabeledDataset<f64>, LabeledDataset<f64>) {
    (
        synthetic_digits(cfg.per_class, cfg.noise, seed),
        synthetic_digits(cfg.test_per_class, cfg.noise, seed ^ 0x7e57),
    )
}

/// Trains one model per Dirichlet client partition.
pub fn train_clients(
    cfg: &ExperimentConfig,
    data: &LabeledDataset<f64>,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ModelSpec<f64>>, ExperimentError> {
    let arch = Architecture::from_name(&cfg.model)?;
    let dims = arch.dims_for(data.dim(), data.classes());
    let parts = if cfg.clients == 1 {
        vec![data.clone()]
    } else {
        dirichlet_partition(data, &PartitionConfig::new(alpha, cfg.clients, seed))?
    };
    parts
        .par_iter()
        .enumerate()
        .map(|(k, part)| {
            let init = build_with_dims(&format!("client{k}"), &dims, seed.wrapping_mul(1000).wrapping_add(k as u64))?;
            let tc = TrainConfig {
                seed: seed.wrapping_add(k as u64),
                ..cfg.train
            };
            Ok(train(&init, part, &tc)?)
        })
        .collect()
}

/// `infer`: trains (or loads) the client models and runs one job on the
/// first `queries` test digits.
pub fn cmd_infer(cfg: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    cfg.validate()?;
    let (train_set, test_set) = desk_data(cfg, cfg.seed);
    let models = if cfg.weights.is_empty() {
        train_clients(cfg, &train_set, cfg.alphas[0], cfg.seed)?
    } else {
        cfg.weights.iter().map(|p| load_weights::<f64>(p)).collect::<Result<Vec<_>, _>>()?
    };
    let n = cfg.queries.min(test_set.len());
    let x = test_set.inputs().select_rows(&(0..n).collect::<Vec<_>>());
    run_infer(cfg, &models, &x, test_set.image_shape())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub seed: u64,
    pub config_hash: String,
    pub preset: String,
    pub parties: usize,
    pub model: String,
    pub rounds: u64,
    pub bytes: u64,
    pub elapsed_ms: f64,
    pub ok: bool,
    pub error: String,
}

/// One secure forward pass of `cfg.model` (native input size) over
/// `cfg.queries` random inputs in `[-1, 1]`, on every preset.
pub fn cmd_latency_sweep(cfg: &ExperimentConfig) -> Result<Vec<LatencyRow>, ExperimentError> {
    cfg.validate()?;
    if cfg.parties < 2 {
        return Err(ExperimentError::Config("latency sweep needs at least 2 parties".into()));
    }
    let arch = Architecture::from_name(&cfg.model)?;
    let cells: Vec<(String, u64)> = cfg
        .presets
        .iter()
        .flat_map(|p| (0..cfg.seeds as u64).map(move |s| (p.clone(), cfg.seed + s)))
        .collect();
    Ok(cells
        .par_iter()
        .map(|(preset, seed)| {
            let run = || -> Result<LedgerSummary, ExperimentError> {
                let model: ModelSpec<f64> = tensor_nn::build_model(&arch, *seed)?;
                let mut rng = ChaCha20Rng::seed_from_u64(*seed);
                let d = model.input_dim();
                let x: Matrix<f64> = Matrix::new(cfg.queries, d, (0..cfg.queries * d).map(|_| rng.gen_range(-1.0..=1.0)).collect());
                let params = RingParams::default();
                let pm = provision(&model, cfg.parties, &params, &mut rng)?;
                let xs = share_input(&x, cfg.parties, &params, &mut rng)?;
                let transport = SimTransport::new(load_preset(preset, cfg.parties)?);
                let mut session = Session::new(params, transport, Dealer::new(cfg.parties, *seed)?)?;
                secure_forward(&pm, &xs, &mut session)?;
                Ok(session.ledger().summary())
            };
            let (summary, error) = match run() {
                Ok(s) => (s, String::new()),
                Err(e) => (LedgerSummary { rounds: 0, bytes_total: 0, elapsed_ms: 0.0 }, e.to_string()),
            };
            LatencyRow {
                seed: *seed,
                config_hash: cfg.hash(),
                preset: preset.clone(),
                parties: cfg.parties,
                model: arch.name(),
                rounds: summary.rounds,
                bytes: summary.bytes_total,
                elapsed_ms: summary.elapsed_ms,
                ok: error.is_empty(),
                error,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub seed: u64,
    pub config_hash: String,
    pub alpha: f64,
    pub clients: usize,
    pub scheme: String,
    pub accuracy: f64,
    pub single_avg: f64,
    pub single_best: f64,
    pub ok: bool,
    pub error: String,
}

struct CellModels {
    models: Vec<ModelSpec<f64>>,
    test: LabeledDataset<f64>,
    single: Vec<f64>,
}

fn cell_models(cfg: &ExperimentConfig, alpha: f64, seed: u64) -> Result<CellModels, ExperimentError> {
    let (train_set, test) = desk_data(cfg, seed);
    let models = train_clients(cfg, &train_set, alpha, seed)?;
    let single = models
        .iter()
        .map(|m| Ok(test.accuracy(&tensor_nn::forward(m, test.inputs())?.argmax_rows())))
        .collect::<Result<Vec<f64>, ExperimentError>>()?;
    Ok(CellModels { models, test, single })
}

fn grid(cfg: &ExperimentConfig) -> Vec<(f64, u64)> {
    cfg.alphas
        .iter()
        .flat_map(|&a| (0..cfg.seeds as u64).map(move |s| (a, cfg.seed + s)))
        .collect()
}

/// Accuracy of every scheme against the single-model average and best, per
/// (α, seed) cell of the grid.
pub fn cmd_ensemble_sweep(cfg: &ExperimentConfig) -> Result<Vec<EnsembleRow>, ExperimentError> {
    cfg.validate()?;
    let rows: Vec<Vec<EnsembleRow>> = grid(cfg)
        .par_iter()
        .map(|&(alpha, seed)| {
            let row = |scheme: &str, acc: f64, single: &[f64], error: String| EnsembleRow {
                seed,
                config_hash: cfg.hash(),
                alpha,
                clients: cfg.clients,
                scheme: scheme.to_string(),
                accuracy: acc,
                single_avg: single.iter().sum::<f64>() / single.len().max(1) as f64,
                single_best: single.iter().copied().fold(0.0, f64::max),
                ok: error.is_empty(),
                error,
            };
            let cell = match cell_models(cfg, alpha, seed) {
                Ok(c) => c,
                Err(e) => return cfg.schemes.iter().map(|s| row(s.name(), 0.0, &[], e.to_string())).collect(),
            };
            cfg.schemes
                .iter()
                .map(|&scheme| match evaluate_scheme(cfg, &cell, scheme, seed) {
                    Ok(acc) => row(scheme.name(), acc, &cell.single, String::new()),
                    Err(e) => row(scheme.name(), 0.0, &cell.single, e.to_string()),
                })
                .collect()
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

fn evaluate_scheme(cfg: &ExperimentConfig, cell: &CellModels, scheme: Scheme, seed: u64) -> Result<f64, ExperimentError> {
    let x = cell.test.inputs();
    let image = cell.test.image_shape();
    let predictions = if cfg.secure_eval && cfg.parties >= 2 {
        let params = RingParams::default();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let pms = cell
            .models
            .iter()
            .map(|m| provision(m, cfg.parties, &params, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let mut session = Session::new(params, SimTransport::local(cfg.parties), Dealer::new(cfg.parties, seed)?)?;
        crate::ensemble::secure_ensemble(&pms, x, image, None, scheme, &cfg.weighting, &cfg.approx, &mut session, &mut rng, seed)?
            .predictions
    } else {
        plaintext_ensemble(&cell.models, x, image, None, scheme, &cfg.weighting, seed)?.predictions
    };
    Ok(cell.test.accuracy(&predictions))
}

/// Fairness of every reward scheme against accuracy-proportional merit. The
/// evaluation batch is the test split without labels; agreement uses the
/// soft-vote ensemble.
pub fn cmd_fairness_sweep(cfg: &ExperimentConfig) -> Result<Vec<(String, FairnessRecord)>, ExperimentError> {
    cfg.validate()?;
    if cfg.clients < 2 {
        return Err(ExperimentError::Config("fairness needs at least 2 clients".into()));
    }
    let cells: Vec<Result<Vec<FairnessRecord>, ExperimentError>> = grid(cfg)
        .par_iter()
        .map(|&(alpha, seed)| {
            let cell = cell_models(cfg, alpha, seed)?;
            let probs = cell
                .models
                .iter()
                .map(|m| Ok(tensor_nn::softmax_rows(&tensor_nn::forward(m, cell.test.inputs())?)))
                .collect::<Result<Vec<_>, ExperimentError>>()?;
            let soft = plaintext_ensemble(&cell.models, cell.test.inputs(), None, None, Scheme::Soft, &cfg.weighting, seed)?;
            let mut batch = EvaluationBatch::new(probs);
            batch.ensemble = Some(soft.predictions);
            batch.accuracies = Some(cell.single.clone());
            let merit = ideal_merit(&cell.single)?;
            RewardScheme::ALL
                .iter()
                .map(|&scheme| {
                    let r = match scheme {
                        RewardScheme::Uniform => reward_uniform(cfg.clients),
                        RewardScheme::Confidence => reward_confidence(&batch)?,
                        RewardScheme::Agreement => reward_agreement_or_uniform(&batch)?,
                    };
                    Ok(FairnessRecord {
                        seed,
                        alpha,
                        clients: cfg.clients,
                        scheme,
                        fairness: fairness(r.r(), merit.m())?,
                        rewards: r.r().to_vec(),
                        merit: merit.m().to_vec(),
                    })
                })
                .collect()
        })
        .collect();
    let hash = cfg.hash();
    let mut out = Vec::new();
    for c in cells {
        for rec in c? {
            out.push((hash.clone(), rec));
        }
    }
    Ok(out)
}

/// Serializes rows with a header line.
pub fn to_csv<R: Serialize>(rows: &[R]) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| ExperimentError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn fairness_csv(rows: &[(String, FairnessRecord)], clients: usize) -> String {
    let mut out = format!("config_hash,{}\n", FairnessRecord::csv_header(clients));
    for (hash, rec) in rows {
        out.push_str(&format!("{hash},{}\n", rec.csv_row()));
    }
    out
}

/// `partition`: splits the desk training set and writes one CSV per client
/// plus `manifest.json` with the label histograms.
pub fn cmd_partition(cfg: &ExperimentConfig, dir: &Path) -> Result<crate::partition::PartitionManifest, ExperimentError> {
    cfg.validate()?;
    let (train_set, _) = desk_data(cfg, cfg.seed);
    let pcfg = PartitionConfig::new(cfg.alphas[0], cfg.clients, cfg.seed);
    let parts = dirichlet_partition(&train_set, &pcfg)?;
    std::fs::create_dir_all(dir)?;
    for (k, p) in parts.iter().enumerate() {
        p.to_csv(&dir.join(format!("client_{k}.csv")))?;
    }
    let manifest = crate::partition::PartitionManifest::of(&pcfg, &parts);
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub seed: u64,
    pub model: String,
    pub parameters: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// `train`: fits one model on the full desk training set and saves it.
pub fn cmd_train(cfg: &ExperimentConfig, path: &Path) -> Result<TrainReport, ExperimentError> {
    cfg.validate()?;
    let (train_set, test_set) = desk_data(cfg, cfg.seed);
    let single = ExperimentConfig { clients: 1, ..cfg.clone() };
    let model = train_clients(&single, &train_set, 1.0, cfg.seed)?.remove(0);
    tensor_nn::save_weights(&model, path)?;
    let acc = |d: &LabeledDataset<f64>| -> Result<f64, ExperimentError> {
        Ok(d.accuracy(&tensor_nn::forward(&model, d.inputs())?.argmax_rows()))
    };
    Ok(TrainReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        model: cfg.model.clone(),
        parameters: model.parameter_count(),
        train_accuracy: acc(&train_set)?,
        test_accuracy: acc(&test_set)?,
    })
}
