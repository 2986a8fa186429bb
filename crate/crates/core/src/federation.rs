//! Synchronous federated rounds: client selection, weighted parameter
//! averaging, label-statistics consensus and consensus-driven pruning.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::EncoderSignature;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::labeling::{ledger_prune, AnchorStat, LabelLedger, LabelStats};
use crate::model::{CodecModel, OptimizerState};
use crate::skb::{read_exact, read_u32, Skb};
use crate::trainer::{local_update, ClientData, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLevel {
    None,
    Mild,
    Severe,
}

impl ErrorLevel {
    pub fn name(self) -> &'static str {
        match self {
            ErrorLevel::None => "none",
            ErrorLevel::Mild => "mild",
            ErrorLevel::Severe => "severe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub client_id: u32,
    pub signatures: Vec<EncoderSignature>,
    pub compute_speed: f64,
    pub dropout_prob: f64,
    pub label_error_level: ErrorLevel,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if self.signatures.is_empty() {
            return Err(Error::Config(format!("client {} has no modality", self.client_id)));
        }
        if !(self.compute_speed > 0.0) || !self.compute_speed.is_finite() {
            return Err(Error::Config(format!(
                "client {} compute_speed must be > 0, got {}",
                self.client_id, self.compute_speed
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "client {} dropout_prob must be in [0, 1), got {}",
                self.client_id, self.dropout_prob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub client_id: u32,
    pub params_after: CodecModel,
    pub retained_samples: usize,
    pub label_stats: LabelStats,
    /// Simulated duration of the local update.
    pub wall_time: f64,
    /// Model blocks this client produced gradients for.
    pub contributed: BTreeSet<String>,
}

/// Each client participates independently with probability
/// `1 − dropout_prob`, drawn from a stream seeded by `(seed, round)`.
pub fn select_clients(round: u64, profiles: &[ClientProfile], seed: u64) -> Result<Vec<u32>> {
    if profiles.is_empty() {
        return Err(Error::InvalidArgument("no client profiles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5e1ec7, round]));
    let mut sorted: Vec<&ClientProfile> = profiles.iter().collect();
    sorted.sort_by_key(|p| p.client_id);
    Ok(sorted
        .into_iter()
        .filter(|p| rng.random::<f64>() >= p.dropout_prob)
        .map(|p| p.client_id)
        .collect())
}

/// Entrywise weighted mean of the reported parameters, weights =
/// retained samples (all 1 if every contributor retained nothing). Only
/// clients that trained a block contribute to it; blocks nobody trained keep
/// `previous`. Reduction runs in ascending client id.
pub fn aggregate_params(reports: &[RoundReport], previous: &CodecModel) -> Result<CodecModel> {
    let mut sorted: Vec<&RoundReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    for r in &sorted {
        if !r.params_after.same_layout(previous) {
            return Err(Error::Client {
                client: r.client_id,
                source: Box::new(Error::Shape("parameter layout differs from the global model".into())),
            });
        }
    }
    let vectors: Vec<Vec<f64>> = sorted.iter().map(|r| r.params_after.to_vec()).collect();
    let mut out = previous.to_vec();
    let mut offset = 0;
    for (name, block) in previous.blocks() {
        let len = block.data().len();
        let contributors: Vec<usize> = (0..sorted.len())
            .filter(|&i| sorted[i].contributed.contains(&name))
            .collect();
        if !contributors.is_empty() {
            let mut weights: Vec<f64> = contributors.iter().map(|&i| sorted[i].retained_samples as f64).collect();
            if weights.iter().all(|&w| w == 0.0) {
                weights.iter_mut().for_each(|w| *w = 1.0);
            }
            let total: f64 = weights.iter().sum();
            for e in offset..offset + len {
                let first = vectors[contributors[0]][e];
                if contributors.iter().all(|&i| vectors[i][e] == first) {
                    out[e] = first;
                    continue;
                }
                let mut acc = 0.0;
                for (&i, &w) in contributors.iter().zip(&weights) {
                    acc += w * vectors[i][e];
                }
                out[e] = acc / total;
            }
        }
        offset += len;
    }
    let mut model = previous.clone();
    model.assign_from(&out)?;
    Ok(model)
}

/// Per anchor: summed counts and count-weighted mean confidence.
pub fn aggregate_label_stats(reports: &[RoundReport]) -> LabelStats {
    let mut sorted: Vec<&RoundReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.client_id);
    let mut acc: BTreeMap<u32, (u64, f64)> = BTreeMap::new();
    for r in sorted {
        for (&a, s) in &r.label_stats.anchors {
            let e = acc.entry(a).or_default();
            e.0 += s.count;
            e.1 += s.count as f64 * s.mean_confidence;
        }
    }
    LabelStats {
        anchors: acc
            .into_iter()
            .filter(|(_, (n, _))| *n > 0)
            .map(|(a, (n, s))| {
                (
                    a,
                    AnchorStat {
                        count: n,
                        mean_confidence: s / n as f64,
                    },
                )
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub train: TrainConfig,
    /// Consecutive flagged rounds before a sample may be pruned.
    pub patience: u32,
    /// Percentile of consensus anchor confidences used as the prune threshold.
    pub tau_percentile: f64,
    pub prune: bool,
    /// `false` gives independent local training with no averaging.
    pub aggregate: bool,
    /// Label statistics are exchanged every this many rounds.
    pub stats_every: u64,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            patience: 3,
            tau_percentile: 25.0,
            prune: true,
            aggregate: true,
            stats_every: 1,
            seed: 0,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=100.0).contains(&self.tau_percentile) || self.stats_every == 0 {
            return Err(Error::Config(format!(
                "tau_percentile must be in [0, 100] and stats_every >= 1 (got {}, {})",
                self.tau_percentile, self.stats_every
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub profile: ClientProfile,
    pub data: ClientData,
    pub ledger: LabelLedger,
    pub optimizer: OptimizerState,
    /// Most recent local parameters (its own model when not aggregating).
    pub model: CodecModel,
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    pub round: u64,
    pub model: CodecModel,
    pub clients: Vec<ClientState>,
    pub consensus: LabelStats,
}

impl GlobalState {
    /// Every client starts from `model` with fresh optimizer state.
    pub fn new(model: CodecModel, clients: Vec<(ClientProfile, ClientData)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut states = Vec::with_capacity(clients.len());
        for (profile, data) in clients {
            profile.validate()?;
            if !seen.insert(profile.client_id) || profile.client_id != data.client_id {
                return Err(Error::Config(format!("client id {} is duplicated or mismatched", profile.client_id)));
            }
            states.push(ClientState {
                optimizer: OptimizerState::new(&model),
                model: model.clone(),
                ledger: LabelLedger::default(),
                profile,
                data,
            });
        }
        states.sort_by_key(|c| c.profile.client_id);
        Ok(Self {
            round: 0,
            model,
            clients: states,
            consensus: LabelStats::default(),
        })
    }

    pub fn pruned_total(&self) -> usize {
        self.clients.iter().map(|c| c.ledger.pruned().len()).sum()
    }

    pub fn profiles(&self) -> Vec<ClientProfile> {
        self.clients.iter().map(|c| c.profile.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u64,
    pub participants: Vec<u32>,
    pub mean_loss: f64,
    pub retained_fraction: f64,
    pub pruned_this_round: Vec<(u32, u64)>,
    pub pruned_total: usize,
    pub sim_duration: f64,
}

/// One synchronous round. Returns the next state with `round` incremented.
pub fn run_round(state: &GlobalState, skb: &Skb, cfg: &FederationConfig) -> Result<(GlobalState, RoundSummary)> {
    let round = state.round + 1;
    let participants = select_clients(round, &state.profiles(), cfg.seed)?;
    let mut next = state.clone();
    next.round = round;
    let mut summary = RoundSummary {
        round,
        participants: participants.clone(),
        ..RoundSummary::default()
    };
    if participants.is_empty() {
        log::warn!("round {round}: no participants; skipped");
        summary.pruned_total = next.pruned_total();
        return Ok((next, summary));
    }

    let train = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    let chosen: Vec<usize> = (0..state.clients.len())
        .filter(|&i| participants.contains(&state.clients[i].profile.client_id))
        .collect();
    let outcomes: Vec<_> = chosen
        .par_iter()
        .map(|&i| {
            let c = &state.clients[i];
            let start = if cfg.aggregate { &state.model } else { &c.model };
            (i, local_update(start, &c.optimizer, &c.data, &c.ledger, skb, &train, round))
        })
        .collect();

    let mut reports = Vec::new();
    let (mut loss_sum, mut steps, mut processed, mut retained) = (0.0, 0usize, 0usize, 0usize);
    for (i, outcome) in outcomes {
        let id = state.clients[i].profile.client_id;
        let out = match outcome {
            Ok(o) => o,
            Err(e) => {
                log::error!("round {round}: client {id} failed and is dropped: {e}");
                continue;
            }
        };
        let duration = out.stats.batches as f64 / state.clients[i].profile.compute_speed;
        summary.sim_duration = summary.sim_duration.max(duration);
        loss_sum += out.stats.mean_loss * out.stats.steps as f64;
        steps += out.stats.steps;
        processed += out.stats.processed;
        retained += out.stats.retained;
        let client = &mut next.clients[i];
        reports.push(RoundReport {
            client_id: id,
            contributed: out.model.trainable_blocks(&client.data.signatures()),
            params_after: out.model.clone(),
            retained_samples: out.stats.retained,
            label_stats: out.stats.label_stats.clone(),
            wall_time: duration,
        });
        client.model = out.model;
        client.optimizer = out.optimizer;
        client.ledger = out.ledger;
    }
    summary.mean_loss = if steps == 0 { 0.0 } else { loss_sum / steps as f64 };
    summary.retained_fraction = if processed == 0 { 0.0 } else { retained as f64 / processed as f64 };

    if cfg.aggregate && !reports.is_empty() {
        next.model = aggregate_params(&reports, &state.model)?;
    }
    if round % cfg.stats_every == 0 && !reports.is_empty() {
        next.consensus = aggregate_label_stats(&reports);
        if cfg.prune {
            if let Some(tau) = next.consensus.confidence_percentile(cfg.tau_percentile) {
                for c in next.clients.iter_mut() {
                    let (ledger, ids) = ledger_prune(&c.ledger, &next.consensus, cfg.patience, tau);
                    c.ledger = ledger;
                    summary
                        .pruned_this_round
                        .extend(ids.into_iter().map(|id| (c.profile.client_id, id)));
                }
            }
        }
    }
    summary.pruned_total = next.pruned_total();
    Ok((next, summary))
}

/// Runs `rounds` rounds. `observe` sees the initial state (round 0) and the
/// state after every round; its results form the history.
pub fn run_training<T, F>(
    initial: GlobalState,
    skb: &Skb,
    cfg: &FederationConfig,
    rounds: u64,
    mut observe: F,
) -> Result<(GlobalState, Vec<T>)>
where
    F: FnMut(&GlobalState, Option<&RoundSummary>) -> Result<T>,
{
    cfg.validate()?;
    let mut history = vec![observe(&initial, None)?];
    let mut state = initial;
    for _ in 0..rounds {
        let (next, summary) = run_round(&state, skb, cfg)?;
        history.push(observe(&next, Some(&summary))?);
        state = next;
    }
    Ok((state, history))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SEMC";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes `round` and the model's values in vectorization order.
pub fn write_checkpoint<W: Write>(model: &CodecModel, round: u64, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&round.to_le_bytes())?;
    w.write_all(&(model.num_values() as u64).to_le_bytes())?;
    for v in model.to_vec() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a checkpoint into a copy of `template`, whose layout must match.
pub fn read_checkpoint<R: Read>(template: &CodecModel, mut r: R) -> Result<(CodecModel, u64)> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "checkpoint")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r, "checkpoint")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    read_exact(&mut r, &mut b8, "checkpoint")?;
    let round = u64::from_le_bytes(b8);
    read_exact(&mut r, &mut b8, "checkpoint")?;
    let count = u64::from_le_bytes(b8) as usize;
    if count != template.num_values() {
        return Err(Error::Shape(format!(
            "checkpoint holds {count} values, model expects {}",
            template.num_values()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        read_exact(&mut r, &mut b8, "checkpoint")?;
        let v = f64::from_le_bytes(b8);
        if !v.is_finite() {
            return Err(Error::NonFinite("checkpoint value".into()));
        }
        values.push(v);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let mut model = template.clone();
    model.assign_from(&values)?;
    Ok((model, round))
}

pub fn save_checkpoint(model: &CodecModel, round: u64, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, round, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(template: &CodecModel, path: impl AsRef<Path>) -> Result<(CodecModel, u64)> {
    read_checkpoint(template, BufReader::new(File::open(path)?))
}
