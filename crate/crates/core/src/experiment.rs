//! Experiment configuration, dataset preparation, evaluation and result
//! files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterHyper, EncoderSignature};
use crate::dataio::{
    generate_synthetic, inject_label_error, partition_dirichlet, Dataset, DatasetManifest, FeatureSet,
    SyntheticSpec,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{rsum, RsumBreakdown};
use crate::federation::{
    run_training, save_checkpoint, ClientProfile, ErrorLevel, FederationConfig, GlobalState, RoundSummary,
};
use crate::math::Matrix;
use crate::model::{Architecture, CodecModel};
use crate::skb::Skb;
use crate::trainer::{ClientData, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Proposed,
    SingleModalFl,
    NoDenoise,
    LocalOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Proposed => "proposed",
            Mode::SingleModalFl => "single_modal_fl",
            Mode::NoDenoise => "no_denoise",
            Mode::LocalOnly => "local_only",
        }
    }
}

/// Paths to precomputed features. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFiles {
    pub image: PathBuf,
    pub text: PathBuf,
    pub manifest: PathBuf,
    /// Falls back to the manifest's `skb_prototypes_file`.
    #[serde(default)]
    pub skb: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub synthetic: SyntheticSpec,
    pub features: Option<FeatureFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationBlock {
    pub n_clients: usize,
    pub rounds: u64,
    pub dropout: f64,
    pub alpha: f64,
    /// Client compute speeds are drawn uniformly from this range.
    pub speed_range: (f64, f64),
    pub stats_every: u64,
}

impl Default for FederationBlock {
    fn default() -> Self {
        Self {
            n_clients: 10,
            rounds: 50,
            dropout: 0.0,
            alpha: 0.5,
            speed_range: (0.5, 2.0),
            stats_every: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterBlock {
    pub hidden: usize,
    pub k_intra: usize,
    pub k_cross: usize,
    pub sigma: f64,
    pub attn_scale: f64,
    pub layers: usize,
}

impl Default for AdapterBlock {
    fn default() -> Self {
        let h = AdapterHyper::default();
        Self {
            hidden: 128,
            k_intra: h.k_intra,
            k_cross: h.k_cross,
            sigma: h.sigma,
            attn_scale: h.attn_scale,
            layers: h.layers,
        }
    }
}

impl AdapterBlock {
    pub fn hyper(&self) -> AdapterHyper {
        AdapterHyper {
            k_intra: self.k_intra,
            k_cross: self.k_cross,
            sigma: self.sigma,
            attn_scale: self.attn_scale,
            layers: self.layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelingBlock {
    pub q: f64,
    pub patience: u32,
    pub tau_percentile: f64,
}

impl Default for LabelingBlock {
    fn default() -> Self {
        Self {
            q: 0.1,
            patience: 3,
            tau_percentile: 25.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorBlock {
    pub mild_rate: f64,
    pub severe_rate: f64,
    pub mild_clients: Vec<u32>,
    pub severe_clients: Vec<u32>,
}

impl Default for ErrorBlock {
    fn default() -> Self {
        Self {
            mild_rate: 0.10,
            severe_rate: 0.40,
            mild_clients: Vec::new(),
            severe_clients: Vec::new(),
        }
    }
}

impl ErrorBlock {
    pub fn level(&self, client: u32) -> ErrorLevel {
        if self.severe_clients.contains(&client) {
            ErrorLevel::Severe
        } else if self.mild_clients.contains(&client) {
            ErrorLevel::Mild
        } else {
            ErrorLevel::None
        }
    }

    pub fn rate(&self, level: ErrorLevel) -> f64 {
        match level {
            ErrorLevel::None => 0.0,
            ErrorLevel::Mild => self.mild_rate,
            ErrorLevel::Severe => self.severe_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalBlock {
    /// Eval samples per forward pass; 0 evaluates the split in one pass.
    pub batch_size: usize,
    /// Also evaluate every client's local parameters each round.
    pub per_client: bool,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            batch_size: 0,
            per_client: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub dataset: DatasetConfig,
    pub federation: FederationBlock,
    pub train: TrainConfig,
    pub adapter: AdapterBlock,
    pub labeling: LabelingBlock,
    pub errors: ErrorBlock,
    pub eval: EvalBlock,
    /// Write a checkpoint every this many rounds; 0 disables.
    pub checkpoint_every: u64,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Proposed,
            dataset: DatasetConfig::default(),
            federation: FederationBlock::default(),
            train: TrainConfig::default(),
            adapter: AdapterBlock::default(),
            labeling: LabelingBlock::default(),
            errors: ErrorBlock::default(),
            eval: EvalBlock::default(),
            checkpoint_every: 0,
            output_dir: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Loads a JSON config; relative feature paths resolve against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if let Some(files) = cfg.dataset.features.as_mut() {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [&mut files.image, &mut files.text, &mut files.manifest] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            if let Some(p) = files.skb.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let f = &self.federation;
        if f.n_clients == 0 {
            return Err(Error::Config("federation.n_clients must be >= 1".into()));
        }
        if !(f.alpha > 0.0) || !(0.0..1.0).contains(&f.dropout) || f.stats_every == 0 {
            return Err(Error::Config(format!(
                "federation needs alpha > 0, dropout in [0, 1), stats_every >= 1 (got {}, {}, {})",
                f.alpha, f.dropout, f.stats_every
            )));
        }
        if !(f.speed_range.0 > 0.0) || f.speed_range.1 < f.speed_range.0 {
            return Err(Error::Config(format!("bad speed_range {:?}", f.speed_range)));
        }
        let a = &self.adapter;
        if a.hidden == 0 || !(a.sigma > 0.0) || !(a.attn_scale > 0.0) || a.layers == 0 {
            return Err(Error::Config("adapter needs hidden >= 1, sigma > 0, attn_scale > 0, layers >= 1".into()));
        }
        let l = &self.labeling;
        if !(0.0..1.0).contains(&l.q) || !(0.0..=100.0).contains(&l.tau_percentile) {
            return Err(Error::Config(format!(
                "labeling.q must be in [0, 1) and tau_percentile in [0, 100] (got {}, {})",
                l.q, l.tau_percentile
            )));
        }
        let e = &self.errors;
        if !(0.0..=1.0).contains(&e.mild_rate) || !(0.0..=1.0).contains(&e.severe_rate) {
            return Err(Error::Config("error rates must be in [0, 1]".into()));
        }
        for &c in e.mild_clients.iter().chain(&e.severe_clients) {
            if c as usize >= f.n_clients {
                return Err(Error::Config(format!("error group names client {c}, but n_clients = {}", f.n_clients)));
            }
        }
        if let Some(id) = e.mild_clients.iter().find(|c| e.severe_clients.contains(c)) {
            return Err(Error::Config(format!("client {id} is in both error groups")));
        }
        if let Some(files) = &self.dataset.features {
            for p in [&files.image, &files.text, &files.manifest].into_iter().chain(files.skb.as_ref()) {
                if !p.exists() {
                    return Err(Error::Config(format!("missing file {}", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Federation settings implied by the mode.
    pub fn federation_config(&self) -> FederationConfig {
        let denoise = self.mode != Mode::NoDenoise;
        FederationConfig {
            train: TrainConfig {
                confidence_quantile: if denoise { self.labeling.q } else { 0.0 },
                seed: self.seed,
                ..self.train.clone()
            },
            patience: self.labeling.patience,
            tau_percentile: self.labeling.tau_percentile,
            prune: denoise,
            aggregate: self.mode != Mode::LocalOnly,
            stats_every: self.federation.stats_every,
            seed: self.seed,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.mode {
            Mode::SingleModalFl => Architecture::PerModality,
            _ => Architecture::Shared,
        }
    }

    /// Canonical JSON of the effective config (defaults resolved).
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_string(self)?.as_bytes())))
    }
}

/// Held-out image/text features with their pairing.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub image: FeatureSet,
    pub text: FeatureSet,
    /// Text rows matching each image row.
    pub pairing: Vec<Vec<usize>>,
}

fn rows_of(set: &FeatureSet, ids: &[u64]) -> Result<Vec<usize>> {
    let index = set.row_index();
    ids.iter()
        .map(|id| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("sample {id} missing from {}", set.signature)))
        })
        .collect()
}

impl EvalSet {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let groups = data.manifest.group_of();
        let mut text_ids = Vec::new();
        let mut pairing = Vec::new();
        for id in &data.manifest.splits.eval {
            let g = groups[id];
            pairing.push((text_ids.len()..text_ids.len() + g.texts.len()).collect());
            text_ids.extend_from_slice(&g.texts);
        }
        Ok(Self {
            image: data.image.select_rows(&rows_of(&data.image, &data.manifest.splits.eval)?),
            text: data.text.select_rows(&rows_of(&data.text, &text_ids)?),
            pairing,
        })
    }

    /// Tokens for the whole split, encoded in chunks of `batch` images (and
    /// their captions); 0 means a single pass.
    pub fn encode(&self, model: &CodecModel, batch: usize) -> Result<(Matrix, Matrix)> {
        let n = self.image.len();
        let step = if batch == 0 { n.max(1) } else { batch };
        let mut img_rows = Vec::new();
        let mut txt_rows = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + step).min(n);
            let imgs: Vec<usize> = (start..end).collect();
            let txts: Vec<usize> = self.pairing[start..end].iter().flatten().copied().collect();
            let tokens = model.encode(&[self.image.select_rows(&imgs), self.text.select_rows(&txts)])?;
            img_rows.extend((0..tokens[0].rows()).map(|r| tokens[0].row(r).to_vec()));
            txt_rows.extend((0..tokens[1].rows()).map(|r| tokens[1].row(r).to_vec()));
            start = end;
        }
        Ok((Matrix::from_rows(&img_rows)?, Matrix::from_rows(&txt_rows)?))
    }

    pub fn evaluate(&self, model: &CodecModel, batch: usize) -> Result<RsumBreakdown> {
        let (img, txt) = self.encode(model, batch)?;
        Ok(rsum(&img, &txt, &self.pairing)?.1)
    }
}

/// Everything a run needs, derived deterministically from the config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub eval: EvalSet,
    pub state: GlobalState,
    /// Per client: image ids whose training caption was corrupted.
    pub corrupted: BTreeMap<u32, BTreeSet<u64>>,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset.features {
        None => Ok(generate_synthetic(&cfg.dataset.synthetic)?.dataset),
        Some(files) => {
            let manifest = DatasetManifest::load(&files.manifest)?;
            let skb_path = match (&files.skb, &manifest.skb_prototypes_file) {
                (Some(p), _) => p.clone(),
                (None, Some(p)) => files.manifest.parent().unwrap_or(Path::new(".")).join(p),
                (None, None) => {
                    return Err(Error::Config("no SKB file given in config or manifest".into()));
                }
            };
            Ok(Dataset {
                image: FeatureSet::load(&files.image)?,
                text: FeatureSet::load(&files.text)?,
                manifest,
                skb: Skb::load(skb_path)?,
            })
        }
    }
}

/// Seed stream tags.
const TAG_PARTITION: u64 = 1;
const TAG_ERRORS: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_SPEED: u64 = 4;

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    dataset.manifest.validate()?;
    let eval = EvalSet::from_dataset(&dataset)?;
    let n_clients = cfg.federation.n_clients;
    let shards = partition_dirichlet(
        &dataset.manifest,
        n_clients,
        cfg.federation.alpha,
        derive_seed(cfg.seed, &[TAG_PARTITION]),
    )?;
    let groups = dataset.manifest.group_of();
    let signatures: Vec<EncoderSignature> = vec![dataset.image.signature, dataset.text.signature];
    let mut speed_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_SPEED]));
    let (lo, hi) = cfg.federation.speed_range;

    let mut clients = Vec::with_capacity(n_clients);
    let mut corrupted = BTreeMap::new();
    for (k, shard) in shards.iter().enumerate() {
        let id = k as u32;
        let level = cfg.errors.level(id);
        // Training pairs each image with its first caption.
        let pairs: Vec<(u64, u64)> = shard.iter().map(|img| (*img, groups[img].texts[0])).collect();
        let noisy = inject_label_error(&pairs, cfg.errors.rate(level), derive_seed(cfg.seed, &[TAG_ERRORS, k as u64]))?;
        corrupted.insert(
            id,
            pairs
                .iter()
                .zip(&noisy)
                .filter(|(a, b)| a.1 != b.1)
                .map(|(a, _)| a.0)
                .collect(),
        );
        let img_ids: Vec<u64> = noisy.iter().map(|p| p.0).collect();
        let txt_ids: Vec<u64> = noisy.iter().map(|p| p.1).collect();
        let img = dataset.image.select_rows(&rows_of(&dataset.image, &img_ids)?);
        let mut txt = dataset.text.select_rows(&rows_of(&dataset.text, &txt_ids)?);
        // Text rows carry their image's id so both modalities share sample keys.
        txt.sample_ids = img_ids.clone();
        let speed = if hi > lo { speed_rng.random_range(lo..=hi) } else { lo };
        let profile = ClientProfile {
            client_id: id,
            signatures: signatures.clone(),
            compute_speed: speed,
            dropout_prob: cfg.federation.dropout,
            label_error_level: level,
        };
        clients.push((profile, ClientData::new(id, vec![img, txt])?));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_INIT]));
    let model = CodecModel::init(
        cfg.architecture(),
        &signatures,
        cfg.adapter.hidden,
        dataset.skb.dim(),
        cfg.adapter.hyper(),
        &mut rng,
    )?;
    Ok(Prepared {
        state: GlobalState::new(model, clients)?,
        dataset,
        eval,
        corrupted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: u64,
    pub rsum: f64,
    pub recalls: RsumBreakdown,
    pub mean_loss: f64,
    pub retained_fraction: f64,
    pub pruned_total: usize,
    pub sim_duration: f64,
}

pub const METRICS_HEADER: &str = "round,rsum,r1_i2t,r5_i2t,r10_i2t,r1_t2i,r5_t2i,r10_t2i,mean_loss,retained_fraction,pruned_total,sim_duration";

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        let r = self.recalls.values();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.rsum,
            r[0],
            r[1],
            r[2],
            r[3],
            r[4],
            r[5],
            self.mean_loss,
            self.retained_fraction,
            self.pruned_total,
            self.sim_duration
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client_id: u32,
    pub group: ErrorLevel,
    pub final_rsum: f64,
    pub best_rsum: f64,
    pub pruned: usize,
    /// Pruned samples whose caption was actually corrupted.
    pub pruned_corrupted: usize,
    pub corrupted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub clients: Vec<u32>,
    pub final_rsum: f64,
    pub best_rsum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub rounds: u64,
    pub final_metrics: MetricRecord,
    pub best_metrics: MetricRecord,
    pub groups: BTreeMap<String, GroupSummary>,
    pub clients: Vec<ClientSummary>,
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub round: u64,
    pub client_id: u32,
    pub sample_id: u64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub history: Vec<MetricRecord>,
    /// Per round, per client RSUM of its latest local parameters.
    pub client_history: Vec<BTreeMap<u32, f64>>,
    pub summary: Summary,
    pub prune_events: Vec<PruneEvent>,
    pub corrupted: BTreeMap<u32, BTreeSet<u64>>,
    pub final_state: GlobalState,
}

/// Writes `contents` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(contents)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Incrementally written metrics file, renamed into place when closed.
struct MetricsWriter {
    partial: PathBuf,
    target: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    fn create(dir: &Path) -> Result<Self> {
        let partial = dir.join("metrics.csv.partial");
        let mut out = BufWriter::new(File::create(&partial)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self {
            partial,
            target: dir.join("metrics.csv"),
            out,
        })
    }

    fn push(&mut self, r: &MetricRecord) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        self.out.flush()?;
        Ok(())
    }

    fn close(mut self) -> Result<()> {
        self.out.flush()?;
        drop(self.out);
        fs::rename(&self.partial, &self.target)?;
        Ok(())
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs a full experiment. With `out_dir`, writes metrics.csv,
/// summary.json and config-echo.json there.
pub fn run_experiment_config(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentOutcome> {
    let prepared = prepare(cfg)?;
    let fed = cfg.federation_config();
    fed.validate()?;
    let config_hash = cfg.hash()?;
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_atomic(&dir.join("config-echo.json"), cfg.canonical_json()?.as_bytes())?;
            Some(MetricsWriter::create(dir)?)
        }
        None => None,
    };
    let eval = &prepared.eval;
    let batch = cfg.eval.batch_size;
    let aggregate = fed.aggregate;
    let per_client = cfg.eval.per_client || !aggregate;
    let mut client_history: Vec<BTreeMap<u32, f64>> = Vec::new();
    let mut prune_events = Vec::new();
    let started = std::time::Instant::now();

    let mut observe = |state: &GlobalState, summary: Option<&RoundSummary>| -> Result<MetricRecord> {
        let clients: BTreeMap<u32, RsumBreakdown> = if per_client {
            state
                .clients
                .iter()
                .map(|c| Ok((c.profile.client_id, eval.evaluate(&c.model, batch)?)))
                .collect::<Result<_>>()?
        } else {
            BTreeMap::new()
        };
        let recalls = if aggregate {
            eval.evaluate(&state.model, batch)?
        } else {
            // Without aggregation there is no global model; report the mean
            // over clients.
            let n = clients.len() as f64;
            let mut m = RsumBreakdown::default();
            for b in clients.values() {
                m.r1_i2t += b.r1_i2t / n;
                m.r5_i2t += b.r5_i2t / n;
                m.r10_i2t += b.r10_i2t / n;
                m.r1_t2i += b.r1_t2i / n;
                m.r5_t2i += b.r5_t2i / n;
                m.r10_t2i += b.r10_t2i / n;
            }
            m
        };
        client_history.push(clients.iter().map(|(&k, b)| (k, b.rsum())).collect());
        if let Some(s) = summary {
            prune_events.extend(s.pruned_this_round.iter().map(|&(client_id, sample_id)| PruneEvent {
                round: s.round,
                client_id,
                sample_id,
            }));
        }
        let record = MetricRecord {
            round: state.round,
            rsum: recalls.rsum(),
            recalls,
            mean_loss: summary.map_or(0.0, |s| s.mean_loss),
            retained_fraction: summary.map_or(1.0, |s| s.retained_fraction),
            pruned_total: state.pruned_total(),
            sim_duration: summary.map_or(0.0, |s| s.sim_duration),
        };
        log::info!(
            "[{}] round {:>3} rsum {:7.2} loss {:.4} retained {:.3} pruned {} ({:.1}s)",
            cfg.mode.name(),
            record.round,
            record.rsum,
            record.mean_loss,
            record.retained_fraction,
            record.pruned_total,
            started.elapsed().as_secs_f64()
        );
        if let Some(w) = writer.as_mut() {
            w.push(&record)?;
        }
        if let (Some(dir), true) = (out_dir, cfg.checkpoint_every > 0 && state.round % cfg.checkpoint_every == 0) {
            let ck = dir.join("checkpoints");
            fs::create_dir_all(&ck)?;
            save_checkpoint(&state.model, state.round, ck.join(format!("round-{:04}.semc", state.round)))?;
            for c in &state.clients {
                write_atomic(
                    &ck.join(format!("ledger-round-{:04}-client-{:02}.json", state.round, c.profile.client_id)),
                    c.ledger.to_json()?.as_bytes(),
                )?;
            }
        }
        Ok(record)
    };
    let result = run_training(prepared.state, &prepared.dataset.skb, &fed, cfg.federation.rounds, &mut observe);
    drop(observe);
    let (final_state, history) = match result {
        Ok(r) => r,
        Err(e) => {
            // Keep whatever rounds completed.
            if let Some(w) = writer {
                w.close()?;
            }
            return Err(e);
        }
    };

    let best = *history
        .iter()
        .max_by(|a, b| a.rsum.total_cmp(&b.rsum).then(b.round.cmp(&a.round)))
        .expect("round 0 is always recorded");
    let mut clients = Vec::new();
    for c in &final_state.clients {
        let id = c.profile.client_id;
        let series: Vec<f64> = client_history.iter().filter_map(|h| h.get(&id).copied()).collect();
        clients.push(ClientSummary {
            client_id: id,
            group: c.profile.label_error_level,
            final_rsum: series.last().copied().unwrap_or(0.0),
            best_rsum: series.iter().copied().fold(0.0, f64::max),
            pruned: c.ledger.pruned().len(),
            pruned_corrupted: c.ledger.pruned().iter().filter(|s| prepared.corrupted[&id].contains(s)).count(),
            corrupted: prepared.corrupted[&id].len(),
        });
    }
    let mut groups = BTreeMap::new();
    for level in [ErrorLevel::None, ErrorLevel::Mild, ErrorLevel::Severe] {
        let members: Vec<&ClientSummary> = clients.iter().filter(|c| c.group == level).collect();
        if members.is_empty() {
            continue;
        }
        groups.insert(
            level.name().to_string(),
            GroupSummary {
                clients: members.iter().map(|c| c.client_id).collect(),
                final_rsum: mean(members.iter().map(|c| c.final_rsum)),
                best_rsum: mean(members.iter().map(|c| c.best_rsum)),
            },
        );
    }
    let summary = Summary {
        mode: cfg.mode,
        rounds: cfg.federation.rounds,
        final_metrics: *history.last().expect("nonempty"),
        best_metrics: best,
        groups,
        clients,
        config_hash,
    };
    if let (Some(dir), Some(w)) = (out_dir, writer) {
        w.close()?;
        write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    }
    Ok(ExperimentOutcome {
        history,
        client_history,
        summary,
        prune_events,
        corrupted: prepared.corrupted,
        final_state,
    })
}

/// Merges the metrics of several runs into long format:
/// `run,round,metric,value`. Runs are named by their directory.
pub fn compare_runs(run_dirs: &[PathBuf], output: &Path) -> Result<usize> {
    let columns: Vec<&str> = METRICS_HEADER.split(',').collect();
    let mut out = String::from("run,round,metric,value\n");
    let mut rows = 0;
    for dir in run_dirs {
        let path = dir.join("metrics.csv");
        let file = File::open(&path)
            .map_err(|e| Error::Config(format!("run {}: cannot read metrics.csv: {e}", dir.display())))?;
        let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let mut lines = BufReader::new(file).lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header != METRICS_HEADER {
            return Err(Error::Format(format!("run {}: unexpected metrics header", dir.display())));
        }
        for line in lines {
            let line = line?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(Error::Format(format!("run {}: malformed row {line:?}", dir.display())));
            }
            for (c, v) in columns.iter().zip(&fields).skip(1) {
                out.push_str(&format!("{name},{},{c},{v}\n", fields[0]));
                rows += 1;
            }
        }
    }
    write_atomic(output, out.as_bytes())?;
    Ok(rows)
}

/// Writes a synthetic dataset as feature files, manifest and SKB.
pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    data.image.save(dir.join("image.semf"))?;
    data.text.save(dir.join("text.semf"))?;
    data.skb.save(dir.join("skb.bin"))?;
    let mut manifest = data.manifest.clone();
    manifest.skb_prototypes_file = Some("skb.bin".into());
    manifest.save(dir.join("manifest.json"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig {
                synthetic: SyntheticSpec {
                    classes: 4,
                    n_per_class: 10,
                    semantic_dim: 8,
                    image_dim: 12,
                    text_dim: 10,
                    ..SyntheticSpec::default()
                },
                features: None,
            },
            federation: FederationBlock {
                n_clients: 2,
                rounds: 2,
                ..FederationBlock::default()
            },
            adapter: AdapterBlock {
                hidden: 8,
                k_intra: 3,
                k_cross: 3,
                ..AdapterBlock::default()
            },
            train: TrainConfig {
                local_epochs: 2,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn history_has_rounds_plus_one_records() {
        let cfg = tiny_config();
        let out = run_experiment_config(&cfg, None).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.history[0].round, 0);
        for r in &out.history {
            assert!((r.rsum - r.recalls.values().iter().sum::<f64>()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_rounds_gives_initial_evaluation_only() {
        let mut cfg = tiny_config();
        cfg.federation.rounds = 0;
        let out = run_experiment_config(&cfg, None).unwrap();
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = tiny_config();
        cfg.errors.severe_clients = vec![7];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.labeling.q = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.dataset.features = Some(FeatureFiles {
            image: "/nonexistent/a".into(),
            text: "/nonexistent/b".into(),
            manifest: "/nonexistent/c".into(),
            skb: None,
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"mode": "proposed", "bogus": 1}"#).is_err());
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"mode": "local_only"}"#).unwrap();
        assert_eq!(cfg.mode, Mode::LocalOnly);
        assert_eq!(cfg.federation.n_clients, 10);
    }

    #[test]
    fn mode_settings() {
        let mut cfg = tiny_config();
        cfg.mode = Mode::NoDenoise;
        let f = cfg.federation_config();
        assert_eq!(f.train.confidence_quantile, 0.0);
        assert!(!f.prune);
        cfg.mode = Mode::LocalOnly;
        assert!(!cfg.federation_config().aggregate);
        cfg.mode = Mode::SingleModalFl;
        assert_eq!(cfg.architecture(), Architecture::PerModality);
    }
}
