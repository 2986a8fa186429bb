//! Local adapter training: bidirectional hardest-negative triplet loss, an
//! SKB alignment regularizer, analytic gradients and Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{EncoderSignature, Modality, ModalTokens};
use crate::dataio::FeatureSet;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::labeling::{
    batch_confidence, ledger_update, mask_low_confidence, provisional_labels,
    single_modality_confidence, LabelLedger, LabelStats, ProvisionalLabel,
};
use crate::math::{cosine_grads, cosine_matrix, finite_diff_grad, AdamConfig, Matrix};
use crate::model::{apply_adam, CodecModel, ModelGrads, OptimizerState};
use crate::skb::Skb;

/// Local epochs per round unless configured. Clients hold under one
/// mini-batch of data at the default scale, so this is also the number of
/// optimizer steps per round.
pub const DEFAULT_LOCAL_EPOCHS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin: f64,
    pub reg_weight: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Fraction of each mini-batch excluded as low-confidence.
    pub confidence_quantile: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            reg_weight: 1.0,
            batch_size: 128,
            local_epochs: DEFAULT_LOCAL_EPOCHS,
            confidence_quantile: 0.1,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.adam.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "margin must be >= 0, lr > 0, batch_size >= 1 (got {}, {}, {})",
                self.margin, self.adam.lr, self.batch_size
            )));
        }
        if !(self.reg_weight >= 0.0) || !(0.0..1.0).contains(&self.confidence_quantile) {
            return Err(Error::Config(format!(
                "reg_weight must be >= 0 and confidence_quantile in [0, 1) (got {}, {})",
                self.reg_weight, self.confidence_quantile
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub triplet: f64,
    pub regularizer: f64,
    pub total: f64,
    pub retained_count: usize,
}

/// Aligned per-modality feature rows: row `i` of every set is sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub sets: Vec<FeatureSet>,
}

impl TrainBatch {
    pub fn new(sets: Vec<FeatureSet>) -> Result<Self> {
        let Some(first) = sets.first() else {
            return Err(Error::InvalidArgument("a batch needs at least one modality".into()));
        };
        if sets.iter().any(|s| s.len() != first.len()) {
            return Err(Error::Shape("modalities in a batch must have equal row counts".into()));
        }
        Ok(Self { sets })
    }

    pub fn len(&self) -> usize {
        self.sets[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample keys: ids of the first modality.
    pub fn sample_ids(&self) -> &[u64] {
        &self.sets[0].sample_ids
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            sets: self.sets.iter().map(|s| s.select_rows(rows)).collect(),
        }
    }
}

/// Anchor ids per modality, one per batch row.
pub type BatchLabels = Vec<Vec<u32>>;

struct Hardest {
    idx: usize,
    sim: f64,
}

fn hardest(sims: impl Iterator<Item = (usize, f64)>) -> Option<Hardest> {
    let mut best: Option<Hardest> = None;
    for (idx, sim) in sims {
        if best.as_ref().is_none_or(|b| sim > b.sim) {
            best = Some(Hardest { idx, sim });
        }
    }
    best
}

/// Loss, per-sample values and gradients of the bidirectional triplet loss.
fn triplet_core(
    a: &Matrix,
    b: &Matrix,
    pairing: &[usize],
    margin: f64,
    mask: &[bool],
    with_grad: bool,
) -> Result<(f64, Vec<f64>, Option<(Matrix, Matrix)>)> {
    let n = a.rows();
    if pairing.len() != n || mask.len() != n || b.rows() != n {
        return Err(Error::Shape(format!(
            "triplet over {n} anchors, {} positives, pairing {}, mask {}",
            b.rows(),
            pairing.len(),
            mask.len()
        )));
    }
    let retained: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let mut per_sample = vec![0.0; n];
    if retained.is_empty() {
        let grads = with_grad.then(|| (Matrix::zeros(n, a.cols()), Matrix::zeros(n, b.cols())));
        return Ok((0.0, per_sample, grads));
    }
    // sim[k][l] = s(a_{retained[k]}, b_{pairing[retained[l]]})
    let r = retained.len();
    let positives: Vec<usize> = retained.iter().map(|&j| pairing[j]).collect();
    let s = cosine_matrix(&a.select_rows(&retained), &b.select_rows(&positives))?;
    let sim: Vec<Vec<f64>> = (0..r).map(|k| s.row(k).to_vec()).collect();
    let scale = 1.0 / (2.0 * r as f64);
    let mut dsim = vec![vec![0.0; r]; r];
    let mut total = 0.0;
    for k in 0..r {
        let pos = sim[k][k];
        let mut sample = 0.0;
        if let Some(h) = hardest((0..r).filter(|&l| l != k).map(|l| (l, sim[k][l]))) {
            let v = margin - pos + h.sim;
            if v > 0.0 {
                sample += v;
                dsim[k][k] -= scale;
                dsim[k][h.idx] += scale;
            }
        }
        if let Some(h) = hardest((0..r).filter(|&l| l != k).map(|l| (l, sim[l][k]))) {
            let v = margin - pos + h.sim;
            if v > 0.0 {
                sample += v;
                dsim[k][k] -= scale;
                dsim[h.idx][k] += scale;
            }
        }
        per_sample[retained[k]] = 0.5 * sample;
        total += sample;
    }
    let loss = total * scale;
    let grads = if with_grad {
        let mut ga = Matrix::zeros(n, a.cols());
        let mut gb = Matrix::zeros(n, b.cols());
        for (k, &i) in retained.iter().enumerate() {
            for (l, &j) in retained.iter().enumerate() {
                let d = dsim[k][l];
                if d == 0.0 {
                    continue;
                }
                let pj = pairing[j];
                let (_, gi, gj) = cosine_grads(a.row(i), b.row(pj));
                crate::math::axpy(d, &gi, ga.row_mut(i));
                crate::math::axpy(d, &gj, gb.row_mut(pj));
            }
        }
        Some((ga, gb))
    } else {
        None
    };
    Ok((loss, per_sample, grads))
}

/// Bidirectional triplet loss with the hardest retained in-batch negative,
/// averaged over both directions of every retained anchor. Returns the loss
/// and each sample's mean hinge over the two directions.
pub fn triplet_loss(
    tokens_a: &Matrix,
    tokens_b: &Matrix,
    pairing: &[usize],
    margin: f64,
    mask: &[bool],
) -> Result<(f64, Vec<f64>)> {
    let (l, p, _) = triplet_core(tokens_a, tokens_b, pairing, margin, mask, false)?;
    Ok((l, p))
}

fn regularizer_core(
    tokens: &Matrix,
    labels: &[u32],
    skb: &Skb,
    mask: &[bool],
    with_grad: bool,
) -> Result<(f64, Option<Matrix>)> {
    if labels.len() != tokens.rows() || mask.len() != tokens.rows() {
        return Err(Error::Shape("regularizer labels/mask do not match tokens".into()));
    }
    let retained = mask.iter().filter(|&&m| m).count();
    let mut grad = with_grad.then(|| Matrix::zeros(tokens.rows(), tokens.cols()));
    if retained == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for i in (0..tokens.rows()).filter(|&i| mask[i]) {
        let c = skb
            .index_of(labels[i])
            .ok_or_else(|| Error::InvalidArgument(format!("label {} is not an SKB class", labels[i])))?;
        let anchor = skb.anchor(c);
        let t = tokens.row(i);
        total += t.iter().zip(anchor).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        if let Some(g) = grad.as_mut() {
            for ((gv, x), y) in g.row_mut(i).iter_mut().zip(t).zip(anchor) {
                *gv = 2.0 * (x - y) / retained as f64;
            }
        }
    }
    Ok((total / retained as f64, grad))
}

/// Mean squared distance between retained tokens and their labeled anchors.
pub fn alignment_regularizer(tokens: &Matrix, labels: &[u32], skb: &Skb, mask: &[bool]) -> Result<f64> {
    Ok(regularizer_core(tokens, labels, skb, mask, false)?.0)
}

fn loss_and_token_grads(
    tokens: &[Matrix],
    labels: &BatchLabels,
    skb: &Skb,
    cfg: &TrainConfig,
    with_grad: bool,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let n = tokens[0].rows();
    let all = vec![true; n];
    let identity: Vec<usize> = (0..n).collect();
    let mut grads: Vec<Matrix> = tokens.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();

    let mut triplet = 0.0;
    if tokens.len() >= 2 {
        let (l, _, g) = triplet_core(&tokens[0], &tokens[1], &identity, cfg.margin, &all, with_grad)?;
        triplet = l;
        if let Some((ga, gb)) = g {
            grads[0].add_assign(&ga);
            grads[1].add_assign(&gb);
        }
    }
    let m = tokens.len() as f64;
    let mut regularizer = 0.0;
    for (s, t) in tokens.iter().enumerate() {
        let (r, g) = regularizer_core(t, &labels[s], skb, &all, with_grad)?;
        regularizer += r / m;
        if let Some(mut g) = g {
            g.scale(cfg.reg_weight / m);
            grads[s].add_assign(&g);
        }
    }
    Ok((
        LossBreakdown {
            triplet,
            regularizer,
            total: triplet + cfg.reg_weight * regularizer,
            retained_count: n,
        },
        grads,
    ))
}

fn retained_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

fn select_labels(labels: &BatchLabels, rows: &[usize]) -> BatchLabels {
    labels.iter().map(|l| rows.iter().map(|&r| l[r]).collect()).collect()
}

/// Adapter forward on the retained rows, then `triplet + reg_weight × reg`.
/// Excluded rows are removed before the graph is built, so they influence
/// nothing.
pub fn total_loss(
    batch: &TrainBatch,
    model: &CodecModel,
    skb: &Skb,
    labels: &BatchLabels,
    mask: &[bool],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let rows = retained_rows(mask);
    if rows.is_empty() {
        return Ok(LossBreakdown::default());
    }
    let sub = batch.select(&rows);
    let tokens = model.encode(&sub.sets)?;
    Ok(loss_and_token_grads(&tokens, &select_labels(labels, &rows), skb, cfg, false)?.0)
}

/// Analytic gradients of [`total_loss`] with respect to every trainable
/// block. Edge selection is treated as fixed within the step.
pub fn backward(
    batch: &TrainBatch,
    model: &CodecModel,
    skb: &Skb,
    labels: &BatchLabels,
    mask: &[bool],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ModelGrads)> {
    let rows = retained_rows(mask);
    if rows.is_empty() {
        let zero = ModelGrads {
            towers: model
                .towers
                .iter()
                .map(|(k, p)| (k.clone(), p.weights.zeros_like()))
                .collect(),
        };
        return Ok((LossBreakdown::default(), zero));
    }
    let sub = batch.select(&rows);
    let trace = model.forward(&sub.sets)?;
    let (loss, token_grads) =
        loss_and_token_grads(&trace.tokens, &select_labels(labels, &rows), skb, cfg, true)?;
    let grads = model.backward(&trace, &sub.sets, &token_grads)?;
    for (name, m) in grads.blocks() {
        if !m.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok((loss, grads))
}

/// A client's paired training data. Row `i` of every set is one sample; the
/// first set's ids are the sample keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: u32,
    pub sets: Vec<FeatureSet>,
    /// Key of the client's shuffling stream; the client id by default.
    pub seed: u64,
}

impl ClientData {
    pub fn new(client_id: u32, sets: Vec<FeatureSet>) -> Result<Self> {
        TrainBatch::new(sets.clone())?;
        Ok(Self {
            client_id,
            sets,
            seed: client_id as u64,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn len(&self) -> usize {
        self.sets.first().map_or(0, FeatureSet::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sets[0].sample_ids
    }

    pub fn signatures(&self) -> Vec<EncoderSignature> {
        self.sets.iter().map(|s| s.signature).collect()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.sets.iter().map(|s| s.signature.modality).collect()
    }

    pub fn batch(&self, rows: &[usize]) -> TrainBatch {
        TrainBatch {
            sets: self.sets.iter().map(|s| s.select_rows(rows)).collect(),
        }
    }
}

/// Labels and confidences for one batch, computed from the current model.
#[derive(Debug, Clone)]
pub struct BatchAssessment {
    pub labels: BatchLabels,
    /// Sample-level label (first modality), confidence filled in.
    pub sample_labels: Vec<ProvisionalLabel>,
    pub confidences: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Provisional labels, confidences and the retention mask for a batch.
pub fn assess_batch(batch: &TrainBatch, model: &CodecModel, skb: &Skb, q: f64) -> Result<BatchAssessment> {
    let tokens = model.encode(&batch.sets)?;
    let modal: Vec<ModalTokens> = batch
        .sets
        .iter()
        .zip(&tokens)
        .map(|(s, t)| ModalTokens {
            signature: s.signature,
            sample_ids: s.sample_ids.clone(),
            tokens: t.clone(),
        })
        .collect();
    let all = provisional_labels(&modal, skb)?;
    let n = batch.len();
    let labels: BatchLabels = all.chunks(n.max(1)).map(|c| c.iter().map(|l| l.anchor_id).collect()).collect();
    let confidences = if tokens.len() >= 2 {
        let identity: Vec<usize> = (0..n).collect();
        batch_confidence(&tokens[0], &tokens[1], &identity)?
    } else {
        single_modality_confidence(&tokens[0], skb)?
    };
    let mask = mask_low_confidence(&confidences, q);
    let sample_labels = all[..n]
        .iter()
        .zip(&confidences)
        .map(|(l, &c)| ProvisionalLabel {
            confidence: Some(c),
            ..l.clone()
        })
        .collect();
    Ok(BatchAssessment {
        labels: if n == 0 { vec![Vec::new(); tokens.len()] } else { labels },
        sample_labels,
        confidences,
        mask,
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalStats {
    pub mean_loss: f64,
    pub steps: usize,
    pub processed: usize,
    pub retained: usize,
    pub label_stats: LabelStats,
    /// Mini-batches processed, for the simulated duration.
    pub batches: usize,
}

impl LocalStats {
    pub fn retained_fraction(&self) -> f64 {
        if self.processed == 0 {
            0.0
        } else {
            self.retained as f64 / self.processed as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub model: CodecModel,
    pub optimizer: OptimizerState,
    pub ledger: LabelLedger,
    pub stats: LocalStats,
}

/// Shuffled mini-batch row lists for one epoch over the non-pruned samples.
pub fn epoch_batches(client: &ClientData, ledger: &LabelLedger, cfg: &TrainConfig, round: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rows: Vec<usize> = client
        .sample_ids()
        .iter()
        .enumerate()
        .filter(|(_, id)| !ledger.is_pruned(**id))
        .map(|(r, _)| r)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[client.seed, round, epoch]));
    rows.shuffle(&mut rng);
    rows.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

/// One training step on a batch: label, mask, backpropagate, Adam.
pub fn train_step(
    batch: &TrainBatch,
    model: &CodecModel,
    optimizer: &OptimizerState,
    skb: &Skb,
    cfg: &TrainConfig,
) -> Result<(CodecModel, OptimizerState, BatchAssessment, LossBreakdown)> {
    let assessment = assess_batch(batch, model, skb, cfg.confidence_quantile)?;
    let (loss, grads) = backward(batch, model, skb, &assessment.labels, &assessment.mask, cfg)?;
    if loss.retained_count == 0 {
        return Ok((model.clone(), optimizer.clone(), assessment, loss));
    }
    let (next, opt) = apply_adam(model, &grads, optimizer, &cfg.adam)?;
    Ok((next, opt, assessment, loss))
}

/// Runs `local_epochs` passes of seeded mini-batch training. The ledger
/// records the final epoch's flags; label statistics come from the same
/// epoch.
pub fn local_update(
    model: &CodecModel,
    optimizer: &OptimizerState,
    client: &ClientData,
    ledger: &LabelLedger,
    skb: &Skb,
    cfg: &TrainConfig,
    round: u64,
) -> Result<LocalOutcome> {
    if client.is_empty() {
        return Err(Error::InvalidArgument(format!("client {} has an empty shard", client.client_id)));
    }
    let mut model = model.clone();
    let mut optimizer = optimizer.clone();
    let mut stats = LocalStats::default();
    let mut loss_sum = 0.0;
    let mut last_labels: Vec<ProvisionalLabel> = Vec::new();
    let mut last_mask: Vec<bool> = Vec::new();
    for epoch in 0..cfg.local_epochs as u64 {
        let final_epoch = epoch + 1 == cfg.local_epochs as u64;
        for rows in epoch_batches(client, ledger, cfg, round, epoch) {
            let batch = client.batch(&rows);
            let (m, o, assessment, loss) = train_step(&batch, &model, &optimizer, skb, cfg)?;
            model = m;
            optimizer = o;
            stats.batches += 1;
            stats.processed += rows.len();
            stats.retained += loss.retained_count;
            if loss.retained_count > 0 {
                stats.steps += 1;
                loss_sum += loss.total;
            }
            if final_epoch {
                last_labels.extend(assessment.sample_labels);
                last_mask.extend(assessment.mask);
            }
        }
    }
    stats.mean_loss = if stats.steps == 0 { 0.0 } else { loss_sum / stats.steps as f64 };
    stats.label_stats = LabelStats::from_labels(&last_labels);
    let ledger = if last_labels.is_empty() {
        ledger.clone()
    } else {
        ledger_update(ledger, round, &last_labels, &last_mask)
    };
    Ok(LocalOutcome {
        model,
        optimizer,
        ledger,
        stats,
    })
}

/// Sizes of a gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSizes {
    pub hidden: usize,
    pub semantic: usize,
    pub samples: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub classes: usize,
}

impl Default for GradCheckSizes {
    fn default() -> Self {
        Self {
            hidden: 8,
            semantic: 4,
            samples: 6,
            image_dim: 6,
            text_dim: 5,
            classes: 3,
        }
    }
}

impl GradCheckSizes {
    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        (self.image_dim + 1) * h + (self.text_dim + 1) * h + 2 * h * h + h * self.semantic
    }
}

/// Largest parameter count `gradient_check` accepts.
pub const GRAD_CHECK_MAX_PARAMS: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Max relative error per block, in vectorization order.
    pub blocks: Vec<(String, f64)>,
    pub max_rel_error: f64,
    /// Seed of the accepted (kink-free) instance.
    pub instance_seed: u64,
}

struct GradInstance {
    batch: TrainBatch,
    model: CodecModel,
    skb: Skb,
    labels: BatchLabels,
}

fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn grad_instance(sizes: &GradCheckSizes, seed: u64) -> Result<GradInstance> {
    use crate::adapter::AdapterHyper;
    use crate::model::Architecture;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = sizes.samples;
    let si = EncoderSignature { modality: Modality::Image, family: 1, dim: sizes.image_dim };
    let st = EncoderSignature { modality: Modality::Text, family: 2, dim: sizes.text_dim };
    let ids: Vec<u64> = (0..n as u64).collect();
    let img = FeatureSet::new(si, ids.clone(), random_matrix(n, sizes.image_dim, &mut rng)?)?;
    let txt = FeatureSet::new(st, ids, random_matrix(n, sizes.text_dim, &mut rng)?)?;
    let class_ids: Vec<u32> = (0..sizes.classes as u32).collect();
    let skb = Skb::build(&random_matrix(sizes.classes, sizes.semantic, &mut rng)?, &class_ids)?;
    let mut model = CodecModel::init(
        Architecture::Shared,
        &[si, st],
        sizes.hidden,
        sizes.semantic,
        AdapterHyper::default(),
        &mut rng,
    )?;
    // Larger weights keep activations away from the relu boundary and give
    // the loss terms visible curvature.
    let scaled: Vec<f64> = model.to_vec().iter().map(|v| 2.0 * v).collect();
    model.assign_from(&scaled)?;
    let labels = (0..2)
        .map(|_| (0..n).map(|_| rng.random_range(0..sizes.classes as u32)).collect())
        .collect();
    Ok(GradInstance {
        batch: TrainBatch::new(vec![img, txt])?,
        model,
        skb,
        labels,
    })
}

/// Compares analytic gradients of [`total_loss`] against central finite
/// differences. Instances that sit near a non-smooth point (hinge switch,
/// relu boundary, top-k boundary) are detected by disagreement between two
/// difference step sizes and replaced by the next seed. `perturb` is added
/// to every analytic entry and exists to exercise the failure path.
pub fn gradient_check(seed: u64, sizes: &GradCheckSizes, perturb: f64) -> Result<GradCheckReport> {
    if sizes.param_count() > GRAD_CHECK_MAX_PARAMS {
        return Err(Error::InvalidArgument(format!(
            "grad-check instance has {} parameters (limit {GRAD_CHECK_MAX_PARAMS})",
            sizes.param_count()
        )));
    }
    if sizes.samples < 2 || sizes.classes < 2 || sizes.hidden == 0 || sizes.semantic == 0 {
        return Err(Error::InvalidArgument("grad-check needs >= 2 samples and classes".into()));
    }
    const EPS: f64 = 1e-6;
    let cfg = TrainConfig::default();
    for attempt in 0..64u64 {
        let instance_seed = derive_seed(seed, &[attempt]);
        let inst = grad_instance(sizes, instance_seed)?;
        let mask = vec![true; sizes.samples];
        let x0 = Matrix::from_vec(1, inst.model.num_values(), inst.model.to_vec())?;
        let loss_at = |x: &Matrix| -> f64 {
            let mut m = inst.model.clone();
            m.assign_from(x.data()).expect("layout");
            total_loss(&inst.batch, &m, &inst.skb, &inst.labels, &mask, &cfg)
                .map(|l| l.total)
                .unwrap_or(f64::NAN)
        };
        let fd = finite_diff_grad(loss_at, &x0, EPS);
        let fd_wide = finite_diff_grad(loss_at, &x0, 2.0 * EPS);
        if !fd.is_finite() || fd.max_abs_diff(&fd_wide) > 1e-6 {
            log::debug!("grad-check instance {instance_seed:#x} is near a kink; reseeding");
            continue;
        }
        let (_, grads) = backward(&inst.batch, &inst.model, &inst.skb, &inst.labels, &mask, &cfg)?;
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut max_rel_error = 0.0f64;
        for (name, g) in grads.blocks() {
            let mut worst = 0.0f64;
            for (i, &a) in g.data().iter().enumerate() {
                let a = a + perturb;
                let f = fd.data()[offset + i];
                worst = worst.max((a - f).abs() / a.abs().max(f.abs()).max(GRAD_CHECK_FLOOR));
            }
            offset += g.data().len();
            max_rel_error = max_rel_error.max(worst);
            blocks.push((name, worst));
        }
        return Ok(GradCheckReport {
            blocks,
            max_rel_error,
            instance_seed,
        });
    }
    Err(Error::InvalidArgument(format!("no kink-free grad-check instance found for seed {seed}")))
}

/// Denominator floor for relative errors, so entries that are zero up to
/// round-off do not dominate.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{AdapterHyper, Modality};
    use crate::math::cosine_similarity;
    use crate::model::Architecture;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: &[Vec<f64>]) -> Matrix {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        Matrix::from_rows(&normed).unwrap()
    }

    /// Unit 2-d vector at angle `theta`.
    fn ang(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    #[test]
    fn hinge_zero_when_margin_met() {
        // a0·b0 = 0.9, a0·b1 = 0.5; the reverse direction is made slack too.
        let a = unit_rows(&[ang(0.0), ang(3.0)]);
        let b = unit_rows(&[ang(0.9f64.acos()), ang(-(0.5f64.acos()))]);
        let (_, per) = triplet_loss(&a, &b, &[0, 1], 0.2, &[true, true]).unwrap();
        // Direction a→b for sample 0: max(0, 0.2 − 0.9 + 0.5) = 0.
        let pos = cosine_similarity(a.row(0), b.row(0)).unwrap();
        let neg = cosine_similarity(a.row(0), b.row(1)).unwrap();
        assert!((pos - 0.9).abs() < 1e-12 && (neg - 0.5).abs() < 1e-12);
        assert!((0.2f64 - pos + neg).max(0.0) == 0.0);
        assert!(per[0] >= 0.0);
    }

    #[test]
    fn hinge_value_when_violated() {
        let a = unit_rows(&[ang(0.0), ang(std::f64::consts::PI)]);
        let b = unit_rows(&[ang(0.4f64.acos()), ang(-(0.5f64.acos()))]);
        let pos = cosine_similarity(a.row(0), b.row(0)).unwrap();
        let neg = cosine_similarity(a.row(0), b.row(1)).unwrap();
        assert!((pos - 0.4).abs() < 1e-12 && (neg - 0.5).abs() < 1e-12);
        let (loss, per) = triplet_loss(&a, &b, &[0, 1], 0.2, &[true, true]).unwrap();
        // sim = [[0.4, 0.5], [-0.4, -0.5]].
        // Sample 0: a→b 0.2−0.4+0.5 = 0.3; b→a 0.2−0.4−0.4 < 0.
        // Sample 1: a→b 0.2+0.5−0.4 = 0.3; b→a 0.2+0.5+0.5 = 1.2.
        assert!((per[0] - 0.15).abs() < 1e-12);
        assert!((per[1] - 0.75).abs() < 1e-12);
        assert!((loss - (0.3 + 0.0 + 0.3 + 1.2) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_pair_has_no_negatives() {
        let a = unit_rows(&[vec![1.0, 0.0]]);
        let b = unit_rows(&[vec![0.0, 1.0]]);
        let (loss, _) = triplet_loss(&a, &b, &[0], 0.2, &[true]).unwrap();
        assert_eq!(loss, 0.0);
        let (loss, _) = triplet_loss(&a, &b, &[0], 0.2, &[false]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn masked_samples_do_not_enter_triplet() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let a = unit_rows(&rows(&mut rng));
        let b = unit_rows(&rows(&mut rng));
        let pairing = [2, 0, 1, 4, 3];
        let mask = [true, false, true, true, false];
        let (full, _) = triplet_loss(&a, &b, &pairing, 0.2, &mask).unwrap();
        let keep = [0usize, 2, 3];
        let a2 = a.select_rows(&keep);
        let b2 = b.select_rows(&[2, 1, 4]);
        let (small, _) = triplet_loss(&a2, &b2, &[0, 1, 2], 0.2, &[true; 3]).unwrap();
        assert!((full - small).abs() < 1e-15);
    }

    #[test]
    fn regularizer_examples() {
        let skb = Skb::build(&Matrix::identity(3), &[0, 1, 2]).unwrap();
        let t = Matrix::identity(3);
        assert_eq!(alignment_regularizer(&t, &[0, 1, 2], &skb, &[true; 3]).unwrap(), 0.0);
        let r = alignment_regularizer(&t.select_rows(&[0]), &[1], &skb, &[true]).unwrap();
        assert!((r - 2.0).abs() < 1e-15);
        assert_eq!(alignment_regularizer(&t, &[1, 1, 1], &skb, &[false; 3]).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tok = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels = [2, 0, 1, 1];
        let mask = [true, true, false, true];
        let mut direct = 0.0;
        for i in [0usize, 1, 3] {
            for d in 0..3 {
                direct += (tok.get(i, d) - skb.anchor(labels[i] as usize)[d]).powi(2);
            }
        }
        let r = alignment_regularizer(&tok, &labels, &skb, &mask).unwrap();
        assert!((r - direct / 3.0).abs() < 1e-14);
    }

    #[test]
    fn token_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let skb = Skb::build(&Matrix::identity(4), &[0, 1, 2, 3]).unwrap();
        let cfg = TrainConfig::default();
        let tok = |rng: &mut ChaCha8Rng| Matrix::from_vec(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let tokens = vec![tok(&mut rng), tok(&mut rng)];
        let labels: BatchLabels = vec![vec![0, 1, 2, 3, 0], vec![1, 1, 2, 0, 3]];
        let (_, grads) = loss_and_token_grads(&tokens, &labels, &skb, &cfg, true).unwrap();
        for s in 0..2 {
            let fd = finite_diff_grad(
                |m| {
                    let mut t = tokens.clone();
                    t[s] = m.clone();
                    loss_and_token_grads(&t, &labels, &skb, &cfg, false).unwrap().0.total
                },
                &tokens[s],
                1e-6,
            );
            assert!(grads[s].max_abs_diff(&fd) < 1e-7, "{}", grads[s].max_abs_diff(&fd));
        }
    }

    fn toy_client(seed: u64, n: usize) -> (ClientData, Skb, CodecModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let si = EncoderSignature { modality: Modality::Image, family: 1, dim: 5 };
        let st = EncoderSignature { modality: Modality::Text, family: 2, dim: 3 };
        let ids: Vec<u64> = (0..n as u64).collect();
        let img = FeatureSet::new(si, ids.clone(), Matrix::from_vec(n, 5, (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
        let txt = FeatureSet::new(st, ids, Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
        let skb = Skb::build(
            &Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            &[0, 1, 2],
        )
        .unwrap();
        let hyper = AdapterHyper { k_intra: 2, k_cross: 2, ..AdapterHyper::default() };
        let model = CodecModel::init(Architecture::Shared, &[si, st], 6, 4, hyper, &mut rng).unwrap();
        (ClientData::new(0, vec![img, txt]).unwrap(), skb, model)
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let (client, skb, model) = toy_client(1, 6);
        let cfg = TrainConfig { local_epochs: 0, ..TrainConfig::default() };
        let out = local_update(&model, &OptimizerState::new(&model), &client, &LabelLedger::default(), &skb, &cfg, 0).unwrap();
        assert_eq!(out.model, model);
    }

    #[test]
    fn empty_shard_is_an_error() {
        let (client, skb, model) = toy_client(1, 6);
        let empty = ClientData::new(3, client.sets.iter().map(|s| s.select_rows(&[])).collect()).unwrap();
        let cfg = TrainConfig::default();
        assert!(local_update(&model, &OptimizerState::new(&model), &empty, &LabelLedger::default(), &skb, &cfg, 0).is_err());
    }

    #[test]
    fn one_batch_equals_manual_composition() {
        let (client, skb, model) = toy_client(2, 6);
        let cfg = TrainConfig { local_epochs: 1, batch_size: 16, confidence_quantile: 0.2, ..TrainConfig::default() };
        let opt = OptimizerState::new(&model);
        let out = local_update(&model, &opt, &client, &LabelLedger::default(), &skb, &cfg, 4).unwrap();

        let rows = epoch_batches(&client, &LabelLedger::default(), &cfg, 4, 0);
        assert_eq!(rows.len(), 1);
        let batch = client.batch(&rows[0]);
        let a = assess_batch(&batch, &model, &skb, 0.2).unwrap();
        assert_eq!(a.mask.iter().filter(|&&m| !m).count(), 1);
        let (_, g) = backward(&batch, &model, &skb, &a.labels, &a.mask, &cfg).unwrap();
        let (manual, _) = apply_adam(&model, &g, &opt, &cfg.adam).unwrap();
        assert_eq!(out.model, manual);
        assert_eq!(out.stats.retained, 5);
        assert_eq!(out.ledger.entries.len(), 6);
    }

    #[test]
    fn local_update_is_deterministic() {
        let (client, skb, model) = toy_client(3, 10);
        let cfg = TrainConfig { local_epochs: 3, batch_size: 4, ..TrainConfig::default() };
        let opt = OptimizerState::new(&model);
        let a = local_update(&model, &opt, &client, &LabelLedger::default(), &skb, &cfg, 1).unwrap();
        let b = local_update(&model, &opt, &client, &LabelLedger::default(), &skb, &cfg, 1).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.ledger, b.ledger);
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn masked_sample_is_invisible() {
        let (client, skb, model) = toy_client(4, 7);
        let cfg = TrainConfig::default();
        let labels: BatchLabels = vec![vec![0, 1, 2, 0, 1, 2, 0], vec![1, 1, 0, 2, 2, 0, 1]];
        let full = client.batch(&(0..7).collect::<Vec<_>>());
        let mut mask = vec![true; 7];
        mask[3] = false;
        let small_rows = [0usize, 1, 2, 4, 5, 6];
        let small = client.batch(&small_rows);
        let small_labels = select_labels(&labels, &small_rows);
        let (l1, g1) = backward(&full, &model, &skb, &labels, &mask, &cfg).unwrap();
        let (l2, g2) = backward(&small, &model, &skb, &small_labels, &[true; 6], &cfg).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn fully_masked_batch_has_zero_gradient() {
        let (client, skb, model) = toy_client(5, 4);
        let labels: BatchLabels = vec![vec![0; 4], vec![0; 4]];
        let batch = client.batch(&[0, 1, 2, 3]);
        let (loss, g) = backward(&batch, &model, &skb, &labels, &[false; 4], &TrainConfig::default()).unwrap();
        assert_eq!(loss.retained_count, 0);
        assert!(g.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn breakdown_identity_and_zero_reg_weight() {
        let (client, skb, model) = toy_client(6, 6);
        let labels: BatchLabels = vec![vec![0, 1, 2, 0, 1, 2], vec![2, 1, 0, 0, 1, 2]];
        let batch = client.batch(&[0, 1, 2, 3, 4, 5]);
        let cfg = TrainConfig::default();
        let l = total_loss(&batch, &model, &skb, &labels, &[true; 6], &cfg).unwrap();
        assert!((l.total - (l.triplet + 1.0 * l.regularizer)).abs() < 1e-12);
        let cfg0 = TrainConfig { reg_weight: 0.0, ..cfg };
        let l0 = total_loss(&batch, &model, &skb, &labels, &[true; 6], &cfg0).unwrap();
        assert_eq!(l0.total, l0.triplet);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { margin: -0.1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        let mut c = TrainConfig::default();
        c.adam.lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_gradient_check_passes() {
        for seed in 0..5 {
            let r = gradient_check(seed, &GradCheckSizes::default(), 0.0).unwrap();
            eprintln!("seed {seed}: {:.3e} {:?}", r.max_rel_error, r.blocks);
            assert!(r.max_rel_error <= 1e-4, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn perturbed_gradient_fails_check() {
        let r = gradient_check(0, &GradCheckSizes::default(), 1e-3).unwrap();
        assert!(r.max_rel_error > 1e-4);
    }
}
