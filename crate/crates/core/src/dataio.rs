//! Frozen-encoder feature sets, their on-disk format, the synthetic paired
//! dataset, non-IID partitioning and pairing corruption.
//!
//! Feature file layout (little-endian): `"SEMF"`, `u32` version (1), `u8`
//! modality tag, `u16` family id, `u32` feature dimension, `u64` row count,
//! the row count of `u64` sample ids, then rows × dimension `f64` values
//! row-major.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adapter::{EncoderSignature, Modality};
use crate::error::{Error, Result};
use crate::math::{normalized, Matrix};
use crate::skb::{read_exact, read_u32, Skb};

const FEATURE_MAGIC: &[u8; 4] = b"SEMF";
const FEATURE_VERSION: u32 = 1;

/// Output of one frozen encoder: one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub signature: EncoderSignature,
    pub sample_ids: Vec<u64>,
    pub features: Matrix,
}

impl FeatureSet {
    pub fn new(signature: EncoderSignature, sample_ids: Vec<u64>, features: Matrix) -> Result<Self> {
        if features.rows() != sample_ids.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} sample ids",
                features.rows(),
                sample_ids.len()
            )));
        }
        if features.cols() != signature.dim {
            return Err(Error::Shape(format!(
                "features of width {} for encoder {signature}",
                features.cols()
            )));
        }
        let mut seen = HashSet::with_capacity(sample_ids.len());
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Duplicate(format!("sample id {dup}")));
        }
        Ok(Self {
            signature,
            sample_ids,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn row_index(&self) -> HashMap<u64, usize> {
        self.sample_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Subset by row positions, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            signature: self.signature,
            sample_ids: rows.iter().map(|&r| self.sample_ids[r]).collect(),
            features: self.features.select_rows(rows),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&[self.signature.modality.tag()])?;
        w.write_all(&self.signature.family.to_le_bytes())?;
        w.write_all(&(self.signature.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for id in &self.sample_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        for v in self.features.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::Format(format!("bad feature-file magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported feature-file version {version}")));
        }
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag, "modality tag")?;
        let mut fam = [0u8; 2];
        read_exact(&mut r, &mut fam, "family id")?;
        let dim = read_u32(&mut r, "dimension")? as usize;
        let mut nb = [0u8; 8];
        read_exact(&mut r, &mut nb, "row count")?;
        let n = u64::from_le_bytes(nb) as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            read_exact(&mut r, &mut nb, "sample ids")?;
            ids.push(u64::from_le_bytes(nb));
        }
        let mut data = Vec::with_capacity((n * dim).min(1 << 24));
        for _ in 0..n * dim {
            read_exact(&mut r, &mut nb, "feature values")?;
            data.push(f64::from_le_bytes(nb));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after feature payload".into()));
        }
        let signature = EncoderSignature {
            modality: Modality::from_tag(tag[0])?,
            family: u16::from_le_bytes(fam),
            dim,
        };
        Self::new(signature, ids, Matrix::from_vec(n, dim, data)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// One image and its caption(s).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingGroup {
    pub image: u64,
    pub texts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub eval: Vec<u64>,
}

/// Dataset description. Split lists and class labels are keyed by image id;
/// class labels are ground truth for the harness only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pairings: Vec<PairingGroup>,
    pub class_labels: BTreeMap<u64, u32>,
    pub splits: Splits,
    #[serde(default)]
    pub skb_prototypes_file: Option<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut images = HashSet::new();
        let mut texts = HashSet::new();
        for g in &self.pairings {
            if !images.insert(g.image) {
                return Err(Error::Duplicate(format!("image {} in pairings", g.image)));
            }
            if g.texts.is_empty() {
                return Err(Error::InvalidArgument(format!("image {} has no captions", g.image)));
            }
            for t in &g.texts {
                if !texts.insert(*t) {
                    return Err(Error::Duplicate(format!("text {t} paired twice")));
                }
            }
        }
        let train: HashSet<u64> = self.splits.train.iter().copied().collect();
        if let Some(id) = self.splits.eval.iter().find(|id| train.contains(id)) {
            return Err(Error::InvalidArgument(format!("sample {id} is in both splits")));
        }
        for id in self.splits.train.iter().chain(&self.splits.eval) {
            if !images.contains(id) {
                return Err(Error::InvalidArgument(format!("split sample {id} has no pairing")));
            }
        }
        Ok(())
    }

    pub fn group_of(&self) -> HashMap<u64, &PairingGroup> {
        self.pairings.iter().map(|g| (g.image, g)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        m.validate()?;
        Ok(m)
    }
}

/// Parameters of the synthetic paired dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub semantic_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub noise_sigma: f64,
    /// Per-class fraction held out for evaluation.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            n_per_class: 50,
            semantic_dim: 64,
            image_dim: 256,
            text_dim: 128,
            noise_sigma: 0.1,
            eval_fraction: 0.2,
            seed: 0,
        }
    }
}

pub const SYNTHETIC_IMAGE_FAMILY: u16 = 1;
pub const SYNTHETIC_TEXT_FAMILY: u16 = 2;

/// Paired image/text features plus everything needed to train and score.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub image: FeatureSet,
    pub text: FeatureSet,
    pub manifest: DatasetManifest,
    pub skb: Skb,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    /// Latent semantic vector of every sample, one row per image id.
    pub latents: Matrix,
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    Matrix::from_vec(rows, cols, data).expect("finite")
}

/// Draws class anchors, noisy latents around them, and fixed random linear
/// encoders for both modalities. Sample `s` has image id `s` and text id `s`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let SyntheticSpec {
        classes,
        n_per_class,
        semantic_dim: d_s,
        image_dim,
        text_dim,
        noise_sigma,
        eval_fraction,
        seed,
    } = *spec;
    if classes < 2 || d_s < 2 || image_dim < 2 || text_dim < 2 || n_per_class == 0 {
        return Err(Error::InvalidArgument(format!("synthetic spec {spec:?}")));
    }
    if image_dim < d_s || text_dim < d_s {
        return Err(Error::InvalidArgument(format!(
            "encoder widths ({image_dim}, {text_dim}) must be >= semantic dimension {d_s} to keep the latent recoverable"
        )));
    }
    if !(noise_sigma >= 0.0) || !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::InvalidArgument(format!("synthetic spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut anchors = Matrix::zeros(classes, d_s);
    for c in 0..classes {
        loop {
            let v: Vec<f64> = (0..d_s).map(|_| StandardNormal.sample(&mut rng)).collect();
            if let Ok((u, _)) = normalized(&v, "anchor") {
                anchors.row_mut(c).copy_from_slice(&u);
                break;
            }
        }
    }
    let class_ids: Vec<u32> = (0..classes as u32).collect();
    let skb = Skb::build(&anchors, &class_ids)?;

    // Maps act on row vectors: feature = z · Mᵀ, stored as d_s × d_m.
    let std_map = 1.0 / (d_s as f64).sqrt();
    let map_img = gaussian_matrix(d_s, image_dim, std_map, &mut rng);
    let map_txt = gaussian_matrix(d_s, text_dim, std_map, &mut rng);

    let n = classes * n_per_class;
    let mut latents = Matrix::zeros(n, d_s);
    let mut class_labels = BTreeMap::new();
    for s in 0..n {
        let c = s / n_per_class;
        for d in 0..d_s {
            let eps: f64 = StandardNormal.sample(&mut rng);
            latents.set(s, d, anchors.get(c, d) + noise_sigma * eps);
        }
        class_labels.insert(s as u64, c as u32);
    }
    let image_features = latents.matmul(&map_img)?;
    let text_features = latents.matmul(&map_txt)?;

    let eval_per_class = ((n_per_class as f64) * eval_fraction).round() as usize;
    let mut splits = Splits::default();
    for c in 0..classes {
        let mut ids: Vec<u64> = ((c * n_per_class) as u64..((c + 1) * n_per_class) as u64).collect();
        ids.shuffle(&mut rng);
        let (eval, train) = ids.split_at(eval_per_class.min(n_per_class - 1));
        splits.eval.extend_from_slice(eval);
        splits.train.extend_from_slice(train);
    }
    splits.train.sort_unstable();
    splits.eval.sort_unstable();

    let ids: Vec<u64> = (0..n as u64).collect();
    let image = FeatureSet::new(
        EncoderSignature {
            modality: Modality::Image,
            family: SYNTHETIC_IMAGE_FAMILY,
            dim: image_dim,
        },
        ids.clone(),
        image_features,
    )?;
    let text = FeatureSet::new(
        EncoderSignature {
            modality: Modality::Text,
            family: SYNTHETIC_TEXT_FAMILY,
            dim: text_dim,
        },
        ids.clone(),
        text_features,
    )?;
    let manifest = DatasetManifest {
        pairings: ids
            .iter()
            .map(|&s| PairingGroup {
                image: s,
                texts: vec![s],
            })
            .collect(),
        class_labels,
        splits,
        skb_prototypes_file: None,
    };
    Ok(SyntheticDataset {
        dataset: Dataset {
            image,
            text,
            manifest,
            skb,
        },
        latents,
    })
}

const PARTITION_RETRIES: usize = 1000;

/// Splits the train split across clients with per-class Dirichlet(alpha)
/// proportions, redrawing until every client holds at least one sample.
/// Returned shards are sorted by image id.
pub fn partition_dirichlet(
    manifest: &DatasetManifest,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<u64>>> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha must be > 0, got {alpha}")));
    }
    if n_clients == 1 {
        let mut all = manifest.splits.train.clone();
        all.sort_unstable();
        return Ok(vec![all]);
    }
    let mut by_class: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for &id in &manifest.splits.train {
        let c = manifest.class_labels.get(&id).copied().unwrap_or(u32::MAX);
        by_class.entry(c).or_default().push(id);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..PARTITION_RETRIES {
        let mut shards = vec![Vec::new(); n_clients];
        for ids in by_class.values() {
            let mut ids = ids.clone();
            ids.sort_unstable();
            ids.shuffle(&mut rng);
            let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            let mut cum = 0.0;
            let mut start = 0usize;
            for (k, d) in draws.iter().enumerate() {
                cum += if total > 0.0 { d / total } else { 1.0 / n_clients as f64 };
                let end = if k + 1 == n_clients {
                    ids.len()
                } else {
                    ((cum * ids.len() as f64).round() as usize).clamp(start, ids.len())
                };
                shards[k].extend_from_slice(&ids[start..end]);
                start = end;
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            shards.iter_mut().for_each(|s| s.sort_unstable());
            return Ok(shards);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not give all {n_clients} clients a sample after {PARTITION_RETRIES} draws; use a larger dataset or alpha"
    )))
}

/// Mis-pairs `⌊rate·m⌋` of the (image, text) pairs by cycling their texts
/// among themselves, so every selected pair ends up wrong. With exactly one
/// selected pair, its text is swapped with a random unselected pair instead.
pub fn inject_label_error(pairs: &[(u64, u64)], rate: f64, seed: u64) -> Result<Vec<(u64, u64)>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("error rate {rate} outside [0, 1]")));
    }
    let m = pairs.len();
    let count = (rate * m as f64).floor() as usize;
    let mut out = pairs.to_vec();
    if count == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = rand::seq::index::sample(&mut rng, m, count).into_vec();
    if count == 1 {
        if m < 2 {
            log::warn!("cannot mis-pair a shard with a single pair");
            return Ok(out);
        }
        let chosen = selected[0];
        let mut other = rng.random_range(0..m - 1);
        if other >= chosen {
            other += 1;
        }
        log::info!("single corrupted pair {chosen} swapped with pair {other}");
        let (a, b) = (out[chosen].1, out[other].1);
        out[chosen].1 = b;
        out[other].1 = a;
        return Ok(out);
    }
    selected.shuffle(&mut rng);
    for k in 0..count {
        out[selected[k]].1 = pairs[selected[(k + 1) % count]].1;
    }
    Ok(out)
}
