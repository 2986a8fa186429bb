//! Error-aware provisional labeling.
//!
//! Each client labels its own tokens with the nearest SKB anchor, scores how
//! trustworthy every sample's pairing is from the in-batch similarity matrix,
//! drops the least confident samples from the gradient step, and keeps a
//! ledger of repeated low-confidence flags. A sample is pruned only when it
//! keeps being flagged and the federation's statistics for its anchor are
//! weak as well.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{Modality, ModalTokens};
use crate::error::Result;
use crate::math::{cosine_matrix, Matrix};
use crate::skb::Skb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvisionalLabel {
    pub sample_id: u64,
    pub modality: Modality,
    pub anchor_id: u32,
    pub anchor_similarity: f64,
    /// Filled in by [`batch_confidence`].
    pub confidence: Option<f64>,
}

/// Aligns every token to its nearest anchor.
pub fn provisional_labels(tokens: &[ModalTokens], skb: &Skb) -> Result<Vec<ProvisionalLabel>> {
    let mut out = Vec::new();
    for set in tokens {
        for (r, &sid) in set.sample_ids.iter().enumerate() {
            let a = skb.align_token(set.tokens.row(r))?;
            out.push(ProvisionalLabel {
                sample_id: sid,
                modality: set.signature.modality,
                anchor_id: a.anchor_id,
                anchor_similarity: a.similarity,
                confidence: None,
            });
        }
    }
    Ok(out)
}

/// Per-sample confidence from the image–text similarity matrix `S`: the
/// margin of the paired entry over the best in-row distractor, averaged with
/// the same margin taken down the paired column. `pairing[i]` is the text row
/// paired with image row `i`.
pub fn batch_confidence(tokens_img: &Matrix, tokens_txt: &Matrix, pairing: &[usize]) -> Result<Vec<f64>> {
    let n = tokens_img.rows();
    let m = tokens_txt.rows();
    let sim = cosine_matrix(tokens_img, tokens_txt)?;
    Ok((0..n)
        .map(|i| {
            let p = pairing[i];
            let pos = sim.get(i, p);
            let row_best = (0..m).filter(|&j| j != p).map(|j| sim.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let col_best = (0..n).filter(|&k| k != i).map(|k| sim.get(k, p)).fold(f64::NEG_INFINITY, f64::max);
            match (row_best.is_finite(), col_best.is_finite()) {
                (true, true) => 0.5 * ((pos - row_best) + (pos - col_best)),
                (true, false) => pos - row_best,
                (false, true) => pos - col_best,
                (false, false) => pos,
            }
        })
        .collect())
}

/// Confidence for clients holding a single modality: the gap between the
/// best and second-best anchor similarity.
pub fn single_modality_confidence(tokens: &Matrix, skb: &Skb) -> Result<Vec<f64>> {
    (0..tokens.rows()).map(|r| skb.alignment_gap(tokens.row(r))).collect()
}

/// Retention mask: the `⌊q·n⌋` least confident samples are excluded
/// (`false`); ties exclude the lower index first.
pub fn mask_low_confidence(confidences: &[f64], q: f64) -> Vec<bool> {
    let n = confidences.len();
    let drop = ((q.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]).then(a.cmp(&b)));
    let mut mask = vec![true; n];
    for &i in &order[..drop] {
        mask[i] = false;
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    Active,
    Tracked,
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub round: u64,
    pub confidence: Option<f64>,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub status: SampleStatus,
    pub consecutive_low: u32,
    pub history: Vec<HistoryEntry>,
    pub last_anchor: Option<u32>,
}

impl Default for LedgerEntry {
    fn default() -> Self {
        Self {
            status: SampleStatus::Active,
            consecutive_low: 0,
            history: Vec::new(),
            last_anchor: None,
        }
    }
}

/// Per-sample label history of one client.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelLedger {
    pub entries: BTreeMap<u64, LedgerEntry>,
}

impl LabelLedger {
    pub fn is_pruned(&self, sample: u64) -> bool {
        self.entries
            .get(&sample)
            .is_some_and(|e| e.status == SampleStatus::Pruned)
    }

    pub fn pruned(&self) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|(_, e)| e.status == SampleStatus::Pruned)
            .map(|(&id, _)| id)
            .collect()
    }

    /// One-record-per-sample text form used in client checkpoints.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Records one round of labels. `mask[i] == false` marks label `i` as
/// flagged. Pruned samples are left untouched.
pub fn ledger_update(ledger: &LabelLedger, round: u64, labels: &[ProvisionalLabel], mask: &[bool]) -> LabelLedger {
    assert_eq!(labels.len(), mask.len(), "labels and mask must align");
    let mut next = ledger.clone();
    for (label, &retained) in labels.iter().zip(mask) {
        let entry = next.entries.entry(label.sample_id).or_default();
        if entry.status == SampleStatus::Pruned {
            continue;
        }
        let flagged = !retained;
        if flagged {
            entry.consecutive_low += 1;
            entry.status = SampleStatus::Tracked;
        } else {
            entry.consecutive_low = 0;
            entry.status = SampleStatus::Active;
        }
        entry.last_anchor = Some(label.anchor_id);
        entry.history.push(HistoryEntry {
            round,
            confidence: label.confidence,
            flagged,
        });
    }
    next
}

/// Per-anchor assignment counts and mean confidence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelStats {
    pub anchors: BTreeMap<u32, AnchorStat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorStat {
    pub count: u64,
    pub mean_confidence: f64,
}

impl LabelStats {
    pub fn from_labels(labels: &[ProvisionalLabel]) -> Self {
        let mut acc: BTreeMap<u32, (u64, f64)> = BTreeMap::new();
        for l in labels {
            let Some(c) = l.confidence else { continue };
            let e = acc.entry(l.anchor_id).or_default();
            e.0 += 1;
            e.1 += c;
        }
        Self {
            anchors: acc
                .into_iter()
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

    /// Linear-interpolated percentile (0–100) of the per-anchor mean
    /// confidences. `None` when no anchor has statistics.
    pub fn confidence_percentile(&self, pct: f64) -> Option<f64> {
        let mut v: Vec<f64> = self.anchors.values().map(|s| s.mean_confidence).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let pos = (pct.clamp(0.0, 100.0) / 100.0) * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
    }
}

/// Prunes tracked samples flagged for at least `patience` consecutive rounds
/// whose last anchor has global mean confidence below `tau_g`. Anchors
/// missing from the consensus count as below the threshold.
pub fn ledger_prune(
    ledger: &LabelLedger,
    consensus: &LabelStats,
    patience: u32,
    tau_g: f64,
) -> (LabelLedger, Vec<u64>) {
    let mut next = ledger.clone();
    let mut pruned = Vec::new();
    for (&id, entry) in next.entries.iter_mut() {
        if entry.status != SampleStatus::Tracked || entry.consecutive_low < patience {
            continue;
        }
        let vouched = entry
            .last_anchor
            .and_then(|a| consensus.anchors.get(&a))
            .is_some_and(|s| s.mean_confidence >= tau_g);
        if !vouched {
            entry.status = SampleStatus::Pruned;
            pruned.push(id);
        }
    }
    (next, pruned)
}
