//! The trainable codec: either one adapter shared by all modalities, or one
//! independent adapter per modality (the single-modal baseline).
//!
//! Vectorization order: towers by name, each in the adapter's own block order.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    self, AdapterHyper, AdapterParams, AdapterWeights, EncoderSignature, ForwardTrace, Modality,
};
use crate::dataio::FeatureSet;
use crate::error::{Error, Result};
use crate::math::{adam_step, AdamConfig, AdamState, Matrix};

const SHARED_TOWER: &str = "shared";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Shared,
    PerModality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecModel {
    pub architecture: Architecture,
    pub towers: BTreeMap<String, AdapterParams>,
}

impl CodecModel {
    pub fn shared(params: AdapterParams) -> Self {
        Self {
            architecture: Architecture::Shared,
            towers: BTreeMap::from([(SHARED_TOWER.to_string(), params)]),
        }
    }

    pub fn init<R: Rng>(
        architecture: Architecture,
        signatures: &[EncoderSignature],
        hidden: usize,
        semantic_dim: usize,
        hyper: AdapterHyper,
        rng: &mut R,
    ) -> Result<Self> {
        match architecture {
            Architecture::Shared => Ok(Self::shared(AdapterParams::init(
                signatures,
                hidden,
                semantic_dim,
                hyper,
                rng,
            )?)),
            Architecture::PerModality => {
                let modalities: BTreeSet<Modality> = signatures.iter().map(|s| s.modality).collect();
                let mut towers = BTreeMap::new();
                for m in modalities {
                    let sigs: Vec<EncoderSignature> =
                        signatures.iter().copied().filter(|s| s.modality == m).collect();
                    towers.insert(
                        m.name().to_string(),
                        AdapterParams::init(&sigs, hidden, semantic_dim, hyper, rng)?,
                    );
                }
                Ok(Self {
                    architecture,
                    towers,
                })
            }
        }
    }

    pub fn tower_key(&self, modality: Modality) -> &'static str {
        match self.architecture {
            Architecture::Shared => SHARED_TOWER,
            Architecture::PerModality => modality.name(),
        }
    }

    pub fn tower(&self, modality: Modality) -> Result<&AdapterParams> {
        let key = self.tower_key(modality);
        self.towers
            .get(key)
            .ok_or_else(|| Error::UnknownSignature(format!("no adapter tower for {modality}")))
    }

    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        self.towers
            .iter()
            .flat_map(|(k, p)| {
                p.weights
                    .blocks()
                    .into_iter()
                    .map(move |(n, m)| (format!("{k}/{n}"), m))
            })
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.towers
            .iter_mut()
            .flat_map(|(k, p)| {
                p.weights
                    .blocks_mut()
                    .into_iter()
                    .map(move |(n, m)| (format!("{k}/{n}"), m))
            })
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_values());
        for (_, m) in self.blocks() {
            v.extend_from_slice(m.data());
        }
        v
    }

    pub fn assign_from(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "expected {} parameter values, got {}",
                self.num_values(),
                values.len()
            )));
        }
        let mut offset = 0;
        for (_, m) in self.blocks_mut() {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &CodecModel) -> bool {
        let a = self.blocks();
        let b = other.blocks();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((na, ma), (nb, mb))| na == nb && ma.shape() == mb.shape())
    }

    /// Names of the blocks a client holding `signatures` can train.
    pub fn trainable_blocks(&self, signatures: &[EncoderSignature]) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for sig in signatures {
            let key = self.tower_key(sig.modality);
            let Some(tower) = self.towers.get(key) else {
                continue;
            };
            for (name, _) in tower.weights.blocks() {
                let is_proj = name.starts_with("input_proj[");
                if !is_proj || name.starts_with(&format!("input_proj[{sig}]")) {
                    out.insert(format!("{key}/{name}"));
                }
            }
        }
        out
    }

    /// Forward pass over aligned feature sets (row `i` of every set belongs
    /// to the same sample).
    pub fn forward(&self, sets: &[FeatureSet]) -> Result<ModelTrace> {
        let mut parts = Vec::new();
        match self.architecture {
            Architecture::Shared => {
                let params = &self.towers[SHARED_TOWER];
                let idx: Vec<usize> = (0..sets.len()).collect();
                parts.push((SHARED_TOWER.to_string(), adapter::forward_traced(sets, params)?, idx));
            }
            Architecture::PerModality => {
                for (i, fs) in sets.iter().enumerate() {
                    let key = self.tower_key(fs.signature.modality);
                    let params = self.tower(fs.signature.modality)?;
                    parts.push((
                        key.to_string(),
                        adapter::forward_traced(std::slice::from_ref(fs), params)?,
                        vec![i],
                    ));
                }
            }
        }
        let mut tokens = vec![Matrix::zeros(0, 0); sets.len()];
        for (_, trace, idx) in &parts {
            let mut offset = 0;
            for &s in idx {
                let rows: Vec<usize> = (offset..offset + sets[s].len()).collect();
                tokens[s] = trace.tokens().select_rows(&rows);
                offset += sets[s].len();
            }
        }
        Ok(ModelTrace { parts, tokens })
    }

    /// Tokens for every set.
    pub fn encode(&self, sets: &[FeatureSet]) -> Result<Vec<Matrix>> {
        Ok(self.forward(sets)?.tokens)
    }

    pub fn backward(
        &self,
        trace: &ModelTrace,
        sets: &[FeatureSet],
        token_grads: &[Matrix],
    ) -> Result<ModelGrads> {
        let mut towers: BTreeMap<String, AdapterWeights> = self
            .towers
            .iter()
            .map(|(k, p)| (k.clone(), p.weights.zeros_like()))
            .collect();
        for (key, ftrace, idx) in &trace.parts {
            let params = &self.towers[key];
            let rows: usize = idx.iter().map(|&s| sets[s].len()).sum();
            let mut stacked = Matrix::zeros(rows, params.semantic_dim());
            let mut offset = 0;
            for &s in idx {
                for r in 0..sets[s].len() {
                    stacked.row_mut(offset + r).copy_from_slice(token_grads[s].row(r));
                }
                offset += sets[s].len();
            }
            let tower_sets: Vec<FeatureSet> = idx.iter().map(|&s| sets[s].clone()).collect();
            let g = adapter::backward(ftrace, &tower_sets, params, &stacked)?;
            towers.get_mut(key).expect("tower").add_assign(&g);
        }
        Ok(ModelGrads { towers })
    }
}

pub struct ModelTrace {
    parts: Vec<(String, ForwardTrace, Vec<usize>)>,
    /// Tokens per input set.
    pub tokens: Vec<Matrix>,
}

impl ModelTrace {
    pub fn traces(&self) -> impl Iterator<Item = &ForwardTrace> {
        self.parts.iter().map(|(_, t, _)| t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub towers: BTreeMap<String, AdapterWeights>,
}

impl ModelGrads {
    pub fn blocks(&self) -> Vec<(String, &Matrix)> {
        self.towers
            .iter()
            .flat_map(|(k, w)| w.blocks().into_iter().map(move |(n, m)| (format!("{k}/{n}"), m)))
            .collect()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, m)| m.data().iter().copied()).collect()
    }

    pub fn scale(&mut self, s: f64) {
        for w in self.towers.values_mut() {
            w.scale(s);
        }
    }
}

/// One Adam slot per model block, in vectorization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub slots: Vec<AdamState>,
}

impl OptimizerState {
    pub fn new(model: &CodecModel) -> Self {
        Self {
            slots: model.blocks().iter().map(|(_, m)| AdamState::for_param(m)).collect(),
        }
    }
}

/// Applies one Adam step to every block.
pub fn apply_adam(
    model: &CodecModel,
    grads: &ModelGrads,
    state: &OptimizerState,
    cfg: &AdamConfig,
) -> Result<(CodecModel, OptimizerState)> {
    let mut next = model.clone();
    let gblocks = grads.blocks();
    if gblocks.len() != state.slots.len() {
        return Err(Error::Shape("optimizer state does not match model".into()));
    }
    let mut slots = Vec::with_capacity(state.slots.len());
    for (((name, p), (gname, g)), s) in next.blocks_mut().into_iter().zip(&gblocks).zip(&state.slots) {
        debug_assert_eq!(&name, gname);
        let (np, ns) = adam_step(p, g, s, cfg)?;
        *p = np;
        slots.push(ns);
    }
    Ok((next, OptimizerState { slots }))
}
