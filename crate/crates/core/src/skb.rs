//! Semantic knowledge base: a fixed set of unit-norm class anchors that
//! every client aligns its tokens to.
//!
//! File layout (little-endian): `"SKB1"`, `u32` version, `u32` class count,
//! `u32` dimension, class-count × dimension `f64` values row-major, then one
//! `u32` class id per anchor.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{cosine_similarity, norm, Matrix};

const MAGIC: &[u8; 4] = b"SKB1";

#[derive(Debug, Clone, PartialEq)]
pub struct Skb {
    anchors: Matrix,
    class_ids: Vec<u32>,
    version: u32,
}

/// Result of aligning one token to its nearest anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub anchor_id: u32,
    /// Row of the anchor inside the SKB.
    pub anchor_index: usize,
    pub similarity: f64,
}

impl Skb {
    /// Normalizes each prototype row into an anchor. Version starts at 1.
    pub fn build(prototypes: &Matrix, class_ids: &[u32]) -> Result<Self> {
        if prototypes.rows() != class_ids.len() {
            return Err(Error::Shape(format!(
                "{} prototypes for {} class ids",
                prototypes.rows(),
                class_ids.len()
            )));
        }
        if class_ids.len() < 2 {
            return Err(Error::InvalidArgument("an SKB needs at least two classes".into()));
        }
        let mut seen = HashSet::new();
        for id in class_ids {
            if !seen.insert(id) {
                return Err(Error::Duplicate(format!("class id {id}")));
            }
        }
        let mut anchors = prototypes.clone();
        for r in 0..anchors.rows() {
            let n = norm(anchors.row(r));
            if n == 0.0 {
                return Err(Error::ZeroNorm(format!("prototype for class {}", class_ids[r])));
            }
            anchors.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        Ok(Self {
            anchors,
            class_ids: class_ids.to_vec(),
            version: 1,
        })
    }

    pub fn anchors(&self) -> &Matrix {
        &self.anchors
    }

    pub fn anchor(&self, index: usize) -> &[f64] {
        self.anchors.row(index)
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn index_of(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn with_version(mut self, version: u32) -> Self {
        self.version = version;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    /// Cosine similarity of `token` to every anchor, in class order.
    pub fn similarities(&self, token: &[f64]) -> Result<Vec<f64>> {
        if token.len() != self.dim() {
            return Err(Error::Shape(format!(
                "token of length {} against SKB dimension {}",
                token.len(),
                self.dim()
            )));
        }
        if norm(token) == 0.0 {
            return Err(Error::ZeroNorm("token".into()));
        }
        (0..self.num_classes())
            .map(|c| cosine_similarity(token, self.anchor(c)))
            .collect()
    }

    /// Nearest anchor by cosine similarity; ties go to the lower class index.
    pub fn align_token(&self, token: &[f64]) -> Result<Alignment> {
        let sims = self.similarities(token)?;
        let mut best = 0;
        for (c, &s) in sims.iter().enumerate().skip(1) {
            if s > sims[best] {
                best = c;
            }
        }
        Ok(Alignment {
            anchor_id: self.class_ids[best],
            anchor_index: best,
            similarity: sims[best],
        })
    }

    /// Gap between the best and second-best anchor similarity.
    pub fn alignment_gap(&self, token: &[f64]) -> Result<f64> {
        let mut sims = self.similarities(token)?;
        sims.sort_by(|a, b| b.total_cmp(a));
        Ok(sims[0] - sims[1])
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(self.num_classes() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for v in self.anchors.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for id in &self.class_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad SKB magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version == 0 {
            return Err(Error::Format("SKB version must be >= 1".into()));
        }
        let c = read_u32(&mut r, "class count")? as usize;
        let d = read_u32(&mut r, "dimension")? as usize;
        let mut data = Vec::with_capacity(c * d);
        for _ in 0..c * d {
            let mut b = [0u8; 8];
            read_exact(&mut r, &mut b, "anchor values")?;
            data.push(f64::from_le_bytes(b));
        }
        let mut class_ids = Vec::with_capacity(c);
        for _ in 0..c {
            class_ids.push(read_u32(&mut r, "class ids")?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after SKB payload".into()));
        }
        let anchors = Matrix::from_vec(c, d, data)?;
        for i in 0..c {
            if (norm(anchors.row(i)) - 1.0).abs() > 1e-9 {
                return Err(Error::Format(format!("anchor {i} is not unit norm")));
            }
        }
        if c < 2 || class_ids.iter().collect::<HashSet<_>>().len() != c {
            return Err(Error::Format("SKB needs >= 2 distinct class ids".into()));
        }
        Ok(Self {
            anchors,
            class_ids,
            version,
        })
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

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated payload reading {what}")),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
