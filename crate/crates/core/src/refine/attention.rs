use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax, Linear};

/// Sinusoidal embedding of a sequence slot: even features take
/// `sin(slot / 10000^(2i/width))`, odd features the matching cosine.
pub fn positional_encoding(slot: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|f| {
            let i = (f / 2) as f64;
            let angle = slot as f64 / 10000f64.powf(2.0 * i / width as f64);
            if f % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Per-proposal memory of pooled features from earlier iterations.
///
/// Starts with a single all-zero entry so the first iteration has a key.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedGroup {
    pub width: usize,
    pub proposals: usize,
    /// `entries[j][r]` is proposal `r`'s feature from slot `j`.
    pub entries: Vec<Vec<Vec<f64>>>,
}

impl SharedGroup {
    pub fn new(proposals: usize, width: usize) -> Self {
        Self {
            width,
            proposals,
            entries: vec![vec![vec![0.0; width]; proposals]],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, features: Vec<Vec<f64>>) -> Result<()> {
        if features.len() != self.proposals || features.iter().any(|f| f.len() != self.width) {
            return Err(Error::shape(format!(
                "shared group holds {} x {} features",
                self.proposals, self.width
            )));
        }
        self.entries.push(features);
        Ok(())
    }
}

/// Query, key and value projections of one single-head attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl AttentionWeights {
    pub fn new(q: Linear, k: Linear, v: Linear) -> Result<Self> {
        if q.in_dim != k.in_dim || k.in_dim != v.in_dim || q.out_dim != k.out_dim {
            return Err(Error::shape("attention projections disagree on widths"));
        }
        Ok(Self { q, k, v })
    }

    pub fn seeded(width: usize, key_dim: usize, value_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::seeded(width, key_dim, rng),
            k: Linear::seeded(width, key_dim, rng),
            v: Linear::seeded(width, value_dim, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.q.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.v.out_dim
    }
}

fn add_pe(x: &[f64], slot: usize) -> Vec<f64> {
    x.iter().zip(positional_encoding(slot, x.len())).map(|(a, b)| a + b).collect()
}

/// Attention of each proposal's current feature over its shared-group
/// entries. The query sits at slot `group.len()`, entry `j` at slot `j`.
/// Returns the output rows and the attention weights per proposal.
pub fn cross_attention(
    current: &[Vec<f64>],
    group: &SharedGroup,
    w: &AttentionWeights,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if current.len() != group.proposals {
        return Err(Error::shape(format!(
            "{} query rows for a group of {} proposals",
            current.len(),
            group.proposals
        )));
    }
    if group.width != w.in_dim() || current.iter().any(|g| g.len() != w.in_dim()) {
        return Err(Error::shape(format!("attention expects width {}", w.in_dim())));
    }
    let scale = 1.0 / (w.q.out_dim as f64).sqrt();
    let slot = group.len();
    let mut out = Vec::with_capacity(current.len());
    let mut weights = Vec::with_capacity(current.len());
    for (r, g) in current.iter().enumerate() {
        let q = w.q.forward(&add_pe(g, slot))?;
        let mut logits = Vec::with_capacity(slot);
        let mut values = Vec::with_capacity(slot);
        for (j, entry) in group.entries.iter().enumerate() {
            let s = add_pe(&entry[r], j);
            let k = w.k.forward(&s)?;
            logits.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() * scale);
            values.push(w.v.forward(&s)?);
        }
        let a = softmax(&logits);
        let mut f = vec![0.0; w.out_dim()];
        for (aj, v) in a.iter().zip(&values) {
            for (o, x) in f.iter_mut().zip(v) {
                *o += aj * x;
            }
        }
        out.push(f);
        weights.push(a);
    }
    Ok((out, weights))
}
