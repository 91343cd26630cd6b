//! Random sources for stochastic layers, with draw counters for instrumentation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{LabError, Result};
use crate::rng::{self, LabRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    Dropout,
    Scale,
    Affine,
    Variational,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DrawCounts {
    pub bernoulli: u64,
    pub gaussian: u64,
    pub ternary: u64,
}

struct Source {
    kind: SourceKind,
    rng: LabRng,
    counts: DrawCounts,
}

/// Owns one RNG per registered source id for a single forward pass.
pub struct Sampler {
    seed: u64,
    sources: BTreeMap<u32, Source>,
    scale_source: Option<u32>,
}

/// Snapshot of what a pass consumed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RngStats {
    pub sources: BTreeMap<u32, (SourceKind, DrawCounts)>,
}

impl RngStats {
    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    pub fn total(&self) -> DrawCounts {
        self.sources.values().fold(DrawCounts::default(), |mut acc, (_, c)| {
            acc.bernoulli += c.bernoulli;
            acc.gaussian += c.gaussian;
            acc.ternary += c.ternary;
            acc
        })
    }
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        Self { seed, sources: BTreeMap::new(), scale_source: None }
    }

    fn source(&mut self, id: u32, kind: SourceKind) -> Result<&mut Source> {
        if kind == SourceKind::Scale {
            match self.scale_source {
                Some(existing) if existing != id => {
                    return Err(LabError::Config(format!(
                        "scale dropout source {id} registered while source {existing} is active; \
                         a model may only use one scale dropout source"
                    )))
                }
                _ => self.scale_source = Some(id),
            }
        }
        let seed = self.seed;
        let src = self.sources.entry(id).or_insert_with(|| Source {
            kind,
            rng: rng::stream(seed, &[u64::from(id)]),
            counts: DrawCounts::default(),
        });
        if src.kind != kind {
            return Err(LabError::Config(format!(
                "rng source {id} shared between {:?} and {kind:?} layers",
                src.kind
            )));
        }
        Ok(src)
    }

    /// One Bernoulli(p) draw; `true` means the event (drop) happened.
    pub fn bernoulli(&mut self, id: u32, kind: SourceKind, p: f64) -> Result<bool> {
        let src = self.source(id, kind)?;
        src.counts.bernoulli += 1;
        let u: f64 = src.rng.gen();
        Ok(u < p)
    }

    pub fn gaussian(&mut self, id: u32, kind: SourceKind) -> Result<f64> {
        let src = self.source(id, kind)?;
        src.counts.gaussian += 1;
        Ok(src.rng.sample(StandardNormal))
    }

    /// Draws `s ∈ {-1, 0, +1}` with `P(±1) = p / 2` each.
    pub fn ternary(&mut self, id: u32, kind: SourceKind, p: f64) -> Result<i8> {
        let src = self.source(id, kind)?;
        src.counts.ternary += 1;
        let u: f64 = src.rng.gen();
        Ok(if u < p / 2.0 {
            -1
        } else if u < p {
            1
        } else {
            0
        })
    }

    pub fn stats(&self) -> RngStats {
        RngStats {
            sources: self.sources.iter().map(|(&id, s)| (id, (s.kind, s.counts))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_scale_source_is_rejected() {
        let mut s = Sampler::new(1);
        s.bernoulli(0, SourceKind::Scale, 0.5).unwrap();
        s.bernoulli(0, SourceKind::Scale, 0.5).unwrap();
        assert!(s.bernoulli(3, SourceKind::Scale, 0.5).is_err());
        let st = s.stats();
        assert_eq!(st.source_count(), 1);
        assert_eq!(st.total().bernoulli, 2);
    }

    #[test]
    fn ternary_frequencies() {
        let mut s = Sampler::new(9);
        let n = 20_000;
        let mut nz = 0;
        for _ in 0..n {
            if s.ternary(1, SourceKind::Affine, 0.3).unwrap() != 0 {
                nz += 1;
            }
        }
        let f = nz as f64 / n as f64;
        assert!((f - 0.3).abs() < 0.02, "{f}");
    }
}
