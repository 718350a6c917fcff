//! Hierarchical, reproducible randomness.
//!
//! Every random draw in the crate comes from a [`Stream`] obtained from a
//! [`StreamKey`]: a base seed plus a path of `(label, index)` pairs such as
//! `experiment/0 → rep/3 → iter/17 → cand/5`. The key is folded into a
//! SHA-256 digest one path element at a time and the digest seeds a ChaCha12
//! generator, so a stream depends only on its key and never on the order in
//! which workers happen to draw.
//!
//! Normal variates use the ziggurat sampler of `rand_distr::StandardNormal`.
//! The generator and sampler are fixed; changing either changes every
//! recorded number.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DOMAIN: &[u8] = b"varcurv.stream.v1";

/// Identifies one independent random stream.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamKey {
    seed: u64,
    path: Vec<(String, u64)>,
    #[serde(skip, default)]
    digest: Option<[u8; 32]>,
}

impl std::fmt::Debug for StreamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "StreamKey({}", self.seed)?;
        for (label, index) in &self.path {
            write!(f, "/{label}:{index}")?;
        }
        write!(f, ")")
    }
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(DOMAIN);
        hasher.update(seed.to_le_bytes());
        Self {
            seed,
            path: Vec::new(),
            digest: Some(hasher.finalize().into()),
        }
    }

    /// Key for a path given in full.
    pub fn with_path<'a>(seed: u64, path: impl IntoIterator<Item = (&'a str, u64)>) -> Self {
        path.into_iter()
            .fold(Self::new(seed), |key, (label, index)| key.child(label, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[(String, u64)] {
        &self.path
    }

    /// Extends the path by one `(label, index)` element.
    pub fn child(&self, label: &str, index: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.digest());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        hasher.update(index.to_le_bytes());
        let mut path = self.path.clone();
        path.push((label.to_owned(), index));
        Self {
            seed: self.seed,
            path,
            digest: Some(hasher.finalize().into()),
        }
    }

    fn digest(&self) -> [u8; 32] {
        match self.digest {
            Some(d) => d,
            // Deserialized keys carry no cached digest; rebuild it.
            None => {
                let rebuilt = Self::with_path(
                    self.seed,
                    self.path.iter().map(|(l, i)| (l.as_str(), *i)),
                );
                rebuilt.digest.expect("fresh keys carry a digest")
            }
        }
    }

    pub fn stream(&self) -> Stream {
        Stream {
            rng: ChaCha12Rng::from_seed(self.digest()),
        }
    }

    /// Same as `self.child(label, index).stream()` without materializing the
    /// child key; used in per-iteration hot loops.
    pub fn child_stream(&self, label: &str, index: u64) -> Stream {
        let mut hasher = Sha256::new();
        hasher.update(self.digest());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        hasher.update(index.to_le_bytes());
        Stream {
            rng: ChaCha12Rng::from_seed(hasher.finalize().into()),
        }
    }

    /// Stable textual form, used in file metadata.
    pub fn describe(&self) -> String {
        format!("{self:?}")
    }
}

/// A single-owner random stream.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha12Rng,
}

impl Stream {
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// `d` i.i.d. standard normal variates.
    pub fn gaussian_vector(&mut self, d: usize) -> Result<Vec<f64>> {
        if d == 0 {
            return Err(Error::Parameter("gaussian vector dimension must be >= 1".into()));
        }
        Ok((0..d).map(|_| self.normal()).collect())
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.normal();
        }
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.rng.next_u32() & 1 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Underlying generator, for `rand` APIs such as index sampling.
    pub fn rng(&mut self) -> &mut ChaCha12Rng {
        &mut self.rng
    }
}

/// Convenience: `sample_gaussian_vector(stream, d)`.
pub fn sample_gaussian_vector(stream: &mut Stream, d: usize) -> Result<Vec<f64>> {
    stream.gaussian_vector(d)
}
