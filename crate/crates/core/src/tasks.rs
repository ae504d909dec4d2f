//! Seeded generators for the adding and copying tasks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AddingSpec {
    /// Sequence (gap) length.
    pub length: usize,
    #[serde(default = "one")]
    pub max_value: f64,
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl AddingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Config(format!("adding length must be at least 2, got {}", self.length)));
        }
        if !(self.max_value > 0.0 && self.max_value.is_finite()) {
            return Err(Error::Config(format!("max_value must be positive, got {}", self.max_value)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AddingBatch {
    /// `[batch, length, 2]`: channel 0 values, channel 1 markers.
    pub inputs: Tensor,
    /// `[batch, 1]`.
    pub targets: Tensor,
    /// Marker positions per sequence.
    pub markers: Vec<(usize, usize)>,
}

/// Channel 0 holds `max_value · U[0,1)` values; channel 1 marks two
/// positions, the first inside the first half. The target is the sum of
/// the two marked values.
pub fn adding_batch(spec: &AddingSpec) -> Result<AddingBatch> {
    spec.validate()?;
    let (b, t) = (spec.batch, spec.length);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inputs = vec![0.0; b * t * 2];
    let mut targets = Vec::with_capacity(b);
    let mut markers = Vec::with_capacity(b);
    let half = t.div_ceil(2);
    for s in 0..b {
        let base = s * t * 2;
        for i in 0..t {
            inputs[base + 2 * i] = spec.max_value * rng.random::<f64>();
        }
        let first = rng.random_range(0..half);
        let mut second = rng.random_range(0..t - 1);
        if second >= first {
            second += 1;
        }
        inputs[base + 2 * first + 1] = 1.0;
        inputs[base + 2 * second + 1] = 1.0;
        targets.push(inputs[base + 2 * first] + inputs[base + 2 * second]);
        markers.push((first, second));
    }
    Ok(AddingBatch { inputs: Tensor::new(&[b, t, 2], inputs)?, targets: Tensor::new(&[b, 1], targets)?, markers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CopyingSpec {
    pub payload_len: usize,
    pub delay: usize,
    pub n_symbols: usize,
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Class used for "no symbol".
pub const BLANK: usize = 0;

impl CopyingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_symbols < 2 {
            return Err(Error::Config(format!("copying needs at least 2 symbols, got {}", self.n_symbols)));
        }
        if self.payload_len == 0 || self.batch == 0 {
            return Err(Error::Config("payload_len and batch must be positive".into()));
        }
        Ok(())
    }

    /// payload, delay blanks, one go marker, then the recall slots.
    pub fn length(&self) -> usize {
        2 * self.payload_len + self.delay + 1
    }

    /// Class index of the go marker.
    pub fn go_symbol(&self) -> usize {
        self.n_symbols + 1
    }

    pub fn input_width(&self) -> usize {
        self.n_symbols + 2
    }

    /// Time steps whose targets are payload symbols.
    pub fn recall_positions(&self) -> std::ops::Range<usize> {
        self.payload_len + self.delay + 1..self.length()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopyingBatch {
    /// One-hot `[batch, length, n_symbols + 2]`.
    pub inputs: Tensor,
    /// Row-major `[batch, length]` class indices; [`BLANK`] outside recall.
    pub targets: Vec<usize>,
    pub length: usize,
}

/// Payload symbols are uniform over `1..=n_symbols`.
pub fn copying_batch(spec: &CopyingSpec) -> Result<CopyingBatch> {
    spec.validate()?;
    let (b, t, w) = (spec.batch, spec.length(), spec.input_width());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inputs = vec![0.0; b * t * w];
    let mut targets = vec![BLANK; b * t];
    let recall = spec.recall_positions().start;
    for s in 0..b {
        let mut symbols = vec![BLANK; t];
        for (i, slot) in symbols.iter_mut().take(spec.payload_len).enumerate() {
            *slot = rng.random_range(1..=spec.n_symbols);
            targets[s * t + recall + i] = *slot;
        }
        symbols[spec.payload_len + spec.delay] = spec.go_symbol();
        for (i, &sym) in symbols.iter().enumerate() {
            inputs[(s * t + i) * w + sym] = 1.0;
        }
    }
    Ok(CopyingBatch { inputs: Tensor::new(&[b, t, w], inputs)?, targets, length: t })
}
