//! Offline backends. Every output is a pure function of the inputs and a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ClassifierBackend, EmbeddingBackend, GatewayError, GeneratorBackend, Label};
use crate::corpus::{Sample, SampleKind};
use crate::prompt::RenderedPrompt;

/// Token the mock generator plants in reports it writes as "real" findings.
pub const REAL_VULN_MARKER: &str = "REAL-VULN";

fn rng_for(parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

const OPENERS: [&str; 4] = [
    "The most critical issue lies in",
    "The analysis points to",
    "A suspicious section appears in",
    "The highest risk code path is",
];

const FINDINGS: [&str; 6] = [
    "an unchecked capacity comparison that lets a later copy run past the allocation",
    "a raw pointer that may outlive the buffer it points into",
    "an index computed from untrusted input without a bounds check",
    "a lock that is released before the shared state is fully updated",
    "an unsafe block that assumes the slice is non-empty",
    "an integer conversion that can wrap before the length check",
];

/// Writes plausible report text. With probability `1 - noise` the text of a
/// report on vulnerable code carries [`REAL_VULN_MARKER`] and text on fixed
/// code does not; otherwise the marker placement is inverted.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    name: String,
    seed: u64,
    noise: f64,
}

impl MockGenerator {
    pub fn new(name: impl Into<String>, seed: u64, noise: f64) -> Self {
        Self { name: name.into(), seed, noise: noise.clamp(0.0, 1.0) }
    }
}

impl GeneratorBackend for MockGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, prompt: &RenderedPrompt, sample: &Sample) -> Result<String, GatewayError> {
        let msg = prompt.message();
        let mut rng = rng_for(&[&self.seed.to_le_bytes(), self.name.as_bytes(), msg.as_bytes()]);
        let flip = rng.gen_bool(self.noise);
        let marked = (sample.kind == SampleKind::Vulnerable) != flip;

        let location = sample
            .functions
            .first()
            .map(|f| format!("`{}` in {}", f.name, f.file_path))
            .unwrap_or_else(|| "the supplied code".to_string());
        let mut out = format!("{} {location}: {}.", OPENERS[rng.gen_range(0..OPENERS.len())], FINDINGS[rng.gen_range(0..FINDINGS.len())]);
        for _ in 0..rng.gen_range(1..4) {
            out.push(' ');
            out.push_str(&format!("The code also shows {}.", FINDINGS[rng.gen_range(0..FINDINGS.len())]));
        }
        if marked {
            out.push_str(&format!(" {REAL_VULN_MARKER}: the flagged lines match a known weakness pattern."));
        }
        out.push('\n');
        Ok(out)
    }
}

/// Says positive exactly when the report contains the marker.
#[derive(Debug, Clone)]
pub struct KeywordClassifier {
    name: String,
    marker: String,
}

impl Default for KeywordClassifier {
    fn default() -> Self {
        Self::new("keyword-mock", REAL_VULN_MARKER)
    }
}

impl KeywordClassifier {
    pub fn new(name: impl Into<String>, marker: impl Into<String>) -> Self {
        Self { name: name.into(), marker: marker.into() }
    }
}

impl ClassifierBackend for KeywordClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn judge(&self, report_text: &str) -> Result<(Label, Option<f64>), GatewayError> {
        if report_text.contains(&self.marker) {
            Ok((Label::Positive, Some(1.0)))
        } else {
            Ok((Label::Negative, Some(0.0)))
        }
    }
}

/// Hashes the text into a unit vector of `dim` entries.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
}

impl MockEmbedder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim: dim.max(1) }
    }
}

impl EmbeddingBackend for MockEmbedder {
    fn name(&self) -> &str {
        "mock-embedder"
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        let mut rng = rng_for(&[&self.seed.to_le_bytes(), text.as_bytes()]);
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return Ok(v.into_iter().map(|x| x / norm).collect());
            }
        }
    }
}
