//! Deterministic mock backend: expands a SHA-256 digest of (backend_id,
//! text) through ChaCha8 into pseudo-random token states. No model weights,
//! bit-stable across platforms, and optionally class-separable so the whole
//! pipeline can be exercised end to end.

use crate::corpus::MACHINE_MARKER;
use crate::embedders::{EmbeddingBackendSpec, HiddenStateSource, TokenMatrix};
use crate::error::{Error, Result};
use crate::hashing;
use crate::rng;

/// Pseudo-random hidden states keyed on the text digest. When
/// `class_offset` is nonzero, every entry for a text containing
/// [`MACHINE_MARKER`] is shifted by it, giving the two classes separable
/// cluster means.
#[derive(Debug, Clone, Copy)]
pub struct MockBackend {
    pub class_offset: f64,
}

impl MockBackend {
    pub fn new(class_offset: f64) -> MockBackend {
        MockBackend { class_offset }
    }

    /// Offset that separates the class means by `sigmas` pooled standard
    /// deviations for a `tokens`-word text under mean pooling: entries are
    /// uniform on [-1,1) (variance 1/3), so a pooled cell has standard
    /// deviation 1/sqrt(3*tokens).
    pub fn offset_for_sigmas(sigmas: f64, tokens: usize) -> f64 {
        sigmas / (3.0 * tokens as f64).sqrt()
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        MockBackend::new(0.0)
    }
}

impl HiddenStateSource for MockBackend {
    fn hidden_states(
        &self,
        spec: &EmbeddingBackendSpec,
        sample_id: &str,
        text: &str,
    ) -> Result<TokenMatrix> {
        let tokens = text.split_whitespace().count().min(spec.max_tokens);
        if tokens == 0 {
            return Err(Error::ZeroTokens {
                backend_id: spec.backend_id.clone(),
                sample_id: sample_id.into(),
            });
        }
        let digest = hashing::sha256_fields(&[spec.backend_id.as_bytes(), text.as_bytes()]);
        let mut rng = rng::rng_from_digest(digest);
        let offset = if self.class_offset != 0.0 && text.contains(MACHINE_MARKER) {
            self.class_offset
        } else {
            0.0
        };
        let data: Vec<f64> = (0..tokens * spec.native_dim)
            .map(|_| rng::uniform_f64(&mut rng, -1.0, 1.0) + offset)
            .collect();
        Ok(TokenMatrix {
            rows: tokens,
            dim: spec.native_dim,
            data,
        })
    }
}
