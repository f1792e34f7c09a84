//! Embedding backends: specs for the pretrained models we pull hidden
//! states from, pooling and dimension adaptation down to the 1024-dim
//! pipeline target, plus a deterministic mock backend and a persistent
//! binary cache.

pub mod cache;
pub mod external;
pub mod mock;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pipeline-wide embedding dimension; every adapter must land exactly here
/// so a single embedding always reshapes to a 32x32 block.
pub const TARGET_DIM: usize = 1024;

/// The three pretraining families. Combos are ordered by family slot:
/// encoder (MLM), decoder (ALM), encoder-decoder (EDLM).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ModelFamily {
    Mlm,
    Alm,
    Edlm,
}

impl ModelFamily {
    pub fn slot(&self) -> usize {
        match self {
            ModelFamily::Mlm => 0,
            ModelFamily::Alm => 1,
            ModelFamily::Edlm => 2,
        }
    }

    /// Column header used when rendering result tables.
    pub fn column_name(&self) -> &'static str {
        match self {
            ModelFamily::Mlm => "Encoder",
            ModelFamily::Alm => "Decoder",
            ModelFamily::Edlm => "Encoder-Decoder",
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFamily::Mlm => "MLM",
            ModelFamily::Alm => "ALM",
            ModelFamily::Edlm => "EDLM",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    MeanTokens,
    LastToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimAdapter {
    Identity,
    ZeroPad,
    WindowMean,
}

/// How to produce a pipeline embedding from one backend: which model
/// family it belongs to, its native hidden width, and how its pooled state
/// is adapted to [`TARGET_DIM`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingBackendSpec {
    pub backend_id: String,
    pub display_name: String,
    pub family: ModelFamily,
    pub native_dim: usize,
    pub pooling: Pooling,
    pub max_tokens: usize,
    pub adapter: DimAdapter,
}

impl EmbeddingBackendSpec {
    pub fn validate(&self) -> Result<()> {
        if self.native_dim == 0 || self.max_tokens == 0 {
            return Err(Error::UnknownBackend {
                backend_id: format!("{} (zero native_dim or max_tokens)", self.backend_id),
            });
        }
        let compatible = match self.adapter {
            DimAdapter::Identity => self.native_dim == TARGET_DIM,
            DimAdapter::ZeroPad => self.native_dim <= TARGET_DIM,
            DimAdapter::WindowMean => {
                self.native_dim >= TARGET_DIM && self.native_dim.is_multiple_of(TARGET_DIM)
            }
        };
        if !compatible {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "adapter {:?} for backend {}",
                    self.adapter, self.backend_id
                ),
                expected: TARGET_DIM,
                actual: self.native_dim,
            });
        }
        Ok(())
    }
}

fn spec(
    backend_id: &str,
    display_name: &str,
    family: ModelFamily,
    native_dim: usize,
    max_tokens: usize,
    adapter: DimAdapter,
) -> EmbeddingBackendSpec {
    EmbeddingBackendSpec {
        backend_id: backend_id.into(),
        display_name: display_name.into(),
        family,
        native_dim,
        // Mean pooling everywhere by default; last_token stays available as
        // configuration for experiments on autoregressive models.
        pooling: Pooling::MeanTokens,
        max_tokens,
        adapter,
    }
}

/// Built-in backend catalog: the four study models plus the deterministic
/// mock. 1024-wide models adapt by identity; the 4096-wide Llama encoder
/// averages disjoint windows of 4.
pub fn builtin_specs() -> Vec<EmbeddingBackendSpec> {
    vec![
        spec("roberta", "RoBERTa", ModelFamily::Mlm, 1024, 512, DimAdapter::Identity),
        spec("gpt2", "GPT2", ModelFamily::Alm, 1024, 1024, DimAdapter::Identity),
        spec("llama", "Llama", ModelFamily::Alm, 4096, 1024, DimAdapter::WindowMean),
        spec("flan", "FLAN", ModelFamily::Edlm, 1024, 512, DimAdapter::Identity),
        spec("hash1024", "hash1024", ModelFamily::Mlm, 1024, 512, DimAdapter::Identity),
    ]
}

pub fn builtin(backend_id: &str) -> Option<EmbeddingBackendSpec> {
    builtin_specs()
        .into_iter()
        .find(|s| s.backend_id == backend_id)
}

pub fn builtin_by_display(display_name: &str) -> Option<EmbeddingBackendSpec> {
    builtin_specs()
        .into_iter()
        .find(|s| s.display_name.eq_ignore_ascii_case(display_name))
}

/// Final-layer hidden states for one text: `rows` tokens by `dim` features,
/// row-major, in f64 (all pooling math happens before the single f32
/// rounding at storage).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenMatrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }
}

/// Anything that can produce token hidden states for a backend spec: the
/// mock, or an adapter process wrapping real model inference.
pub trait HiddenStateSource {
    fn hidden_states(
        &self,
        spec: &EmbeddingBackendSpec,
        sample_id: &str,
        text: &str,
    ) -> Result<TokenMatrix>;
}

/// Pools a token matrix down to one vector.
pub fn pool_tokens(matrix: &TokenMatrix, strategy: Pooling) -> Result<Vec<f64>> {
    if matrix.rows == 0 {
        return Err(Error::EmptyInput {
            what: "token matrix".into(),
        });
    }
    if matrix.data.len() != matrix.rows * matrix.dim {
        return Err(Error::DimensionMismatch {
            context: "token matrix storage".into(),
            expected: matrix.rows * matrix.dim,
            actual: matrix.data.len(),
        });
    }
    match strategy {
        Pooling::MeanTokens => {
            let mut acc = vec![0f64; matrix.dim];
            for r in 0..matrix.rows {
                for (a, v) in acc.iter_mut().zip(matrix.row(r)) {
                    *a += v;
                }
            }
            let n = matrix.rows as f64;
            for a in &mut acc {
                *a /= n;
            }
            Ok(acc)
        }
        Pooling::LastToken => Ok(matrix.row(matrix.rows - 1).to_vec()),
    }
}

/// Adapts a pooled vector of length `n` to `target` dimensions.
pub fn adapt_dimension(values: &[f64], target: usize, mode: DimAdapter) -> Result<Vec<f64>> {
    let n = values.len();
    let mismatch = |context: &str| Error::DimensionMismatch {
        context: format!("adapt_dimension ({context})"),
        expected: target,
        actual: n,
    };
    match mode {
        DimAdapter::Identity => {
            if n != target {
                return Err(mismatch("identity"));
            }
            Ok(values.to_vec())
        }
        DimAdapter::ZeroPad => {
            if n > target {
                return Err(mismatch("zero_pad"));
            }
            let mut out = values.to_vec();
            out.resize(target, 0.0);
            Ok(out)
        }
        DimAdapter::WindowMean => {
            if n < target || !n.is_multiple_of(target) {
                return Err(mismatch("window_mean"));
            }
            let window = n / target;
            Ok(values
                .chunks_exact(window)
                .map(|w| w.iter().sum::<f64>() / window as f64)
                .collect())
        }
    }
}

/// One cached/fused-ready embedding. Values are f32: the single rounding
/// from the f64 pooling pipeline happens exactly once, here.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub sample_id: String,
    pub backend_id: String,
    pub values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Full embedding path for one text: hidden states -> pooling -> dimension
/// adaptation -> finiteness check -> f32 storage values.
pub fn embed_text(
    spec: &EmbeddingBackendSpec,
    source: &dyn HiddenStateSource,
    sample_id: &str,
    text: &str,
) -> Result<EmbeddingVector> {
    spec.validate()?;
    if text.trim().is_empty() {
        return Err(Error::EmptyText {
            sample_id: sample_id.into(),
        });
    }
    let matrix = source.hidden_states(spec, sample_id, text)?;
    if matrix.dim != spec.native_dim {
        return Err(Error::DimensionMismatch {
            context: format!("hidden states from backend {}", spec.backend_id),
            expected: spec.native_dim,
            actual: matrix.dim,
        });
    }
    let pooled = pool_tokens(&matrix, spec.pooling)?;
    let adapted = adapt_dimension(&pooled, TARGET_DIM, spec.adapter)?;
    let values: Vec<f32> = adapted.iter().map(|&v| v as f32).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("embedding of sample {sample_id} via {}", spec.backend_id),
        });
    }
    Ok(EmbeddingVector {
        sample_id: sample_id.into(),
        backend_id: spec.backend_id.clone(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::seq::SliceRandom;

    fn matrix(rows: &[&[f64]]) -> TokenMatrix {
        TokenMatrix {
            rows: rows.len(),
            dim: rows.first().map_or(0, |r| r.len()),
            data: rows.concat(),
        }
    }

    #[test]
    fn builtin_catalog_is_valid_and_family_ordered() {
        for spec in builtin_specs() {
            spec.validate().unwrap();
        }
        assert_eq!(builtin("roberta").unwrap().family, ModelFamily::Mlm);
        assert_eq!(builtin("gpt2").unwrap().family, ModelFamily::Alm);
        assert_eq!(builtin("llama").unwrap().native_dim, 4096);
        assert_eq!(builtin("flan").unwrap().family, ModelFamily::Edlm);
        assert!(builtin("bert-base").is_none());
        assert_eq!(
            builtin_by_display("roberta").unwrap().backend_id,
            "roberta"
        );
        assert!(ModelFamily::Mlm.slot() < ModelFamily::Alm.slot());
        assert!(ModelFamily::Alm.slot() < ModelFamily::Edlm.slot());
    }

    #[test]
    fn pooling_identity_mean_and_last() {
        let single = matrix(&[&[0.5, -1.5, 2.0]]);
        assert_eq!(pool_tokens(&single, Pooling::MeanTokens).unwrap(), vec![0.5, -1.5, 2.0]);
        assert_eq!(pool_tokens(&single, Pooling::LastToken).unwrap(), vec![0.5, -1.5, 2.0]);

        let two = matrix(&[&[1.0, 1.0], &[3.0, 3.0]]);
        assert_eq!(pool_tokens(&two, Pooling::MeanTokens).unwrap(), vec![2.0, 2.0]);

        let three = matrix(&[&[1.0], &[2.0], &[7.0]]);
        assert_eq!(pool_tokens(&three, Pooling::LastToken).unwrap(), vec![7.0]);

        let empty = TokenMatrix { rows: 0, dim: 4, data: vec![] };
        assert!(matches!(
            pool_tokens(&empty, Pooling::MeanTokens),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn mean_pooling_is_permutation_invariant_last_is_not() {
        let mut rng = rng::rng_from_seed(3);
        let rows: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..5).map(|_| rng::uniform_f64(&mut rng, -2.0, 2.0)).collect())
            .collect();
        let original = TokenMatrix {
            rows: 7,
            dim: 5,
            data: rows.concat(),
        };
        let mut shuffled_rows = rows.clone();
        shuffled_rows.shuffle(&mut rng);
        let shuffled = TokenMatrix {
            rows: 7,
            dim: 5,
            data: shuffled_rows.concat(),
        };
        let a = pool_tokens(&original, Pooling::MeanTokens).unwrap();
        let b = pool_tokens(&shuffled, Pooling::MeanTokens).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_ne!(
            pool_tokens(&original, Pooling::LastToken).unwrap(),
            pool_tokens(&shuffled, Pooling::LastToken).unwrap()
        );
    }

    #[test]
    fn adapters_match_their_contracts() {
        let v1024: Vec<f64> = (0..1024).map(|i| i as f64).collect();
        assert_eq!(
            adapt_dimension(&v1024, 1024, DimAdapter::Identity).unwrap(),
            v1024
        );

        let v768: Vec<f64> = (0..768).map(|i| (i as f64).sin()).collect();
        let padded = adapt_dimension(&v768, 1024, DimAdapter::ZeroPad).unwrap();
        assert_eq!(padded.len(), 1024);
        assert_eq!(&padded[..768], v768.as_slice());
        assert!(padded[768..].iter().all(|&v| v == 0.0));
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_eq!(norm(&padded), norm(&v768));

        let constant = vec![2.5f64; 4096];
        let reduced = adapt_dimension(&constant, 1024, DimAdapter::WindowMean).unwrap();
        assert_eq!(reduced, vec![2.5f64; 1024]);

        assert!(adapt_dimension(&v768, 1024, DimAdapter::Identity).is_err());
        assert!(adapt_dimension(&v1024[..100], 50, DimAdapter::ZeroPad).is_err());
        assert!(adapt_dimension(&v1024[..100], 64, DimAdapter::WindowMean).is_err());
    }

    #[test]
    fn window_mean_commutes_with_scaling_and_preserves_mean() {
        let mut rng = rng::rng_from_seed(9);
        let v: Vec<f64> = (0..4096).map(|_| rng::uniform_f64(&mut rng, -1.0, 1.0)).collect();
        let reduced = adapt_dimension(&v, 1024, DimAdapter::WindowMean).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * 3.0).collect();
        let reduced_scaled = adapt_dimension(&scaled, 1024, DimAdapter::WindowMean).unwrap();
        for (a, b) in reduced.iter().zip(&reduced_scaled) {
            assert!((a * 3.0 - b).abs() < 1e-12);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&v) - mean(&reduced)).abs() < 1e-12);
    }

    struct FixedSource(TokenMatrix);

    impl HiddenStateSource for FixedSource {
        fn hidden_states(
            &self,
            _spec: &EmbeddingBackendSpec,
            _sample_id: &str,
            _text: &str,
        ) -> Result<TokenMatrix> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn embed_text_validates_input_and_output() {
        let spec = builtin("roberta").unwrap();
        let source = FixedSource(TokenMatrix {
            rows: 2,
            dim: 1024,
            data: vec![0.25; 2048],
        });
        let v = embed_text(&spec, &source, "abc123", "some text").unwrap();
        assert_eq!(v.dim(), TARGET_DIM);
        assert!(v.values.iter().all(|&x| x == 0.25));

        assert!(matches!(
            embed_text(&spec, &source, "abc123", "   "),
            Err(Error::EmptyText { .. })
        ));

        let narrow = FixedSource(TokenMatrix {
            rows: 1,
            dim: 10,
            data: vec![0.0; 10],
        });
        assert!(matches!(
            embed_text(&spec, &narrow, "abc123", "text"),
            Err(Error::DimensionMismatch { .. })
        ));

        let poisoned = FixedSource(TokenMatrix {
            rows: 1,
            dim: 1024,
            data: {
                let mut d = vec![0.0; 1024];
                d[17] = f64::NAN;
                d
            },
        });
        assert!(matches!(
            embed_text(&spec, &poisoned, "abc123", "text"),
            Err(Error::NonFinite { .. })
        ));
    }
}
