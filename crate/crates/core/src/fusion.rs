//! Embedding fusion: concatenate one text's embeddings in fixed family
//! order, reshape the result into a (32·m)x32 image, and standardize images
//! with statistics fit on the training part only.

use serde::{Deserialize, Serialize};

use crate::embedders::{self, EmbeddingBackendSpec, EmbeddingVector, TARGET_DIM};
use crate::error::{Error, Result};

/// Fused images are built from 32x32 blocks, one per backend in the combo.
pub const BLOCK_WIDTH: usize = 32;

/// Standard deviations below this floor are clamped before division so
/// constant cells normalize to 0 instead of blowing up.
pub const STD_FLOOR: f64 = 1e-8;

/// An ordered selection of 1-3 backends, at most one per model family,
/// always in encoder / decoder / encoder-decoder slot order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComboSpec {
    specs: Vec<EmbeddingBackendSpec>,
    name: String,
}

impl ComboSpec {
    /// Builds a combo from backend ids, resolving them against the built-in
    /// catalog and sorting into canonical family order.
    pub fn new(backend_ids: &[&str]) -> Result<ComboSpec> {
        if backend_ids.is_empty() || backend_ids.len() > 3 {
            return Err(Error::ComboInvalid {
                message: format!("combos take 1 to 3 backends, got {}", backend_ids.len()),
            });
        }
        let mut specs = Vec::with_capacity(backend_ids.len());
        for id in backend_ids {
            let spec = embedders::builtin(id).ok_or_else(|| Error::UnknownBackend {
                backend_id: (*id).to_string(),
            })?;
            specs.push(spec);
        }
        specs.sort_by_key(|s| s.family.slot());
        for pair in specs.windows(2) {
            if pair[0].family == pair[1].family {
                return Err(Error::ComboInvalid {
                    message: format!(
                        "{} and {} are both {} models; a combo takes at most one per family",
                        pair[0].backend_id, pair[1].backend_id, pair[0].family
                    ),
                });
            }
        }
        let name = specs
            .iter()
            .map(|s| s.display_name.as_str())
            .collect::<Vec<_>>()
            .join("+");
        Ok(ComboSpec { specs, name })
    }

    /// Parses "roberta+flan" or "RoBERTa+FLAN" (ids or display names).
    pub fn parse(combo: &str) -> Result<ComboSpec> {
        let ids: Vec<String> = combo
            .split('+')
            .map(|part| part.trim().to_ascii_lowercase())
            .collect();
        if ids.iter().any(|id| id.is_empty()) {
            return Err(Error::ComboInvalid {
                message: format!("empty component in combo {combo:?}"),
            });
        }
        ComboSpec::new(&ids.iter().map(String::as_str).collect::<Vec<_>>())
    }

    /// Canonical display name, e.g. "RoBERTa+FLAN".
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[EmbeddingBackendSpec] {
        &self.specs
    }

    pub fn backend_ids(&self) -> Vec<&str> {
        self.specs.iter().map(|s| s.backend_id.as_str()).collect()
    }

    /// Image height for this combo: one 32-row block per backend.
    pub fn image_rows(&self) -> usize {
        BLOCK_WIDTH * self.arity()
    }
}

/// Concatenates one sample's embeddings in combo order. The vectors must
/// arrive already ordered to match the combo and share one sample_id.
pub fn fuse(vectors: &[EmbeddingVector], combo: &ComboSpec) -> Result<Vec<f32>> {
    if vectors.len() != combo.arity() {
        return Err(Error::ComboInvalid {
            message: format!(
                "combo {} takes {} vectors, got {}",
                combo.name(),
                combo.arity(),
                vectors.len()
            ),
        });
    }
    for (vector, spec) in vectors.iter().zip(combo.specs()) {
        if vector.backend_id != spec.backend_id {
            return Err(Error::ComboInvalid {
                message: format!(
                    "expected backend {} in slot, got {}",
                    spec.backend_id, vector.backend_id
                ),
            });
        }
        if vector.dim() != TARGET_DIM {
            return Err(Error::DimensionMismatch {
                context: format!("fusing backend {}", vector.backend_id),
                expected: TARGET_DIM,
                actual: vector.dim(),
            });
        }
        if vector.sample_id != vectors[0].sample_id {
            return Err(Error::ComboInvalid {
                message: format!(
                    "fusing embeddings of different samples ({} vs {})",
                    vectors[0].sample_id, vector.sample_id
                ),
            });
        }
    }
    let mut fused = Vec::with_capacity(combo.arity() * TARGET_DIM);
    for vector in vectors {
        fused.extend_from_slice(&vector.values);
    }
    Ok(fused)
}

/// A row-major 2D view over fused values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix2 {
    pub fn flatten(self) -> Vec<f32> {
        self.data
    }
}

/// Reshapes a fused vector into stacked `block_width`-wide square blocks:
/// element `i` lands at row `i / block_width`, column `i % block_width`, so
/// the k-th embedding occupies rows `[k*block_width, (k+1)*block_width)`.
pub fn reshape_2d(fused: &[f32], block_width: usize) -> Result<Matrix2> {
    let block_area = block_width * block_width;
    if block_width == 0 || fused.is_empty() || !fused.len().is_multiple_of(block_area) {
        return Err(Error::DimensionMismatch {
            context: "reshape_2d".into(),
            expected: block_area.max(1),
            actual: fused.len(),
        });
    }
    Ok(Matrix2 {
        rows: fused.len() / block_width,
        cols: block_width,
        data: fused.to_vec(),
    })
}

/// One classifier-ready sample: the fused image plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedImage {
    pub sample_id: String,
    pub combo: String,
    pub label: u8,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// Fuses and reshapes one sample's embeddings into a labeled image.
pub fn build_image(
    sample_id: &str,
    label: u8,
    vectors: &[EmbeddingVector],
    combo: &ComboSpec,
) -> Result<FusedImage> {
    let fused = fuse(vectors, combo)?;
    let matrix = reshape_2d(&fused, BLOCK_WIDTH)?;
    Ok(FusedImage {
        sample_id: sample_id.to_string(),
        combo: combo.name().to_string(),
        label,
        rows: matrix.rows,
        cols: matrix.cols,
        data: matrix.data,
    })
}

/// Per-cell standardization statistics, fit on training images only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub rows: usize,
    pub cols: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fits per-cell mean and (population) standard deviation in f64.
pub fn fit_stats(images: &[FusedImage]) -> Result<NormStats> {
    let first = images.first().ok_or_else(|| Error::EmptyInput {
        what: "images for normalization statistics".into(),
    })?;
    let cells = first.rows * first.cols;
    for image in images {
        if image.rows != first.rows || image.cols != first.cols {
            return Err(Error::DimensionMismatch {
                context: format!("image {} while fitting stats", image.sample_id),
                expected: cells,
                actual: image.rows * image.cols,
            });
        }
    }
    let n = images.len() as f64;
    let mut mean = vec![0f64; cells];
    for image in images {
        for (m, &v) in mean.iter_mut().zip(&image.data) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0f64; cells];
    for image in images {
        for (i, &v) in image.data.iter().enumerate() {
            let d = v as f64 - mean[i];
            var[i] += d * d;
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok(NormStats {
        rows: first.rows,
        cols: first.cols,
        mean,
        std,
    })
}

impl NormStats {
    /// Count of cells whose deviation hit the [`STD_FLOOR`] clamp.
    pub fn degenerate_cells(&self) -> usize {
        self.std.iter().filter(|&&s| s < STD_FLOOR).count()
    }
}

/// Standardizes images in place: `(x - mean) / max(std, STD_FLOOR)`,
/// computed in f64 and rounded back to f32 once.
pub fn normalize(images: &mut [FusedImage], stats: &NormStats) -> Result<()> {
    for image in images.iter_mut() {
        if image.rows != stats.rows || image.cols != stats.cols {
            return Err(Error::DimensionMismatch {
                context: format!("normalizing image {}", image.sample_id),
                expected: stats.rows * stats.cols,
                actual: image.rows * image.cols,
            });
        }
        for (i, v) in image.data.iter_mut().enumerate() {
            *v = ((*v as f64 - stats.mean[i]) / stats.std[i].max(STD_FLOOR)) as f32;
        }
    }
    Ok(())
}
