//! Per-concept cross-attention maps over the latent grid.
//!
//! Each pixel of the latent attends over the concept tokens: the query is a
//! projection of the pixel's channel vector, the key a projection of the
//! token embedding, and the per-pixel softmax over concepts yields one
//! r-by-r map per concept. Everything is recorded on a [`Tape`] so losses on
//! the maps differentiate back to the latent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// A named concept and its token embedding.
#[derive(Debug, Clone)]
pub struct Concept<T> {
    pub name: String,
    pub embedding: Vec<T>,
}

/// Ordered set of concepts sharing one embedding dimension.
#[derive(Debug, Clone)]
pub struct ConceptSet<T> {
    concepts: Vec<Concept<T>>,
    dim: usize,
}

impl<T: Scalar> ConceptSet<T> {
    pub fn new(concepts: Vec<Concept<T>>) -> Result<Self> {
        if concepts.is_empty() {
            return Err(Error::InvalidParam {
                name: "ConceptSet",
                reason: "at least one concept is required".into(),
            });
        }
        let dim = concepts[0].embedding.len();
        for (i, c) in concepts.iter().enumerate() {
            if c.embedding.len() != dim {
                return Err(Error::InvalidParam {
                    name: "ConceptSet",
                    reason: format!(
                        "embedding of `{}` has {} entries, expected {dim}",
                        c.name,
                        c.embedding.len()
                    ),
                });
            }
            if !c.embedding.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("embedding of `{}`", c.name),
                });
            }
            if c.embedding.iter().all(|v| *v == T::zero()) {
                return Err(Error::InvalidParam {
                    name: "ConceptSet",
                    reason: format!("embedding of `{}` is all-zero", c.name),
                });
            }
            if concepts[..i].iter().any(|prev| prev.name == c.name) {
                return Err(Error::InvalidParam {
                    name: "ConceptSet",
                    reason: format!("duplicate concept name `{}`", c.name),
                });
            }
        }
        Ok(Self { concepts, dim })
    }

    /// Random orthonormal embeddings for the given names, deterministic in
    /// the seed. Requires `names.len() <= dim`.
    pub fn orthonormal<S: AsRef<str>>(names: &[S], dim: usize, seed: u64) -> Result<Self> {
        if names.len() > dim {
            return Err(Error::InvalidParam {
                name: "ConceptSet",
                reason: format!(
                    "cannot fit {} orthonormal embeddings in dimension {dim}",
                    names.len()
                ),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = orthonormal_vectors(names.len(), dim, &mut rng);
        let concepts = names
            .iter()
            .zip(basis)
            .map(|(name, embedding)| Concept {
                name: name.as_ref().to_string(),
                embedding,
            })
            .collect();
        Self::new(concepts)
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor requires at least one concept
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn concepts(&self) -> &[Concept<T>] {
        &self.concepts
    }

    pub fn name(&self, i: usize) -> &str {
        &self.concepts[i].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.concepts.iter().map(|c| c.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    /// Embeddings stacked as an [N, dim] matrix.
    pub fn embedding_matrix(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.concepts.len() * self.dim);
        for c in &self.concepts {
            data.extend_from_slice(&c.embedding);
        }
        Tensor::new(vec![self.concepts.len(), self.dim], data)
            .expect("validated embeddings are finite")
    }
}

/// Fixed query/key projections used for the lifetime of a run.
#[derive(Debug, Clone)]
pub struct ProjectionWeights<T> {
    query: Tensor<T>,
    key: Tensor<T>,
    width: usize,
}

impl<T: Scalar> ProjectionWeights<T> {
    pub fn new(query: Tensor<T>, key: Tensor<T>) -> Result<Self> {
        if query.shape() != key.shape() {
            return Err(Error::ShapeMismatch {
                op: "ProjectionWeights",
                lhs: query.shape().to_vec(),
                rhs: key.shape().to_vec(),
            });
        }
        let width = match query.shape() {
            [_, d] if *d > 0 => *d,
            other => {
                return Err(Error::InvalidParam {
                    name: "ProjectionWeights",
                    reason: format!("expected [channels, width] with width > 0, got {other:?}"),
                })
            }
        };
        Ok(Self { query, key, width })
    }

    /// Query and key share one random orthogonal projection, so the logit of
    /// concept `n` at pixel `p` reduces to `logit_scale * <z[p], e_n>` when
    /// `width == channels`. This stands in for the query/key alignment a
    /// trained attention layer would have learned.
    pub fn shared_orthogonal(
        channels: usize,
        width: usize,
        logit_scale: T,
        seed: u64,
    ) -> Result<Self> {
        if width == 0 || width > channels {
            return Err(Error::InvalidParam {
                name: "ProjectionWeights",
                reason: format!("width must be in [1, {channels}], got {width}"),
            });
        }
        if !(logit_scale.is_finite() && logit_scale > T::zero()) {
            return Err(Error::InvalidParam {
                name: "ProjectionWeights",
                reason: format!("logit_scale must be positive and finite, got {logit_scale}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // columns of Q are orthonormal channel-space directions
        let cols = orthonormal_vectors(width, channels, &mut rng);
        let mut q = vec![T::zero(); channels * width];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..channels {
                q[i * width + j] = col[i];
            }
        }
        let key = Tensor::new(vec![channels, width], q)?;
        let sqrt_width = T::cast(width as f64).sqrt();
        let query = key.map(|v| v * logit_scale * sqrt_width);
        Self::new(query, key)
    }

    pub fn query(&self) -> &Tensor<T> {
        &self.query
    }

    pub fn key(&self) -> &Tensor<T> {
        &self.key
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.query.shape()[0]
    }
}

/// Per-concept attention maps, with the tape node they were recorded as.
#[derive(Debug, Clone)]
pub struct AttentionMaps<T> {
    values: Tensor<T>,
    node: NodeId,
    resolution: usize,
    concept_count: usize,
    normalized: bool,
}

impl<T: Scalar> AttentionMaps<T> {
    /// Views an existing rank-2 [r*r, N] node as attention maps. Useful for
    /// fixtures and for re-wrapping nodes produced by the normalizer.
    pub fn from_node(tape: &Tape<T>, node: NodeId, normalized: bool) -> Result<Self> {
        let shape = tape.value(node)?.shape().to_vec();
        let (pixels, concept_count) = match shape[..] {
            [p, n] => (p, n),
            _ => {
                return Err(Error::InvalidParam {
                    name: "AttentionMaps",
                    reason: format!("expected [pixels, concepts] node, got {shape:?}"),
                })
            }
        };
        let resolution = (pixels as f64).sqrt().round() as usize;
        if resolution * resolution != pixels {
            return Err(Error::InvalidParam {
                name: "AttentionMaps",
                reason: format!("{pixels} pixels do not form a square grid"),
            });
        }
        let values = tape
            .value(node)?
            .reshaped(&[resolution, resolution, concept_count])?;
        Ok(Self {
            values,
            node,
            resolution,
            concept_count,
            normalized,
        })
    }

    /// Map values shaped [r, r, N].
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// The [r*r, N] node on the tape the maps were computed on.
    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn concept_count(&self) -> usize {
        self.concept_count
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Concept `n`'s map as a flat r*r slice.
    pub fn concept_slice(&self, n: usize) -> Vec<T> {
        assert!(n < self.concept_count, "concept index out of range");
        let pixels = self.resolution * self.resolution;
        (0..pixels)
            .map(|p| self.values.data()[p * self.concept_count + n])
            .collect()
    }
}

/// Extracts a concept slice from a raw [r, r, N] map tensor.
pub fn map_slice<T: Scalar>(maps: &Tensor<T>, n: usize) -> Vec<T> {
    let shape = maps.shape();
    assert_eq!(shape.len(), 3, "expected [r, r, N] maps");
    let count = shape[2];
    assert!(n < count, "concept index out of range");
    let pixels = shape[0] * shape[1];
    (0..pixels).map(|p| maps.data()[p * count + n]).collect()
}

/// Cross-attention of the latent over the concept tokens.
///
/// `latent` must be a rank-2 [r*r, channels] node on `tape`. The result is
/// unnormalized: at every pixel the concept values sum to 1.
pub fn compute_attention<T: Scalar>(
    tape: &mut Tape<T>,
    latent: NodeId,
    concepts: &ConceptSet<T>,
    weights: &ProjectionWeights<T>,
) -> Result<AttentionMaps<T>> {
    let latent_shape = tape.value(latent)?.shape().to_vec();
    let (pixels, channels) = match latent_shape[..] {
        [p, c] => (p, c),
        _ => {
            return Err(Error::InvalidParam {
                name: "compute_attention",
                reason: format!("latent must be [pixels, channels], got {latent_shape:?}"),
            })
        }
    };
    if channels != concepts.dim() {
        return Err(Error::ChannelMismatch {
            z_channels: channels,
            embedding_dim: concepts.dim(),
        });
    }
    if channels != weights.channels() {
        return Err(Error::ChannelMismatch {
            z_channels: channels,
            embedding_dim: weights.channels(),
        });
    }
    let resolution = (pixels as f64).sqrt().round() as usize;
    if resolution * resolution != pixels {
        return Err(Error::InvalidParam {
            name: "compute_attention",
            reason: format!("{pixels} pixels do not form a square grid"),
        });
    }

    // keys depend only on constants; precompute K^T off-tape
    let keys_t = concepts
        .embedding_matrix()
        .matmul(weights.key())?
        .transposed()?;
    let keys_t = tape.leaf(keys_t);
    let query_w = tape.leaf(weights.query().clone());

    let queries = tape.matmul(latent, query_w)?;
    let logits = tape.matmul(queries, keys_t)?;
    let scaled = tape.scale(logits, T::one() / T::cast(weights.width() as f64).sqrt())?;
    let node = tape.softmax(scaled, 1)?;

    let values = tape
        .value(node)?
        .reshaped(&[resolution, resolution, concepts.len()])?;
    Ok(AttentionMaps {
        values,
        node,
        resolution,
        concept_count: concepts.len(),
        normalized: false,
    })
}

/// Min-max rescales each concept slice to [0, 1] independently; constant
/// slices map to all-zeros rather than all-ones.
pub fn normalize_maps<T: Scalar>(
    tape: &mut Tape<T>,
    maps: &AttentionMaps<T>,
    through_extrema: bool,
) -> Result<AttentionMaps<T>> {
    if maps.normalized {
        return Err(Error::AlreadyNormalized);
    }
    let node = tape.minmax_normalize_cols(maps.node, through_extrema)?;
    let values =
        tape.value(node)?
            .reshaped(&[maps.resolution, maps.resolution, maps.concept_count])?;
    Ok(AttentionMaps {
        values,
        node,
        resolution: maps.resolution,
        concept_count: maps.concept_count,
        normalized: true,
    })
}

/// Gram-Schmidt orthonormalization of `count` random `dim`-vectors.
fn orthonormal_vectors<T: Scalar>(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    assert!(count <= dim);
    let mut basis: Vec<Vec<T>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<T> = (0..dim).map(|_| T::standard_normal(rng)).collect();
        for prev in &basis {
            let dot = v
                .iter()
                .zip(prev)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for (vi, &pi) in v.iter_mut().zip(prev) {
                *vi -= dot * pi;
            }
        }
        let norm = v.iter().fold(T::zero(), |acc, &a| acc + a * a).sqrt();
        if norm < T::cast(1e-6) {
            continue; // degenerate draw, try again
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        basis.push(v);
    }
    basis
}
