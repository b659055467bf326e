//! Closed-form toy latent diffusion process.
//!
//! The data prior is a finite mixture of candidate scenes, each a sum of
//! Gaussian feature bumps placed on the grid. The denoiser is the exact
//! posterior-mean noise predictor for that mixture rather than a trained
//! network, so sampling is deterministic given a seed and the engineered
//! failure mode (single-concept scenes dominating the mixture) reproduces
//! on demand.

use std::collections::BTreeMap;

use crate::attention::ConceptSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An isotropic Gaussian bump: center (row, col) and radius, in grid units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement<T> {
    pub row: T,
    pub col: T,
    pub radius: T,
}

/// One candidate scene: a mixture weight plus per-concept placements.
#[derive(Debug, Clone)]
pub struct CandidateScene<T> {
    pub weight: T,
    /// Concept index -> placement; omitted concepts are absent from the scene.
    pub placements: BTreeMap<usize, Placement<T>>,
}

/// The toy model's ground truth: concepts, candidate scenes, and grid sizes.
#[derive(Debug, Clone)]
pub struct SceneSpec<T> {
    concepts: ConceptSet<T>,
    scenes: Vec<CandidateScene<T>>,
    resolution: usize,
    channels: usize,
}

impl<T: Scalar> SceneSpec<T> {
    pub fn new(
        concepts: ConceptSet<T>,
        scenes: Vec<CandidateScene<T>>,
        resolution: usize,
        channels: usize,
    ) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidParam {
                name: "SceneSpec",
                reason: "resolution must be positive".into(),
            });
        }
        if channels != concepts.dim() {
            return Err(Error::ChannelMismatch {
                z_channels: channels,
                embedding_dim: concepts.dim(),
            });
        }
        if scenes.is_empty() {
            return Err(Error::InvalidParam {
                name: "SceneSpec",
                reason: "at least one candidate scene is required".into(),
            });
        }
        let mut weight_sum = T::zero();
        let max_coord = T::cast((resolution - 1) as f64);
        for (k, scene) in scenes.iter().enumerate() {
            if scene.weight.is_nan() || scene.weight <= T::zero() {
                return Err(Error::InvalidParam {
                    name: "SceneSpec",
                    reason: format!("scene {k} weight must be positive, got {}", scene.weight),
                });
            }
            weight_sum += scene.weight;
            for (&concept, placement) in &scene.placements {
                if concept >= concepts.len() {
                    return Err(Error::InvalidParam {
                        name: "SceneSpec",
                        reason: format!("scene {k} places unknown concept index {concept}"),
                    });
                }
                let in_grid = |v: T| v >= T::zero() && v <= max_coord;
                if !(in_grid(placement.row) && in_grid(placement.col)) {
                    return Err(Error::InvalidParam {
                        name: "SceneSpec",
                        reason: format!(
                            "scene {k} places `{}` at ({}, {}) outside the {resolution}x{resolution} grid",
                            concepts.name(concept),
                            placement.row,
                            placement.col
                        ),
                    });
                }
                if placement.radius.is_nan() || placement.radius <= T::zero() {
                    return Err(Error::InvalidParam {
                        name: "SceneSpec",
                        reason: format!("scene {k}: radius must be positive"),
                    });
                }
            }
        }
        if (weight_sum - T::one()).abs() > T::cast(1e-9) {
            return Err(Error::InvalidParam {
                name: "SceneSpec",
                reason: format!("scene weights must sum to 1, got {weight_sum}"),
            });
        }
        Ok(Self {
            concepts,
            scenes,
            resolution,
            channels,
        })
    }

    /// The default engineered failure mode: each concept gets its own
    /// single-concept scene carrying most of the prior mass, while the one
    /// scene containing every concept is down-weighted. Placements sit at
    /// cell centers on the grid diagonal, fixed across scenes, as tight
    /// bumps whose basins the sampler can leave under guidance.
    pub fn default_pathological<S: AsRef<str>>(
        names: &[S],
        resolution: usize,
        channels: usize,
        embedding_seed: u64,
    ) -> Result<Self> {
        let unit = ConceptSet::<T>::orthonormal(names, channels, embedding_seed)?;
        let norm = T::cast(crate::defaults::EMBEDDING_NORM);
        let concepts = ConceptSet::new(
            unit.concepts()
                .iter()
                .map(|c| crate::attention::Concept {
                    name: c.name.clone(),
                    embedding: c.embedding.iter().map(|&v| v * norm).collect(),
                })
                .collect(),
        )?;
        let n = concepts.len();
        let radius = T::cast((resolution as f64 / 32.0).max(0.25));
        let place = |i: usize| {
            let center = T::cast((resolution as f64 * (i + 1) as f64 / (n + 1) as f64).round());
            Placement {
                row: center,
                col: center,
                radius,
            }
        };
        let all_weight = T::cast(0.10);
        let single_weight = (T::one() - all_weight) / T::cast(n as f64);
        let mut scenes: Vec<CandidateScene<T>> = (0..n)
            .map(|i| CandidateScene {
                weight: single_weight,
                placements: BTreeMap::from([(i, place(i))]),
            })
            .collect();
        scenes.push(CandidateScene {
            weight: all_weight,
            placements: (0..n).map(|i| (i, place(i))).collect(),
        });
        Self::new(concepts, scenes, resolution, channels)
    }

    pub fn concepts(&self) -> &ConceptSet<T> {
        &self.concepts
    }

    pub fn scenes(&self) -> &[CandidateScene<T>] {
        &self.scenes
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Whether the mixture can express the missing-concept pathology: some
    /// scene holds every concept and some other scene omits at least one.
    pub fn pathology_expressible(&self) -> bool {
        let full = self
            .scenes
            .iter()
            .any(|s| s.placements.len() == self.concepts.len());
        let partial = self
            .scenes
            .iter()
            .any(|s| s.placements.len() < self.concepts.len());
        full && partial
    }
}

/// How the per-step guidance step size derives from the base value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceStepShape {
    /// The base value at every step.
    Constant,
    /// Base scaled by `sqrt(1 - alpha_bar_t)`, shrinking with the remaining
    /// uncertainty. Too weak to steer the endgame of this toy's sampler;
    /// kept as an option.
    NoiseScaled,
}

/// Noise schedule plus per-step guidance step sizes.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule<T> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
    guidance_steps: Vec<T>,
}

impl<T: Scalar> DiffusionSchedule<T> {
    /// Builds a schedule from explicit per-step noise rates.
    pub fn from_betas(betas: Vec<T>, guidance_base: T, shape: GuidanceStepShape) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParam {
                name: "DiffusionSchedule",
                reason: "at least one step is required".into(),
            });
        }
        if !(guidance_base >= T::zero() && guidance_base.is_finite()) {
            return Err(Error::InvalidParam {
                name: "guidance_base",
                reason: format!("must be nonnegative and finite, got {guidance_base}"),
            });
        }
        let mut alphas = Vec::with_capacity(betas.len());
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = T::one();
        for (i, &beta) in betas.iter().enumerate() {
            if !(beta > T::zero() && beta < T::one()) {
                return Err(Error::InvalidParam {
                    name: "DiffusionSchedule",
                    reason: format!("beta[{i}] = {beta} outside (0, 1)"),
                });
            }
            let alpha = T::one() - beta;
            prod *= alpha;
            alphas.push(alpha);
            alpha_bars.push(prod);
        }
        let guidance_steps = alpha_bars
            .iter()
            .map(|&ab| match shape {
                GuidanceStepShape::Constant => guidance_base,
                GuidanceStepShape::NoiseScaled => guidance_base * (T::one() - ab).sqrt(),
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            guidance_steps,
        })
    }

    /// Linear beta ramp from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(
        steps: usize,
        beta_start: T,
        beta_end: T,
        guidance_base: T,
        shape: GuidanceStepShape,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParam {
                name: "DiffusionSchedule",
                reason: "steps must be positive".into(),
            });
        }
        let betas = if steps == 1 {
            vec![beta_start]
        } else {
            let denom = T::cast((steps - 1) as f64);
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * T::cast(i as f64) / denom)
                .collect()
        };
        Self::from_betas(betas, guidance_base, shape)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas through step `t`, with the empty-product
    /// convention at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Gradient-update step size at step `t`.
    pub fn guidance_step(&self, t: usize) -> T {
        self.guidance_steps[t - 1]
    }
}

/// The evolving latent grid, tagged with the sampler's position.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub grid: Tensor<T>,
    pub timestep: usize,
}

impl<T: Scalar> LatentCode<T> {
    pub fn new(grid: Tensor<T>, timestep: usize) -> Self {
        Self { grid, timestep }
    }

    /// The grid viewed as a [r*r, channels] matrix (same storage order).
    pub fn as_matrix(&self) -> Result<Tensor<T>> {
        match self.grid.shape() {
            [r1, r2, c] => self.grid.reshaped(&[r1 * r2, *c]),
            other => Err(Error::InvalidParam {
                name: "LatentCode",
                reason: format!("expected [r, r, c] grid, got {other:?}"),
            }),
        }
    }
}

/// Renders a candidate scene to its clean latent: a sum of Gaussian bumps
/// (peak value 1) times the concept embeddings.
pub fn scene_to_latent<T: Scalar>(scene: &CandidateScene<T>, spec: &SceneSpec<T>) -> LatentCode<T> {
    let r = spec.resolution();
    let c = spec.channels();
    let mut data = vec![T::zero(); r * r * c];
    let half = T::cast(0.5);
    for (&concept, placement) in &scene.placements {
        let embedding = &spec.concepts().concepts()[concept].embedding;
        let inv_r2 = half / (placement.radius * placement.radius);
        for i in 0..r {
            for j in 0..r {
                let di = T::cast(i as f64) - placement.row;
                let dj = T::cast(j as f64) - placement.col;
                let bump = (-(di * di + dj * dj) * inv_r2).exp();
                let base = (i * r + j) * c;
                for ch in 0..c {
                    data[base + ch] += bump * embedding[ch];
                }
            }
        }
    }
    LatentCode::new(
        Tensor::new(vec![r, r, c], data).expect("bumps are finite"),
        0,
    )
}

/// Forward noising: `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise<T: Scalar>(
    schedule: &DiffusionSchedule<T>,
    z0: &LatentCode<T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<LatentCode<T>> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let signal = ab.sqrt();
    let noise = (T::one() - ab).sqrt();
    let grid = z0
        .grid
        .zip_with(eps, "forward_noise", |z, e| signal * z + noise * e)?;
    Ok(LatentCode::new(grid, t))
}

/// Exact posterior-mean noise predictor for the scene mixture.
#[derive(Debug)]
pub struct ToyDenoiser<'a, T> {
    spec: &'a SceneSpec<T>,
    schedule: &'a DiffusionSchedule<T>,
    clean_latents: Vec<Tensor<T>>,
}

impl<'a, T: Scalar> ToyDenoiser<'a, T> {
    pub fn new(spec: &'a SceneSpec<T>, schedule: &'a DiffusionSchedule<T>) -> Self {
        let clean_latents = spec
            .scenes()
            .iter()
            .map(|scene| scene_to_latent(scene, spec).grid)
            .collect();
        Self {
            spec,
            schedule,
            clean_latents,
        }
    }

    pub fn spec(&self) -> &SceneSpec<T> {
        self.spec
    }

    /// Posterior scene responsibilities at `z_t`, computed in log space so
    /// far-away scenes underflow to zero instead of producing NaNs.
    pub fn responsibilities(&self, z: &LatentCode<T>, t: usize) -> Result<Vec<T>> {
        self.schedule.check_step(t)?;
        if z.timestep != t {
            return Err(Error::InvalidParam {
                name: "responsibilities",
                reason: format!("latent is at step {}, expected {t}", z.timestep),
            });
        }
        let ab = self.schedule.alpha_bar(t);
        let signal = ab.sqrt();
        let inv_two_var = T::cast(0.5) / (T::one() - ab);
        let mut logits = Vec::with_capacity(self.clean_latents.len());
        for (scene, clean) in self.spec.scenes().iter().zip(&self.clean_latents) {
            let mut dist2 = T::zero();
            for (&zv, &cv) in z.grid.data().iter().zip(clean.data()) {
                let d = zv - signal * cv;
                dist2 += d * d;
            }
            logits.push(scene.weight.ln() - dist2 * inv_two_var);
        }
        let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        let mut weights: Vec<T> = logits
            .iter()
            .map(|&l| {
                let w = (l - max).exp();
                total += w;
                w
            })
            .collect();
        for w in weights.iter_mut() {
            *w /= total;
        }
        Ok(weights)
    }

    /// Predicted noise `(z_t - sqrt(alpha_bar_t) E[z_0 | z_t]) / sqrt(1 - alpha_bar_t)`
    /// where the posterior mean blends the candidate scenes by responsibility.
    pub fn predict_noise(&self, z: &LatentCode<T>, t: usize) -> Result<Tensor<T>> {
        let weights = self.responsibilities(z, t)?;
        let ab = self.schedule.alpha_bar(t);
        let signal = ab.sqrt();
        let inv_noise = T::one() / (T::one() - ab).sqrt();
        let n = z.grid.numel();
        let mut expected = vec![T::zero(); n];
        for (w, clean) in weights.iter().zip(&self.clean_latents) {
            for (e, &cv) in expected.iter_mut().zip(clean.data()) {
                *e += *w * cv;
            }
        }
        let data: Vec<T> = z
            .grid
            .data()
            .iter()
            .zip(&expected)
            .map(|(&zv, &ev)| (zv - signal * ev) * inv_noise)
            .collect();
        Tensor::new(z.grid.shape().to_vec(), data)
    }
}

/// One reverse-process step:
/// `z_{t-1} = (z_t - beta_t/sqrt(1-alpha_bar_t) eps_hat) / sqrt(alpha_t) + sigma_t xi`
/// with `sigma_t = sqrt(beta_t)`, forced to 0 at the final step. Passing
/// `None` for `xi` drops the noise term entirely (deterministic sampling).
pub fn ancestral_step<T: Scalar>(
    schedule: &DiffusionSchedule<T>,
    z: &LatentCode<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    xi: Option<&Tensor<T>>,
) -> Result<LatentCode<T>> {
    schedule.check_step(t)?;
    if z.timestep != t {
        return Err(Error::InvalidParam {
            name: "ancestral_step",
            reason: format!("latent is at step {}, expected {t}", z.timestep),
        });
    }
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = T::one() / schedule.alpha(t).sqrt();
    let noise_coeff = beta / (T::one() - schedule.alpha_bar(t)).sqrt();
    let mut grid = z.grid.zip_with(eps_hat, "ancestral_step", |zv, ev| {
        (zv - noise_coeff * ev) * inv_sqrt_alpha
    })?;
    if t > 1 {
        if let Some(xi) = xi {
            let sigma = beta.sqrt();
            grid = grid.zip_with(xi, "ancestral_step", |g, x| g + sigma * x)?;
        }
    }
    Ok(LatentCode::new(grid, t - 1))
}

/// Presence verdict for one concept in a final latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Presence<T> {
    pub concept: usize,
    pub name: String,
    /// Peak grid projection onto the concept embedding, normalized by its
    /// squared norm so a clean unit bump scores 1.
    pub score: T,
    pub present: bool,
    /// Grid cell attaining the peak.
    pub peak: (usize, usize),
}

/// Scores each concept by its peak projection over the final latent grid.
pub fn concept_presence<T: Scalar>(
    z0: &LatentCode<T>,
    concepts: &ConceptSet<T>,
    threshold: T,
) -> Result<Vec<Presence<T>>> {
    let (r, c) = match z0.grid.shape() {
        [r1, r2, c] if r1 == r2 => (*r1, *c),
        other => {
            return Err(Error::InvalidParam {
                name: "concept_presence",
                reason: format!("expected square [r, r, c] latent, got {other:?}"),
            })
        }
    };
    if c != concepts.dim() {
        return Err(Error::ChannelMismatch {
            z_channels: c,
            embedding_dim: concepts.dim(),
        });
    }
    let mut out = Vec::with_capacity(concepts.len());
    for (m, concept) in concepts.concepts().iter().enumerate() {
        let norm2 = concept
            .embedding
            .iter()
            .fold(T::zero(), |acc, &e| acc + e * e);
        let mut best = T::neg_infinity();
        let mut peak = (0, 0);
        for i in 0..r {
            for j in 0..r {
                let base = (i * r + j) * c;
                let mut dot = T::zero();
                for ch in 0..c {
                    dot += z0.grid.data()[base + ch] * concept.embedding[ch];
                }
                let score = dot / norm2;
                if score > best {
                    best = score;
                    peak = (i, j);
                }
            }
        }
        out.push(Presence {
            concept: m,
            name: concept.name.clone(),
            score: best,
            present: best >= threshold,
            peak,
        });
    }
    Ok(out)
}
