//! The guided denoising loop.
//!
//! Per step: compute the per-concept attention maps on the current latent,
//! evaluate the segregation/retention losses, descend the latent along their
//! gradient, derive the next step's binary masks from the post-update maps,
//! and only then advance the sampler. The denoiser stage stays outside the
//! tape: gradients flow through attention and the losses only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{compute_attention, normalize_maps, ProjectionWeights};
use crate::error::{Error, Result};
use crate::losses::{retention_loss, segregation_loss, total_loss, LossReport};
use crate::masks::{binarize_bbox_with, BboxRule, BinaryMask};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::toymodel::{
    ancestral_step, concept_presence, DiffusionSchedule, LatentCode, Presence, SceneSpec,
    ToyDenoiser,
};

/// Where the retention masks come from.
#[derive(Debug, Clone)]
pub enum MaskMode {
    /// Bounding-box binarization of each step's post-update maps.
    Derived,
    /// Fixed user-supplied layout masks, one per concept in concept order.
    UserLayout(Vec<BinaryMask>),
}

/// Knobs of the guided sampler.
#[derive(Debug, Clone)]
pub struct GuidanceConfig<T> {
    pub lambda_seg: T,
    pub lambda_ret: T,
    /// Binarization threshold as a fraction of the slice maximum.
    pub tau_frac: T,
    /// How derived masks seed their bounding box.
    pub bbox_rule: BboxRule,
    pub updates_per_step: usize,
    /// Guidance applies at steps `t > cutoff`; 0 applies it everywhere.
    pub cutoff_step: usize,
    pub mask_mode: MaskMode,
    /// Differentiate through the min/max selections of map normalization;
    /// switching this off stops gradients at the extrema.
    pub normalize_through_extrema: bool,
    pub presence_threshold: T,
}

impl<T: Scalar> GuidanceConfig<T> {
    /// Defaults with both losses active at unit weight.
    pub fn guided() -> Self {
        Self {
            lambda_seg: T::one(),
            lambda_ret: T::one(),
            tau_frac: T::cast(0.5),
            bbox_rule: BboxRule::LargestCluster,
            updates_per_step: 1,
            cutoff_step: 0,
            mask_mode: MaskMode::Derived,
            normalize_through_extrema: true,
            presence_threshold: T::cast(0.5),
        }
    }

    /// Defaults with guidance disabled (the unguided sampler).
    pub fn baseline() -> Self {
        Self {
            lambda_seg: T::zero(),
            lambda_ret: T::zero(),
            ..Self::guided()
        }
    }

    pub fn with_weights(mut self, lambda_seg: T, lambda_ret: T) -> Self {
        self.lambda_seg = lambda_seg;
        self.lambda_ret = lambda_ret;
        self
    }

    fn validate(&self, spec: &SceneSpec<T>, schedule: &DiffusionSchedule<T>) -> Result<()> {
        for (name, value) in [
            ("lambda_seg", self.lambda_seg),
            ("lambda_ret", self.lambda_ret),
        ] {
            if !(value >= T::zero() && value.is_finite()) {
                return Err(Error::NegativeWeight {
                    name,
                    value: value.to_string(),
                });
            }
        }
        if !(self.tau_frac > T::zero() && self.tau_frac < T::one()) {
            return Err(Error::InvalidParam {
                name: "tau_frac",
                reason: format!("must lie in (0, 1), got {}", self.tau_frac),
            });
        }
        if self.updates_per_step == 0 {
            return Err(Error::InvalidParam {
                name: "updates_per_step",
                reason: "must be at least 1".into(),
            });
        }
        if self.cutoff_step > schedule.steps() {
            return Err(Error::InvalidParam {
                name: "cutoff_step",
                reason: format!(
                    "cutoff {} exceeds step count {}",
                    self.cutoff_step,
                    schedule.steps()
                ),
            });
        }
        if !self.presence_threshold.is_finite() {
            return Err(Error::InvalidParam {
                name: "presence_threshold",
                reason: "must be finite".into(),
            });
        }
        if let MaskMode::UserLayout(masks) = &self.mask_mode {
            if masks.len() != spec.concepts().len() {
                return Err(Error::InvalidParam {
                    name: "layout",
                    reason: format!(
                        "{} layout masks for {} concepts",
                        masks.len(),
                        spec.concepts().len()
                    ),
                });
            }
            for (i, mask) in masks.iter().enumerate() {
                if mask.concept_name != spec.concepts().name(i) {
                    return Err(Error::UnknownConcept {
                        name: mask.concept_name.clone(),
                    });
                }
                if mask.resolution() != spec.resolution() {
                    return Err(Error::InvalidParam {
                        name: "layout",
                        reason: format!(
                            "mask resolution {} does not match grid {}",
                            mask.resolution(),
                            spec.resolution()
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Everything one guided step produces.
#[derive(Debug)]
pub struct StepOutcome<T> {
    /// The (possibly updated) latent, still at the same timestep.
    pub latent: LatentCode<T>,
    /// Masks for the next (t-1) step, stamped with the current step.
    pub masks: Vec<BinaryMask>,
    /// Loss values at the top of the step, before any latent update.
    pub report: LossReport<T>,
    /// Post-update normalized maps, [r, r, N].
    pub maps: Tensor<T>,
}

/// One recorded step of a run.
#[derive(Debug, Clone)]
pub struct StepRecord<T> {
    pub t: usize,
    pub report: LossReport<T>,
    /// Masks produced at this step (consumed by the next one).
    pub masks: Vec<BinaryMask>,
    /// Step the consumed retention masks were produced at (t+1), if any.
    pub consumed_mask_step: Option<usize>,
    /// Post-update normalized maps at sampled steps.
    pub snapshot: Option<Tensor<T>>,
}

/// Full record of one seeded run.
#[derive(Debug, Clone)]
pub struct RunTrace<T> {
    pub seed: u64,
    /// Step records in sampling order (t = T down to 1).
    pub steps: Vec<StepRecord<T>>,
    pub final_latent: LatentCode<T>,
    pub presence: Vec<Presence<T>>,
}

impl<T: Scalar> RunTrace<T> {
    /// Record of the first (t = T) step.
    pub fn first_step(&self) -> &StepRecord<T> {
        &self.steps[0]
    }

    pub fn step_at(&self, t: usize) -> Option<&StepRecord<T>> {
        self.steps.iter().find(|s| s.t == t)
    }
}

struct LossEval<T> {
    report: LossReport<T>,
    grad: Option<Tensor<T>>,
    maps: Tensor<T>,
}

/// Sampler wiring a scene spec, schedule, projections and guidance config.
pub struct GuidedSampler<'a, T> {
    spec: &'a SceneSpec<T>,
    schedule: &'a DiffusionSchedule<T>,
    weights: &'a ProjectionWeights<T>,
    cfg: GuidanceConfig<T>,
    denoiser: ToyDenoiser<'a, T>,
}

impl<'a, T: Scalar> GuidedSampler<'a, T> {
    pub fn new(
        spec: &'a SceneSpec<T>,
        schedule: &'a DiffusionSchedule<T>,
        weights: &'a ProjectionWeights<T>,
        cfg: GuidanceConfig<T>,
    ) -> Result<Self> {
        cfg.validate(spec, schedule)?;
        Ok(Self {
            spec,
            schedule,
            weights,
            cfg,
            denoiser: ToyDenoiser::new(spec, schedule),
        })
    }

    pub fn config(&self) -> &GuidanceConfig<T> {
        &self.cfg
    }

    pub fn spec(&self) -> &SceneSpec<T> {
        self.spec
    }

    pub fn schedule(&self) -> &DiffusionSchedule<T> {
        self.schedule
    }

    fn guidance_active(&self, t: usize) -> bool {
        t > self.cfg.cutoff_step
            && (self.cfg.lambda_seg > T::zero() || self.cfg.lambda_ret > T::zero())
            && self.schedule.guidance_step(t) > T::zero()
    }

    /// Builds the loss tape on `grid` and optionally pulls the gradient.
    fn eval_losses(
        &self,
        grid: &Tensor<T>,
        t: usize,
        prev_masks: Option<&[BinaryMask]>,
        want_grad: bool,
    ) -> Result<LossEval<T>> {
        let mut tape = Tape::new();
        let r = self.spec.resolution();
        let c = self.spec.channels();
        let leaf = tape.leaf(grid.reshaped(&[r * r, c])?);
        let raw = compute_attention(&mut tape, leaf, self.spec.concepts(), self.weights)?;
        let maps = normalize_maps(&mut tape, &raw, self.cfg.normalize_through_extrema)?;
        let seg = segregation_loss(&mut tape, &maps)?;
        let ret = match prev_masks {
            Some(masks) => Some(retention_loss(&mut tape, &maps, masks)?),
            None => None,
        };
        let (root, report) = total_loss(
            &mut tape,
            &seg,
            ret.as_ref(),
            self.cfg.lambda_seg,
            self.cfg.lambda_ret,
        )?;
        let grad = if want_grad {
            match root {
                Some(root) => {
                    let grads = tape.backward(root)?;
                    let g = grads
                        .wrt(leaf)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(&[r * r, c]));
                    if !g.all_finite() {
                        return Err(Error::NonFiniteGradient { step: t });
                    }
                    Some(g.reshaped(&[r, r, c])?)
                }
                None => Some(Tensor::zeros(&[r, r, c])),
            }
        } else {
            None
        };
        Ok(LossEval {
            report,
            grad,
            maps: maps.values().clone(),
        })
    }

    /// Normalized attention maps on `grid`, forward only.
    fn eval_maps(&self, grid: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let r = self.spec.resolution();
        let c = self.spec.channels();
        let leaf = tape.leaf(grid.reshaped(&[r * r, c])?);
        let raw = compute_attention(&mut tape, leaf, self.spec.concepts(), self.weights)?;
        let maps = normalize_maps(&mut tape, &raw, self.cfg.normalize_through_extrema)?;
        Ok(maps.values().clone())
    }

    /// One guided step at timestep `t`: loss evaluation, latent update(s),
    /// and mask derivation for the next step. The retention term only enters
    /// when `prev_masks` is present (absent exactly at t = T).
    pub fn astar_step(
        &self,
        latent: &LatentCode<T>,
        t: usize,
        prev_masks: Option<&[BinaryMask]>,
    ) -> Result<StepOutcome<T>> {
        if t == 0 {
            return Err(Error::TimestepOutOfRange {
                t,
                steps: self.schedule.steps(),
            });
        }
        if latent.timestep != t {
            return Err(Error::InvalidParam {
                name: "astar_step",
                reason: format!("latent is at step {}, expected {t}", latent.timestep),
            });
        }

        let mut grid = latent.grid.clone();
        let report;
        let post_maps;
        if self.guidance_active(t) {
            let step_size = self.schedule.guidance_step(t);
            let mut first_report = None;
            for _ in 0..self.cfg.updates_per_step {
                let eval = self.eval_losses(&grid, t, prev_masks, true)?;
                let grad = eval.grad.expect("gradient requested");
                if first_report.is_none() {
                    first_report = Some(eval.report);
                }
                grid = grid.zip_with(&grad, "latent update", |z, g| z - step_size * g)?;
                if !grid.all_finite() {
                    return Err(Error::NonFiniteGradient { step: t });
                }
            }
            report = first_report.expect("at least one update ran");
            post_maps = self.eval_maps(&grid)?;
        } else {
            // no update: a single forward evaluation supplies both the
            // report and the maps, and the latent passes through bit-exact
            let eval = self.eval_losses(&grid, t, prev_masks, false)?;
            report = eval.report;
            post_maps = eval.maps;
        }

        let masks = match &self.cfg.mask_mode {
            MaskMode::Derived => {
                let r = self.spec.resolution();
                let mut masks = Vec::with_capacity(self.spec.concepts().len());
                for n in 0..self.spec.concepts().len() {
                    let slice = crate::attention::map_slice(&post_maps, n);
                    masks.push(binarize_bbox_with(
                        &slice,
                        r,
                        self.cfg.tau_frac,
                        self.cfg.bbox_rule,
                        self.spec.concepts().name(n),
                        t,
                    )?);
                }
                masks
            }
            MaskMode::UserLayout(layout) => {
                layout.iter().map(|m| m.clone().with_timestep(t)).collect()
            }
        };

        Ok(StepOutcome {
            latent: LatentCode::new(grid, t),
            masks,
            report,
            maps: post_maps,
        })
    }

    /// Runs the full loop from seeded noise down to the clean latent,
    /// recording one step record per timestep (snapshots at every
    /// `snapshot_every`-th step plus the first and last).
    pub fn run(&self, seed: u64, snapshot_every: usize) -> Result<RunTrace<T>> {
        let steps = self.schedule.steps();
        let r = self.spec.resolution();
        let c = self.spec.channels();
        let snapshot_every = snapshot_every.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut latent = LatentCode::new(Tensor::standard_normal(&[r, r, c], &mut rng), steps);
        let mut prev_masks: Option<Vec<BinaryMask>> = None;
        let mut records = Vec::with_capacity(steps);

        for t in (1..=steps).rev() {
            if let Some(masks) = &prev_masks {
                // the retention proxy must come from the step just above
                assert!(
                    masks.iter().all(|m| m.timestep == t + 1),
                    "mask chain broken at step {t}"
                );
            }
            let outcome = self.astar_step(&latent, t, prev_masks.as_deref())?;
            let snapshot =
                (t == steps || t == 1 || t % snapshot_every == 0).then(|| outcome.maps.clone());
            records.push(StepRecord {
                t,
                report: outcome.report,
                masks: outcome.masks.clone(),
                consumed_mask_step: prev_masks.as_ref().map(|m| m[0].timestep),
                snapshot,
            });

            let eps_hat = self.denoiser.predict_noise(&outcome.latent, t)?;
            let xi = (t > 1).then(|| Tensor::standard_normal(&[r, r, c], &mut rng));
            latent = ancestral_step(self.schedule, &outcome.latent, &eps_hat, t, xi.as_ref())?;
            prev_masks = Some(outcome.masks);
        }

        let presence =
            concept_presence(&latent, self.spec.concepts(), self.cfg.presence_threshold)?;
        Ok(RunTrace {
            seed,
            steps: records,
            final_latent: latent,
            presence,
        })
    }
}
