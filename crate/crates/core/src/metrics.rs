//! Diagnostics over completed run traces: overlap curves, retention curves,
//! and paired multi-seed cohort statistics.
//!
//! These are desk-scale proxy metrics computed from the toy model's latents
//! and attention maps; they are labeled as proxies in all emitted outputs.

use crate::attention::{map_slice, ProjectionWeights};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidedSampler, RunTrace};
use crate::losses::soft_iou;
use crate::scalar::Scalar;
use crate::toymodel::{DiffusionSchedule, SceneSpec};

/// Mean pairwise soft IoU of the normalized maps, per sampled step.
#[derive(Debug, Clone)]
pub struct OverlapCurve<T> {
    /// (timestep, mean pairwise overlap), in sampling order (t decreasing).
    pub points: Vec<(usize, T)>,
    /// False when fewer than two concepts exist (no pairs to compare).
    pub defined: bool,
}

impl<T: Scalar> OverlapCurve<T> {
    /// Overlap at the last sampled step (t = 1 when snapshots include it).
    pub fn final_value(&self) -> Option<T> {
        if self.defined {
            self.points.last().map(|&(_, v)| v)
        } else {
            None
        }
    }
}

/// Fraction of the step-T mask region still activated, per sampled step.
#[derive(Debug, Clone)]
pub struct ConceptRetention<T> {
    pub concept: usize,
    pub name: String,
    /// False when the step-T reference mask was empty.
    pub defined: bool,
    pub points: Vec<(usize, T)>,
}

impl<T: Scalar> ConceptRetention<T> {
    pub fn value_at(&self, t: usize) -> Option<T> {
        if !self.defined {
            return None;
        }
        self.points
            .iter()
            .find(|&&(pt, _)| pt == t)
            .map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone)]
pub struct RetentionCurve<T> {
    pub per_concept: Vec<ConceptRetention<T>>,
}

/// Mean pairwise overlap of the snapshot maps at every sampled step.
pub fn overlap_curve<T: Scalar>(trace: &RunTrace<T>) -> Result<OverlapCurve<T>> {
    let mut points = Vec::new();
    let mut concepts = 0;
    for record in &trace.steps {
        let Some(maps) = &record.snapshot else {
            continue;
        };
        concepts = maps.shape()[2];
        if concepts < 2 {
            return Ok(OverlapCurve {
                points: Vec::new(),
                defined: false,
            });
        }
        let mut total = T::zero();
        let mut pairs = 0usize;
        for i in 0..concepts {
            let a = map_slice(maps, i);
            for j in (i + 1)..concepts {
                let b = map_slice(maps, j);
                total += soft_iou(&a, &b)?.value;
                pairs += 1;
            }
        }
        points.push((record.t, total / T::cast(pairs as f64)));
    }
    if points.is_empty() {
        return Err(Error::InvalidParam {
            name: "overlap_curve",
            reason: "trace holds no attention snapshots".into(),
        });
    }
    let _ = concepts;
    Ok(OverlapCurve {
        points,
        defined: true,
    })
}

/// Per concept, the fraction of its step-T mask whose normalized activation
/// is at least `tau_frac`, at every sampled step. Decay shows up as a
/// decreasing curve.
pub fn retention_curve<T: Scalar>(trace: &RunTrace<T>, tau_frac: T) -> Result<RetentionCurve<T>> {
    let first = trace.steps.first().ok_or_else(|| Error::InvalidParam {
        name: "retention_curve",
        reason: "empty trace".into(),
    })?;
    let references = &first.masks;
    let mut per_concept = Vec::with_capacity(references.len());
    for (m, reference) in references.iter().enumerate() {
        if reference.is_empty() {
            per_concept.push(ConceptRetention {
                concept: m,
                name: reference.concept_name.clone(),
                defined: false,
                points: Vec::new(),
            });
            continue;
        }
        let r = reference.resolution();
        let region = reference.count();
        let mut points = Vec::new();
        for record in &trace.steps {
            let Some(maps) = &record.snapshot else {
                continue;
            };
            let slice = map_slice(maps, m);
            let mut active = 0usize;
            for i in 0..r {
                for j in 0..r {
                    if reference.get(i, j) && slice[i * r + j] >= tau_frac {
                        active += 1;
                    }
                }
            }
            points.push((record.t, T::cast(active as f64) / T::cast(region as f64)));
        }
        per_concept.push(ConceptRetention {
            concept: m,
            name: reference.concept_name.clone(),
            defined: true,
            points,
        });
    }
    Ok(RetentionCurve { per_concept })
}

/// Per-seed summary feeding cohort statistics and CSV rows.
#[derive(Debug, Clone)]
pub struct SeedRunSummary<T> {
    pub seed: u64,
    pub presence: Vec<bool>,
    pub scores: Vec<T>,
    pub peaks: Vec<(usize, usize)>,
    /// All concepts present.
    pub all_present: bool,
    pub final_overlap: Option<T>,
    /// Retention-curve value at t = 1 per concept (None when undefined).
    pub retention_t1: Vec<Option<T>>,
}

/// Condenses one finished trace into the quantities the cohort compares.
pub fn summarize_run<T: Scalar>(trace: &RunTrace<T>, tau_frac: T) -> Result<SeedRunSummary<T>> {
    let overlap = overlap_curve(trace)?;
    let retention = retention_curve(trace, tau_frac)?;
    let presence: Vec<bool> = trace.presence.iter().map(|p| p.present).collect();
    Ok(SeedRunSummary {
        seed: trace.seed,
        all_present: presence.iter().all(|&p| p),
        scores: trace.presence.iter().map(|p| p.score).collect(),
        peaks: trace.presence.iter().map(|p| p.peak).collect(),
        presence,
        final_overlap: overlap.final_value(),
        retention_t1: retention
            .per_concept
            .iter()
            .map(|c| c.value_at(1))
            .collect(),
    })
}

/// Aggregate statistics of one method over a seed cohort.
#[derive(Debug, Clone)]
pub struct CohortStats<T> {
    pub seeds: Vec<u64>,
    /// Rate of seeds where every concept was present.
    pub all_present_rate: T,
    pub per_concept_rates: Vec<T>,
    pub mean_final_overlap: Option<T>,
    /// Mean retention at t = 1 per concept over seeds where defined.
    pub mean_retention_t1: Vec<Option<T>>,
    /// Mean of the per-concept retention means.
    pub mean_final_retention: Option<T>,
}

/// Aggregates summaries; seeds are sorted first so the statistics are
/// invariant to the seed-list order.
pub fn cohort_stats<T: Scalar>(summaries: &[SeedRunSummary<T>]) -> Result<CohortStats<T>> {
    if summaries.is_empty() {
        return Err(Error::InvalidParam {
            name: "cohort_stats",
            reason: "no summaries".into(),
        });
    }
    let mut ordered: Vec<&SeedRunSummary<T>> = summaries.iter().collect();
    ordered.sort_by_key(|s| s.seed);
    let n = ordered.len();
    let nf = T::cast(n as f64);
    let concepts = ordered[0].presence.len();

    let all_present_rate = T::cast(ordered.iter().filter(|s| s.all_present).count() as f64) / nf;
    let per_concept_rates = (0..concepts)
        .map(|m| T::cast(ordered.iter().filter(|s| s.presence[m]).count() as f64) / nf)
        .collect();

    let overlaps: Vec<T> = ordered.iter().filter_map(|s| s.final_overlap).collect();
    let mean_final_overlap = mean(&overlaps);

    let mean_retention_t1: Vec<Option<T>> = (0..concepts)
        .map(|m| {
            let vals: Vec<T> = ordered.iter().filter_map(|s| s.retention_t1[m]).collect();
            mean(&vals)
        })
        .collect();
    let defined: Vec<T> = mean_retention_t1.iter().filter_map(|v| *v).collect();
    let mean_final_retention = mean(&defined);

    Ok(CohortStats {
        seeds: ordered.iter().map(|s| s.seed).collect(),
        all_present_rate,
        per_concept_rates,
        mean_final_overlap,
        mean_retention_t1,
        mean_final_retention,
    })
}

fn mean<T: Scalar>(vals: &[T]) -> Option<T> {
    if vals.is_empty() {
        None
    } else {
        let total = vals.iter().fold(T::zero(), |acc, &v| acc + v);
        Some(total / T::cast(vals.len() as f64))
    }
}

/// Paired per-seed differences between two methods on the same seeds.
#[derive(Debug, Clone)]
pub struct PairedDelta<T> {
    pub all_present_delta: T,
    pub per_concept_deltas: Vec<T>,
    /// Fraction of seeds where the final overlap strictly decreased.
    pub overlap_decreased_fraction: T,
    pub mean_final_overlap_delta: Option<T>,
    pub retention_t1_delta: Vec<Option<T>>,
}

/// Full output of a paired comparison.
#[derive(Debug, Clone)]
pub struct PairedComparison<T> {
    pub baseline: CohortStats<T>,
    pub guided: CohortStats<T>,
    pub delta: PairedDelta<T>,
    /// Per-seed summaries sorted by seed, paired index-for-index.
    pub per_seed: Vec<(SeedRunSummary<T>, SeedRunSummary<T>)>,
}

/// Pairs two cohorts of summaries (same seed sets) and aggregates.
pub fn compare_cohorts<T: Scalar>(
    baseline: &[SeedRunSummary<T>],
    guided: &[SeedRunSummary<T>],
) -> Result<PairedComparison<T>> {
    if baseline.len() != guided.len() {
        return Err(Error::InvalidParam {
            name: "compare_cohorts",
            reason: format!(
                "cohorts differ in size: {} vs {}",
                baseline.len(),
                guided.len()
            ),
        });
    }
    let mut base: Vec<SeedRunSummary<T>> = baseline.to_vec();
    let mut guid: Vec<SeedRunSummary<T>> = guided.to_vec();
    base.sort_by_key(|s| s.seed);
    guid.sort_by_key(|s| s.seed);
    for (b, g) in base.iter().zip(&guid) {
        if b.seed != g.seed {
            return Err(Error::InvalidParam {
                name: "compare_cohorts",
                reason: format!("unpaired seeds {} vs {}", b.seed, g.seed),
            });
        }
    }

    let base_stats = cohort_stats(&base)?;
    let guided_stats = cohort_stats(&guid)?;
    let n = T::cast(base.len() as f64);
    let decreased = base
        .iter()
        .zip(&guid)
        .filter(|(b, g)| match (b.final_overlap, g.final_overlap) {
            (Some(bo), Some(go)) => go < bo,
            _ => false,
        })
        .count();
    let concepts = base_stats.per_concept_rates.len();
    let delta = PairedDelta {
        all_present_delta: guided_stats.all_present_rate - base_stats.all_present_rate,
        per_concept_deltas: (0..concepts)
            .map(|m| guided_stats.per_concept_rates[m] - base_stats.per_concept_rates[m])
            .collect(),
        overlap_decreased_fraction: T::cast(decreased as f64) / n,
        mean_final_overlap_delta: match (
            guided_stats.mean_final_overlap,
            base_stats.mean_final_overlap,
        ) {
            (Some(g), Some(b)) => Some(g - b),
            _ => None,
        },
        retention_t1_delta: (0..concepts)
            .map(|m| {
                match (
                    guided_stats.mean_retention_t1[m],
                    base_stats.mean_retention_t1[m],
                ) {
                    (Some(g), Some(b)) => Some(g - b),
                    _ => None,
                }
            })
            .collect(),
    };
    Ok(PairedComparison {
        baseline: base_stats,
        guided: guided_stats,
        delta,
        per_seed: base.into_iter().zip(guid).collect(),
    })
}

/// Runs both configurations over the same seeds and compares them pairwise.
/// The two configurations share the scene, schedule and projections, so they
/// differ only in guidance settings by construction.
pub fn cohort_compare<T: Scalar>(
    spec: &SceneSpec<T>,
    schedule: &DiffusionSchedule<T>,
    weights: &ProjectionWeights<T>,
    cfg_baseline: GuidanceConfig<T>,
    cfg_guided: GuidanceConfig<T>,
    seeds: &[u64],
    snapshot_every: usize,
) -> Result<PairedComparison<T>> {
    if seeds.is_empty() {
        return Err(Error::InvalidParam {
            name: "cohort_compare",
            reason: "seed list must be nonempty".into(),
        });
    }
    let tau = cfg_guided.tau_frac;
    let baseline = GuidedSampler::new(spec, schedule, weights, cfg_baseline)?;
    let guided = GuidedSampler::new(spec, schedule, weights, cfg_guided)?;
    let mut base_summaries = Vec::with_capacity(seeds.len());
    let mut guided_summaries = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        base_summaries.push(summarize_run(&baseline.run(seed, snapshot_every)?, tau)?);
        guided_summaries.push(summarize_run(&guided.run(seed, snapshot_every)?, tau)?);
    }
    compare_cohorts(&base_summaries, &guided_summaries)
}
