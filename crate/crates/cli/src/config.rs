//! Run configuration: TOML parsing, defaulting, and validation.
//!
//! The file format is strict key = value TOML; unknown keys are rejected so
//! typos fail fast. Every omitted section falls back to the documented
//! defaults, and the fully resolved configuration is echoed to the log
//! before any run starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use astar_core::attention::{Concept, ConceptSet, ProjectionWeights};
use astar_core::defaults;
use astar_core::guidance::{GuidanceConfig, MaskMode};
use astar_core::masks::BboxRule;
use astar_core::toymodel::{
    CandidateScene, DiffusionSchedule, GuidanceStepShape, Placement, SceneSpec,
};

/// What an invocation executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Baseline,
    Guided,
    Ablation,
    Layout,
    Compare,
}

impl ExperimentKind {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Self::Baseline,
            "guided" => Self::Guided,
            "ablation" => Self::Ablation,
            "layout" => Self::Layout,
            "compare" => Self::Compare,
            other => bail!(
                "kind: expected one of baseline|guided|ablation|layout|compare, got `{other}`"
            ),
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Guided => "guided",
            Self::Ablation => "ablation",
            Self::Layout => "layout",
            Self::Compare => "compare",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: Option<String>,
    seeds: Option<Vec<u64>>,
    seed_count: Option<usize>,
    master_seed: Option<u64>,
    out_dir: Option<String>,
    snapshot_every: Option<usize>,
    jobs: Option<usize>,
    layout_file: Option<String>,
    scene: Option<RawScene>,
    schedule: Option<RawSchedule>,
    attention: Option<RawAttention>,
    guidance: Option<RawGuidance>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScene {
    r: Option<usize>,
    c: Option<usize>,
    embedding_seed: Option<u64>,
    concepts: Vec<RawConcept>,
    scenes: Option<Vec<RawCandidate>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConcept {
    name: String,
    embedding: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCandidate {
    weight: f64,
    /// concept name -> [center row, center col, radius]
    placements: BTreeMap<String, [f64; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    steps: Option<usize>,
    beta_start: Option<f64>,
    beta_end: Option<f64>,
    guidance_step: Option<f64>,
    guidance_shape: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttention {
    width: Option<usize>,
    scale: Option<f64>,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGuidance {
    lambda_seg: Option<f64>,
    lambda_ret: Option<f64>,
    tau_frac: Option<f64>,
    updates_per_step: Option<usize>,
    cutoff: Option<usize>,
    bbox_rule: Option<String>,
    differentiate_extrema: Option<bool>,
    presence_threshold: Option<f64>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub snapshot_every: usize,
    pub jobs: Option<usize>,
    pub layout_file: Option<PathBuf>,
    pub spec: SceneSpec<f64>,
    pub schedule: DiffusionSchedule<f64>,
    pub weights: ProjectionWeights<f64>,
    pub guidance: GuidanceConfig<f64>,
    pub config_stem: String,
}

/// One splitmix64 step; used to expand a master seed into per-run seeds.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Expands `count` seeds from a master seed.
pub fn expand_seeds(master: u64, count: usize) -> Vec<u64> {
    let mut state = master;
    (0..count).map(|_| splitmix64(&mut state)).collect()
}

pub const DEFAULT_MASTER_SEED: u64 = 17;

/// Reads and validates a configuration file, resolving all defaults.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    resolve(raw, path)
}

fn resolve(raw: RawConfig, path: &Path) -> Result<RunConfig> {
    let kind = match raw.kind.as_deref() {
        Some(k) => ExperimentKind::parse(k)?,
        None => ExperimentKind::Guided,
    };

    let seeds = match (&raw.seeds, raw.seed_count) {
        (Some(list), None) => {
            if list.is_empty() {
                bail!("seeds: list must not be empty");
            }
            list.clone()
        }
        (None, Some(count)) => {
            if count == 0 {
                bail!("seed_count: must be positive");
            }
            expand_seeds(raw.master_seed.unwrap_or(DEFAULT_MASTER_SEED), count)
        }
        (Some(_), Some(_)) => bail!("seeds and seed_count are mutually exclusive"),
        (None, None) => bail!("one of seeds or seed_count is required"),
    };

    let scene = raw
        .scene
        .ok_or_else(|| anyhow!("scene: section with at least one concept is required"))?;
    let resolution = scene.r.unwrap_or(defaults::RESOLUTION);
    let channels = scene.c.unwrap_or(defaults::CHANNELS);
    let embedding_seed = scene.embedding_seed.unwrap_or(defaults::EMBEDDING_SEED);
    if scene.concepts.is_empty() {
        bail!("scene.concepts: at least one concept is required");
    }

    let names: Vec<&str> = scene.concepts.iter().map(|c| c.name.as_str()).collect();
    let explicit = scene
        .concepts
        .iter()
        .filter(|c| c.embedding.is_some())
        .count();
    let concepts: ConceptSet<f64> = if explicit == 0 {
        let unit = ConceptSet::<f64>::orthonormal(&names, channels, embedding_seed)
            .map_err(|e| anyhow!("scene.concepts: {e}"))?;
        ConceptSet::new(
            unit.concepts()
                .iter()
                .map(|c| Concept {
                    name: c.name.clone(),
                    embedding: c
                        .embedding
                        .iter()
                        .map(|v| v * defaults::EMBEDDING_NORM)
                        .collect(),
                })
                .collect(),
        )
        .map_err(|e| anyhow!("scene.concepts: {e}"))?
    } else if explicit == scene.concepts.len() {
        ConceptSet::new(
            scene
                .concepts
                .iter()
                .map(|c| Concept {
                    name: c.name.clone(),
                    embedding: c.embedding.clone().unwrap(),
                })
                .collect(),
        )
        .map_err(|e| anyhow!("scene.concepts: {e}"))?
    } else {
        bail!("scene.concepts: either give every concept an embedding or none");
    };

    let spec = match scene.scenes {
        Some(candidates) => {
            if candidates.is_empty() {
                bail!("scene.scenes: must not be empty when present");
            }
            let mut scenes = Vec::with_capacity(candidates.len());
            for (k, cand) in candidates.iter().enumerate() {
                let mut placements = BTreeMap::new();
                for (name, triple) in &cand.placements {
                    let idx = concepts.index_of(name).ok_or_else(|| {
                        anyhow!("scene.scenes[{k}].placements: unknown concept `{name}`")
                    })?;
                    placements.insert(
                        idx,
                        Placement {
                            row: triple[0],
                            col: triple[1],
                            radius: triple[2],
                        },
                    );
                }
                scenes.push(CandidateScene {
                    weight: cand.weight,
                    placements,
                });
            }
            SceneSpec::new(concepts, scenes, resolution, channels)
                .map_err(|e| anyhow!("scene.scenes: {e}"))?
        }
        None => {
            if explicit > 0 {
                bail!("scene.scenes: required when embeddings are given explicitly");
            }
            SceneSpec::default_pathological(&names, resolution, channels, embedding_seed)
                .map_err(|e| anyhow!("scene: {e}"))?
        }
    };
    if !spec.pathology_expressible() {
        eprintln!(
            "warning: scene mixture cannot express the missing-concept failure mode \
             (no scene omits a concept or none contains all)"
        );
    }

    let sched = raw.schedule.unwrap_or(RawSchedule {
        steps: None,
        beta_start: None,
        beta_end: None,
        guidance_step: None,
        guidance_shape: None,
    });
    let shape = match sched.guidance_shape.as_deref() {
        None | Some("constant") => GuidanceStepShape::Constant,
        Some("noise_scaled") => GuidanceStepShape::NoiseScaled,
        Some(other) => {
            bail!("schedule.guidance_shape: expected constant|noise_scaled, got `{other}`")
        }
    };
    let schedule = DiffusionSchedule::linear(
        sched.steps.unwrap_or(defaults::STEPS),
        sched.beta_start.unwrap_or(defaults::BETA_START),
        sched.beta_end.unwrap_or(defaults::BETA_END),
        sched.guidance_step.unwrap_or(defaults::GUIDANCE_STEP),
        shape,
    )
    .map_err(|e| anyhow!("schedule: {e}"))?;

    let attn = raw.attention.unwrap_or(RawAttention {
        width: None,
        scale: None,
        seed: None,
    });
    let weights = ProjectionWeights::shared_orthogonal(
        channels,
        attn.width
            .unwrap_or(channels.min(defaults::ATTENTION_WIDTH)),
        attn.scale.unwrap_or(defaults::ATTENTION_SCALE),
        attn.seed.unwrap_or(defaults::ATTENTION_SEED),
    )
    .map_err(|e| anyhow!("attention: {e}"))?;

    let g = raw.guidance.unwrap_or(RawGuidance {
        lambda_seg: None,
        lambda_ret: None,
        tau_frac: None,
        updates_per_step: None,
        cutoff: None,
        bbox_rule: None,
        differentiate_extrema: None,
        presence_threshold: None,
    });
    let tau_frac = g.tau_frac.unwrap_or(defaults::TAU_FRAC);
    if !(tau_frac > 0.0 && tau_frac < 1.0) {
        bail!("guidance.tau_frac: must lie in (0, 1), got {tau_frac}");
    }
    let lambda_seg = g.lambda_seg.unwrap_or(defaults::LAMBDA_SEG);
    let lambda_ret = g.lambda_ret.unwrap_or(defaults::LAMBDA_RET);
    for (key, value) in [
        ("guidance.lambda_seg", lambda_seg),
        ("guidance.lambda_ret", lambda_ret),
    ] {
        if !(value >= 0.0 && value.is_finite()) {
            bail!("{key}: must be nonnegative and finite, got {value}");
        }
    }
    let bbox_rule = match g.bbox_rule.as_deref() {
        None | Some("largest_cluster") => BboxRule::LargestCluster,
        Some("union") => BboxRule::Union,
        Some(other) => bail!("guidance.bbox_rule: expected largest_cluster|union, got `{other}`"),
    };
    let guidance = GuidanceConfig {
        lambda_seg,
        lambda_ret,
        tau_frac,
        bbox_rule,
        updates_per_step: g.updates_per_step.unwrap_or(1),
        cutoff_step: g.cutoff.unwrap_or(0),
        mask_mode: MaskMode::Derived,
        normalize_through_extrema: g.differentiate_extrema.unwrap_or(true),
        presence_threshold: g.presence_threshold.unwrap_or(defaults::PRESENCE_THRESHOLD),
    };

    let snapshot_every = raw.snapshot_every.unwrap_or(defaults::SNAPSHOT_EVERY);
    if snapshot_every == 0 {
        bail!("snapshot_every: must be positive");
    }

    let config = RunConfig {
        kind,
        seeds,
        out_dir: raw.out_dir.map(PathBuf::from),
        snapshot_every,
        jobs: raw.jobs,
        layout_file: raw.layout_file.map(PathBuf::from),
        spec,
        schedule,
        weights,
        guidance,
        config_stem: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into()),
    };
    echo(&config);
    Ok(config)
}

/// Prints the resolved configuration, one key per line.
fn echo(cfg: &RunConfig) {
    println!("resolved kind = {}", cfg.kind.as_str());
    println!("resolved seeds = {} runs", cfg.seeds.len());
    println!(
        "resolved scene: r = {}, c = {}, concepts = [{}], scenes = {}",
        cfg.spec.resolution(),
        cfg.spec.channels(),
        cfg.spec.concepts().names().collect::<Vec<_>>().join(", "),
        cfg.spec.scenes().len()
    );
    println!(
        "resolved schedule: steps = {}, guidance_step(T) = {}",
        cfg.schedule.steps(),
        cfg.schedule.guidance_step(cfg.schedule.steps())
    );
    println!(
        "resolved guidance: lambda_seg = {}, lambda_ret = {}, tau_frac = {}, updates_per_step = {}, cutoff = {}",
        cfg.guidance.lambda_seg,
        cfg.guidance.lambda_ret,
        cfg.guidance.tau_frac,
        cfg.guidance.updates_per_step,
        cfg.guidance.cutoff_step
    );
    println!("resolved snapshot_every = {}", cfg.snapshot_every);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(text: &str) -> Result<RunConfig> {
        let dir = std::env::temp_dir().join("astar_config_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("cfg_{:x}.toml", {
            use std::hash::{Hash, Hasher};
            let mut h = std::collections::hash_map::DefaultHasher::new();
            text.hash(&mut h);
            h.finish()
        }));
        std::fs::write(&path, text).unwrap();
        parse_config(&path)
    }

    const MINIMAL: &str = r#"
seeds = [1, 2]

[scene]
[[scene.concepts]]
name = "cat"
[[scene.concepts]]
name = "dog"
"#;

    #[test]
    fn minimal_config_applies_documented_defaults() {
        let cfg = parse_str(MINIMAL).unwrap();
        assert_eq!(cfg.spec.resolution(), 16);
        assert_eq!(cfg.schedule.steps(), 50);
        assert_eq!(cfg.guidance.lambda_seg, 1.0);
        assert_eq!(cfg.guidance.lambda_ret, 1.0);
        assert_eq!(cfg.guidance.tau_frac, 0.5);
        assert_eq!(cfg.snapshot_every, 5);
        assert_eq!(cfg.kind, ExperimentKind::Guided);
        assert_eq!(cfg.spec.scenes().len(), 3); // default pathological mixture
    }

    #[test]
    fn out_of_range_tau_names_the_key() {
        let text = format!("{MINIMAL}\n[guidance]\ntau_frac = 1.5\n");
        let err = parse_str(&text).unwrap_err().to_string();
        assert!(err.contains("tau_frac"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\nbogus_key = 3\n");
        let err = parse_str(&text).unwrap_err().to_string();
        assert!(
            err.contains("bogus_key") || err.contains("unknown field"),
            "{err}"
        );
    }

    #[test]
    fn seed_expansion_is_deterministic() {
        let a = expand_seeds(17, 4);
        let b = expand_seeds(17, 4);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let c = expand_seeds(18, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn missing_seeds_is_an_error() {
        let text = r#"
[scene]
[[scene.concepts]]
name = "cat"
"#;
        let err = parse_str(text).unwrap_err().to_string();
        assert!(err.contains("seeds"), "{err}");
    }

    #[test]
    fn explicit_scenes_resolve_concept_names() {
        let text = r#"
seeds = [1]

[scene]
r = 8
c = 4

[[scene.concepts]]
name = "cat"
[[scene.concepts]]
name = "dog"

[[scene.scenes]]
weight = 0.6
placements = { cat = [2.0, 2.0, 1.0] }

[[scene.scenes]]
weight = 0.4
placements = { cat = [2.0, 2.0, 1.0], dog = [5.0, 5.0, 1.0] }
"#;
        let cfg = parse_str(text).unwrap();
        assert_eq!(cfg.spec.scenes().len(), 2);
        assert!((cfg.spec.scenes()[0].weight - 0.6).abs() < 1e-12);

        let bad = text.replace("dog = [5.0", "bird = [5.0");
        let err = parse_str(&bad).unwrap_err().to_string();
        assert!(err.contains("bird"), "{err}");
    }

    #[test]
    fn ablation_with_zero_seg_resolves_to_ret_only_semantics() {
        let text = format!(
            "kind = \"ablation\"\n{}\n[guidance]\nlambda_seg = 0.0\n",
            MINIMAL.replace("seeds = [1, 2]", "seeds = [1]")
        );
        let cfg = parse_str(&text).unwrap();
        assert_eq!(cfg.kind, ExperimentKind::Ablation);
        assert_eq!(cfg.guidance.lambda_seg, 0.0);
        assert_eq!(cfg.guidance.lambda_ret, 1.0);
    }
}
