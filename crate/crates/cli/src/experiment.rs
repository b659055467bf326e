//! Experiment execution: dispatches runs over a worker pool, writes trace
//! CSVs and heatmaps per run, and a cohort summary after all runs join.
//!
//! Artifact layout under the output directory:
//!
//! ```text
//! trace_<method>_seed<seed>.csv      per-step loss log
//! summary.csv                        per-seed and aggregate metrics
//! heatmaps/<method>_seed<seed>/      normalized maps at sampled steps (P5)
//! ```
//!
//! All CSV floats carry 12 significant digits in scientific notation, so
//! reruns of the same configuration are byte-identical. The statistics here
//! are desk-scale proxies computed on the toy model's latents, not image
//! metrics; the summary labels them accordingly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};

use astar_core::guidance::{GuidanceConfig, GuidedSampler, MaskMode, RunTrace};
use astar_core::masks::load_layout_masks;
use astar_core::metrics::{cohort_stats, compare_cohorts, summarize_run, SeedRunSummary};
use astar_core::pgm;

use crate::config::{ExperimentKind, RunConfig};

/// Formats a float with 12 significant digits, locale-independent.
pub fn fmt12(v: f64) -> String {
    format!("{v:.11e}")
}

/// One method (configuration variant) to run over the seed cohort.
struct Method {
    name: &'static str,
    guidance: GuidanceConfig<f64>,
}

struct RunArtifacts {
    summary: SeedRunSummary<f64>,
    peaks_in_box: Option<Vec<bool>>,
    written: Vec<PathBuf>,
}

/// Executes the configured experiment into `out_dir`. On failure every file
/// written so far is removed.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output dir {}", out_dir.display()))?;
    let written = Mutex::new(Vec::<PathBuf>::new());
    let result = run_inner(cfg, out_dir, &written);
    if result.is_err() {
        let files = written.lock().unwrap();
        for path in files.iter() {
            let _ = fs::remove_file(path);
        }
        // drop directories this invocation emptied
        let mut dirs: Vec<&Path> = files.iter().filter_map(|p| p.parent()).collect();
        dirs.sort();
        dirs.dedup();
        for dir in dirs {
            let _ = fs::remove_dir(dir);
        }
    }
    result
}

fn run_inner(cfg: &RunConfig, out_dir: &Path, written: &Mutex<Vec<PathBuf>>) -> Result<()> {
    let layout_masks = match cfg.kind {
        ExperimentKind::Layout => {
            let path = cfg
                .layout_file
                .as_ref()
                .ok_or_else(|| anyhow!("layout experiments need a layout file"))?;
            let (masks, warnings) =
                load_layout_masks(path, cfg.spec.concepts(), cfg.spec.resolution())?;
            for warning in &warnings {
                eprintln!("warning: {warning}");
            }
            Some(masks)
        }
        _ => None,
    };

    let baseline = Method {
        name: "baseline",
        guidance: GuidanceConfig {
            mask_mode: MaskMode::Derived,
            ..GuidanceConfig::baseline()
        },
    };
    let guided = |name: &'static str, lambda_seg: f64, lambda_ret: f64| Method {
        name,
        guidance: GuidanceConfig {
            lambda_seg,
            lambda_ret,
            ..cfg.guidance.clone()
        },
    };

    let methods: Vec<Method> = match cfg.kind {
        ExperimentKind::Baseline => vec![baseline],
        ExperimentKind::Guided => vec![guided(
            "guided",
            cfg.guidance.lambda_seg,
            cfg.guidance.lambda_ret,
        )],
        ExperimentKind::Compare => vec![
            baseline,
            guided("guided", cfg.guidance.lambda_seg, cfg.guidance.lambda_ret),
        ],
        ExperimentKind::Ablation => vec![
            baseline,
            guided("ret_only", 0.0, cfg.guidance.lambda_ret),
            guided("seg_only", cfg.guidance.lambda_seg, 0.0),
            guided("full", cfg.guidance.lambda_seg, cfg.guidance.lambda_ret),
        ],
        ExperimentKind::Layout => {
            let masks = layout_masks.clone().expect("loaded above");
            vec![Method {
                name: "layout",
                guidance: GuidanceConfig {
                    mask_mode: MaskMode::UserLayout(masks),
                    ..cfg.guidance.clone()
                },
            }]
        }
    };

    let jobs = cfg.jobs.filter(|&j| j > 0).unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });

    let mut cohorts: Vec<(&'static str, Vec<SeedRunSummary<f64>>)> = Vec::new();
    let mut in_box: Vec<(&'static str, Vec<Vec<bool>>)> = Vec::new();
    for method in &methods {
        let sampler = GuidedSampler::new(
            &cfg.spec,
            &cfg.schedule,
            &cfg.weights,
            method.guidance.clone(),
        )?;
        let outcomes = parallel_map(&cfg.seeds, jobs, |seed| {
            run_one(
                cfg,
                method,
                &sampler,
                seed,
                out_dir,
                layout_masks.as_deref(),
            )
        })?;
        let mut summaries = Vec::with_capacity(outcomes.len());
        let mut boxes = Vec::new();
        for outcome in outcomes {
            written.lock().unwrap().extend(outcome.written);
            if let Some(b) = outcome.peaks_in_box {
                boxes.push(b);
            }
            summaries.push(outcome.summary);
        }
        if !boxes.is_empty() {
            in_box.push((method.name, boxes));
        }
        cohorts.push((method.name, summaries));
    }

    let summary_path = out_dir.join("summary.csv");
    let summary = render_summary(cfg, &cohorts, &in_box)?;
    fs::write(&summary_path, summary)
        .with_context(|| format!("cannot write {}", summary_path.display()))?;
    written.lock().unwrap().push(summary_path);
    Ok(())
}

/// Runs one seed for one method and writes its per-run artifacts.
fn run_one(
    cfg: &RunConfig,
    method: &Method,
    sampler: &GuidedSampler<'_, f64>,
    seed: u64,
    out_dir: &Path,
    layout_masks: Option<&[astar_core::masks::BinaryMask]>,
) -> Result<RunArtifacts> {
    let trace = sampler.run(seed, cfg.snapshot_every)?;
    let mut written = Vec::new();

    let trace_path = out_dir.join(format!("trace_{}_seed{seed}.csv", method.name));
    fs::write(&trace_path, render_trace(cfg, &trace))
        .with_context(|| format!("cannot write {}", trace_path.display()))?;
    written.push(trace_path);

    let heat_dir = out_dir
        .join("heatmaps")
        .join(format!("{}_seed{seed}", method.name));
    fs::create_dir_all(&heat_dir)?;
    let r = cfg.spec.resolution();
    for record in &trace.steps {
        let Some(maps) = &record.snapshot else {
            continue;
        };
        for (n, name) in cfg.spec.concepts().names().enumerate() {
            let slice = astar_core::attention::map_slice(maps, n);
            let path = heat_dir.join(format!("step{:03}_{}.pgm", record.t, name));
            pgm::write_map(&path, r, r, &slice, true)?;
            written.push(path);
        }
    }

    let summary = summarize_run(&trace, cfg.guidance.tau_frac)?;
    let peaks_in_box = layout_masks.map(|masks| {
        trace
            .presence
            .iter()
            .zip(masks)
            .map(|(p, mask)| mask.get(p.peak.0, p.peak.1))
            .collect()
    });
    Ok(RunArtifacts {
        summary,
        peaks_in_box,
        written,
    })
}

/// Per-run trace CSV: one row per step, stable headers, absent retention
/// terms as empty fields.
fn render_trace(cfg: &RunConfig, trace: &RunTrace<f64>) -> String {
    let names: Vec<&str> = cfg.spec.concepts().names().collect();
    let mut header = String::from("step,seg_total,ret_total,total");
    let n = names.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let _ = write!(header, ",seg_{}_{}", names[i], names[j]);
        }
    }
    for name in &names {
        let _ = write!(header, ",ret_{name}");
    }
    let mut out = header;
    out.push('\n');
    for record in &trace.steps {
        let report = &record.report;
        let _ = write!(
            out,
            "{},{},{},{}",
            record.t,
            fmt12(report.seg_total),
            fmt12(report.ret_total),
            fmt12(report.total)
        );
        for i in 0..n {
            for j in (i + 1)..n {
                match report.per_pair_seg.get(&(i, j)) {
                    Some(v) => {
                        let _ = write!(out, ",{}", fmt12(*v));
                    }
                    None => out.push(','),
                }
            }
        }
        for m in 0..n {
            match report.per_concept_ret.get(&m) {
                Some(v) => {
                    let _ = write!(out, ",{}", fmt12(*v));
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Long-format summary CSV: scope,method,seed,metric,value.
fn render_summary(
    cfg: &RunConfig,
    cohorts: &[(&'static str, Vec<SeedRunSummary<f64>>)],
    in_box: &[(&'static str, Vec<Vec<bool>>)],
) -> Result<String> {
    let names: Vec<&str> = cfg.spec.concepts().names().collect();
    let mut out = String::from("scope,method,seed,metric,value\n");
    let mut row =
        |scope: &str, method: &str, seed: Option<u64>, metric: &str, value: Option<f64>| {
            let seed_field = seed.map(|s| s.to_string()).unwrap_or_default();
            let value_field = value.map(fmt12).unwrap_or_default();
            let _ = writeln!(out, "{scope},{method},{seed_field},{metric},{value_field}");
        };

    for (method, summaries) in cohorts {
        let mut ordered: Vec<&SeedRunSummary<f64>> = summaries.iter().collect();
        ordered.sort_by_key(|s| s.seed);
        for s in &ordered {
            row(
                "per_seed",
                method,
                Some(s.seed),
                "all_present",
                Some(s.all_present as u8 as f64),
            );
            for (i, name) in names.iter().enumerate() {
                row(
                    "per_seed",
                    method,
                    Some(s.seed),
                    &format!("present_{name}"),
                    Some(s.presence[i] as u8 as f64),
                );
                row(
                    "per_seed",
                    method,
                    Some(s.seed),
                    &format!("score_{name}"),
                    Some(s.scores[i]),
                );
                row(
                    "per_seed",
                    method,
                    Some(s.seed),
                    &format!("retention_t1_{name}"),
                    s.retention_t1[i],
                );
            }
            row(
                "per_seed",
                method,
                Some(s.seed),
                "final_overlap",
                s.final_overlap,
            );
        }

        let stats = cohort_stats(summaries)?;
        row(
            "aggregate",
            method,
            None,
            "all_present_rate",
            Some(stats.all_present_rate),
        );
        for (i, name) in names.iter().enumerate() {
            row(
                "aggregate",
                method,
                None,
                &format!("present_rate_{name}"),
                Some(stats.per_concept_rates[i]),
            );
            row(
                "aggregate",
                method,
                None,
                &format!("mean_retention_t1_{name}"),
                stats.mean_retention_t1[i],
            );
        }
        row(
            "aggregate",
            method,
            None,
            "mean_final_overlap",
            stats.mean_final_overlap,
        );
        row(
            "aggregate",
            method,
            None,
            "mean_final_retention",
            stats.mean_final_retention,
        );
    }

    for (method, boxes) in in_box {
        let count = boxes.len() as f64;
        for (i, name) in names.iter().enumerate() {
            let rate = boxes.iter().filter(|b| b[i]).count() as f64 / count;
            row(
                "aggregate",
                method,
                None,
                &format!("peak_in_box_rate_{name}"),
                Some(rate),
            );
        }
    }

    // paired deltas against the baseline cohort, when one was run
    if let Some((_, base)) = cohorts.iter().find(|(name, _)| *name == "baseline") {
        for (method, summaries) in cohorts.iter().filter(|(name, _)| *name != "baseline") {
            let cmp = compare_cohorts(base, summaries)?;
            let label = format!("{method}_vs_baseline");
            row(
                "delta",
                &label,
                None,
                "all_present_delta",
                Some(cmp.delta.all_present_delta),
            );
            row(
                "delta",
                &label,
                None,
                "overlap_decreased_fraction",
                Some(cmp.delta.overlap_decreased_fraction),
            );
            row(
                "delta",
                &label,
                None,
                "mean_final_overlap_delta",
                cmp.delta.mean_final_overlap_delta,
            );
            for (i, name) in names.iter().enumerate() {
                row(
                    "delta",
                    &label,
                    None,
                    &format!("present_rate_delta_{name}"),
                    Some(cmp.delta.per_concept_deltas[i]),
                );
                row(
                    "delta",
                    &label,
                    None,
                    &format!("retention_t1_delta_{name}"),
                    cmp.delta.retention_t1_delta[i],
                );
            }
        }
    }

    // proxy disclaimer row: these are toy-model statistics
    row(
        "note",
        "all",
        None,
        "desk_scale_proxy_metrics_not_image_similarities",
        None,
    );
    Ok(out)
}

/// Maps `f` over the seeds on a bounded pool of `jobs` workers, preserving
/// input order in the results.
fn parallel_map<R, F>(seeds: &[u64], jobs: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(u64) -> Result<R> + Sync,
{
    if jobs <= 1 || seeds.len() <= 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = seeds.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(seeds.len()) {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= seeds.len() {
                    break;
                }
                let result = f(seeds[idx]);
                *slots[idx].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap()
                .unwrap_or_else(|| Err(anyhow!("worker dropped a run")))
        })
        .collect()
}

/// Resolves the output directory: flag, then config, then the environment
/// root (`ASTAR_OUT`, default `astar-out`) joined with the config stem.
pub fn resolve_out_dir(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(path) = flag {
        return path.to_path_buf();
    }
    if let Some(path) = &cfg.out_dir {
        return path.clone();
    }
    let root = std::env::var_os("ASTAR_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("astar-out"));
    root.join(&cfg.config_stem)
}

/// Applies command-line overrides onto a parsed configuration.
pub fn apply_overrides(
    cfg: &mut RunConfig,
    kind: Option<ExperimentKind>,
    seeds: Option<&str>,
    jobs: Option<usize>,
    snapshot_every: Option<usize>,
    layout_file: Option<PathBuf>,
) -> Result<()> {
    if let Some(kind) = kind {
        cfg.kind = kind;
    }
    if let Some(spec) = seeds {
        cfg.seeds = parse_seed_flag(spec)?;
    }
    if let Some(jobs) = jobs {
        cfg.jobs = Some(jobs);
    }
    if let Some(k) = snapshot_every {
        if k == 0 {
            bail!("--snapshot-every must be positive");
        }
        cfg.snapshot_every = k;
    }
    if let Some(path) = layout_file {
        cfg.layout_file = Some(path);
    }
    if cfg.kind == ExperimentKind::Layout && cfg.layout_file.is_none() {
        bail!("layout experiments need a layout file");
    }
    Ok(())
}

/// `--seeds` accepts either a count (expanded from the master seed) or an
/// explicit comma-separated list.
fn parse_seed_flag(spec: &str) -> Result<Vec<u64>> {
    if spec.contains(',') {
        spec.split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<u64>()
                    .map_err(|_| anyhow!("--seeds: `{tok}` is not a seed"))
            })
            .collect()
    } else {
        let count: usize = spec
            .trim()
            .parse()
            .map_err(|_| anyhow!("--seeds: expected a count or a comma-separated list"))?;
        if count == 0 {
            bail!("--seeds: count must be positive");
        }
        Ok(crate::config::expand_seeds(
            crate::config::DEFAULT_MASTER_SEED,
            count,
        ))
    }
}
