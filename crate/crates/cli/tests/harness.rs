//! End-to-end checks of the `astar` binary: artifact accounting, snapshot
//! placement, exit codes, and byte-level determinism of reruns.

use std::path::Path;
use std::process::Command;

fn astar() -> Command {
    Command::new(env!("CARGO_BIN_EXE_astar"))
}

fn write_demo_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("demo.toml");
    std::fs::write(
        &path,
        r#"
seeds = [1, 2]

[scene]
[[scene.concepts]]
name = "cat"
[[scene.concepts]]
name = "dog"
"#,
    )
    .unwrap();
    path
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.ends_with(".csv").then_some(name)
        })
        .collect();
    names.sort();
    names
}

#[test]
fn compare_writes_exactly_the_expected_files() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_demo_config(tmp.path());
    let out = tmp.path().join("out");
    let status = astar()
        .args(["compare"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("--jobs")
        .arg("2")
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        csv_files(&out),
        vec![
            "summary.csv",
            "trace_baseline_seed1.csv",
            "trace_baseline_seed2.csv",
            "trace_guided_seed1.csv",
            "trace_guided_seed2.csv",
        ]
    );
}

#[test]
fn snapshots_cover_every_fifth_step_plus_the_last() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_demo_config(tmp.path());
    let out = tmp.path().join("out");
    let status = astar()
        .args(["run"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("--seeds")
        .arg("1")
        .status()
        .unwrap();
    assert!(status.success());

    let heat_dir = std::fs::read_dir(out.join("heatmaps"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let mut steps: Vec<usize> = std::fs::read_dir(&heat_dir)
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.strip_prefix("step")?.get(..3)?.parse::<usize>().ok()
        })
        .collect();
    steps.sort_unstable();
    steps.dedup();
    let expected: Vec<usize> = {
        let mut v: Vec<usize> = (1..=50)
            .filter(|&t| t == 50 || t == 1 || t % 5 == 0)
            .collect();
        v.sort_unstable();
        v
    };
    assert_eq!(steps, expected);

    // gray level encodes the map value exactly: max of a normalized slice is
    // 1.0 -> 255
    let any_pgm = std::fs::read_dir(&heat_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "pgm"))
        .unwrap();
    let img = astar_core::pgm::read(&any_pgm).unwrap();
    assert_eq!(img.maxval, 255);
    assert_eq!(img.pixels.iter().max().copied(), Some(255));
}

#[test]
fn rerun_with_identical_config_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_demo_config(tmp.path());
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let status = astar()
            .args(["compare"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .arg("--jobs")
            .arg("3")
            .status()
            .unwrap();
        assert!(status.success());
    }
    for name in csv_files(&out_a) {
        let a = std::fs::read(out_a.join(&name)).unwrap();
        let b = std::fs::read(out_b.join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

#[test]
fn layout_subcommand_reports_peak_rates() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_demo_config(tmp.path());
    let layout = tmp.path().join("layout.txt");
    std::fs::write(&layout, "cat: rect 0 0 7 7\ndog: rect 8 8 15 15\n").unwrap();
    let out = tmp.path().join("out");
    let status = astar()
        .args(["layout"])
        .arg(&config)
        .arg(&layout)
        .arg("--out")
        .arg(&out)
        .arg("--seeds")
        .arg("1,2")
        .status()
        .unwrap();
    assert!(status.success());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.contains("peak_in_box_rate_cat"));
    assert!(summary.contains("peak_in_box_rate_dog"));
}

#[test]
fn invalid_config_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "seeds = [1]\nnot_a_key = true\n").unwrap();
    let output = astar().args(["run"]).arg(&config).output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("not_a_key") || stderr.contains("unknown field"),
        "{stderr}"
    );
}

#[test]
fn layout_without_file_exits_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("cfg.toml");
    std::fs::write(
        &config,
        "kind = \"layout\"\nseeds = [1]\n\n[scene]\n[[scene.concepts]]\nname = \"cat\"\n",
    )
    .unwrap();
    let output = astar().args(["run"]).arg(&config).output().unwrap();
    assert!(!output.status.success());
}
