use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[scenarios]
angles_deg = [40.0, 200.0]
snr_db = [20.0]

[stimuli]
duration_s = 1.0
"#;

fn wavedoa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavedoa"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn wavedoa")
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), format!("{SMALL}{extra}")).unwrap();
    dir
}

#[test]
fn simulate_then_estimate_with_saved_dictionary() {
    let dir = setup("");
    let p = dir.path();
    let out = wavedoa(
        &["dict", "build", "--config", "small.toml", "--out", "dict"],
        p,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(p.join("dict/dictionary.wdd").exists());

    let out = wavedoa(
        &["sim", "generate", "--config", "small.toml", "--out", "sim"],
        p,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let truth = fs::read_to_string(p.join("sim/truth.jsonl")).unwrap();
    assert_eq!(truth.lines().count(), 2);
    assert!(truth
        .lines()
        .all(|l| l.starts_with('{') && l.contains("\"azimuth_deg\"")));

    // Estimate with the saved dictionary instead of rebuilding it.
    let cfg = format!("{SMALL}\n[dictionary]\npath = \"dict/dictionary.wdd\"\n");
    fs::write(p.join("saved.toml"), cfg).unwrap();
    let wav = "sim/anechoic-center-az040.0-snr+20.0-s0.wav";
    let out = wavedoa(
        &[
            "estimate",
            "run",
            "--config",
            "saved.toml",
            "--out",
            "est",
            "--estimator",
            "both",
            "--dump-likelihood",
            wav,
        ],
        p,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(p.join("est/estimates.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert!(row.ends_with(",40.0,"), "{row}");
    }
    let dump = fs::read_to_string(p.join("est/likelihood/anechoic-center-az040.0-snr+20.0-s0.csv"))
        .unwrap();
    assert!(dump.starts_with("frame,"));
}

#[test]
fn eval_report_is_reproducible_and_seed_overridable() {
    let dir = setup("");
    let p = dir.path();
    for out_dir in ["a", "b"] {
        let out = wavedoa(
            &[
                "eval",
                "report",
                "--config",
                "small.toml",
                "--out",
                out_dir,
                "--estimator",
                "mle",
            ],
            p,
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for f in ["records.csv", "mae_by_snr.csv", "cdf.csv", "summary.json"] {
        assert_eq!(
            fs::read(p.join("a").join(f)).unwrap(),
            fs::read(p.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let records = fs::read_to_string(p.join("a/records.csv")).unwrap();
    assert!(!records.contains(",srp,"));

    let out = wavedoa(
        &[
            "eval",
            "report",
            "--config",
            "small.toml",
            "--out",
            "c",
            "--seed",
            "4",
            "--estimator",
            "mle",
        ],
        p,
    );
    assert!(out.status.success());
    let a = fs::read_to_string(p.join("a/summary.json")).unwrap();
    let c = fs::read_to_string(p.join("c/summary.json")).unwrap();
    assert_ne!(a, c, "a different seed changes the config hash");
}

#[test]
fn exit_codes_separate_config_and_runtime_errors() {
    let dir = setup("");
    let p = dir.path();
    assert_eq!(wavedoa(&["--help"], p).status.code(), Some(0));
    assert_eq!(
        wavedoa(&["eval", "report", "--bogus"], p).status.code(),
        Some(1)
    );
    assert_eq!(
        wavedoa(
            &["eval", "report", "--config", "missing.toml", "--out", "r"],
            p
        )
        .status
        .code(),
        Some(1)
    );
    // No output directory anywhere.
    assert_eq!(
        wavedoa(&["eval", "report", "--config", "small.toml"], p)
            .status
            .code(),
        Some(1)
    );

    fs::write(p.join("empty.toml"), "[scenarios]\nangles_deg = []\n").unwrap();
    assert_eq!(
        wavedoa(
            &["eval", "report", "--config", "empty.toml", "--out", "r"],
            p
        )
        .status
        .code(),
        Some(1)
    );
    fs::write(p.join("typo.toml"), "sead = 1\n").unwrap();
    assert_eq!(
        wavedoa(&["dict", "build", "--config", "typo.toml", "--out", "r"], p)
            .status
            .code(),
        Some(1)
    );

    fs::write(p.join("junk.wav"), b"not a wav file").unwrap();
    let out = wavedoa(
        &["estimate", "run", "--config", "small.toml", "junk.wav"],
        p,
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reverberant.toml");
    let cfg = wavedoa::ExperimentConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.rooms.len(), 2);
    assert_eq!(cfg.scenarios().unwrap().len(), 2 * 3 * 36 * 5);
    // The file spells out the defaults; only the grid and output differ.
    let defaults = wavedoa::ExperimentConfig::default();
    assert_eq!(cfg.mle, defaults.mle);
    assert_eq!(cfg.dictionary, defaults.dictionary);
}
