use std::path::Path;
use std::process::{Command, Output};

fn nthp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nthp"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = nthp(&["group", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(nthp(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(nthp(&[], dir.path()).status.code(), Some(1));
}

#[test]
fn io_and_validation_errors_have_their_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = nthp(&["group", "--candidates", "missing.json", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(dir.path().join("bad.nthp"), b"JUNKJUNK").unwrap();
    std::fs::write(
        dir.path().join("c.json"),
        r#"{"image_size":[4,4],"parts":[{"category":0,"score":0.9,"mask_file":"bad.nthp"}],"humans":[]}"#,
    )
    .unwrap();
    let o = nthp(&["group", "--candidates", "c.json", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));
    let o = nthp(&["gen-scene", "--height", "30", "--out", "s"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    let o = nthp(&["group", "--candidates", "c.json", "--s-part", "1.5", "--out", "r"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn subcommands_chain_into_a_perfect_report() {
    let dir = tempfile::tempdir().unwrap();
    let steps: [&[&str]; 6] = [
        &["gen-scene", "--seed", "3", "--out", "scene"],
        &["assign", "--scene", "scene/scene.json", "--out", "targets.json"],
        &["oracle", "--scene", "scene/scene.json", "--prototypes", "64", "--out", "outputs"],
        &["synthesize", "--outputs", "outputs/outputs.json", "--out", "cand"],
        &["group", "--candidates", "cand/candidates.json", "--out", "res"],
        &["eval", "--results", "res/results.json", "--scene", "scene/scene.json", "--report", "report.json"],
    ];
    let mut last = None;
    for args in steps {
        let o = nthp(args, dir.path());
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        last = Some(o);
    }
    let report = stdout(&last.unwrap());
    assert!(report.contains("AP^p_50 = 1.000000"), "{report}");
    assert!(report.contains("PCP_50 = 1.000000"), "{report}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json[0]["metric"], "AP^p_50");
    assert_eq!(json[0]["value"], 1.0);
    let targets: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("targets.json")).unwrap()).unwrap();
    assert_eq!(targets.as_array().unwrap().len(), 5);
}

#[test]
fn default_group_flags_equal_explicit_paper_constants() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen-scene", "--seed", "9", "--out", "scene"][..],
        &["oracle", "--scene", "scene/scene.json", "--prototypes", "64", "--out", "outputs"],
        &["synthesize", "--outputs", "outputs/outputs.json", "--out", "cand"],
        &["group", "--candidates", "cand/candidates.json", "--out", "a"],
        &[
            "group", "--candidates", "cand/candidates.json", "--n-part", "200", "--s-part", "0.333333333333333",
            "--s-human", "0.1", "--r-human", "0.666666666666667", "--nms", "gaussian", "--nms-sigma", "2.0", "--out", "b",
        ],
    ] {
        assert_eq!(nthp(args, dir.path()).status.code(), Some(0), "{args:?}");
    }
    let a = std::fs::read(dir.path().join("a/results.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/results.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn loss_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = nthp(&["loss-check", "--points", "20"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).matches("[ok]").count(), 2);
}

#[test]
fn level_table_file_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("levels.toml"),
        "[[levels]]\nlevel = \"F1\"\ngrid = 8\nkind = \"part\"\n\n[[levels]]\nlevel = \"F5\"\ngrid = 4\nkind = \"human\"\n",
    )
    .unwrap();
    assert_eq!(nthp(&["gen-scene", "--seed", "2", "--out", "s"], dir.path()).status.code(), Some(0));
    let o = nthp(&["assign", "--scene", "s/scene.json", "--level-table", "levels.toml", "--out", "t.json"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let t: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("t.json")).unwrap()).unwrap();
    assert_eq!(t.as_array().unwrap().len(), 2);
    assert_eq!(t[0]["grid"], 8);
}
