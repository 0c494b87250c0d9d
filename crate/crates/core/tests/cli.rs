mod common;

use std::path::Path;
use std::process::{Command, Output};

use tbscreen::cohort::{save_cohort, CaseRecord, Cohort, CohortTag, Label, ReaderInfo, ReaderRead};
use tbscreen::report::Manifest;

fn tbscreen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbscreen"))
        .args(args)
        .output()
        .unwrap()
}

fn run_in(dir: &Path, config: &Path, args: &[&str]) -> Output {
    let out = dir.join("out");
    let mut all = vec![
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    all.extend_from_slice(args);
    tbscreen(&all)
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_slice(&std::fs::read(dir.join("out/manifest.json")).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records()
        .map(|rec| rec.unwrap()[idx].to_string())
        .collect()
}

fn fixture() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let config = common::write_fixture(dir.path(), &common::three_dataset_study(), "");
    (dir, config)
}

#[test]
fn validate_succeeds_on_clean_inputs() {
    let (dir, config) = fixture();
    let o = run_in(dir.path(), &config, &["validate"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/validation.json")).unwrap())
            .unwrap();
    assert_eq!(v["valid"], true);
    assert_eq!(v["n_cases"], 500);
}

#[test]
fn broken_reference_exits_one() {
    let (dir, config) = fixture();
    let reads = dir.path().join("data/reads.csv");
    let mut text = std::fs::read_to_string(&reads).unwrap();
    text.push_str("no-such-case,in01,1,,0\n");
    std::fs::write(&reads, text).unwrap();
    assert_eq!(
        run_in(dir.path(), &config, &["validate"]).status.code(),
        Some(1)
    );
}

#[test]
fn unreadable_input_exits_one() {
    let (dir, config) = fixture();
    std::fs::remove_file(dir.path().join("data/cases.csv")).unwrap();
    let o = run_in(dir.path(), &config, &["evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cases.csv"));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let (dir, config) = fixture();
    assert_eq!(
        run_in(dir.path(), &config, &["match", "--mode", "nearest"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(tbscreen(&["evaluate"]).status.code(), Some(2));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\nunknown_key = 3\n").unwrap();
    assert_eq!(
        run_in(dir.path(), &bad, &["validate"]).status.code(),
        Some(2)
    );
    let bad_op = dir.path().join("bad_op.toml");
    let text = "primary_operating_point = \"missing\"\n".to_string()
        + &std::fs::read_to_string(&config).unwrap();
    std::fs::write(&bad_op, text).unwrap();
    assert_eq!(
        run_in(dir.path(), &bad_op, &["evaluate"]).status.code(),
        Some(2)
    );
}

#[test]
fn evaluate_writes_one_row_per_dataset_and_cohort() {
    let (dir, config) = fixture();
    let o = run_in(dir.path(), &config, &["evaluate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let datasets = column(&out.join("tables/table2.csv"), "dataset");
    let cohorts = column(&out.join("tables/table2.csv"), "reader_cohort");
    let pairs: Vec<(String, String)> = datasets.into_iter().zip(cohorts).collect();
    assert_eq!(pairs.len(), 8);
    for d in ["alpha", "beta", "gamma", "combined"] {
        for c in ["india_based", "us_based"] {
            assert!(pairs.contains(&(d.to_string(), c.to_string())));
        }
    }
    // US readers only read alpha; the other US rows carry a notice.
    let notices = column(&out.join("tables/table2.csv"), "notice");
    assert_eq!(notices.iter().filter(|n| !n.is_empty()).count(), 3);
    assert!(out.join("tests/primary_outcome.json").exists());
    assert!(out.join("roc/combined.csv").exists());
    for name in ["high_sensitivity", "south_africa_alt"] {
        assert!(out.join(format!("tables/table2_{name}.csv")).exists());
    }
}

fn planted_outlier_study(dir: &Path) -> std::path::PathBuf {
    let rates = [0.15, 0.22, 0.24, 0.25, 0.26, 0.27, 0.28, 0.30, 0.31, 0.33];
    let n = 200;
    let cases: Vec<CaseRecord> = (0..n)
        .map(|k| {
            let positive = k % 5 == 0;
            CaseRecord::new(
                format!("c{k:03}"),
                "planted",
                Label::from_bool(positive),
                if positive { 0.8 } else { 0.2 } + (k as f64) * 1e-4,
            )
        })
        .collect();
    let readers: Vec<ReaderInfo> = (0..rates.len())
        .map(|j| ReaderInfo::new(format!("r{j:02}"), CohortTag::IndiaBased))
        .collect();
    let mut reads = Vec::new();
    for (j, &rate) in rates.iter().enumerate() {
        let positives = (rate * n as f64).round() as usize;
        for (k, case) in cases.iter().enumerate() {
            reads.push(ReaderRead::new(
                case.case_id.clone(),
                format!("r{j:02}"),
                Label::from_bool(k < positives),
            ));
        }
    }
    save_cohort(
        &Cohort::new(cases, reads, readers).unwrap(),
        &dir.join("data"),
    )
    .unwrap();
    let config = dir.join("run.toml");
    std::fs::write(
        &config,
        "[inputs]\ncases = \"data/cases.csv\"\nreads = \"data/reads.csv\"\nreaders = \"data/readers.csv\"\n[bootstrap]\nn_resamples = 50\n",
    )
    .unwrap();
    config
}

#[test]
fn planted_outlier_is_excluded_and_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = planted_outlier_study(dir.path());
    assert!(run_in(dir.path(), &config, &["evaluate"]).status.success());
    let m = manifest(dir.path());
    assert_eq!(m.excluded_readers, vec!["r00".to_string()]);
    assert!(m
        .notes
        .iter()
        .any(|n| n.contains("r00") && n.contains("outlier")));
    let rates = dir.path().join("out/tables/reader_rates.csv");
    let excluded = column(&rates, "excluded");
    assert_eq!(excluded.iter().filter(|e| *e == "yes").count(), 1);
    assert_eq!(
        column(&dir.path().join("out/tables/table2.csv"), "n_readers")[0],
        "9"
    );

    assert!(run_in(
        dir.path(),
        &config,
        &["--include-excluded-readers", "evaluate"]
    )
    .status
    .success());
    let m = manifest(dir.path());
    assert!(m.excluded_readers.is_empty());
    assert_eq!(
        column(&dir.path().join("out/tables/table2.csv"), "n_readers")[0],
        "10"
    );
}

#[test]
fn match_modes_write_their_tables() {
    let (dir, config) = fixture();
    let out = dir.path().join("out");
    assert!(run_in(
        dir.path(),
        &config,
        &["match", "--mode", "who-sens", "--target", "0.85"]
    )
    .status
    .success());
    let targets = column(&out.join("tables/table4.csv"), "target");
    assert!(targets.iter().all(|t| t == "85.00%"), "{targets:?}");
    let sens = column(&out.join("tables/table4.csv"), "sensitivity");
    assert!(sens
        .iter()
        .all(|s| s.trim_end_matches('%').parse::<f64>().unwrap() >= 85.0));

    assert!(
        run_in(dir.path(), &config, &["match", "--mode", "mean-reader"])
            .status
            .success()
    );
    assert_eq!(csv_rows(&out.join("tables/table3.csv")).len(), 4 * 2 * 2);

    assert!(
        run_in(dir.path(), &config, &["match", "--mode", "per-reader"])
            .status
            .success()
    );
    let rows = csv_rows(&out.join("tables/table_s3.csv"));
    // 6 India readers on each of 3 datasets plus 6 US readers on alpha, two
    // axes each, less any reader screened out as an outlier.
    let excluded = manifest(dir.path()).excluded_readers;
    let india_out = excluded.iter().filter(|r| r.starts_with("in")).count();
    let us_out = excluded.len() - india_out;
    assert_eq!(rows.len(), ((6 - india_out) * 3 + 6 - us_out) * 2);
    let mcnemar = column(&out.join("tables/table_s3.csv"), "mcnemar_p");
    assert!(mcnemar
        .iter()
        .all(|p| p == "<0.0001" || p.parse::<f64>().is_ok()));
}

#[test]
fn seed_flag_overrides_config() {
    let (dir, config) = fixture();
    assert!(run_in(dir.path(), &config, &["--seed", "99", "validate"])
        .status
        .success());
    assert_eq!(manifest(dir.path()).seed, 99);
}

#[test]
fn empty_stratum_gets_a_notice() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "[[strata]]\nname = \"nobody\"\nfield = \"age\"\nop = \"<\"\nvalue = 0\n";
    let config = common::write_fixture(dir.path(), &common::three_dataset_study(), extra);
    let o = run_in(dir.path(), &config, &["subgroup"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = dir.path().join("out/tables/subgroups.csv");
    let names = column(&path, "stratum");
    let notices = column(&path, "notice");
    let counts = column(&path, "n_cases");
    let i = names.iter().position(|n| n == "nobody").unwrap();
    assert_eq!(counts[i], "0");
    assert!(notices[i].contains("suppressed"));
    assert!(counts.iter().any(|c| c.parse::<usize>().unwrap() > 0));
    assert!(names.iter().any(|n| n == "hiv_positive"));
    assert!(!dir.path().join("out/tables/abnormality.csv").exists());
}

#[test]
fn dist_shift_identical_and_shifted_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let mut cases = Vec::new();
    for k in 0..500 {
        let positive = k % 2 == 0;
        let x = (k / 2) as f64 / 250.0;
        cases.push(CaseRecord::new(
            format!("a{k}"),
            "a",
            Label::from_bool(positive),
            x,
        ));
        cases.push(CaseRecord::new(
            format!("b{k}"),
            "b",
            Label::from_bool(positive),
            x,
        ));
        cases.push(CaseRecord::new(
            format!("c{k}"),
            "c",
            Label::from_bool(positive),
            (0.5 + x).min(1.0),
        ));
    }
    save_cohort(
        &Cohort::new(cases, Vec::new(), Vec::new()).unwrap(),
        &dir.path().join("data"),
    )
    .unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "[inputs]\ncases = \"data/cases.csv\"\nreads = \"data/reads.csv\"\nreaders = \"data/readers.csv\"\n").unwrap();
    let o = run_in(dir.path(), &config, &["dist-shift"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&dir.path().join("out/tables/table_s5_all.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[1][1], "1.0000");
    assert_eq!(&rows[2][1], "<0.0001");
    assert_eq!(&rows[2][2], "<0.0001");
    assert_eq!(&rows[0][1], "");
    let hist = csv_rows(&dir.path().join("out/tables/figure3_histograms.csv"));
    assert_eq!(hist.len(), 3 * 3 * 20);
}

#[test]
fn cost_savings_invariant_to_cost_scale() {
    let dir = tempfile::tempdir().unwrap();
    let base = common::write_fixture(dir.path(), &common::three_dataset_study(), "");
    let scaled = dir.path().join("scaled.toml");
    let text = std::fs::read_to_string(&base).unwrap()
        + "[cost]\ncost_confirmatory_test = 130.6\ncost_cxr = 14.9\n";
    std::fs::write(&scaled, text).unwrap();
    let savings = |cfg: &Path| {
        assert!(run_in(dir.path(), cfg, &["cost"]).status.success());
        ["measured", "who_target", "lower_spec"]
            .iter()
            .flat_map(|s| column(&dir.path().join(format!("out/cost/{s}.csv")), "savings"))
            .collect::<Vec<_>>()
    };
    let a = savings(&base);
    assert_eq!(a.len(), 30);
    assert_eq!(a, savings(&scaled));

    let single = dir.path().join("single.toml");
    let text = std::fs::read_to_string(&base).unwrap()
        + "[cost]\nprevalence_min = 0.05\nprevalence_max = 0.05\n";
    std::fs::write(&single, text).unwrap();
    assert!(run_in(dir.path(), &single, &["cost"]).status.success());
    assert_eq!(
        csv_rows(&dir.path().join("out/cost/who_target.csv")).len(),
        1
    );
}

#[test]
fn synth_then_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let panels = dir.path().join("panels.toml");
    std::fs::write(
        &panels,
        "[[panel]]\ndataset = \"s\"\nn_pos = 40\nn_neg = 60\nn_readers = 4\nseed = 3\n\n[[panel]]\ndataset = \"t\"\nn_pos = 30\nn_neg = 50\nn_readers = 4\nseed = 4\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let o = tbscreen(&[
        "--out",
        data.to_str().unwrap(),
        "synth",
        "--panel",
        panels.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["cases.csv", "reads.csv", "readers.csv", "truth.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "[inputs]\ncases = \"data/cases.csv\"\nreads = \"data/reads.csv\"\nreaders = \"data/readers.csv\"\n[bootstrap]\nn_resamples = 50\n",
    )
    .unwrap();
    assert!(run_in(dir.path(), &config, &["report"]).status.success());
    let out = dir.path().join("out");
    let o = run_in(
        dir.path(),
        &config,
        &["verify", "--bundle", out.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));

    // A tampered cell is caught.
    let auc = out.join("tables/auc.csv");
    let text = std::fs::read_to_string(&auc).unwrap();
    let line = text.lines().nth(1).unwrap().to_string();
    let mut cells: Vec<String> = line.split(',').map(String::from).collect();
    cells[4] = "0.1234".into();
    std::fs::write(&auc, text.replace(&line, &cells.join(","))).unwrap();
    assert_eq!(
        run_in(
            dir.path(),
            &config,
            &["verify", "--bundle", out.to_str().unwrap()]
        )
        .status
        .code(),
        Some(1)
    );
}
