mod support;

use std::path::Path;

use support::*;

const SUBCOMMANDS: [&str; 12] = [
    "validate",
    "count",
    "plan",
    "skeleton",
    "place-search",
    "place-grid",
    "discretize",
    "simulate",
    "latency-fit",
    "latency-predict",
    "pareto",
    "dot",
];

fn help_text() -> String {
    let mut out = String::new();
    let mut block = |args: Vec<&str>| {
        let r = run(&args);
        assert_eq!(r.code, 0, "{args:?}");
        out.push_str(&format!("== reluplan {}\n", args.join(" ")));
        out.push_str(&r.text());
    };
    block(vec!["--help"]);
    for sub in SUBCOMMANDS {
        block(vec![sub, "--help"]);
    }
    out
}

#[test]
fn help_matches_golden() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    let got = help_text();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &got).unwrap();
    }
    assert_eq!(got, std::fs::read_to_string(golden).unwrap());
}

#[test]
fn count_reports_relus_only_on_stdout() {
    let r = run(&["count", "--h0", "32", "--w0", "32", "--channels", "5", "--depth", "10"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stderr.is_empty());
    let v: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(v["relus"], 51200);
}

#[test]
fn count_csv_format() {
    let r = run(&["count", "--channels", "5", "--depth", "10", "--format", "csv"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let text = r.text();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    assert!(rdr.headers().unwrap().iter().any(|h| h == "relus"));
    assert!(rdr.records().count() > 0);
}

#[test]
fn plan_lists_pairs_within_tolerance() {
    let r = run(&[
        "plan", "--budget", "50000", "--tol", "0.05", "--c-min", "5", "--c-max", "10", "--d-min", "5", "--d-max", "10",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let text = r.text();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (c, d) = (col("C"), col("D"));
    let mut pairs: Vec<(u64, u64)> = rdr
        .records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[c].parse().unwrap(), rec[d].parse().unwrap())
        })
        .collect();
    pairs.sort();
    // 32*32*c per cell, depth cells, within 5% of 50000
    let mut want: Vec<(u64, u64)> = (5..=10u64)
        .flat_map(|c| (5..=10u64).map(move |d| (c, d)))
        .filter(|&(c, d)| ((1024 * c * d) as f64 - 50000.0).abs() <= 2500.0)
        .collect();
    want.sort();
    assert_eq!(pairs, want);
    assert_eq!(pairs.len(), 5);
}

#[test]
fn every_subcommand_is_deterministic() {
    let work = tempfile::tempdir().unwrap();
    write_inputs(work.path());
    for (name, args) in every_subcommand(work.path()) {
        if let Some(diff) = determinism_diff(work.path(), name, &args, "7") {
            panic!("{name}: {diff}");
        }
    }
}

#[test]
fn every_subcommand_succeeds_on_the_sample_inputs() {
    let work = tempfile::tempdir().unwrap();
    write_inputs(work.path());
    let names: Vec<&str> = every_subcommand(work.path()).iter().map(|(n, _)| *n).collect();
    assert_eq!(names, SUBCOMMANDS);
    for (name, args) in every_subcommand(work.path()) {
        let r = run(&args);
        assert_eq!(r.code, 0, "{name}: {}", r.stderr);
        assert!(r.stderr.is_empty(), "{name}: {}", r.stderr);
        assert!(!r.stdout.is_empty(), "{name}");
    }
}

#[test]
fn simulate_transports_agree() {
    let work = tempfile::tempdir().unwrap();
    write_inputs(work.path());
    let base = ["simulate", "--seed", "7", "--model"];
    let model = work.path().join("model.json");
    let input = work.path().join("in.csv");
    let dirs: Vec<_> = ["inproc", "tcp"]
        .iter()
        .map(|t| {
            let out = work.path().join(t);
            let mut args: Vec<String> = base.iter().map(|s| s.to_string()).collect();
            args.extend([model.display().to_string(), "--input".into(), input.display().to_string()]);
            args.extend(["--transport".into(), t.to_string(), "--output-dir".into(), out.display().to_string()]);
            let r = run(&args);
            assert_eq!(r.code, 0, "{}", r.stderr);
            snapshot(&out)
        })
        .collect();
    assert_eq!(dirs[0], dirs[1]);
    assert!(dirs[0].keys().any(|k| k.to_string_lossy() == "transcript_0.bin"));
}

#[test]
fn simulate_seed_changes_transcripts_not_outputs() {
    let work = tempfile::tempdir().unwrap();
    write_inputs(work.path());
    let (_, args) = every_subcommand(work.path()).into_iter().find(|(n, _)| *n == "simulate").unwrap();
    let outs: Vec<_> = ["1", "2"]
        .iter()
        .map(|seed| {
            let out = work.path().join(format!("s{seed}"));
            let mut a = args.clone();
            a.extend(["--seed".into(), seed.to_string(), "--output-dir".into(), out.display().to_string()]);
            let r = run(&a);
            assert_eq!(r.code, 0, "{}", r.stderr);
            (r.stdout, snapshot(&out))
        })
        .collect();
    let key = Path::new("transcript_0.bin");
    assert_ne!(outs[0].1[key], outs[1].1[key]);
    let outputs = |bytes: &[u8]| serde_json::from_slice::<serde_json::Value>(bytes).unwrap()["outputs"].clone();
    assert_eq!(outputs(&outs[0].0), outputs(&outs[1].0));
}

#[test]
fn seed_env_matches_flag() {
    let args = ["place-search", "--epochs", "3", "--evaluator", "uniform"];
    let env = run_env(&args, Some("99"));
    let mut flagged = args.to_vec();
    flagged.extend(["--seed", "99"]);
    let flag = run(&flagged);
    assert_eq!(env.code, 0, "{}", env.stderr);
    assert_eq!(env.stdout, flag.stdout);
    // the flag wins over the environment
    let both = run_env(&flagged, Some("5"));
    assert_eq!(both.stdout, flag.stdout);
    assert_ne!(run_env(&args, Some("5")).stdout, flag.stdout);
}

#[test]
fn usage_errors_exit_two_with_a_json_record() {
    for args in [
        vec!["count", "--channels", "abc"],
        vec!["frobnicate"],
        vec!["plan", "--budget", "100", "--workers", "0"],
        vec!["dot", "--genotype", "/definitely/not/here.json"],
        vec!["discretize"],
    ] {
        let r = run(&args);
        assert_eq!(r.code, 2, "{args:?}: {}", r.stderr);
        assert!(r.stdout.is_empty(), "{args:?}");
        let rec = r.error();
        assert_eq!(rec.as_object().unwrap().len(), 3, "{rec}");
        assert!(rec["code"].is_string() && rec["message"].is_string() && rec["context"].is_object(), "{rec}");
    }
}

#[test]
fn domain_errors_exit_one() {
    let work = tempfile::tempdir().unwrap();
    let bad = work.path().join("bad.json");
    std::fs::write(&bad, r#"{"per_relu_us": -1.0, "base_ms": 1.0}"#).unwrap();
    let r = run(&["latency-predict", "--model", bad.to_str().unwrap(), "--relus", "10"]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    let rec = r.error();
    assert_eq!(rec["context"]["subcommand"], "latency-predict");

    let r = run(&["count", "--channels", "5", "--depth", "10", "--placement", "3,3"]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert!(r.stdout.is_empty());
}

#[test]
fn validate_reports_invalid_genotype_and_exits_one() {
    let work = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("reference_sphynx.json")).unwrap();
    let mut g: serde_json::Value = serde_json::from_str(&text).unwrap();
    // drop one edge from the normal cell so a node loses an input
    g["normal"].as_array_mut().expect("normal edge list").pop();
    let bad = work.path().join("bad.json");
    std::fs::write(&bad, g.to_string()).unwrap();
    let r = run(&["validate", "--genotype", bad.to_str().unwrap()]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    let report: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(report["ok"], false, "{report}");
    assert_eq!(report["violations"][0]["rule"], "in-degree");
    assert!(!r.stderr.is_empty());

    let ok = run(&["validate", "--genotype", &fixture("reference_sphynx.json")]);
    assert_eq!(ok.code, 0, "{}", ok.stderr);
}

#[test]
fn config_sections_merge_under_flags() {
    let work = tempfile::tempdir().unwrap();
    let cfg = work.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"count": {"channels": 5, "depth": 10, "h0": 32, "w0": 32}}"#).unwrap();
    let c = cfg.to_str().unwrap();
    let from_file = run(&["--config", c, "count"]);
    assert_eq!(from_file.code, 0, "{}", from_file.stderr);
    let v: serde_json::Value = serde_json::from_slice(&from_file.stdout).unwrap();
    assert_eq!(v["relus"], 51200);

    let overridden = run(&["--config", c, "count", "--channels", "10"]);
    let v: serde_json::Value = serde_json::from_slice(&overridden.stdout).unwrap();
    assert_eq!(v["relus"], 102400);

    std::fs::write(&cfg, r#"{"count": {"chanels": 5}}"#).unwrap();
    let r = run(&["--config", c, "count"]);
    assert_eq!(r.code, 2);
    assert_eq!(r.error()["context"]["key"], "chanels");

    std::fs::write(&cfg, r#"{"counts": {}}"#).unwrap();
    assert_eq!(run(&["--config", c, "count"]).code, 2);
}

#[test]
fn workers_do_not_change_results() {
    let args = ["place-grid", "--epochs", "3", "--seed", "4"];
    let one = run(&[&args[..], &["--workers", "1"]].concat());
    let four = run(&[&args[..], &["--workers", "4"]].concat());
    assert_eq!(one.code, 0, "{}", one.stderr);
    assert_eq!(one.stdout, four.stdout);
}
