//! Helpers for driving the `reluplan` binary from tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reluplan::cellgraph::OpKind;
use reluplan::relaxation::RelaxationState;

pub struct Run {
    pub code: i32,
    pub stdout: Vec<u8>,
    pub stderr: String,
}

impl Run {
    pub fn text(&self) -> String {
        String::from_utf8(self.stdout.clone()).expect("stdout is utf-8")
    }

    /// The single JSON error record on stderr.
    pub fn error(&self) -> serde_json::Value {
        let line = self.stderr.lines().last().expect("an error record");
        serde_json::from_str(line).expect("stderr carries a JSON record")
    }
}

pub fn run<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    run_env(args, None)
}

pub fn run_env<S: AsRef<std::ffi::OsStr>>(args: &[S], seed_env: Option<&str>) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reluplan"));
    cmd.args(args).env_remove("SPHYNX_SEED");
    if let Some(s) = seed_env {
        cmd.env("SPHYNX_SEED", s);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().expect("exited normally"),
        stdout: out.stdout,
        stderr: String::from_utf8(out.stderr).expect("stderr is utf-8"),
    }
}

pub fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name).display().to_string()
}

/// Writes the model, inputs, logits and latency model the subcommands read.
pub fn write_inputs(dir: &Path) {
    std::fs::write(
        dir.join("model.json"),
        r#"{"layers": [
  {"weights": [[0.5, -0.25, 0.125], [1.0, 0.75, -0.5], [-0.5, 0.5, 0.25], [0.25, 0.25, 0.25]], "bias": [0.1, 0.0, -0.2, 0.05]},
  {"weights": [[1.0, -1.0, 0.5, 0.25], [0.5, 0.5, -0.75, 1.0]], "bias": [0.25, -0.125]}
]}"#,
    )
    .unwrap();
    std::fs::write(dir.join("in.csv"), "0.5,1.0,-0.25\n-1.0,2.0,0.75\n0,0,0\n").unwrap();
    let theta = RelaxationState::random(6, OpKind::SPHYNX.to_vec(), 2.0, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    std::fs::write(dir.join("theta.json"), theta.to_json()).unwrap();
    std::fs::write(dir.join("latency.json"), r#"{"per_relu_us": 20.0, "base_ms": 300.0}"#).unwrap();
}

/// One invocation per subcommand, reading inputs from `dir`.
pub fn every_subcommand(dir: &Path) -> Vec<(&'static str, Vec<String>)> {
    let p = |name: &str| dir.join(name).display().to_string();
    let tiny = fixture("tiny_imagenet_sphynx.csv");
    let cifar = fixture("cifar100_methods.csv");
    let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        ("validate", v(&["validate", "--genotype", &fixture("darts_v2.json")])),
        ("count", v(&["count", "--h0", "32", "--w0", "32", "--channels", "5", "--depth", "10"])),
        (
            "plan",
            v(&[
                "plan", "--budget", "50000", "--tol", "0.05", "--c-min", "5", "--c-max", "10", "--d-min", "5",
                "--d-max", "10",
            ]),
        ),
        ("skeleton", v(&["skeleton", "--channels", "20", "--depth", "8", "--stem", "imagenet3"])),
        ("place-search", v(&["place-search", "--epochs", "4", "--branches", "5", "--best", "2"])),
        ("place-grid", v(&["place-grid", "--epochs", "3", "--evaluator", "surrogate", "--depth", "4"])),
        ("discretize", v(&["discretize", "--theta", &p("theta.json")])),
        ("simulate", v(&["simulate", "--model", &p("model.json"), "--input", &p("in.csv")])),
        ("latency-fit", v(&["latency-fit", "--records", &tiny, "--labels", "sphynx-102.4k,sphynx-204.8k"])),
        ("latency-predict", v(&["latency-predict", "--model", &p("latency.json"), "--records", &tiny])),
        ("pareto", v(&["pareto", "--records", &cifar])),
        ("dot", v(&["dot", "--genotype", &fixture("reference_sphynx.json")])),
    ]
}

/// Every file under `dir` with its bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Runs an invocation twice with the same seed into fresh output
/// directories; returns a description of the first difference, if any.
pub fn determinism_diff(work: &Path, name: &str, args: &[String], seed: &str) -> Option<String> {
    let runs: Vec<(Run, BTreeMap<PathBuf, Vec<u8>>)> = (0..2)
        .map(|i| {
            let out = work.join(format!("{name}-{i}"));
            let mut full = args.to_vec();
            full.extend(["--seed".to_string(), seed.to_string(), "--output-dir".into(), out.display().to_string()]);
            let r = run(&full);
            let files = if out.exists() { snapshot(&out) } else { BTreeMap::new() };
            (r, files)
        })
        .collect();
    let (a, fa) = &runs[0];
    let (b, fb) = &runs[1];
    if a.code != b.code {
        return Some(format!("exit codes {} vs {}", a.code, b.code));
    }
    if a.stdout != b.stdout {
        return Some("stdout differs".into());
    }
    if a.stderr != b.stderr {
        return Some("stderr differs".into());
    }
    if fa.is_empty() {
        return Some("no artifacts written".into());
    }
    if fa != fb {
        let names: Vec<_> = fa.keys().filter(|k| fa.get(*k) != fb.get(*k)).collect();
        return Some(format!("artifacts differ: {names:?}"));
    }
    None
}
