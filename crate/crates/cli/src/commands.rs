use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reluplan::accounting::{self, Balancing, BudgetQuery, ChainNetwork, LegacyOptions, NetworkPlan, Stem};
use reluplan::cellgraph::{self, Genotype, OpKind, SpaceTag};
use reluplan::gradcore::TauSchedule;
use reluplan::latency::{self, LatencyModel, RunRecord};
use reluplan::pisim::{self, Model, Transcript};
use reluplan::placement::{self, PlantedRegression, SearchConfig, SurrogateSkeleton};
use reluplan::relaxation::{self, RelaxationState};
use reluplan::{skeleton, Exec};
use serde_json::json;

use crate::args::*;
use crate::config::ConfigFile;
use crate::error::{CliError, CliResult};

/// What a subcommand produced: the stdout payload and named artifact files.
#[derive(Debug, Default)]
pub struct Output {
    pub stdout: String,
    pub artifacts: Vec<(String, Vec<u8>)>,
    /// Set when the payload is itself the evidence of a domain failure.
    pub failure: Option<CliError>,
}

impl Output {
    fn new(stdout: String) -> Self {
        Self { stdout, ..Self::default() }
    }

    fn file(mut self, name: &str, content: impl Into<Vec<u8>>) -> Self {
        self.artifacts.push((name.to_string(), content.into()));
        self
    }
}

pub struct Ctx {
    pub seed: u64,
    pub config: ConfigFile,
}

fn required<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::usage(format!("missing required --{flag}")).with("flag", flag))
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::usage(format!("input file not found: {}", path.display()))
            .with("path", path.display().to_string()),
        _ => CliError::Domain(e.into()),
    })
}

fn load_genotype(path: Option<&PathBuf>) -> CliResult<Genotype> {
    match path {
        None => Ok(cellgraph::reference_sphynx_genotype()),
        Some(p) => Ok(Genotype::from_json(&read_text(p)?)?),
    }
}

fn load_records(path: &Path) -> CliResult<Vec<RunRecord>> {
    Ok(latency::read_records(read_text(path)?.as_bytes())?)
}

fn pretty(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("payload serializes");
    s.push('\n');
    s
}

fn with_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn network_plan(a: &NetworkArgs) -> CliResult<NetworkPlan> {
    let channels = required(a.channels, "channels")?;
    let depth = required(a.depth, "depth")?;
    let placement = match a.placement.as_deref() {
        None => NetworkPlan::default_placement(depth),
        Some(&[x, y]) => (x, y),
        Some(other) => return Err(CliError::usage(format!("--placement takes two indices, got {}", other.len()))),
    };
    let stem = match a.stem.as_deref() {
        None | Some("direct") => Stem::Direct,
        Some("imagenet3") => Stem::Imagenet3,
        Some(s) => return Err(CliError::usage(format!("unknown stem '{s}'"))),
    };
    let balancing = match a.balancing.as_deref() {
        None | Some("relu") => Balancing::Relu,
        Some("flop") => Balancing::Flop,
        Some(s) => return Err(CliError::usage(format!("unknown balancing '{s}'"))),
    };
    let (h0, w0) = match stem {
        Stem::Imagenet3 => {
            (a.h0.unwrap_or(accounting::IMAGENET_CELL_RES), a.w0.unwrap_or(accounting::IMAGENET_CELL_RES))
        }
        Stem::Direct => (a.h0.unwrap_or(32), a.w0.unwrap_or(32)),
    };
    Ok(NetworkPlan::new(h0, w0, channels, depth, placement)
        .with_stem(stem)
        .with_balancing(balancing)
        .with_genotype(load_genotype(a.genotype.as_ref())?)
        .with_classes(a.classes.unwrap_or(100)))
}

pub fn run(ctx: &Ctx, command: &Command) -> CliResult<Output> {
    let section = command.name();
    let cfg = &ctx.config;
    match command {
        Command::Validate(a) => validate(&cfg.resolve(section, a)?),
        Command::Count(a) => count(&cfg.resolve(section, a)?),
        Command::Plan(a) => plan(&cfg.resolve(section, a)?),
        Command::Skeleton(a) => skeleton_cmd(&cfg.resolve(section, a)?),
        Command::PlaceSearch(a) => place(ctx, &cfg.resolve(section, a)?, false),
        Command::PlaceGrid(a) => place(ctx, &cfg.resolve(section, a)?, true),
        Command::Discretize(a) => discretize(ctx, &cfg.resolve(section, a)?),
        Command::Simulate(a) => simulate(ctx, &cfg.resolve(section, a)?),
        Command::LatencyFit(a) => latency_fit(&cfg.resolve(section, a)?),
        Command::LatencyPredict(a) => latency_predict(&cfg.resolve(section, a)?),
        Command::Pareto(a) => pareto(&cfg.resolve(section, a)?),
        Command::Dot(a) => dot(&cfg.resolve(section, a)?),
    }
}

fn validate(a: &GenotypeArgs) -> CliResult<Output> {
    let g = load_genotype(a.genotype.as_ref())?;
    let report = cellgraph::validate(&g);
    let body = pretty(&report);
    let mut out = Output::new(body.clone()).file("validation.json", body);
    if !report.ok {
        let detail: Vec<String> = report.violations.iter().map(|v| format!("{}: {}", v.cell, v.message)).collect();
        out.failure = Some(reluplan::Error::InvalidGenotype(detail.join("; ")).into());
    }
    Ok(out)
}

fn count(a: &CountArgs) -> CliResult<Output> {
    let ledger = if let Some(chain) = &a.chain {
        accounting::count_chain(&ChainNetwork::from_json(&read_text(chain)?)?)?
    } else {
        let plan = network_plan(&a.network)?;
        if plan.genotype.space == SpaceTag::Legacy {
            let opts = LegacyOptions { share_relus: a.share_relus, double_separable: a.double_separable };
            accounting::count_legacy(&plan, &plan.genotype, opts)?
        } else {
            accounting::count_flops_params(&plan)?
        }
    };
    let json = with_newline(ledger.to_json());
    let csv = ledger.to_csv();
    let stdout = match a.format.as_deref() {
        None | Some("json") => json.clone(),
        Some("csv") => csv.clone(),
        Some(f) => return Err(CliError::usage(format!("unknown format '{f}'"))),
    };
    Ok(Output::new(stdout).file("ledger.json", json).file("ledger.csv", csv))
}

fn plan(a: &PlanArgs) -> CliResult<Output> {
    let q = BudgetQuery {
        budget: required(a.budget, "budget")?,
        h0: a.h0.unwrap_or(32),
        w0: a.w0.unwrap_or(32),
        channels: a.c_min.unwrap_or(1)..=a.c_max.unwrap_or(64),
        depths: a.d_min.unwrap_or(1)..=a.d_max.unwrap_or(30),
        tol_fraction: a.tol.unwrap_or(0.05),
    };
    let csv = accounting::budget_csv(&accounting::plan_budget(&q, Exec::Parallel)?);
    Ok(Output::new(csv.clone()).file("plan.csv", csv))
}

fn skeleton_cmd(a: &NetworkArgs) -> CliResult<Output> {
    let s = skeleton::build_skeleton(&network_plan(a)?)?;
    let json = with_newline(s.to_json());
    Ok(Output::new(json.clone()).file("skeleton.json", json))
}

fn search_config(a: &SearchArgs, seed: u64) -> SearchConfig {
    let d = SearchConfig::desk();
    SearchConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        batches_per_epoch: a.batches_per_epoch.unwrap_or(d.batches_per_epoch),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        tau: TauSchedule { start: a.tau_start.unwrap_or(d.tau.start), end: a.tau_end.unwrap_or(d.tau.end) },
        weights: reluplan::gradcore::SgdConfig { lr: a.weight_lr.unwrap_or(d.weights.lr), ..d.weights },
        beta: reluplan::gradcore::AdamConfig { lr: a.beta_lr.unwrap_or(d.beta.lr), ..d.beta },
        eval_batches: a.eval_batches.unwrap_or(d.eval_batches),
        seed,
    }
}

fn place(ctx: &Ctx, a: &SearchArgs, grid: bool) -> CliResult<Output> {
    let cfg = search_config(a, ctx.seed);
    let k = a.branches.unwrap_or(6);
    match a.evaluator.as_deref() {
        None | Some("planted") => {
            let best = a.best.unwrap_or(0);
            if best >= k {
                return Err(CliError::usage(format!("--best {best} is not below --branches {k}")));
            }
            place_with(&PlantedRegression::planted(k, best, ctx.seed), &cfg, grid)
        }
        Some("uniform") => place_with(&PlantedRegression::uniform(k, ctx.seed), &cfg, grid),
        Some("surrogate") => {
            let ev = SurrogateSkeleton::new(a.depth.unwrap_or(5), a.width.unwrap_or(8), ctx.seed)?;
            place_with(&ev, &cfg, grid)
        }
        Some(e) => Err(CliError::usage(format!("unknown evaluator '{e}'"))),
    }
}

fn place_with<E: placement::Evaluator>(ev: &E, cfg: &SearchConfig, grid: bool) -> CliResult<Output> {
    if grid {
        let r = placement::grid_search(ev, cfg, Exec::Parallel)?;
        let csv = r.to_csv()?;
        Ok(Output::new(csv.clone()).file("grid.csv", csv).file("grid.json", pretty(&r)))
    } else {
        let r = placement::run_search(ev, cfg, Exec::Parallel)?;
        let json = with_newline(r.to_json());
        Ok(Output::new(json.clone()).file("search.json", json).file("trajectory.csv", r.trajectory_csv()?))
    }
}

fn discretize(ctx: &Ctx, a: &DiscretizeArgs) -> CliResult<Output> {
    let state = match (&a.theta, a.nodes) {
        (Some(p), None) => RelaxationState::from_json(&read_text(p)?)?,
        (None, Some(n)) => {
            let ops: Vec<OpKind> = match a.ops.as_deref() {
                None | Some("sphynx") => OpKind::SPHYNX.to_vec(),
                Some("legacy") => {
                    use OpKind::*;
                    vec![Zero, MaxPool3x3, AvgPool3x3, Identity, SepConv3x3, SepConv5x5, SepDilConv3x3, SepDilConv5x5]
                }
                Some(o) => return Err(CliError::usage(format!("unknown op set '{o}'"))),
            };
            RelaxationState::random(n, ops, 3.0, &mut ChaCha8Rng::seed_from_u64(ctx.seed))?
        }
        (Some(_), Some(_)) => return Err(CliError::usage("--theta and --nodes are exclusive")),
        (None, None) => return Err(CliError::usage("one of --theta or --nodes is required")),
    };
    let g = relaxation::discretize(&state)?;
    let json = with_newline(g.to_json());
    Ok(Output::new(json.clone())
        .file("genotype.json", json)
        .file("genotype.dot", cellgraph::to_dot(&g)?)
        .file("theta.json", with_newline(state.to_json())))
}

fn read_inputs(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(reluplan::Error::from)?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::usage(format!("input row {i}: {e}")).with("row", i))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::usage("input file has no rows"));
    }
    Ok(rows)
}

fn simulate(ctx: &Ctx, a: &SimulateArgs) -> CliResult<Output> {
    let model = Model::from_json(&read_text(&required(a.model.clone(), "model")?)?)?;
    let inputs = read_inputs(&required(a.input.clone(), "input")?)?;
    let tcp = match a.transport.as_deref() {
        None | Some("inproc") => false,
        Some("tcp") => true,
        Some(t) => return Err(CliError::usage(format!("unknown transport '{t}'"))),
    };
    let enc = model.encode()?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut out = Output::default();
    let mut rows = Vec::new();
    let mut first_input = None;
    for (i, x) in inputs.iter().enumerate() {
        let input = enc.encode_input(x)?;
        let material = pisim::offline_phase(&enc, &mut ChaCha8Rng::seed_from_u64(rng.random()));
        let r = if tcp {
            pisim::online_inference_tcp(&enc, &input, &material)?
        } else {
            pisim::online_inference(&enc, &input, &material)?
        };
        let wire = r.transcript.to_wire();
        rows.push(json!({
            "row": i,
            "decoded": r.decoded,
            "raw": r.raw,
            "messages": r.transcript.entries.len(),
            "wire_bytes": wire.len(),
        }));
        out = out
            .file(&format!("transcript_{i}.bin"), wire)
            .file(&format!("transcript_{i}.json"), with_newline(r.transcript.sidecar_json()));
        first_input.get_or_insert(input);
    }
    let mut payload = json!({ "modulus": model.modulus, "scale_bits": model.scale_bits, "outputs": rows });
    if let Some(trials) = a.audit_trials {
        let input = first_input.expect("at least one row");
        let transcripts: Vec<Transcript> = pisim::simulate_trials(&enc, &input, trials, ctx.seed, Exec::Parallel)?;
        let report = pisim::transcript_audit(&transcripts, model.modulus, a.alpha.unwrap_or(0.01))?;
        out = out.file("audit.json", pretty(&report));
        payload["audit"] = json!({ "passed": report.passed, "trials": report.trials, "slots": report.slots.len(), "slot_alpha": report.slot_alpha });
    }
    let body = pretty(&payload);
    out.stdout = body.clone();
    Ok(out.file("simulate.json", body))
}

fn latency_fit(a: &LatencyFitArgs) -> CliResult<Output> {
    let records = load_records(&required(a.records.clone(), "records")?)?;
    let chosen: Vec<RunRecord> = match &a.labels {
        None => records,
        Some(labels) => labels
            .iter()
            .map(|l| {
                records
                    .iter()
                    .find(|r| &r.label == l)
                    .cloned()
                    .ok_or_else(|| CliError::usage(format!("no record labelled '{l}'")))
            })
            .collect::<CliResult<_>>()?,
    };
    let fit = latency::calibrate_records(&chosen)?;
    let json = with_newline(fit.model.to_json());
    Ok(Output::new(json.clone()).file("latency_model.json", json).file("fit.json", pretty(&fit)))
}

fn latency_predict(a: &LatencyPredictArgs) -> CliResult<Output> {
    let model = LatencyModel::from_json(&read_text(&required(a.model.clone(), "model")?)?)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Domain(e.into());
    match (&a.relus, &a.records) {
        (Some(relus), None) => {
            w.write_record(["relus", "predicted_ms"]).map_err(io)?;
            for &r in relus {
                w.write_record([r.to_string(), model.predict(r).to_string()]).map_err(io)?;
            }
        }
        (None, Some(path)) => {
            w.write_record(["label", "relus", "latency_ms", "predicted_ms", "rel_err"]).map_err(io)?;
            for r in load_records(path)? {
                let p = model.predict(r.relus);
                let err = (p - r.latency_ms).abs() / r.latency_ms;
                w.write_record([
                    r.label,
                    r.relus.to_string(),
                    r.latency_ms.to_string(),
                    p.to_string(),
                    err.to_string(),
                ])
                .map_err(io)?;
            }
        }
        _ => return Err(CliError::usage("exactly one of --relus or --records is required")),
    }
    let csv =
        String::from_utf8(w.into_inner().map_err(|e| CliError::Domain(e.into_error().into()))?).expect("csv is utf-8");
    Ok(Output::new(csv.clone()).file("predictions.csv", csv))
}

fn pareto(a: &RecordsArgs) -> CliResult<Output> {
    let records = load_records(&required(a.records.clone(), "records")?)?;
    let csv = latency::records_csv(&latency::pareto_frontier(&records)?)?;
    Ok(Output::new(csv.clone()).file("pareto.csv", csv))
}

fn dot(a: &GenotypeArgs) -> CliResult<Output> {
    let text = cellgraph::to_dot(&load_genotype(a.genotype.as_ref())?)?;
    Ok(Output::new(text.clone()).file("genotype.dot", text))
}
