//! `accordion`: data generation, training, profiling, serving, fetching,
//! session simulation and curve export.

use std::collections::BTreeMap;
use std::fs;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use accordion::arch::{AccordionModel, DepthConfig, Scheme};
use accordion::config::{ExperimentConfig, PolicyKindSpec, PolicySpec};
use accordion::data::Dataset;
use accordion::policy::PolicyName;
use accordion::profile::{build_table, ProfileTable};
use accordion::protocol::{self, code, Client, FramedStream, Requirements, Scenario, UpgradeTarget, ANY_MODEL};
use accordion::train::train_new;
use accordion::wire;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "accordion", version, about = "Depth-elastic residual networks with incremental model transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the spiral dataset splits.
    GenData(GenData),
    /// Train a model and write `model.acdn` and `train_report.csv`.
    Train(Train),
    /// Evaluate every depth configuration of a model.
    Profile(Profile),
    /// Serve a model over TCP.
    Serve(Serve),
    /// Fetch a model from a server.
    Fetch(Fetch),
    /// Simulate a session over a modelled link.
    Simulate(Simulate),
    /// Aggregate profile tables into mean and standard deviation per configuration.
    ExportCurves(ExportCurves),
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (TOML); desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    exp: ExperimentArgs,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// baseline, coml-05, coml-03, blockcoml-05 or blockcoml-03.
    #[arg(long)]
    policy: Option<PolicyName>,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    p_full: Option<f64>,
}

#[derive(Args)]
struct Profile {
    #[arg(long)]
    model: PathBuf,
    /// Dataset file written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// Restrict to one scheme.
    #[arg(long)]
    scheme: Option<Scheme>,
}

#[derive(Args)]
struct Serve {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    table: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
    /// Exit after this many connections.
    #[arg(long)]
    max_connections: Option<usize>,
}

#[derive(Args)]
struct Fetch {
    #[arg(long)]
    connect: String,
    #[arg(long, default_value = "coml")]
    scheme: Scheme,
    #[arg(long)]
    deadline_ms: u32,
    #[arg(long)]
    throughput_bps: u64,
    #[arg(long)]
    max_error: Option<f64>,
    /// Upgrade to this many units after the first transfer.
    #[arg(long)]
    upgrade_n: Option<u32>,
    /// Output `.acdn` file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Simulate {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    table: PathBuf,
    /// Output session log CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportCurves {
    /// Profile tables, each `POLICY=PATH` or a bare path labelled with `--policy`.
    #[arg(required = true)]
    tables: Vec<String>,
    #[arg(long, default_value = "unlabelled")]
    policy: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use accordion::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Config(_) | E::Input(_) | E::Dimension { .. } => 2,
                E::Infeasible { .. } | E::UnreachableAccuracy { .. } => 3,
                E::Remote { code: c, .. } if *c == code::INFEASIBLE || *c == code::UNREACHABLE => 3,
                E::Remote { code: c, .. } if *c == code::BAD_REQUEST => 2,
                E::Integrity { .. } | E::Version(_) | E::Decode(_) | E::Protocol(_) | E::Remote { .. } => 4,
                E::Io(_) => 1,
            };
        }
        if cause.is::<toml::de::Error>() {
            return 2;
        }
    }
    1
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Profile(a) => profile(a),
        Command::Serve(a) => serve(a),
        Command::Fetch(a) => fetch(a),
        Command::Simulate(a) => simulate(a),
        Command::ExportCurves(a) => export_curves(a),
    }
}

fn load_experiment(exp: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &exp.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::desk(PolicyName::Coml05, 0),
    };
    if let Some(out) = &exp.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = load_experiment(&a.exp)?;
    if let Some(seed) = a.exp.seed {
        cfg.dataset.spiral.seed = seed;
    }
    let splits = cfg.dataset.spiral.generate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    for (name, d) in [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)] {
        let path = cfg.out_dir.join(format!("{name}.bin"));
        d.save(&path)?;
        println!("{}: {} samples, sha256 {}", path.display(), d.len(), d.digest());
    }
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg = load_experiment(&a.exp)?;
    if let Some(seed) = a.exp.seed {
        cfg.seed = seed;
    }
    if let Some(name) = a.policy {
        cfg.policy = PolicySpec::named(name);
    }
    if let Some(scheme) = a.scheme {
        cfg.policy.scheme = scheme;
    }
    if let Some(p) = a.p_full {
        cfg.policy.kind = PolicyKindSpec::FullElseUniform;
        cfg.policy.p_full = Some(p);
    }
    cfg.validate()?;
    let splits = cfg.dataset.spiral.generate()?;
    let train_cfg = cfg.train_config()?;
    let (model, report) = train_new(&cfg.arch, cfg.seed, &splits.train, Some(&splits.validation), &train_cfg)?;

    fs::create_dir_all(&cfg.out_dir)?;
    let full = DepthConfig::full(cfg.policy.scheme, &cfg.arch);
    fs::write(cfg.out_dir.join("model.acdn"), wire::to_file_bytes(&model, &full)?)?;
    fs::write(cfg.out_dir.join("train_report.csv"), report.to_csv())?;
    fs::write(cfg.out_dir.join("config.toml"), cfg.emit())?;
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "trained {} iterations in {:.1}s; final loss {:.4}, validation error {:.4}; params {}",
        report.iterations,
        report.wall_time.as_secs_f64(),
        last.loss,
        last.full_error.unwrap_or(f64::NAN),
        report.digest
    );
    Ok(())
}

fn load_full_model(path: &Path) -> Result<AccordionModel<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let partial = wire::from_file_bytes(&bytes)?;
    let total = partial.manifest().spec.total_units();
    match partial.achievable() {
        Some(c) if c.kept_units == total => Ok(partial.model().clone()),
        _ => bail!(accordion::Error::Input(format!("{} is a partial model", path.display()))),
    }
}

fn profile(a: Profile) -> Result<()> {
    let model = load_full_model(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let schemes: Vec<Scheme> = a.scheme.map_or(Scheme::ALL.to_vec(), |s| vec![s]);
    let table = build_table(&model, &schemes, &data)?;
    fs::write(&a.out, table.to_csv()?)?;
    println!("{}: {} configurations", a.out.display(), table.entries().len());
    Ok(())
}

fn load_endpoint(model: &Path, table: &Path) -> Result<protocol::Endpoint> {
    let model = load_full_model(model)?;
    let id = hex_id(&wire::model_id(&model));
    let text = fs::read_to_string(table).with_context(|| format!("reading {}", table.display()))?;
    let table = ProfileTable::from_csv(&text, id, "", 0)?;
    Ok(protocol::Endpoint::new(model, &table)?)
}

fn hex_id(id: &wire::ModelId) -> String {
    id.iter().map(|b| format!("{b:02x}")).collect()
}

fn serve(a: Serve) -> Result<()> {
    let endpoint = Arc::new(load_endpoint(&a.model, &a.table)?);
    let listener = TcpListener::bind(&a.listen)?;
    println!("serving model {} on {}", hex_id(&endpoint.model_id()), listener.local_addr()?);
    protocol::serve(listener, endpoint, a.max_connections)?;
    Ok(())
}

fn fetch(a: Fetch) -> Result<()> {
    let stream = TcpStream::connect(&a.connect).with_context(|| format!("connecting to {}", a.connect))?;
    let mut client = Client::new(FramedStream::new(stream));
    let req = Requirements {
        model_id: ANY_MODEL,
        scheme: a.scheme,
        deadline_ms: a.deadline_ms,
        throughput_bps: a.throughput_bps,
        max_error: a.max_error,
    };
    client.fetch(&req)?;
    let offer = client.offer().cloned().expect("offer follows a successful fetch");
    println!(
        "achievable n = {}, predicted error = {}, predicted transfer = {:.3} ms{}",
        offer.n,
        offer.predicted_error,
        offer.predicted_transfer_ms,
        if offer.accuracy_unmet { " (accuracy target unmet)" } else { "" }
    );
    if let Some(n) = a.upgrade_n {
        let n = client.upgrade(UpgradeTarget::Units(n))?;
        println!("upgraded to n = {n}");
    }
    let partial = client.into_partial().expect("fetched");
    fs::write(&a.out, partial.to_file_bytes())?;
    Ok(())
}

fn simulate(a: Simulate) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let scenario: Scenario = toml::from_str(&text)?;
    let endpoint = load_endpoint(&a.model, &a.table)?;
    let (log, _) = protocol::simulate_session(&endpoint, &scenario)?;
    fs::write(&a.out, log.to_csv())?;
    let total = endpoint.model().spec().total_units();
    if let Some(done) = log.last("transfer_done") {
        let n = done.achievable_n.unwrap_or(0);
        let full_bits = endpoint
            .entry(scenario.requirements.scheme, total)
            .map_or(0, |e| e.size_bits);
        println!(
            "initial transfer: n = {n} of {total}, {} of {full_bits} bits ({:.1}%), {:.6} s",
            done.bits,
            100.0 * done.bits as f64 / full_bits as f64,
            done.time.as_secs_f64()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CurveRow {
    scheme: Scheme,
    policy: String,
    n: usize,
    size_bits: u64,
    error_mean: f64,
    error_std: f64,
    runs: usize,
}

fn export_curves(a: ExportCurves) -> Result<()> {
    let mut groups: BTreeMap<(String, Scheme, usize), (u64, Vec<f64>)> = BTreeMap::new();
    for arg in &a.tables {
        let (policy, path) = match arg.split_once('=') {
            Some((p, path)) => (p.to_string(), path),
            None => (a.policy.clone(), arg.as_str()),
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        let table = ProfileTable::from_csv(&text, "", "", 0)?;
        for e in table.entries() {
            let slot = groups
                .entry((policy.clone(), e.scheme, e.kept_units))
                .or_insert((e.size_bits, Vec::new()));
            if slot.0 != e.size_bits {
                bail!(accordion::Error::Input(format!(
                    "{path}: {} n={} is {} bits, earlier runs say {}",
                    e.scheme, e.kept_units, e.size_bits, slot.0
                )));
            }
            slot.1.push(e.error_rate);
        }
    }
    let mut w = csv::Writer::from_path(&a.out)?;
    for ((policy, scheme, n), (size_bits, errors)) in groups {
        let (error_mean, error_std) = mean_std(&errors);
        w.serialize(CurveRow {
            scheme,
            policy,
            n,
            size_bits,
            error_mean,
            error_std,
            runs: errors.len(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation; the deviation of a single run is zero.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
