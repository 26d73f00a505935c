//! Experiment front-end: single runs, proposed-vs-random comparisons over
//! seed batches, and summary reports rendered from run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cflsim_core::artifacts::{export_dataset, write_run};
use cflsim_core::engine::{run_experiment, ExperimentTrace};
use cflsim_core::scheduler::Policy;
use cflsim_core::{rand_index, ExperimentConfig};

/// Output root fallback when `--out` is not given.
const OUT_ENV: &str = "CFLSIM_OUT";

#[derive(Parser)]
#[command(
    name = "cflsim",
    version,
    about = "Clustered federated learning over a modeled wireless edge, simulated"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifact directory.
    Simulate {
        /// Config file; omit to run the built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: $CFLSIM_OUT or ./runs, plus a run name).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the generated dataset as dataset.csv.
        #[arg(long)]
        export_dataset: bool,
    },
    /// Run both policies over a seed batch; write runs plus comparison.csv
    /// and curves.csv.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed batch: "1..5" (inclusive) or "1,2,7".
        #[arg(long, default_value = "1..5")]
        seeds: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize one or more existing run directories.
    Report {
        /// Run directories (each holding a manifest.json).
        #[arg(required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, seed, out, export_dataset } => {
            simulate(config.as_deref(), seed, out, export_dataset)
        }
        Command::Compare { config, seeds, out } => {
            compare(config.as_deref(), &seeds, out)
        }
        Command::Report { runs } => report(&runs),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            ExperimentConfig::from_toml_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn out_root(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| {
        std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
    })
}

fn run_one(cfg: &ExperimentConfig, policy: Policy, seed: u64) -> Result<ExperimentTrace> {
    let mut cfg = cfg.clone();
    cfg.scheduler.policy = policy;
    cfg.seed = seed;
    Ok(run_experiment(&cfg)?)
}

fn simulate(
    config: Option<&Path>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    dump_dataset: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let policy = cfg.scheduler.policy;
    let dir = out_root(out).join(format!("{policy}-seed{}", cfg.seed));
    let trace = run_experiment(&cfg)?;
    write_run(&dir, &trace, &cfg)?;
    if dump_dataset {
        // Re-derives the exact dataset the run trained on.
        let data = cflsim_core::dataset::apply_incongruence(
            cflsim_core::dataset::generate(&cfg.dataset, cfg.seed)?,
            cfg.dataset.incongruence,
        )?;
        export_dataset(&dir.join("dataset.csv"), &data)?;
    }

    println!("run written to {}", dir.display());
    println!(
        "policy={policy} seed={} stop={} rounds={} clock={:.3}s clusters={}",
        cfg.seed,
        trace.stop,
        trace.rounds_executed,
        trace.final_clock,
        trace.final_partition.len(),
    );
    match trace.first_split() {
        Some((round, clock)) => println!("first split: round {round} at {clock:.3}s"),
        None => println!("first split: none"),
    }
    println!(
        "rand index vs ground truth: {:.3}",
        rand_index(&trace.partition_labels(), &trace.ground_truth)
    );
    println!(
        "mean accuracy: feel {:.3}, best-model {:.3}",
        trace.mean_feel_accuracy(),
        trace.mean_max_accuracy()
    );
    Ok(())
}

/// "a..b" (inclusive) or comma-separated values.
fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let spec = spec.trim();
    if let Some((a, b)) = spec.split_once("..") {
        let lo: u64 = a.trim().parse().context("seed range start")?;
        let hi: u64 = b.trim().parse().context("seed range end")?;
        if lo > hi {
            bail!("seed range {spec} is empty");
        }
        return Ok((lo..=hi).collect());
    }
    let seeds: Vec<u64> = spec
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("seed {s:?}")))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

struct RunSummary {
    policy: Policy,
    seed: u64,
    trace: ExperimentTrace,
}

fn compare(config: Option<&Path>, seeds: &str, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let seeds = parse_seeds(seeds)?;
    let root = out_root(out);
    fs::create_dir_all(&root)?;

    let mut runs: Vec<RunSummary> = Vec::new();
    for policy in [Policy::Proposed, Policy::Random] {
        for &seed in &seeds {
            let trace = run_one(&cfg, policy, seed)?;
            let mut run_cfg = cfg.clone();
            run_cfg.scheduler.policy = policy;
            run_cfg.seed = seed;
            write_run(&root.join(format!("{policy}-seed{seed}")), &trace, &run_cfg)?;
            runs.push(RunSummary { policy, seed, trace });
        }
    }

    fs::write(root.join("comparison.csv"), comparison_csv(&runs))?;
    fs::write(root.join("curves.csv"), curves_csv(&runs))?;
    print_comparison(&runs);
    println!("comparison written to {}", root.display());
    Ok(())
}

fn comparison_csv(runs: &[RunSummary]) -> String {
    let mut s = String::from(
        "policy,seed,stop_reason,rounds,final_clock,first_split_round,first_split_clock,\
         final_clusters,rand_index,mean_feel_accuracy,mean_max_accuracy\n",
    );
    for r in runs {
        let first = r.trace.first_split();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.policy,
            r.seed,
            r.trace.stop,
            r.trace.rounds_executed,
            r.trace.final_clock,
            first.map(|(x, _)| x.to_string()).unwrap_or_default(),
            first.map(|(_, x)| x.to_string()).unwrap_or_default(),
            r.trace.final_partition.len(),
            rand_index(&r.trace.partition_labels(), &r.trace.ground_truth),
            r.trace.mean_feel_accuracy(),
            r.trace.mean_max_accuracy(),
        );
    }
    s
}

/// Mean and the 95% half-interval (1.96 standard errors) across seeds.
fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

/// (clock, loss, clusters) samples keyed by (policy, round).
type CurveCells = BTreeMap<(String, u32), Vec<(f64, f64, f64)>>;

/// Per-policy, per-round curves averaged over the seeds that reached the
/// round: simulated clock, size-weighted train loss, and cluster count.
fn curves_csv(runs: &[RunSummary]) -> String {
    let mut cells: CurveCells = BTreeMap::new();
    for r in runs {
        for rec in &r.trace.rounds {
            let total: usize = rec.clusters.iter().map(|c| c.size).sum();
            let loss = rec
                .clusters
                .iter()
                .map(|c| c.train_loss * c.size as f64)
                .sum::<f64>()
                / total as f64;
            cells
                .entry((r.policy.to_string(), rec.round))
                .or_default()
                .push((rec.clock, loss, rec.num_clusters as f64));
        }
    }
    let mut s = String::from(
        "policy,round,seeds,clock_mean,clock_ci95,loss_mean,loss_ci95,\
         clusters_mean,clusters_ci95\n",
    );
    for ((policy, round), v) in &cells {
        let clocks: Vec<f64> = v.iter().map(|x| x.0).collect();
        let losses: Vec<f64> = v.iter().map(|x| x.1).collect();
        let counts: Vec<f64> = v.iter().map(|x| x.2).collect();
        let (cm, cc) = mean_ci(&clocks);
        let (lm, lc) = mean_ci(&losses);
        let (nm, nc) = mean_ci(&counts);
        let _ = writeln!(s, "{policy},{round},{},{cm},{cc},{lm},{lc},{nm},{nc}", v.len());
    }
    s
}

fn print_comparison(runs: &[RunSummary]) {
    println!("policy    seed  stop         rounds  clock[s]    split@round  split@clock  clusters  rand");
    for r in runs {
        let first = r.trace.first_split();
        println!(
            "{:<9} {:<5} {:<12} {:<7} {:<11.3} {:<12} {:<12} {:<9} {:.3}",
            r.policy.to_string(),
            r.seed,
            r.trace.stop.to_string(),
            r.trace.rounds_executed,
            r.trace.final_clock,
            first.map(|(x, _)| x.to_string()).unwrap_or_else(|| "-".into()),
            first.map(|(_, x)| format!("{x:.3}")).unwrap_or_else(|| "-".into()),
            r.trace.final_partition.len(),
            rand_index(&r.trace.partition_labels(), &r.trace.ground_truth),
        );
    }
    for policy in [Policy::Proposed, Policy::Random] {
        let splits: Vec<f64> = runs
            .iter()
            .filter(|r| r.policy == policy)
            .filter_map(|r| r.trace.first_split().map(|(round, _)| f64::from(round)))
            .collect();
        if !splits.is_empty() {
            let (m, ci) = mean_ci(&splits);
            println!(
                "{policy}: first split round {m:.1} +/- {ci:.1} over {} seed(s)",
                splits.len()
            );
        }
    }
}

/// Column values keyed by header name, one map per data row.
fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> =
        lines.next().with_context(|| format!("{} is empty", path.display()))?.split(',').collect();
    Ok(lines
        .map(|line| {
            header
                .iter()
                .zip(line.split(','))
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect()
        })
        .collect())
}

fn report(runs: &[PathBuf]) -> Result<()> {
    for dir in runs {
        let manifest_path = dir.join("manifest.json");
        let manifest: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(&manifest_path)
                .with_context(|| format!("reading {}", manifest_path.display()))?,
        )
        .with_context(|| format!("parsing {}", manifest_path.display()))?;

        println!("== {} ==", dir.display());
        if manifest["complete"] != serde_json::json!(true) {
            println!("warning: run is marked incomplete");
        }
        println!(
            "policy={} seed={} stop={} rounds={} clock={}s clusters={}",
            manifest["policy"].as_str().unwrap_or("?"),
            manifest["seed"],
            manifest["stop_reason"].as_str().unwrap_or("?"),
            manifest["rounds_executed"],
            manifest["final_clock"],
            manifest["final_clusters"],
        );

        let acc = dir.join("accuracy.csv");
        if acc.exists() {
            print_accuracy_table(&read_csv(&acc)?);
        }
        println!();
    }
    Ok(())
}

/// Accuracy matrix in the shape models x clients with a closing Max Acc
/// row. An asterisk marks the client's own cluster model.
fn print_accuracy_table(rows: &[BTreeMap<String, String>]) {
    let mut clients: Vec<u32> = Vec::new();
    let mut models: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(String, u32), (String, bool)> = BTreeMap::new();
    for row in rows {
        let (Some(c), Some(m), Some(a)) =
            (row.get("client_id"), row.get("model"), row.get("accuracy"))
        else {
            continue;
        };
        let Ok(client) = c.parse::<u32>() else { continue };
        let member = row.get("is_member").is_some_and(|v| v == "true");
        if !clients.contains(&client) {
            clients.push(client);
        }
        if !models.iter().any(|x| x == m) {
            models.push(m.clone());
        }
        acc.insert((m.clone(), client), (a.clone(), member));
    }
    clients.sort_unstable();
    // The per-client best row always renders last.
    models.sort_by_key(|m| m == "max");

    print!("{:<12}", "model");
    for c in &clients {
        print!(" {:>8}", format!("c{c}"));
    }
    println!();
    for m in &models {
        let label = if m == "max" { "Max Acc" } else { m.as_str() };
        print!("{label:<12}");
        for c in &clients {
            match acc.get(&(m.clone(), *c)) {
                Some((a, member)) => {
                    let v: f64 = a.parse().unwrap_or(f64::NAN);
                    let mark = if *member { "*" } else { "" };
                    print!(" {:>8}", format!("{v:.3}{mark}"));
                }
                None => print!(" {:>8}", "-"),
            }
        }
        println!();
    }
}
