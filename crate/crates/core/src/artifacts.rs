//! Run-directory writer: CSV traces, a JSON manifest, the rendered config
//! and binary model checkpoints.
//!
//! Output is a pure function of the trace, so two runs with the same config
//! and seed produce byte-identical directories. The manifest lands first
//! with `"complete": false` and is rewritten last, which lets readers
//! detect interrupted runs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::dataset::FederatedDataset;
use crate::engine::ExperimentTrace;
use crate::error::Result;

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: &'a str,
    seed: u64,
    policy: String,
    stop_reason: String,
    rounds_executed: u32,
    final_clock: f64,
    num_clients: usize,
    final_clusters: usize,
    first_split_round: Option<u32>,
    first_split_clock: Option<f64>,
    mean_feel_accuracy: f64,
    mean_max_accuracy: f64,
    complete: bool,
}

fn manifest_json(trace: &ExperimentTrace, complete: bool) -> Result<String> {
    let first = trace.first_split();
    let m = Manifest {
        config_hash: &trace.config_hash,
        seed: trace.seed,
        policy: trace.policy.to_string(),
        stop_reason: trace.stop.to_string(),
        rounds_executed: trace.rounds_executed,
        final_clock: trace.final_clock,
        num_clients: trace.ground_truth.len(),
        final_clusters: trace.final_partition.len(),
        first_split_round: first.map(|(r, _)| r),
        first_split_clock: first.map(|(_, c)| c),
        mean_feel_accuracy: trace.mean_feel_accuracy(),
        mean_max_accuracy: trace.mean_max_accuracy(),
        complete,
    };
    Ok(serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n")
}

/// Empty string for `None`, plain `Display` otherwise.
fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn members_field(members: &[crate::ClientId]) -> String {
    let strs: Vec<String> = members.iter().map(u32::to_string).collect();
    strs.join(" ")
}

fn rounds_csv(trace: &ExperimentTrace) -> String {
    let mut s = String::from(
        "round,clock,wall_clock,deadline,num_clusters,cluster,size,selected,aggregated,\
         mean_update_norm,max_update_norm,train_loss,converged\n",
    );
    for r in &trace.rounds {
        for c in &r.clusters {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.clock,
                r.wall_clock,
                r.deadline,
                r.num_clusters,
                c.cluster,
                c.size,
                c.selected,
                c.aggregated,
                opt(c.mean_update_norm),
                opt(c.max_update_norm),
                c.train_loss,
                c.converged,
            );
        }
    }
    s
}

fn schedule_csv(trace: &ExperimentTrace) -> String {
    let mut s = String::from(
        "round,policy,client_id,cluster,rank,group,est_total,actual_finish,dropped\n",
    );
    for row in &trace.schedule {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            row.round,
            row.policy,
            row.client_id,
            row.cluster,
            row.rank,
            row.group,
            row.est_total,
            row.actual_finish,
            row.dropped,
        );
    }
    s
}

fn splits_csv(trace: &ExperimentTrace) -> String {
    let mut s = String::from(
        "round,cluster,mean_norm,max_norm,gate_passed,sim_cross_max,sim_within_min,gap,\
         degenerate_side,max_gamma,gamma_threshold,split,child_a,child_b\n",
    );
    for d in &trace.splits {
        let (a, b) = match &d.children {
            Some((a, b)) => (members_field(a), members_field(b)),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            d.round,
            d.cluster,
            d.mean_norm,
            d.max_norm,
            d.gate_passed,
            opt(d.sim_cross_max),
            opt(d.sim_within_min),
            opt(d.gap),
            d.degenerate_side,
            opt(d.max_gamma),
            opt(d.gamma_threshold),
            d.split,
            a,
            b,
        );
    }
    s
}

/// Per-client rows against the shared model and every final cluster model,
/// plus one `max` row holding the best of those.
fn accuracy_csv(trace: &ExperimentTrace) -> String {
    let mut s = String::from("client_id,model,accuracy,is_member\n");
    for c in &trace.accuracy {
        let _ = writeln!(s, "{},{},{},{}", c.client_id, c.model, c.accuracy, c.is_member);
    }
    for r in &trace.max_acc {
        let _ = writeln!(s, "{},max,{},{}", r.client_id, r.accuracy, r.own_cluster);
    }
    s
}

/// Writes a full run directory. Creates `dir` (and `dir/models`) if needed;
/// existing files are overwritten.
pub fn write_run(dir: &Path, trace: &ExperimentTrace, cfg: &ExperimentConfig) -> Result<()> {
    let models = dir.join("models");
    fs::create_dir_all(&models)?;
    fs::write(dir.join("manifest.json"), manifest_json(trace, false)?)?;
    fs::write(dir.join("config.toml"), cfg.render())?;
    fs::write(dir.join("rounds.csv"), rounds_csv(trace))?;
    fs::write(dir.join("schedule.csv"), schedule_csv(trace))?;
    fs::write(dir.join("splits.csv"), splits_csv(trace))?;
    fs::write(dir.join("accuracy.csv"), accuracy_csv(trace))?;
    fs::write(models.join("feel.bin"), trace.feel_model.to_bytes())?;
    for (id, m) in &trace.cluster_models {
        fs::write(models.join(format!("cluster_{id}.bin")), m.to_bytes())?;
    }
    fs::write(dir.join("manifest.json"), manifest_json(trace, true)?)?;
    Ok(())
}

/// One row per sample across all clients, train and test.
pub fn export_dataset(path: &Path, data: &FederatedDataset) -> Result<()> {
    let mut s = String::from("client_id,latent,role,label");
    for j in 0..data.features {
        let _ = write!(s, ",f{j}");
    }
    s.push('\n');
    for client in &data.clients {
        for (role, set) in [("train", &client.train), ("test", &client.test)] {
            for i in 0..set.len() {
                let _ = write!(s, "{},{},{},{}", client.id, client.latent, role, set.labels[i]);
                for v in set.row(i) {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
        }
    }
    fs::write(path, s)?;
    Ok(())
}
