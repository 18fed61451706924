//! Subcommand implementations.

use std::path::Path;

use anyhow::{bail, Context, Result};

use splitsim_core::attack::fsim::FsimPlan;
use splitsim_core::attack::reconstruct::unsplit_reconstruct;
use splitsim_core::attack::threshold::find_t_fsim;
use splitsim_core::attack::mia::membership_inference;
use splitsim_core::bilevel::{optimize, ClientSetup, OptimizerConfig};
use splitsim_core::data::{generate_pool, make_synthetic_dataset, partition_pool, Sample};
use splitsim_core::energy::{build_energy_profile, DeviceParams, EnergyPowerProfile};
use splitsim_core::nn::{split_model, LayeredModel, ModelSpec};
use splitsim_core::profiler::{
    build_privacy_leakage_table, compute_a_min, probe_reconstructions, train_centralized,
    NoiseGrid, PrivacyLeakageTable, ReconOutcome,
};
use splitsim_core::protocol::{
    model_accuracy, run_training, AttendanceSchedule, ClientState, ServerState, TrainingRecord,
};
use splitsim_core::rng::RngStream;
use splitsim_core::tensor::Tensor;

use crate::artifacts::{self, Provenance};
use crate::config::{ClientsSection, ExperimentConfig, Threshold};

/// Model, per-client setups, and the shared test set, all derived from the
/// config and seed.
struct Roster {
    spec: ModelSpec,
    global: LayeredModel,
    setups: Vec<ClientSetup>,
    test: Vec<Sample>,
}

fn scaled_device(scale: f64, p_max: f64) -> DeviceParams {
    let mut device = DeviceParams::default();
    device.comm_joules_per_byte *= scale;
    device.compute_joules_per_flop *= scale;
    device.idle_watts *= scale;
    device.p_max = p_max;
    device
}

fn build_roster(cfg: &ExperimentConfig) -> Result<Roster> {
    let root = RngStream::from_seed(cfg.seed);
    let spec = cfg.model.to_spec();
    let global = spec.build(&mut root.child("model-init"))?;
    let data = make_synthetic_dataset(&cfg.dataset, cfg.clients.count, &root.child("data"))?;
    let count = cfg.clients.count;
    let alpha = ClientsSection::per_client(&cfg.clients.alpha, count, "alpha")?;
    let p_max = ClientsSection::per_client(&cfg.clients.p_max, count, "p_max")?;
    let scale = ClientsSection::per_client(&cfg.clients.energy_scale, count, "energy_scale")?;
    let mut setups = Vec::with_capacity(count);
    for (id, dataset) in data.clients.into_iter().enumerate() {
        let device = scaled_device(scale[id], p_max[id]);
        let profile = build_energy_profile(
            &device,
            &spec,
            cfg.profile.s_max,
            cfg.training.batch_size,
            cfg.profile.batches_per_epoch,
        )?;
        setups.push(ClientSetup { id, alpha: alpha[id], profile, dataset });
    }
    Ok(Roster { spec, global, setups, test: data.test })
}

fn profiling_samples(cfg: &ExperimentConfig, n: usize) -> Result<Vec<Sample>> {
    let root = RngStream::from_seed(cfg.seed);
    Ok(generate_pool(&cfg.dataset, n, &mut root.child("profile-samples"))?)
}

pub fn profile_privacy(cfg: &ExperimentConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let roster = build_roster(cfg)?;
    let grid = NoiseGrid::from_floats(cfg.profile.sigma_max, cfg.profile.sigma_step)?;
    let samples = profiling_samples(cfg, cfg.profile.samples)?;
    let table = build_privacy_leakage_table(
        &roster.global,
        cfg.profile.s_max,
        &grid,
        &samples,
        &cfg.profile.budget.to_budget(),
        &RngStream::from_seed(cfg.seed).child("privacy"),
    )
    .context("building the privacy leakage table")?;
    let path = artifacts::write_artifact(
        out,
        artifacts::PRIVACY_TABLE,
        &format!("{}{}", prov.comment_header(), table.to_text()),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn profile_energy(cfg: &ExperimentConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let roster = build_roster(cfg)?;
    for setup in &roster.setups {
        let name = artifacts::energy_profile_name(setup.id);
        let body = format!(
            "{}# client {}\n{}",
            prov.comment_header(),
            setup.id,
            setup.profile.to_text()
        );
        let path = artifacts::write_artifact(out, &name, &body)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn load_privacy_table(out: &Path) -> Result<PrivacyLeakageTable> {
    let text = artifacts::read_prerequisite(out, artifacts::PRIVACY_TABLE, "profile privacy")?;
    Ok(PrivacyLeakageTable::from_text(&text)?)
}

fn load_energy_profiles(out: &Path, count: usize) -> Result<Vec<EnergyPowerProfile>> {
    (0..count)
        .map(|id| {
            let text = artifacts::read_prerequisite(
                out,
                &artifacts::energy_profile_name(id),
                "profile energy",
            )?;
            Ok(EnergyPowerProfile::from_text(&text)?)
        })
        .collect()
}

/// Measures the reference accuracy: the model trained centrally on every
/// client's data pooled together.
fn reference_accuracy(cfg: &ExperimentConfig, roster: &Roster) -> Result<f64> {
    let pooled: Vec<Sample> = roster.setups.iter().flat_map(|s| s.dataset.iter().cloned()).collect();
    let mut model = roster.global.clone();
    train_centralized(
        &mut model,
        &pooled,
        cfg.training.epochs,
        &cfg.training.to_train_cfg(),
        &RngStream::from_seed(cfg.seed).child("reference"),
    )?;
    Ok(model_accuracy(&model, &roster.test)?)
}

/// Resolves the leakage threshold, probing reconstructions when "auto".
fn resolve_threshold(
    cfg: &ExperimentConfig,
    global: &LayeredModel,
) -> Result<f64> {
    match &cfg.optimizer.t_fsim {
        Threshold::Fixed(v) => Ok(*v),
        Threshold::Named(_) => {
            let samples = profiling_samples(cfg, cfg.profile.samples)?;
            let outcomes = probe_reconstructions(
                global,
                cfg.profile.s_max,
                &cfg.attack.sigmas,
                &samples,
                &cfg.profile.budget.to_budget(),
                &RngStream::from_seed(cfg.seed).child("threshold"),
            )?;
            let scored: Vec<(f64, bool)> =
                outcomes.iter().map(|o| (o.fsim, o.predicted == o.label)).collect();
            let found = find_t_fsim(&scored, cfg.dataset.n_class, cfg.optimizer.threshold_bins)?;
            if !found.qualified {
                bail!(
                    "threshold search found no similarity level at which reconstructions \
                     are unidentifiable (floor {}); set optimizer.t_fsim explicitly",
                    found.t_fsim
                );
            }
            Ok(found.t_fsim)
        }
    }
}

pub fn run_optimize(cfg: &ExperimentConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let plt = load_privacy_table(out)?;
    let profiles = load_energy_profiles(out, cfg.clients.count)?;
    let mut roster = build_roster(cfg)?;
    for (setup, profile) in roster.setups.iter_mut().zip(profiles) {
        setup.profile = profile;
    }
    let a_ref = reference_accuracy(cfg, &roster)?;
    let a_min = compute_a_min(a_ref, cfg.optimizer.beta)?;
    let t_fsim = resolve_threshold(cfg, &roster.global)?;
    let opt_cfg = OptimizerConfig {
        t_fsim,
        a_min,
        sigma_floor: cfg.optimizer.sigma_floor,
        max_rounds: cfg.optimizer.max_rounds,
        probe_epochs: cfg.optimizer.probe_epochs,
        aggregate_every: cfg.training.aggregate_every,
        train: cfg.training.to_train_cfg(),
    };
    let outcome = optimize(
        &roster.global,
        &roster.setups,
        &plt,
        &roster.test,
        &opt_cfg,
        &RngStream::from_seed(cfg.seed).child("optimize"),
    )?;

    let mut trace_text = prov.json_header();
    trace_text.push('\n');
    for round in &outcome.trace {
        trace_text.push_str(&serde_json::to_string(round)?);
        trace_text.push('\n');
    }
    artifacts::write_artifact(out, artifacts::OPTIMIZE_TRACE, &trace_text)?;

    artifacts::write_artifact(
        out,
        artifacts::NOISE_TABLE,
        &format!("{}{}", prov.comment_header(), outcome.table.to_text()),
    )?;

    let summary = format!(
        "{}# a_ref {a_ref}\n# a_min {a_min}\n# t_fsim {t_fsim}\n# converged {}\n# rounds {}\n# g_acc {}\n",
        prov.comment_header(),
        outcome.converged,
        outcome.rounds_used,
        outcome.g_acc
    );
    let path =
        artifacts::write_artifact(out, artifacts::DECISIONS, &artifacts::decisions_to_text(&outcome.decisions, &summary))?;
    println!(
        "wrote {} (converged {}, rounds {}, accuracy {:.4})",
        path.display(),
        outcome.converged,
        outcome.rounds_used,
        outcome.g_acc
    );
    Ok(())
}

/// Per-client (split, sigma) assignments for a training run: the optimizer's
/// decisions when configured, otherwise the uniform config values.
fn training_assignments(
    cfg: &ExperimentConfig,
    out: &Path,
) -> Result<Vec<(usize, f64)>> {
    if cfg.training.use_decisions {
        let text = artifacts::read_prerequisite(out, artifacts::DECISIONS, "optimize")?;
        let decisions = artifacts::decisions_from_text(&text)?;
        (0..cfg.clients.count)
            .map(|id| {
                decisions
                    .iter()
                    .find(|d| d.client_id == id)
                    .map(|d| (d.split_point, d.sigma))
                    .ok_or_else(|| {
                        anyhow::anyhow!("decisions table has no row for client {id}")
                    })
            })
            .collect()
    } else {
        Ok(vec![(cfg.training.split_point, cfg.training.sigma); cfg.clients.count])
    }
}

pub fn run_train(cfg: &ExperimentConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let roster = build_roster(cfg)?;
    let assignments = training_assignments(cfg, out)?;
    let schedule = match cfg.training.attendance.as_str() {
        "" => None,
        path => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading attendance schedule {path}"))?;
            Some(AttendanceSchedule::parse(&text)?)
        }
    };
    let mut server = ServerState::new(roster.global.clone(), cfg.profile.s_max, cfg.training.aggregate_every)?;
    let mut clients: Vec<ClientState> = roster
        .setups
        .iter()
        .zip(&assignments)
        .map(|(setup, &(s, sigma))| {
            let (prefix, _) = split_model(&roster.global, s)?;
            Ok(ClientState {
                id: setup.id,
                split_point: s,
                noise_sigma: sigma,
                alpha: setup.alpha,
                prefix,
                dataset: setup.dataset.clone(),
                profile: setup.profile.clone(),
            })
        })
        .collect::<splitsim_core::Result<_>>()?;
    let record = run_training(
        &mut clients,
        &mut server,
        schedule.as_ref(),
        cfg.training.epochs,
        &roster.test,
        &cfg.training.to_train_cfg(),
        &RngStream::from_seed(cfg.seed).child("train"),
    )?;
    let body = format!("{}\n{}", prov.json_header(), record.to_jsonl());
    let path = artifacts::write_artifact(out, artifacts::TRAINING_RECORD, &body)?;
    println!(
        "wrote {} (final accuracy {:.4})",
        path.display(),
        record.final_accuracy().unwrap_or(0.0)
    );
    Ok(())
}

pub fn attack_reconstruct(cfg: &ExperimentConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let roster = build_roster(cfg)?;
    let samples = {
        let root = RngStream::from_seed(cfg.seed);
        generate_pool(&cfg.dataset, cfg.attack.samples, &mut root.child("attack-samples"))?
    };
    let [_, h, w] = samples[0].0.shape[..] else {
        bail!("attack reconstruct needs image samples, got shape {:?}", samples[0].0.shape);
    };
    let plan = FsimPlan::new(h, w)?;
    let budget = cfg.attack.budget.to_budget();
    let root = RngStream::from_seed(cfg.seed);
    let sqrt2 = 2f64.sqrt();
    let mut outcomes: Vec<ReconOutcome> = Vec::new();
    for s in 1..=cfg.profile.s_max {
        let (prefix, _) = split_model(&roster.global, s)?;
        // A blind attacker knows the architecture, not the weights: its
        // surrogate starts from an independent initialization.
        let surrogate = if cfg.attack.blind {
            roster.spec.prefix(s)?.build(&mut root.child("surrogate").child_idx(s as u64))?
        } else {
            prefix.clone()
        };
        for (i, (x, label)) in samples.iter().enumerate() {
            let z = prefix.infer(&Tensor::stack(&[x])?)?;
            let mut noise_rng = root.child("attack-noise").child_idx(s as u64).child_idx(i as u64);
            let unit: Vec<f64> = (0..z.numel()).map(|_| noise_rng.laplace(1.0)).collect();
            for &sigma in &cfg.attack.sigmas {
                let scale = sigma / sqrt2;
                let noisy = Tensor {
                    shape: z.shape.clone(),
                    data: z.data.iter().zip(&unit).map(|(&v, &u)| v + scale * u).collect(),
                };
                let result = unsplit_reconstruct(surrogate.clone(), &noisy, &budget)?;
                let logits = roster.global.infer(&result.recovered)?;
                let recovered = result.recovered.reshaped(&x.shape)?;
                outcomes.push(ReconOutcome {
                    split_point: s,
                    sigma,
                    sample: i,
                    label: *label,
                    predicted: splitsim_core::nn::argmax_row(&logits, 0),
                    fsim: plan.fsim(x, &recovered)?,
                    converged: result.converged,
                });
            }
        }
    }

    let mut records = format!("{}s\tsigma\tfsim_mean\tfsim_std\tn\n", prov.comment_header());
    for s in 1..=cfg.profile.s_max {
        for &sigma in &cfg.attack.sigmas {
            let cell: Vec<f64> = outcomes
                .iter()
                .filter(|o| o.split_point == s && o.sigma == sigma)
                .map(|o| o.fsim)
                .collect();
            let n = cell.len() as f64;
            let mean = cell.iter().sum::<f64>() / n;
            let var = cell.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n;
            records.push_str(&format!("{s}\t{sigma}\t{mean}\t{}\t{}\n", var.sqrt(), cell.len()));
        }
    }
    artifacts::write_artifact(out, artifacts::RECON_RECORDS, &records)?;

    let mut lines = prov.json_header();
    lines.push('\n');
    for o in &outcomes {
        lines.push_str(&serde_json::to_string(o)?);
        lines.push('\n');
    }
    let path = artifacts::write_artifact(out, artifacts::RECON_OUTCOMES, &lines)?;
    println!("wrote {} ({} outcomes)", path.display(), outcomes.len());
    Ok(())
}

pub fn attack_mia(cfg: &ExperimentConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let root = RngStream::from_seed(cfg.seed);
    let spec = cfg.model.to_spec();
    let members = generate_pool(&cfg.dataset, cfg.mia.members, &mut root.child("mia-members"))?;
    let non_members =
        generate_pool(&cfg.dataset, cfg.mia.non_members, &mut root.child("mia-non-members"))?;
    let shadow_pool =
        generate_pool(&cfg.dataset, cfg.mia.shadow_pool, &mut root.child("mia-shadow-pool"))?;

    let mut target = spec.build(&mut root.child("mia-target-init"))?;
    let target_cfg = splitsim_core::protocol::TrainCfg {
        l2_lambda: cfg.mia.lambda,
        ..cfg.training.to_train_cfg()
    };
    train_centralized(
        &mut target,
        &members,
        cfg.mia.target_epochs,
        &target_cfg,
        &root.child("mia-target-train"),
    )?;

    let mia_cfg = cfg.mia.to_mia_cfg(&cfg.training.to_train_cfg());
    let result = membership_inference(
        &target,
        &members,
        &non_members,
        &spec,
        &shadow_pool,
        &mia_cfg,
        &root.child("mia"),
    )?;

    let record = serde_json::json!({
        "shadow_epochs": cfg.mia.shadow_epochs,
        "target_epochs": cfg.mia.target_epochs,
        "lambda": cfg.mia.lambda,
        "balanced_accuracy": result.balanced_accuracy,
        "member_mean_score": result.member_mean_score,
        "non_member_mean_score": result.non_member_mean_score,
    });
    let body = format!("{}\n{}\n", prov.json_header(), record);
    let path = artifacts::write_artifact(out, artifacts::MIA_RECORD, &body)?;
    println!(
        "wrote {} (balanced accuracy {:.4})",
        path.display(),
        result.balanced_accuracy
    );
    Ok(())
}

pub fn run_report(cfg: &ExperimentConfig, out: &Path, prov: &Provenance) -> Result<()> {
    let record_text = artifacts::read_prerequisite(out, artifacts::TRAINING_RECORD, "train")?;
    let record = TrainingRecord::from_jsonl(&record_text)?;
    let decisions_text = artifacts::read_prerequisite(out, artifacts::DECISIONS, "optimize")?;
    let decisions = artifacts::decisions_from_text(&decisions_text)?;
    let plt = load_privacy_table(out)?;

    let accuracy = record.final_accuracy().unwrap_or(0.0);
    let mut fsim_total = 0.0;
    for d in &decisions {
        fsim_total += plt.fsim_at(d.split_point, d.sigma)?;
    }
    let epochs = record.epochs.len();
    let total_energy: f64 = record
        .epochs
        .iter()
        .flat_map(|e| e.clients.iter())
        .map(|c| c.comm_j + c.comp_j + c.idle_j)
        .sum();
    let mean_epoch_energy = total_energy / epochs.max(1) as f64;

    let body = format!(
        "{}accuracy\tfsim_total\tmean_epoch_energy_j\tclients\tepochs\n{accuracy}\t{fsim_total}\t{mean_epoch_energy}\t{}\t{epochs}\n",
        prov.comment_header(),
        cfg.clients.count
    );
    let path = artifacts::write_artifact(out, artifacts::REPORT, &body)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run_scaling(
    cfg: &ExperimentConfig,
    counts_flag: &[usize],
    out: &Path,
    prov: &Provenance,
) -> Result<()> {
    let counts = if counts_flag.is_empty() { cfg.scaling.counts.clone() } else { counts_flag.to_vec() };
    if counts.is_empty() || counts.contains(&0) {
        bail!("scaling needs client counts of at least 1");
    }
    let plt = load_privacy_table(out)?;
    let root = RngStream::from_seed(cfg.seed);
    let spec = cfg.model.to_spec();
    let global = spec.build(&mut root.child("model-init"))?;
    let pool = generate_pool(&cfg.dataset, cfg.scaling.pool, &mut root.child("scaling-pool"))?;
    let test = generate_pool(&cfg.dataset, cfg.dataset.test, &mut root.child("scaling-test"))?;

    // The accuracy floor is fixed once, from centralized training on the
    // whole pool, so every roster size chases the same target.
    let mut reference = global.clone();
    train_centralized(
        &mut reference,
        &pool,
        cfg.training.epochs,
        &cfg.training.to_train_cfg(),
        &root.child("scaling-reference"),
    )?;
    let a_ref = model_accuracy(&reference, &test)?;
    let a_min = compute_a_min(a_ref, cfg.optimizer.beta)?;
    let t_fsim = resolve_threshold(cfg, &global)?;

    let labels: Vec<usize> = pool.iter().map(|(_, y)| *y).collect();
    let mut body = format!(
        "{}# a_ref {a_ref}\n# a_min {a_min}\nn\taccuracy\tfsim_total\tfsim_per_client\trounds\tconverged\n",
        prov.comment_header()
    );
    for &n in &counts {
        let parts = partition_pool(&labels, n, cfg.dataset.iid)?;
        let alpha = ClientsSection::per_client(&cfg.clients.alpha, n, "alpha")?;
        let p_max = ClientsSection::per_client(&cfg.clients.p_max, n, "p_max")?;
        let scale = ClientsSection::per_client(&cfg.clients.energy_scale, n, "energy_scale")?;
        let mut setups = Vec::with_capacity(n);
        for (id, idxs) in parts.into_iter().enumerate() {
            let profile = build_energy_profile(
                &scaled_device(scale[id], p_max[id]),
                &spec,
                cfg.profile.s_max,
                cfg.training.batch_size,
                cfg.profile.batches_per_epoch,
            )?;
            setups.push(ClientSetup {
                id,
                alpha: alpha[id],
                profile,
                dataset: idxs.into_iter().map(|i| pool[i].clone()).collect(),
            });
        }
        let opt_cfg = OptimizerConfig {
            t_fsim,
            a_min,
            sigma_floor: cfg.optimizer.sigma_floor,
            max_rounds: cfg.optimizer.max_rounds,
            probe_epochs: cfg.optimizer.probe_epochs,
            aggregate_every: cfg.training.aggregate_every,
            train: cfg.training.to_train_cfg(),
        };
        let outcome = optimize(
            &global,
            &setups,
            &plt,
            &test,
            &opt_cfg,
            &root.child("scaling").child_idx(n as u64),
        )?;
        let fsim_total: f64 = {
            let mut total = 0.0;
            for d in &outcome.decisions {
                total += plt.fsim_at(d.split_point, d.sigma)?;
            }
            total
        };
        body.push_str(&format!(
            "{n}\t{}\t{fsim_total}\t{}\t{}\t{}\n",
            outcome.g_acc,
            fsim_total / n as f64,
            outcome.rounds_used,
            outcome.converged
        ));
    }
    let path = artifacts::write_artifact(out, artifacts::SCALING, &body)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn print_config(cfg: &ExperimentConfig, prov: &Provenance) -> Result<()> {
    print!("{}{}", prov.comment_header(), cfg.to_toml()?);
    Ok(())
}
