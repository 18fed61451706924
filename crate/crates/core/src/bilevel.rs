//! Noise assignment and split-point selection, iterated against measured
//! accuracy.
//!
//! The server reads the leakage table and assigns each split the least noise
//! that pushes reconstruction quality under a threshold. Each client picks
//! the split point minimizing a privacy/energy mix inside its power budget.
//! A probe training campaign measures the accuracy of the resulting
//! deployment; while it falls short of the floor, every noise level is
//! relaxed multiplicatively and the cycle repeats.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::energy::EnergyPowerProfile;
use crate::error::{Error, Result};
use crate::nn::{split_model, LayeredModel};
use crate::profiler::PrivacyLeakageTable;
use crate::protocol::{run_training, ClientState, ServerState, TrainCfg};
use crate::rng::RngStream;

/// One noise level per split point, revised between rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseAssignmentTable {
    /// Revision count; 0 for a freshly initialized table.
    pub round: usize,
    /// `sigma[s - 1]` is the level assigned to split s.
    pub sigma: Vec<f64>,
    /// Splits where no grid level met the leakage threshold, so the grid
    /// maximum was assigned. Records the initial assignment.
    pub saturated: Vec<bool>,
}

impl NoiseAssignmentTable {
    pub fn s_max(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma_for(&self, s: usize) -> Result<f64> {
        if s < 1 || s > self.sigma.len() {
            return Err(Error::OutOfRange { what: "split point", got: s, lo: 1, hi: self.sigma.len() });
        }
        Ok(self.sigma[s - 1])
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# noise-assignment-table v1\n");
        out.push_str(&format!("# round {}\n", self.round));
        out.push_str("s\tsigma\tsaturated\n");
        for s in 1..=self.s_max() {
            out.push_str(&format!(
                "{s}\t{}\t{}\n",
                self.sigma[s - 1],
                u8::from(self.saturated[s - 1])
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut round = None;
        let mut sigma = Vec::new();
        let mut saturated = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line == "s\tsigma\tsaturated" {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# round ") {
                round = rest.trim().parse().ok();
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split('\t').collect();
            if toks.len() != 3 {
                return Err(Error::Parse { what: "noise table", detail: format!("bad row {line:?}") });
            }
            let s: usize = toks[0]
                .parse()
                .map_err(|_| Error::Parse { what: "noise table", detail: format!("bad split {:?}", toks[0]) })?;
            if s != sigma.len() + 1 {
                return Err(Error::Parse { what: "noise table", detail: format!("row for split {s} out of order") });
            }
            sigma.push(toks[1].parse().map_err(|_| Error::Parse {
                what: "noise table",
                detail: format!("bad sigma {:?}", toks[1]),
            })?);
            saturated.push(match toks[2] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse { what: "noise table", detail: format!("bad flag {other:?}") })
                }
            });
        }
        let Some(round) = round else {
            return Err(Error::Parse { what: "noise table", detail: "missing round header".into() });
        };
        if sigma.is_empty() {
            return Err(Error::Parse { what: "noise table", detail: "no rows".into() });
        }
        Ok(NoiseAssignmentTable { round, sigma, saturated })
    }
}

/// Assigns each split the smallest grid level whose measured leakage is at or
/// below `t_fsim`; splits where even the maximum level leaks more get that
/// maximum and a saturation flag.
pub fn init_noise_table(plt: &PrivacyLeakageTable, t_fsim: f64) -> Result<NoiseAssignmentTable> {
    if !(t_fsim > 0.0 && t_fsim < 1.0) {
        return Err(Error::InvalidArgument(format!("leakage threshold {t_fsim} outside (0, 1)")));
    }
    if plt.s_max == 0 || plt.grid.is_empty() {
        return Err(Error::InvalidArgument("empty leakage table".into()));
    }
    let mut sigma = Vec::with_capacity(plt.s_max);
    let mut saturated = Vec::with_capacity(plt.s_max);
    for s in 1..=plt.s_max {
        let hit = plt.grid.iter().enumerate().find(|&(j, _)| plt.cell(s, j) <= t_fsim);
        match hit {
            Some((_, &level)) => {
                sigma.push(level);
                saturated.push(false);
            }
            None => {
                sigma.push(*plt.grid.last().expect("non-empty grid"));
                saturated.push(true);
            }
        }
    }
    Ok(NoiseAssignmentTable { round: 0, sigma, saturated })
}

/// Splits a client may deploy: the upper end is the deepest split whose peak
/// power stays under the cap, the lower end is where total energy bottoms out
/// (earliest split on ties, so a non-decreasing energy curve yields 1).
pub fn feasible_split_range(profile: &EnergyPowerProfile, client_id: usize) -> Result<(usize, usize)> {
    let s_hi = (1..=profile.s_max)
        .filter(|&s| profile.peak(s) <= profile.p_max)
        .max()
        .ok_or(Error::InfeasibleClient { client_id })?;
    let s_lo = (1..=s_hi)
        .min_by(|&a, &b| profile.e_total(a).partial_cmp(&profile.e_total(b)).expect("finite energy"))
        .expect("non-empty range");
    Ok((s_lo, s_hi))
}

/// One client's choice for a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDecision {
    pub client_id: usize,
    pub split_point: usize,
    pub sigma: f64,
    /// Value of the privacy/energy objective at the chosen split.
    pub objective: f64,
    pub feasible: (usize, usize),
}

/// Evaluates `alpha * leakage + (1 - alpha) * normalized energy` over the
/// feasible range and returns the minimizing split (smallest on ties).
/// Energy is normalized by its maximum over the range so both terms live in
/// [0, 1]. Splits whose peak power exceeds the cap are never chosen.
pub fn select_split_point(
    client_id: usize,
    profile: &EnergyPowerProfile,
    alpha: f64,
    nat: &NoiseAssignmentTable,
    plt: &PrivacyLeakageTable,
) -> Result<SplitDecision> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("objective weight {alpha} outside [0, 1]")));
    }
    let (lo, hi) = feasible_split_range(profile, client_id)?;
    if hi > nat.s_max() || hi > plt.s_max {
        return Err(Error::InvalidArgument(format!(
            "profile allows split {hi} but tables cover only {} / {}",
            nat.s_max(),
            plt.s_max
        )));
    }
    let e_max = (lo..=hi).map(|s| profile.e_total(s)).fold(0.0, f64::max);
    let mut best: Option<SplitDecision> = None;
    for s in lo..=hi {
        if profile.peak(s) > profile.p_max {
            continue;
        }
        let sigma = nat.sigma_for(s)?;
        let leak = plt.fsim_at(s, sigma)?;
        let e_norm = if e_max > 0.0 { profile.e_total(s) / e_max } else { 0.0 };
        let objective = alpha * leak + (1.0 - alpha) * e_norm;
        if best.as_ref().map_or(true, |b| objective < b.objective) {
            best = Some(SplitDecision { client_id, split_point: s, sigma, objective, feasible: (lo, hi) });
        }
    }
    best.ok_or(Error::InfeasibleClient { client_id })
}

/// Relaxes every level by the factor `1 - 2 * (a_min - a_t)`, clamped into
/// [0.1, 1] so the table always makes progress and never grows, then floors
/// the result at `sigma_floor`. Only valid while accuracy is short of the
/// floor.
pub fn reassign_noise(
    nat: &NoiseAssignmentTable,
    a_t: f64,
    a_min: f64,
    sigma_floor: f64,
) -> Result<NoiseAssignmentTable> {
    for (what, v) in [("measured accuracy", a_t), ("accuracy floor", a_min)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{what} {v} outside [0, 1]")));
        }
    }
    if !(sigma_floor >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma floor {sigma_floor} must be >= 0")));
    }
    if a_t >= a_min {
        return Err(Error::Contract(format!(
            "noise reassignment with accuracy {a_t} already at floor {a_min}"
        )));
    }
    let factor = (1.0 - 2.0 * (a_min - a_t)).clamp(0.1, 1.0);
    Ok(NoiseAssignmentTable {
        round: nat.round + 1,
        sigma: nat.sigma.iter().map(|&v| (v * factor).max(sigma_floor)).collect(),
        saturated: nat.saturated.clone(),
    })
}

/// Everything the optimizer needs to know about one client.
#[derive(Clone, Debug)]
pub struct ClientSetup {
    pub id: usize,
    /// Privacy weight in the split-selection objective.
    pub alpha: f64,
    pub profile: EnergyPowerProfile,
    pub dataset: Vec<Sample>,
}

#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    /// Leakage level a split must be pushed under at initialization.
    pub t_fsim: f64,
    /// Accuracy the probe campaign must reach.
    pub a_min: f64,
    pub sigma_floor: f64,
    pub max_rounds: usize,
    /// Length of each round's probe campaign.
    pub probe_epochs: usize,
    pub aggregate_every: usize,
    pub train: TrainCfg,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            t_fsim: 0.5,
            a_min: 0.0,
            sigma_floor: 0.0,
            max_rounds: 5,
            probe_epochs: 30,
            aggregate_every: 5,
            train: TrainCfg::default(),
        }
    }
}

/// One optimizer round as recorded in the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Noise table the round ran with.
    pub sigma: Vec<f64>,
    pub decisions: Vec<SplitDecision>,
    /// Accuracy measured by the probe campaign.
    pub g_acc: f64,
    /// Total leakage across clients at their chosen deployments.
    pub f_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    /// False when every round fell short of the accuracy floor; the best
    /// round seen is reported in that case.
    pub converged: bool,
    pub rounds_used: usize,
    pub decisions: Vec<SplitDecision>,
    pub table: NoiseAssignmentTable,
    pub g_acc: f64,
    pub trace: Vec<RoundTrace>,
}

/// Runs the assignment loop: initialize the table from the leakage profile,
/// let clients choose splits, probe-train to measure accuracy, and relax the
/// table while accuracy is short of the floor. Stops at the first round that
/// clears the floor, or after `max_rounds` with the best round seen and the
/// convergence flag unset. Each probe campaign restarts from the same
/// initial weights so rounds differ only in the deployment under test.
pub fn optimize(
    global: &LayeredModel,
    setups: &[ClientSetup],
    plt: &PrivacyLeakageTable,
    test: &[Sample],
    cfg: &OptimizerConfig,
    rng: &RngStream,
) -> Result<OptimizeOutcome> {
    if setups.is_empty() {
        return Err(Error::InvalidArgument("optimizer needs at least one client".into()));
    }
    if cfg.max_rounds == 0 {
        return Err(Error::InvalidArgument("optimizer needs max_rounds >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.a_min) {
        return Err(Error::InvalidArgument(format!("accuracy floor {} outside [0, 1]", cfg.a_min)));
    }
    let mut nat = init_noise_table(plt, cfg.t_fsim)?;
    let mut trace: Vec<RoundTrace> = Vec::new();
    let mut best: Option<(usize, NoiseAssignmentTable)> = None;
    for round in 1..=cfg.max_rounds {
        let decisions: Vec<SplitDecision> = setups
            .iter()
            .map(|c| select_split_point(c.id, &c.profile, c.alpha, &nat, plt))
            .collect::<Result<_>>()?;

        let mut server = ServerState::new(global.clone(), plt.s_max, cfg.aggregate_every)?;
        let mut clients: Vec<ClientState> = setups
            .iter()
            .zip(&decisions)
            .map(|(c, d)| {
                let (prefix, _) = split_model(global, d.split_point)?;
                Ok(ClientState {
                    id: c.id,
                    split_point: d.split_point,
                    noise_sigma: d.sigma,
                    alpha: c.alpha,
                    prefix,
                    dataset: c.dataset.clone(),
                    profile: c.profile.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let record = run_training(
            &mut clients,
            &mut server,
            None,
            cfg.probe_epochs,
            test,
            &cfg.train,
            &rng.child("campaign").child_idx(round as u64),
        )?;
        let g_acc = record.final_accuracy().unwrap_or(0.0);

        let mut f_total = 0.0;
        for d in &decisions {
            f_total += plt.fsim_at(d.split_point, d.sigma)?;
        }
        trace.push(RoundTrace { round, sigma: nat.sigma.clone(), decisions, g_acc, f_total });

        let better = best
            .as_ref()
            .map_or(true, |&(i, _)| g_acc > trace[i].g_acc);
        if better {
            best = Some((trace.len() - 1, nat.clone()));
        }
        if g_acc >= cfg.a_min {
            let last = trace.last().expect("just pushed");
            return Ok(OptimizeOutcome {
                converged: true,
                rounds_used: round,
                decisions: last.decisions.clone(),
                table: nat,
                g_acc,
                trace,
            });
        }
        if round < cfg.max_rounds {
            nat = reassign_noise(&nat, g_acc, cfg.a_min, cfg.sigma_floor)?;
        }
    }
    let (best_idx, best_table) = best.expect("at least one round ran");
    let best_round = &trace[best_idx];
    Ok(OptimizeOutcome {
        converged: false,
        rounds_used: cfg.max_rounds,
        decisions: best_round.decisions.clone(),
        table: best_table,
        g_acc: best_round.g_acc,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pool, DatasetCfg, DatasetKind};
    use crate::energy::{build_energy_profile, DeviceParams};
    use crate::nn::{LayerSpec, ModelSpec};

    fn leakage_fixture(s_max: usize, grid: Vec<f64>, fsim: Vec<Vec<f64>>) -> PrivacyLeakageTable {
        let converged = vec![vec![1.0; grid.len()]; s_max];
        PrivacyLeakageTable { s_max, grid, samples_per_cell: 1, fsim, converged }
    }

    fn profile_fixture(e_total: &[f64], p_peak: &[f64], p_max: f64) -> EnergyPowerProfile {
        EnergyPowerProfile {
            s_max: e_total.len(),
            batch_size: 8,
            batches_per_epoch: 4,
            e_comm: e_total.to_vec(),
            e_comp: vec![0.0; e_total.len()],
            e_idle: vec![0.0; e_total.len()],
            p_peak: p_peak.to_vec(),
            p_max,
            device: DeviceParams::default(),
        }
    }

    #[test]
    fn init_picks_first_level_under_threshold() {
        let plt = leakage_fixture(
            3,
            vec![0.0, 0.5, 1.0],
            vec![
                vec![0.9, 0.6, 0.3],  // crosses between grid points
                vec![0.4, 0.2, 0.1],  // already under at zero noise
                vec![0.9, 0.8, 0.7],  // never qualifies
            ],
        );
        let nat = init_noise_table(&plt, 0.5).unwrap();
        assert_eq!(nat.round, 0);
        assert_eq!(nat.sigma, vec![1.0, 0.0, 1.0]);
        assert_eq!(nat.saturated, vec![false, false, true]);
        assert!(init_noise_table(&plt, 0.0).is_err());
        assert!(init_noise_table(&plt, 1.0).is_err());
    }

    #[test]
    fn noise_table_text_round_trips() {
        let nat = NoiseAssignmentTable { round: 3, sigma: vec![1.65, 0.25, 0.0], saturated: vec![true, false, false] };
        let parsed = NoiseAssignmentTable::from_text(&nat.to_text()).unwrap();
        assert_eq!(parsed, nat);
        assert!(NoiseAssignmentTable::from_text("s\tsigma\tsaturated\n1\t0.5\t0\n").is_err());
        assert!(NoiseAssignmentTable::from_text("# round 1\n2\t0.5\t0\n").is_err());
        assert!(NoiseAssignmentTable::from_text("# round 1\n1\t0.5\t2\n").is_err());
    }

    #[test]
    fn feasible_range_scans_power_and_energy() {
        // Rising energy, power cap above everything: the whole range.
        let p = profile_fixture(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], 10.0);
        assert_eq!(feasible_split_range(&p, 0).unwrap(), (1, 4));
        // Energy dips at 3: the dip becomes the lower end.
        let p = profile_fixture(&[3.0, 2.0, 1.0, 4.0], &[1.0, 2.0, 3.0, 4.0], 10.0);
        assert_eq!(feasible_split_range(&p, 0).unwrap(), (3, 4));
        // Power cap cuts the range at 2.
        let p = profile_fixture(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], 2.5);
        assert_eq!(feasible_split_range(&p, 0).unwrap(), (1, 2));
        // Ties on energy resolve to the earliest split.
        let p = profile_fixture(&[2.0, 2.0, 2.0], &[1.0, 1.0, 1.0], 5.0);
        assert_eq!(feasible_split_range(&p, 0).unwrap(), (1, 3));
        // Nothing under the cap: infeasible.
        let p = profile_fixture(&[1.0], &[9.0], 2.0);
        assert!(matches!(feasible_split_range(&p, 7), Err(Error::InfeasibleClient { client_id: 7 })));
    }

    #[test]
    fn selection_matches_hand_computed_objective() {
        // Leakage 0.6 / 0.4 / 0.35 and normalized energy 0.2 / 0.5 / 1.0 at
        // alpha 0.5 give objectives 0.40 / 0.45 / 0.675.
        let plt = leakage_fixture(3, vec![0.0], vec![vec![0.6], vec![0.4], vec![0.35]]);
        let nat = NoiseAssignmentTable { round: 0, sigma: vec![0.0; 3], saturated: vec![false; 3] };
        let profile = profile_fixture(&[2.0, 5.0, 10.0], &[1.0; 3], 5.0);
        let d = select_split_point(4, &profile, 0.5, &nat, &plt).unwrap();
        assert_eq!(d.split_point, 1);
        assert_eq!(d.client_id, 4);
        assert_eq!(d.feasible, (1, 3));
        assert!((d.objective - 0.40).abs() < 1e-12, "objective {}", d.objective);
    }

    #[test]
    fn extreme_weights_collapse_to_single_criterion() {
        let plt = leakage_fixture(3, vec![0.0], vec![vec![0.6], vec![0.4], vec![0.35]]);
        let nat = NoiseAssignmentTable { round: 0, sigma: vec![0.0; 3], saturated: vec![false; 3] };
        let profile = profile_fixture(&[2.0, 5.0, 10.0], &[1.0; 3], 5.0);
        // Energy only: split 1 is cheapest.
        assert_eq!(select_split_point(0, &profile, 0.0, &nat, &plt).unwrap().split_point, 1);
        // Leakage only: split 3 leaks least.
        assert_eq!(select_split_point(0, &profile, 1.0, &nat, &plt).unwrap().split_point, 3);
        assert!(select_split_point(0, &profile, 1.5, &nat, &plt).is_err());
    }

    /// Independent brute force: evaluate every feasible split with the same
    /// normalization and keep the smallest minimizer.
    fn brute_force_choice(
        profile: &EnergyPowerProfile,
        alpha: f64,
        nat: &NoiseAssignmentTable,
        plt: &PrivacyLeakageTable,
    ) -> Option<usize> {
        let feasible: Vec<usize> =
            (1..=profile.s_max).filter(|&s| profile.peak(s) <= profile.p_max).collect();
        let hi = *feasible.iter().max()?;
        let lo = (1..=hi)
            .min_by(|&a, &b| profile.e_total(a).partial_cmp(&profile.e_total(b)).unwrap())
            .unwrap();
        let e_max = (lo..=hi).map(|s| profile.e_total(s)).fold(0.0, f64::max);
        let mut best: Option<(usize, f64)> = None;
        for s in (lo..=hi).filter(|s| feasible.contains(s)) {
            let f = alpha * plt.fsim_at(s, nat.sigma[s - 1]).unwrap()
                + (1.0 - alpha) * profile.e_total(s) / e_max;
            if best.map_or(true, |(_, bf)| f < bf) {
                best = Some((s, f));
            }
        }
        best.map(|(s, _)| s)
    }

    #[test]
    fn selection_agrees_with_brute_force_on_random_fixtures() {
        let mut rng = RngStream::from_seed(0xB11E);
        for case in 0..300 {
            let s_max = 2 + rng.below(5) as usize;
            let grid = vec![0.0, 1.0, 2.0];
            // Quantized values manufacture frequent exact ties.
            let fsim: Vec<Vec<f64>> = (0..s_max)
                .map(|_| {
                    let mut row: Vec<f64> =
                        (0..3).map(|_| (rng.below(5) as f64) / 5.0).collect();
                    row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    row
                })
                .collect();
            let plt = leakage_fixture(s_max, grid.clone(), fsim);
            let sigma: Vec<f64> = (0..s_max).map(|_| grid[rng.below(3) as usize]).collect();
            let nat = NoiseAssignmentTable { round: 0, sigma, saturated: vec![false; s_max] };
            let e_total: Vec<f64> = (0..s_max).map(|_| 1.0 + rng.below(4) as f64).collect();
            let p_peak: Vec<f64> = (0..s_max).map(|_| 1.0 + rng.below(6) as f64).collect();
            let p_max = 1.0 + rng.below(7) as f64;
            let profile = profile_fixture(&e_total, &p_peak, p_max);
            let alpha = [0.0, 0.25, 0.5, 1.0][rng.below(4) as usize];

            let expected = brute_force_choice(&profile, alpha, &nat, &plt);
            let got = select_split_point(case, &profile, alpha, &nat, &plt);
            match (expected, got) {
                (Some(s), Ok(d)) => {
                    assert_eq!(d.split_point, s, "case {case}");
                    assert!(profile.peak(d.split_point) <= profile.p_max, "case {case}");
                }
                (None, Err(Error::InfeasibleClient { client_id })) => assert_eq!(client_id, case),
                (e, g) => panic!("case {case}: brute force {e:?} vs {g:?}"),
            }
        }
    }

    #[test]
    fn selection_is_invariant_to_energy_rescaling() {
        let plt = leakage_fixture(3, vec![0.0], vec![vec![0.6], vec![0.4], vec![0.35]]);
        let nat = NoiseAssignmentTable { round: 0, sigma: vec![0.0; 3], saturated: vec![false; 3] };
        for alpha in [0.0, 0.3, 0.7, 1.0] {
            let base = select_split_point(0, &profile_fixture(&[2.0, 5.0, 10.0], &[1.0; 3], 5.0), alpha, &nat, &plt)
                .unwrap();
            let scaled =
                select_split_point(0, &profile_fixture(&[20.0, 50.0, 100.0], &[1.0; 3], 5.0), alpha, &nat, &plt)
                    .unwrap();
            assert_eq!(base.split_point, scaled.split_point);
            assert!((base.objective - scaled.objective).abs() < 1e-12);
        }
    }

    #[test]
    fn reassignment_follows_the_relaxation_rule() {
        let nat = NoiseAssignmentTable { round: 2, sigma: vec![1.0, 0.5], saturated: vec![false, true] };
        // Shortfall 0.05: factor 0.9.
        let next = reassign_noise(&nat, 0.80, 0.85, 0.0).unwrap();
        assert_eq!(next.round, 3);
        assert!((next.sigma[0] - 0.9).abs() < 1e-12);
        assert!((next.sigma[1] - 0.45).abs() < 1e-12);
        assert_eq!(next.saturated, nat.saturated);
        // Shortfall 0.5: raw factor 0 clamps to 0.1.
        let next = reassign_noise(&nat, 0.3, 0.8, 0.0).unwrap();
        assert!((next.sigma[0] - 0.1).abs() < 1e-12);
        // Floor holds the level up.
        let next = reassign_noise(&nat, 0.3, 0.8, 0.2).unwrap();
        assert_eq!(next.sigma, vec![0.2, 0.2]);
        // Calling with accuracy at the floor is a caller bug.
        assert!(matches!(reassign_noise(&nat, 0.9, 0.85, 0.0), Err(Error::Contract(_))));
        assert!(reassign_noise(&nat, 1.2, 0.85, 0.0).is_err());
    }

    #[test]
    fn reassignment_scales_homogeneously_before_the_floor() {
        let base = NoiseAssignmentTable { round: 0, sigma: vec![0.8, 0.3, 1.7], saturated: vec![false; 3] };
        let scaled = NoiseAssignmentTable { round: 0, sigma: base.sigma.iter().map(|v| v * 3.0).collect(), saturated: vec![false; 3] };
        let a = reassign_noise(&base, 0.7, 0.9, 0.0).unwrap();
        let b = reassign_noise(&scaled, 0.7, 0.9, 0.0).unwrap();
        for (x, y) in a.sigma.iter().zip(&b.sigma) {
            assert!((y - 3.0 * x).abs() < 1e-12);
        }
        // Repeated shortfall drives levels monotonically toward the floor.
        let mut nat = base;
        let mut prev = nat.sigma.clone();
        for _ in 0..12 {
            nat = reassign_noise(&nat, 0.5, 0.9, 0.05).unwrap();
            for (now, before) in nat.sigma.iter().zip(&prev) {
                assert!(now <= before && *now >= 0.05);
            }
            prev = nat.sigma.clone();
        }
        assert!(nat.sigma.iter().all(|&v| (v - 0.05).abs() < 1e-9));
    }

    fn blob_setups(model_spec: &ModelSpec, n_clients: usize) -> (Vec<ClientSetup>, Vec<Sample>) {
        let cfg = DatasetCfg { kind: DatasetKind::Blobs, n_class: 3, per_client: 30, ..DatasetCfg::default() };
        let root = RngStream::from_seed(400);
        let device = DeviceParams::default();
        let setups = (0..n_clients)
            .map(|id| ClientSetup {
                id,
                alpha: 0.5,
                profile: build_energy_profile(&device, model_spec, 2, 8, 4).unwrap(),
                dataset: generate_pool(&cfg, 30, &mut root.child("data").child_idx(id as u64)).unwrap(),
            })
            .collect();
        let test = generate_pool(&cfg, 60, &mut root.child("test")).unwrap();
        (setups, test)
    }

    fn blob_model_spec() -> ModelSpec {
        ModelSpec {
            input_shape: vec![2],
            layers: vec![
                LayerSpec::Dense { out: 16 },
                LayerSpec::Relu,
                LayerSpec::Dense { out: 3 },
            ],
        }
    }

    #[test]
    fn zero_floor_terminates_in_one_round() {
        let spec = blob_model_spec();
        let global = spec.build(&mut RngStream::from_seed(41)).unwrap();
        let (setups, test) = blob_setups(&spec, 2);
        let plt = leakage_fixture(2, vec![0.0, 2.5], vec![vec![0.9, 0.3], vec![0.7, 0.2]]);
        let cfg = OptimizerConfig { a_min: 0.0, probe_epochs: 2, ..OptimizerConfig::default() };
        let out = optimize(&global, &setups, &plt, &test, &cfg, &RngStream::from_seed(90)).unwrap();
        assert!(out.converged);
        assert_eq!(out.rounds_used, 1);
        assert_eq!(out.table.round, 0);
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.decisions.len(), 2);
    }

    #[test]
    fn learnable_task_converges_and_noise_relaxes() {
        let spec = blob_model_spec();
        let global = spec.build(&mut RngStream::from_seed(41)).unwrap();
        let (setups, test) = blob_setups(&spec, 2);
        // Initial assignment saturates at heavy noise, which cripples the
        // probe; relaxation must walk the level down until accuracy clears.
        let plt = leakage_fixture(2, vec![0.0, 2.5], vec![vec![0.9, 0.6], vec![0.8, 0.55]]);
        let cfg = OptimizerConfig {
            t_fsim: 0.5,
            a_min: 0.8,
            probe_epochs: 25,
            train: TrainCfg { lr: 0.2, ..TrainCfg::default() },
            ..OptimizerConfig::default()
        };
        let out = optimize(&global, &setups, &plt, &test, &cfg, &RngStream::from_seed(90)).unwrap();
        assert!(out.converged, "trace: {:?}", out.trace.iter().map(|t| t.g_acc).collect::<Vec<_>>());
        assert!(out.rounds_used <= 5);
        assert!(out.g_acc >= 0.8);
        // The table relaxed at least once and only ever downward.
        for pair in out.trace.windows(2) {
            for (now, before) in pair[1].sigma.iter().zip(&pair[0].sigma) {
                assert!(now <= before);
            }
        }
        // Leakage grows as noise relaxes on a monotone table.
        for pair in out.trace.windows(2) {
            assert!(pair[1].f_total >= pair[0].f_total - 1e-12);
        }
    }

    #[test]
    fn unreachable_floor_reports_best_round_without_convergence() {
        let spec = blob_model_spec();
        let global = spec.build(&mut RngStream::from_seed(41)).unwrap();
        let (setups, test) = blob_setups(&spec, 2);
        let plt = leakage_fixture(2, vec![0.0, 2.5], vec![vec![0.9, 0.6], vec![0.8, 0.55]]);
        // A frozen learning rate keeps the probe at chance, so the floor is
        // out of reach for every round.
        let cfg = OptimizerConfig {
            a_min: 0.99,
            max_rounds: 3,
            probe_epochs: 2,
            train: TrainCfg { lr: 1e-12, ..TrainCfg::default() },
            ..OptimizerConfig::default()
        };
        let out = optimize(&global, &setups, &plt, &test, &cfg, &RngStream::from_seed(90)).unwrap();
        assert!(!out.converged);
        assert_eq!(out.rounds_used, 3);
        assert_eq!(out.trace.len(), 3);
        let best = out.trace.iter().map(|t| t.g_acc).fold(f64::MIN, f64::max);
        assert_eq!(out.g_acc, best);
        // The reported decisions belong to the best round.
        let best_round = out.trace.iter().find(|t| t.g_acc == best).unwrap();
        assert_eq!(out.decisions, best_round.decisions);
    }

    #[test]
    fn optimizer_is_deterministic() {
        let spec = blob_model_spec();
        let global = spec.build(&mut RngStream::from_seed(41)).unwrap();
        let (setups, test) = blob_setups(&spec, 2);
        let plt = leakage_fixture(2, vec![0.0, 2.5], vec![vec![0.9, 0.3], vec![0.7, 0.2]]);
        let cfg = OptimizerConfig { a_min: 0.6, probe_epochs: 6, max_rounds: 2, ..OptimizerConfig::default() };
        let run = || optimize(&global, &setups, &plt, &test, &cfg, &RngStream::from_seed(91)).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn infeasible_client_aborts_with_its_id() {
        let spec = blob_model_spec();
        let global = spec.build(&mut RngStream::from_seed(41)).unwrap();
        let (mut setups, test) = blob_setups(&spec, 2);
        setups[1].profile.p_max = 0.0;
        let plt = leakage_fixture(2, vec![0.0], vec![vec![0.5], vec![0.4]]);
        let err = optimize(&global, &setups, &plt, &test, &OptimizerConfig::default(), &RngStream::from_seed(9));
        assert!(matches!(err, Err(Error::InfeasibleClient { client_id: 1 })));
    }
}
