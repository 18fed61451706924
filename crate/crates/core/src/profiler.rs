//! Offline profiling: centralized reference training, the accuracy floor,
//! and the per-split privacy leakage table.
//!
//! Leakage is measured by the strongest practical attacker: reconstruction
//! with the client's actual prefix weights, scored by feature similarity
//! against the clean input. Noise is paired across the sigma axis (one unit
//! perturbation per split and sample, scaled per cell) so the table isolates
//! the effect of the noise level from resampling variance.

use serde::{Deserialize, Serialize};

use crate::attack::reconstruct::{unsplit_reconstruct, AttackBudget};
use crate::attack::fsim::FsimPlan;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, split_model, LayeredModel, Phase};
use crate::protocol::TrainCfg;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Plain single-machine SGD over the whole dataset; returns mean training
/// loss per epoch. This is the reference the split protocol is measured
/// against: with one client, no noise, and matching batches the split run
/// reproduces these updates exactly.
pub fn train_centralized(
    model: &mut LayeredModel,
    data: &[Sample],
    epochs: usize,
    cfg: &TrainCfg,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("centralized training on empty data".into()));
    }
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut idxs: Vec<usize> = (0..data.len()).collect();
        rng.child("shuffle").child_idx(epoch as u64).shuffle(&mut idxs);
        let mut sum = 0.0;
        let mut turns = 0usize;
        for chunk in idxs.chunks(cfg.batch_size) {
            let xs: Vec<&Tensor> = chunk.iter().map(|&i| &data[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            let x = Tensor::stack(&xs)?;
            let (logits, tape) = model.forward(&x, Phase::Train, true)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            let packet = model.backward(&tape.expect("tape requested"), &dlogits)?;
            model.sgd_step(&packet, cfg.lr, cfg.l2_lambda)?;
            sum += loss;
            turns += 1;
        }
        losses.push(sum / turns as f64);
    }
    Ok(losses)
}

/// Test accuracy of a centrally trained model on pooled data.
pub fn compute_reference_accuracy(
    model: &mut LayeredModel,
    train: &[Sample],
    test: &[Sample],
    epochs: usize,
    cfg: &TrainCfg,
    rng: &RngStream,
) -> Result<f64> {
    train_centralized(model, train, epochs, cfg, rng)?;
    crate::protocol::model_accuracy(model, test)
}

/// Accuracy floor: the retained fraction of the reference accuracy.
pub fn compute_a_min(a_ref: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&a_ref) {
        return Err(Error::InvalidArgument(format!("reference accuracy {a_ref} outside [0, 1]")));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::InvalidArgument(format!("retained fraction {beta} outside (0, 1]")));
    }
    Ok(beta * a_ref)
}

/// Noise levels in exact hundredths so grid values print as the decimals
/// they were configured as.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseGrid {
    pub max_centi: u32,
    pub step_centi: u32,
}

impl Default for NoiseGrid {
    fn default() -> Self {
        NoiseGrid { max_centi: 250, step_centi: 5 }
    }
}

impl NoiseGrid {
    pub fn from_floats(max: f64, step: f64) -> Result<Self> {
        let to_centi = |v: f64, what: &str| -> Result<u32> {
            let c = (v * 100.0).round();
            if !(v >= 0.0) || (v * 100.0 - c).abs() > 1e-6 || c > u32::MAX as f64 {
                return Err(Error::InvalidArgument(format!(
                    "noise {what} {v} must be a non-negative multiple of 0.01"
                )));
            }
            Ok(c as u32)
        };
        let grid = NoiseGrid { max_centi: to_centi(max, "max")?, step_centi: to_centi(step, "step")? };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_centi == 0 {
            return Err(Error::InvalidArgument("noise grid step must be positive".into()));
        }
        if self.max_centi % self.step_centi != 0 {
            return Err(Error::InvalidArgument(format!(
                "noise grid max {} not a multiple of step {}",
                self.max_centi as f64 / 100.0,
                self.step_centi as f64 / 100.0
            )));
        }
        Ok(())
    }

    /// All sigma values, 0 first, ascending.
    pub fn values(&self) -> Vec<f64> {
        (0..=self.max_centi / self.step_centi)
            .map(|j| (j * self.step_centi) as f64 / 100.0)
            .collect()
    }
}

/// Mean feature similarity of reconstructions per (split point, noise
/// level), plus the fraction of attacks that converged.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivacyLeakageTable {
    pub s_max: usize,
    pub grid: Vec<f64>,
    pub samples_per_cell: usize,
    /// `fsim[s - 1][j]` for split s and grid index j.
    pub fsim: Vec<Vec<f64>>,
    pub converged: Vec<Vec<f64>>,
}

impl PrivacyLeakageTable {
    pub fn cell(&self, s: usize, j: usize) -> f64 {
        self.fsim[s - 1][j]
    }

    /// Leakage at an arbitrary sigma: exact at grid nodes, linear between
    /// them, clamped to the edges outside the grid.
    pub fn fsim_at(&self, s: usize, sigma: f64) -> Result<f64> {
        if s < 1 || s > self.s_max {
            return Err(Error::OutOfRange { what: "split point", got: s, lo: 1, hi: self.s_max });
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::InvalidArgument(format!("sigma {sigma} must be finite and >= 0")));
        }
        let row = &self.fsim[s - 1];
        let last = *self.grid.last().expect("non-empty grid");
        if sigma >= last {
            return Ok(*row.last().expect("non-empty row"));
        }
        let hi = self.grid.iter().position(|&g| g >= sigma).expect("sigma below max");
        if (self.grid[hi] - sigma).abs() < 1e-12 {
            return Ok(row[hi]);
        }
        let lo = hi - 1;
        let t = (sigma - self.grid[lo]) / (self.grid[hi] - self.grid[lo]);
        Ok(row[lo] + t * (row[hi] - row[lo]))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("# privacy-leakage-table v1\n");
        out.push_str(&format!("# s_max {} samples {}\n", self.s_max, self.samples_per_cell));
        out.push_str("s\tsigma\tfsim\tconverged\n");
        for s in 1..=self.s_max {
            for (j, &sigma) in self.grid.iter().enumerate() {
                out.push_str(&format!(
                    "{s}\t{sigma}\t{}\t{}\n",
                    self.fsim[s - 1][j],
                    self.converged[s - 1][j]
                ));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut s_max = None;
        let mut samples = None;
        let mut rows: Vec<(usize, f64, f64, f64)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line == "s\tsigma\tfsim\tconverged" {
                continue;
            }
            if let Some(rest) = line.strip_prefix("# s_max ") {
                let toks: Vec<&str> = rest.split_whitespace().collect();
                if toks.len() == 3 && toks[1] == "samples" {
                    s_max = toks[0].parse().ok();
                    samples = toks[2].parse().ok();
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split('\t').collect();
            if toks.len() != 4 {
                return Err(Error::Parse { what: "privacy table", detail: format!("bad row {line:?}") });
            }
            let parse = |t: &str| -> Result<f64> {
                t.parse().map_err(|_| Error::Parse { what: "privacy table", detail: format!("bad number {t:?}") })
            };
            rows.push((
                toks[0].parse().map_err(|_| Error::Parse { what: "privacy table", detail: format!("bad split {:?}", toks[0]) })?,
                parse(toks[1])?,
                parse(toks[2])?,
                parse(toks[3])?,
            ));
        }
        let (Some(s_max), Some(samples)) = (s_max, samples) else {
            return Err(Error::Parse { what: "privacy table", detail: "missing s_max header".into() });
        };
        if s_max == 0 || rows.len() % s_max != 0 {
            return Err(Error::Parse { what: "privacy table", detail: "row count does not tile s_max".into() });
        }
        let per = rows.len() / s_max;
        let grid: Vec<f64> = rows[..per].iter().map(|r| r.1).collect();
        let mut fsim = vec![Vec::with_capacity(per); s_max];
        let mut converged = vec![Vec::with_capacity(per); s_max];
        for (i, (s, sigma, f, c)) in rows.into_iter().enumerate() {
            let (want_s, want_sigma) = (i / per + 1, grid[i % per]);
            if s != want_s || sigma != want_sigma {
                return Err(Error::Parse {
                    what: "privacy table",
                    detail: format!("row {i} out of order: split {s} sigma {sigma}"),
                });
            }
            fsim[s - 1].push(f);
            converged[s - 1].push(c);
        }
        Ok(PrivacyLeakageTable { s_max, grid, samples_per_cell: samples, fsim, converged })
    }
}

/// One profiled attack: a sample reconstructed from its noisy boundary
/// representation at one (split point, noise level) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconOutcome {
    pub split_point: usize,
    pub sigma: f64,
    pub sample: usize,
    pub label: usize,
    /// Class the reference model assigns to the reconstruction; comparing it
    /// with `label` feeds the identifiability-threshold search.
    pub predicted: usize,
    pub fsim: f64,
    pub converged: bool,
}

/// Reconstructs every sample at every (split, sigma) pair with the client's
/// real prefix weights and scores each recovery. Outcomes are ordered by
/// split, then sample, then noise level. The noise is one unit draw per
/// (split, sample), scaled per level, so the sigma axis is paired.
pub fn probe_reconstructions(
    global: &LayeredModel,
    s_max: usize,
    sigmas: &[f64],
    samples: &[Sample],
    budget: &AttackBudget,
    rng: &RngStream,
) -> Result<Vec<ReconOutcome>> {
    if s_max < 1 || s_max >= global.k() {
        return Err(Error::OutOfRange { what: "s_max", got: s_max, lo: 1, hi: global.k().saturating_sub(1) });
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("privacy profiling needs at least one sample".into()));
    }
    if sigmas.is_empty() || sigmas.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!("bad noise levels {sigmas:?}")));
    }
    let [_, h, w] = samples[0].0.shape[..] else {
        return Err(Error::shape("privacy profiling", "[c, h, w] image samples", format!("{:?}", samples[0].0.shape)));
    };
    let plan = FsimPlan::new(h, w)?;
    let sqrt2 = 2f64.sqrt();
    let mut outcomes = Vec::with_capacity(s_max * samples.len() * sigmas.len());
    for s in 1..=s_max {
        let (prefix, _) = split_model(global, s)?;
        for (i, (x, label)) in samples.iter().enumerate() {
            let z = prefix.infer(&Tensor::stack(&[x])?)?;
            let mut noise_rng = rng.child("unit-noise").child_idx(s as u64).child_idx(i as u64);
            let unit: Vec<f64> = (0..z.numel()).map(|_| noise_rng.laplace(1.0)).collect();
            for &sigma in sigmas {
                let scale = sigma / sqrt2;
                let noisy = Tensor {
                    shape: z.shape.clone(),
                    data: z.data.iter().zip(&unit).map(|(&v, &u)| v + scale * u).collect(),
                };
                let result = unsplit_reconstruct(prefix.clone(), &noisy, budget)?;
                let logits = global.infer(&result.recovered)?;
                let recovered = result.recovered.reshaped(&x.shape)?;
                outcomes.push(ReconOutcome {
                    split_point: s,
                    sigma,
                    sample: i,
                    label: *label,
                    predicted: crate::nn::argmax_row(&logits, 0),
                    fsim: plan.fsim(x, &recovered)?,
                    converged: result.converged,
                });
            }
        }
    }
    Ok(outcomes)
}

/// Builds the leakage table for one model. `samples` are profiling inputs
/// (clean images with labels); every (split, sigma) cell reconstructs each
/// sample from its noisy boundary representation and averages the scores.
/// [`AttackBudget::profiling`] is the calibrated recipe for `budget`.
pub fn build_privacy_leakage_table(
    global: &LayeredModel,
    s_max: usize,
    grid: &NoiseGrid,
    samples: &[Sample],
    budget: &AttackBudget,
    rng: &RngStream,
) -> Result<PrivacyLeakageTable> {
    grid.validate()?;
    let sigmas = grid.values();
    let outcomes = probe_reconstructions(global, s_max, &sigmas, samples, budget, rng)?;
    let mut fsim = vec![vec![0.0; sigmas.len()]; s_max];
    let mut converged = vec![vec![0.0; sigmas.len()]; s_max];
    for (idx, o) in outcomes.iter().enumerate() {
        let j = idx % sigmas.len();
        fsim[o.split_point - 1][j] += o.fsim;
        if o.converged {
            converged[o.split_point - 1][j] += 1.0;
        }
    }
    let n = samples.len() as f64;
    for row in fsim.iter_mut().chain(converged.iter_mut()) {
        for v in row {
            *v /= n;
        }
    }
    Ok(PrivacyLeakageTable {
        s_max,
        grid: sigmas,
        samples_per_cell: samples.len(),
        fsim,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pool, DatasetCfg, DatasetKind};
    use crate::nn::{LayerSpec, ModelSpec};

    #[test]
    fn default_grid_has_51_exact_values() {
        let values = NoiseGrid::default().values();
        assert_eq!(values.len(), 51);
        assert_eq!(values[0], 0.0);
        assert_eq!(values[1], 0.05);
        assert_eq!(values[10], 0.5);
        assert_eq!(*values.last().unwrap(), 2.5);
        assert!(NoiseGrid::from_floats(2.5, 0.05).unwrap() == NoiseGrid::default());
        assert!(NoiseGrid::from_floats(2.5, 0.06).is_err());
        assert!(NoiseGrid::from_floats(2.5, 0.0).is_err());
        assert!(NoiseGrid::from_floats(0.123, 0.1).is_err());
    }

    #[test]
    fn accuracy_floor_is_the_retained_fraction() {
        assert!((compute_a_min(0.9, 0.95).unwrap() - 0.855).abs() < 1e-12);
        assert!((compute_a_min(0.92, 0.95).unwrap() - 0.874).abs() < 1e-12);
        assert!(compute_a_min(0.9, 0.0).is_err());
        assert!(compute_a_min(1.5, 0.9).is_err());
    }

    fn blob_cfg() -> DatasetCfg {
        DatasetCfg { kind: DatasetKind::Blobs, n_class: 3, ..DatasetCfg::default() }
    }

    fn blob_spec() -> ModelSpec {
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
    fn centralized_training_reduces_loss_and_separates_blobs() {
        let root = RngStream::from_seed(7);
        let train = generate_pool(&blob_cfg(), 60, &mut root.child("train")).unwrap();
        let test = generate_pool(&blob_cfg(), 60, &mut root.child("test")).unwrap();
        let mut model = blob_spec().build(&mut root.child("model")).unwrap();
        let cfg = TrainCfg { lr: 0.2, ..TrainCfg::default() };
        let losses = train_centralized(&mut model, &train, 40, &cfg, &root.child("sgd")).unwrap();
        assert!(losses.last().unwrap() < &(losses[0] * 0.5), "{losses:?}");
        let acc = crate::protocol::model_accuracy(&model, &test).unwrap();
        assert!(acc >= 0.9, "accuracy {acc}");
    }

    fn image_model(seed: u64) -> LayeredModel {
        let spec = ModelSpec {
            input_shape: vec![1, 8, 8],
            layers: vec![
                LayerSpec::Conv2dSmall { out_channels: 2, kernel: 3, padding: Some(1) },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense { out: 4 },
            ],
        };
        spec.build(&mut RngStream::from_seed(seed)).unwrap()
    }

    fn image_samples(n: usize) -> Vec<Sample> {
        let cfg = DatasetCfg { per_client: n, ..DatasetCfg::default() };
        generate_pool(&cfg, n, &mut RngStream::from_seed(55)).unwrap()
    }

    fn small_budget() -> AttackBudget {
        AttackBudget { outer_iters: 12, input_steps: 5, ..AttackBudget::profiling() }
    }

    #[test]
    fn leakage_table_is_deterministic_and_round_trips() {
        let build = || {
            build_privacy_leakage_table(
                &image_model(21),
                2,
                &NoiseGrid { max_centi: 100, step_centi: 50 },
                &image_samples(2),
                &small_budget(),
                &RngStream::from_seed(77),
            )
            .unwrap()
        };
        let table = build();
        assert_eq!(table.grid, vec![0.0, 0.5, 1.0]);
        assert_eq!(table.fsim.len(), 2);
        for row in &table.fsim {
            assert_eq!(row.len(), 3);
            assert!(row.iter().all(|f| (0.0..=1.0).contains(f)));
        }
        assert_eq!(table, build());
        let parsed = PrivacyLeakageTable::from_text(&table.to_text()).unwrap();
        assert_eq!(parsed, table);
        assert_eq!(parsed.to_text(), table.to_text());
    }

    #[test]
    fn noise_free_shallow_split_leaks_most() {
        let table = build_privacy_leakage_table(
            &image_model(23),
            2,
            &NoiseGrid { max_centi: 200, step_centi: 200 },
            &image_samples(2),
            &small_budget(),
            &RngStream::from_seed(78),
        )
        .unwrap();
        // Heavy noise hurts reconstruction at every split.
        for s in 1..=2 {
            assert!(table.cell(s, 0) >= table.cell(s, 1), "split {s}: {:?}", table.fsim);
        }
    }

    #[test]
    fn probe_outcomes_tile_the_table_cells() {
        let model = image_model(21);
        let samples = image_samples(2);
        let grid = NoiseGrid { max_centi: 100, step_centi: 100 };
        let rng = RngStream::from_seed(77);
        let outcomes =
            probe_reconstructions(&model, 2, &grid.values(), &samples, &small_budget(), &rng).unwrap();
        assert_eq!(outcomes.len(), 2 * 2 * 2);
        let expect_order: Vec<(usize, usize, f64)> = vec![
            (1, 0, 0.0), (1, 0, 1.0), (1, 1, 0.0), (1, 1, 1.0),
            (2, 0, 0.0), (2, 0, 1.0), (2, 1, 0.0), (2, 1, 1.0),
        ];
        let got: Vec<(usize, usize, f64)> =
            outcomes.iter().map(|o| (o.split_point, o.sample, o.sigma)).collect();
        assert_eq!(got, expect_order);
        assert!(outcomes.iter().all(|o| o.label < 4 && o.predicted < 4));
        // The table is exactly the per-cell mean of the flat outcomes.
        let table = build_privacy_leakage_table(&model, 2, &grid, &samples, &small_budget(), &rng).unwrap();
        for s in 1..=2usize {
            for (j, &sigma) in table.grid.iter().enumerate() {
                let mean = outcomes
                    .iter()
                    .filter(|o| o.split_point == s && o.sigma == sigma)
                    .map(|o| o.fsim)
                    .sum::<f64>()
                    / 2.0;
                assert_eq!(table.cell(s, j), mean);
            }
        }
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_linear_between() {
        let table = PrivacyLeakageTable {
            s_max: 1,
            grid: vec![0.0, 1.0, 2.0],
            samples_per_cell: 1,
            fsim: vec![vec![0.9, 0.5, 0.1]],
            converged: vec![vec![1.0, 1.0, 1.0]],
        };
        assert_eq!(table.fsim_at(1, 0.0).unwrap(), 0.9);
        assert_eq!(table.fsim_at(1, 1.0).unwrap(), 0.5);
        assert!((table.fsim_at(1, 0.5).unwrap() - 0.7).abs() < 1e-12);
        assert!((table.fsim_at(1, 1.75).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(table.fsim_at(1, 5.0).unwrap(), 0.1);
        assert!(table.fsim_at(2, 0.5).is_err());
        assert!(table.fsim_at(1, -0.1).is_err());
    }

    #[test]
    fn table_rejects_malformed_text() {
        let table = PrivacyLeakageTable {
            s_max: 1,
            grid: vec![0.0],
            samples_per_cell: 1,
            fsim: vec![vec![0.5]],
            converged: vec![vec![1.0]],
        };
        let good = table.to_text();
        assert!(PrivacyLeakageTable::from_text(&good.replace("# s_max 1 samples 1\n", "")).is_err());
        assert!(PrivacyLeakageTable::from_text(&good.replace("1\t0\t", "2\t0\t")).is_err());
        assert!(PrivacyLeakageTable::from_text("# s_max 1 samples 1\ns\tsigma\tfsim\tconverged\nnot\ta\trow\n").is_err());
    }

    #[test]
    fn non_image_samples_are_rejected() {
        let model = blob_spec().build(&mut RngStream::from_seed(5)).unwrap();
        let samples = generate_pool(&blob_cfg(), 2, &mut RngStream::from_seed(5)).unwrap();
        let err = build_privacy_leakage_table(
            &model,
            1,
            &NoiseGrid::default(),
            &samples,
            &small_budget(),
            &RngStream::from_seed(1),
        );
        assert!(err.is_err());
    }
}
