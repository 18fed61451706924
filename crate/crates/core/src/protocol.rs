//! Sequential split-learning protocol.
//!
//! Each client owns the first `s_i` layers of the shared architecture and a
//! private noise level. A training turn runs the client prefix forward,
//! perturbs the boundary activation, and hands only (representation, labels)
//! to the server, which completes the forward pass, takes one SGD step on its
//! suffix, and returns the boundary gradient. Raw inputs never cross the
//! boundary: [`BoundaryMessage`] is the entire client-to-server interface.
//!
//! The server holds one global model. Between aggregations it materializes a
//! lazy copy of layers s+1..=s_max per distinct split point (clients cutting
//! at the same depth share one), while layers above s_max are trained in the
//! global model directly. Aggregation averages every client prefix, filled up
//! to s_max from that client's server-side view, back into the global model
//! and drops the copies. The aggregated model is not pushed back to clients;
//! they keep personalizing their own prefixes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::energy::{account_turn_energy, EnergyPowerProfile, WIRE_BYTES_PER_ELEM};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, GradientPacket, Layer, LayeredModel, Phase};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    Laplace,
    Gaussian,
}

/// Adds zero-mean noise of variance sigma^2 per element. The default family
/// is Laplace, so the scale parameter is sigma / sqrt(2). Sigma 0 returns the
/// input unchanged without consuming randomness.
pub fn inject_noise(
    z: &Tensor,
    sigma: f64,
    family: NoiseFamily,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(z.clone());
    }
    let data = match family {
        NoiseFamily::Laplace => {
            let scale = sigma / 2f64.sqrt();
            z.data.iter().map(|&v| v + rng.laplace(scale)).collect()
        }
        NoiseFamily::Gaussian => z.data.iter().map(|&v| v + sigma * rng.gaussian()).collect(),
    };
    Ok(Tensor { shape: z.shape.clone(), data })
}

/// Everything a client reveals per turn.
#[derive(Clone, Debug)]
pub struct BoundaryMessage {
    /// Noise-injected activation at the cut, `[batch, ...]`.
    pub representation: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub split_point: usize,
    pub noise_sigma: f64,
    /// Privacy-vs-energy preference used by the split-point optimizer.
    pub alpha: f64,
    pub prefix: LayeredModel,
    pub dataset: Vec<Sample>,
    pub profile: EnergyPowerProfile,
}

#[derive(Clone, Debug)]
pub struct ServerState {
    global: LayeredModel,
    s_max: usize,
    aggregate_every: usize,
    /// Per-split working copies of global layers s+1..=s_max, created on
    /// first use after each aggregation.
    shadows: BTreeMap<usize, Vec<Layer>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AggregateOutcome {
    Applied,
    /// Nothing to average; the global model is untouched.
    SkippedEmpty,
}

/// Per-turn costs the simulator tracks.
#[derive(Clone, Debug)]
pub struct TurnMetrics {
    pub loss: f64,
    pub boundary_bytes: u64,
    pub batch_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainCfg {
    pub lr: f64,
    pub l2_lambda: f64,
    pub batch_size: usize,
    pub noise_family: NoiseFamily,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            lr: 0.05,
            l2_lambda: 0.0,
            batch_size: 8,
            noise_family: NoiseFamily::Laplace,
        }
    }
}

impl ServerState {
    pub fn new(global: LayeredModel, s_max: usize, aggregate_every: usize) -> Result<Self> {
        let k = global.k();
        if s_max < 1 || s_max >= k {
            return Err(Error::OutOfRange { what: "s_max", got: s_max, lo: 1, hi: k.saturating_sub(1) });
        }
        if aggregate_every == 0 {
            return Err(Error::InvalidArgument("aggregate_every must be >= 1".into()));
        }
        Ok(ServerState {
            global,
            s_max,
            aggregate_every,
            shadows: BTreeMap::new(),
        })
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    pub fn aggregate_every(&self) -> usize {
        self.aggregate_every
    }

    pub fn global(&self) -> &LayeredModel {
        &self.global
    }

    /// Server-side layers for split point s, without materializing a shadow:
    /// the shadow if one exists, otherwise the global layers.
    fn suffix_layers(&self, s: usize) -> Result<Vec<Layer>> {
        self.check_split(s)?;
        let mut layers: Vec<Layer> = match self.shadows.get(&s) {
            Some(shadow) => shadow.clone(),
            None => self.global.layers[s..self.s_max].to_vec(),
        };
        layers.extend_from_slice(&self.global.layers[self.s_max..]);
        Ok(layers)
    }

    /// Read-only suffix model for split point s (layers s+1..=k).
    pub fn suffix_model(&self, s: usize) -> Result<LayeredModel> {
        Ok(LayeredModel {
            input_shape: self.global.shape_after(s)?,
            layers: self.suffix_layers(s)?,
        })
    }

    /// Fill-in layers s+1..=s_max used when aggregating a client that cuts
    /// above s: its cohort's current server-side view of those layers.
    fn fill_layers(&self, s: usize) -> Result<Vec<Layer>> {
        self.check_split(s)?;
        Ok(match self.shadows.get(&s) {
            Some(shadow) => shadow.clone(),
            None => self.global.layers[s..self.s_max].to_vec(),
        })
    }

    fn check_split(&self, s: usize) -> Result<()> {
        if s < 1 || s > self.s_max {
            return Err(Error::OutOfRange { what: "split point", got: s, lo: 1, hi: self.s_max });
        }
        Ok(())
    }

    /// One server step for a client turn: forward the suffix on the received
    /// representation, update the suffix in place, and return the boundary
    /// gradient with the loss. This is the only training entry point and it
    /// sees nothing but the [`BoundaryMessage`].
    pub fn server_turn(&mut self, s: usize, msg: &BoundaryMessage, cfg: &TrainCfg) -> Result<GradientPacket> {
        let mut suffix = self.suffix_model(s)?;
        let (logits, tape) = suffix.forward(&msg.representation, Phase::Train, true)?;
        let tape = tape.expect("tape requested");
        let (loss, dlogits) = softmax_cross_entropy(&logits, &msg.labels)?;
        let mut packet = suffix.backward(&tape, &dlogits)?;
        suffix.sgd_step(&packet, cfg.lr, cfg.l2_lambda)?;
        self.store_suffix(s, suffix)?;
        packet.loss_value = loss;
        packet.param_grads.clear(); // the client only ever sees the boundary gradient
        Ok(packet)
    }

    /// Writes a trained suffix back: layers below s_max into the split's
    /// shadow, layers above into the shared global tail.
    fn store_suffix(&mut self, s: usize, suffix: LayeredModel) -> Result<()> {
        let shadow_len = self.s_max - s;
        if suffix.k() != self.global.k() - s {
            return Err(Error::State("suffix layer count drifted".into()));
        }
        let mut layers = suffix.layers;
        let tail = layers.split_off(shadow_len);
        self.shadows.insert(s, layers);
        self.global.layers.truncate(self.s_max);
        self.global.layers.extend(tail);
        Ok(())
    }
}

/// One full client turn over one batch.
pub fn client_turn(
    client: &mut ClientState,
    server: &mut ServerState,
    batch: &[Sample],
    cfg: &TrainCfg,
    rng: &mut RngStream,
) -> Result<TurnMetrics> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let xs: Vec<&Tensor> = batch.iter().map(|(x, _)| x).collect();
    let labels: Vec<usize> = batch.iter().map(|(_, y)| *y).collect();
    let x = Tensor::stack(&xs)?;
    let (z, tape) = client.prefix.forward(&x, Phase::Train, true)?;
    let tape = tape.expect("tape requested");
    let boundary_bytes = (z.numel() * WIRE_BYTES_PER_ELEM) as u64;
    let msg = BoundaryMessage {
        representation: inject_noise(&z, client.noise_sigma, cfg.noise_family, rng)?,
        labels,
    };
    let server_packet = server.server_turn(client.split_point, &msg, cfg)?;
    // The perturbation is additive, so the gradient at the clean activation
    // equals the gradient at the noisy one.
    let client_packet = client.prefix.backward(&tape, &server_packet.boundary_grad)?;
    client.prefix.sgd_step(&client_packet, cfg.lr, cfg.l2_lambda)?;
    Ok(TurnMetrics {
        loss: server_packet.loss_value,
        boundary_bytes,
        batch_len: batch.len(),
    })
}

/// Averages client prefixes into the global model's first s_max layers.
/// Clients cutting above s_max contribute their cohort's server-side view of
/// the missing layers. Layers above s_max stay as they are. Summation runs in
/// the order clients are given.
pub fn aggregate(server: &mut ServerState, clients: &[&ClientState]) -> Result<AggregateOutcome> {
    if clients.is_empty() {
        return Ok(AggregateOutcome::SkippedEmpty);
    }
    let s_max = server.s_max;
    // Materialize each filled prefix first so a validation error cannot
    // leave the global model half-written.
    let mut filled: Vec<Vec<Layer>> = Vec::with_capacity(clients.len());
    for c in clients {
        server.check_split(c.split_point)?;
        if c.prefix.k() != c.split_point {
            return Err(Error::State(format!(
                "client {} prefix has {} layers but split point {}",
                c.id,
                c.prefix.k(),
                c.split_point
            )));
        }
        let mut stack = c.prefix.layers.clone();
        stack.extend(server.fill_layers(c.split_point)?);
        for (layer, global_layer) in stack.iter().zip(&server.global.layers) {
            check_same_arch(layer, global_layer)?;
        }
        filled.push(stack);
    }
    let n = clients.len() as f64;
    let mut mean = filled[0].clone();
    for stack in &filled[1..] {
        for (acc, layer) in mean.iter_mut().zip(stack) {
            for (a, t) in acc.state_mut().into_iter().zip(layer.state()) {
                for (av, tv) in a.data.iter_mut().zip(&t.data) {
                    *av += tv;
                }
            }
        }
    }
    for layer in &mut mean {
        for t in layer.state_mut() {
            for v in &mut t.data {
                *v /= n;
            }
        }
    }
    server.global.layers.splice(..s_max, mean);
    server.shadows.clear();
    Ok(AggregateOutcome::Applied)
}

fn check_same_arch(a: &Layer, b: &Layer) -> Result<()> {
    let same = match (a, b) {
        (Layer::Dense { weight: wa, .. }, Layer::Dense { weight: wb, .. }) => wa.shape == wb.shape,
        (Layer::Relu, Layer::Relu) => true,
        (Layer::Conv2d { weight: wa, padding: pa, .. }, Layer::Conv2d { weight: wb, padding: pb, .. }) => {
            wa.shape == wb.shape && pa == pb
        }
        (Layer::MaxPool { size: sa }, Layer::MaxPool { size: sb }) => sa == sb,
        (Layer::BatchNorm { gamma: ga, .. }, Layer::BatchNorm { gamma: gb, .. }) => ga.shape == gb.shape,
        _ => false,
    };
    if same {
        Ok(())
    } else {
        Err(Error::shape("aggregate", "matching layer architecture", "diverged client layer"))
    }
}

/// Composite model for evaluation: the average client prefix (same fill-in
/// rule as aggregation) glued to the global tail. With no clients the global
/// model itself is evaluated.
pub fn evaluation_model(server: &ServerState, clients: &[&ClientState]) -> Result<LayeredModel> {
    if clients.is_empty() {
        return Ok(server.global.clone());
    }
    let mut probe = ServerState {
        global: server.global.clone(),
        s_max: server.s_max,
        aggregate_every: server.aggregate_every,
        shadows: server.shadows.clone(),
    };
    aggregate(&mut probe, clients)?;
    Ok(probe.global)
}

/// Accuracy of the evaluation composite on a sample set, batch-norm frozen.
pub fn evaluate_global(server: &ServerState, clients: &[&ClientState], test: &[Sample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let model = evaluation_model(server, clients)?;
    model_accuracy(&model, test)
}

/// Accuracy of one model over a sample set, evaluated in batches.
pub fn model_accuracy(model: &LayeredModel, samples: &[Sample]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let xs: Vec<&Tensor> = chunk.iter().map(|(x, _)| x).collect();
        let logits = model.infer(&Tensor::stack(&xs)?)?;
        for (bi, (_, y)) in chunk.iter().enumerate() {
            if crate::nn::argmax_row(&logits, bi) == *y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

// ---- attendance schedules ---------------------------------------------------

/// Which clients participate in which epochs. Windows are inclusive epoch
/// ranges listing the clients present; epochs covered by no window default to
/// full attendance. A window may list no clients, meaning nobody trains.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AttendanceSchedule {
    pub windows: Vec<AttendanceWindow>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttendanceWindow {
    pub from_epoch: usize,
    pub to_epoch: usize,
    pub client_ids: Vec<usize>,
}

impl AttendanceSchedule {
    /// Parses the line format `epoch_start epoch_end client_ids...`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut windows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < 2 {
                return Err(Error::Parse {
                    what: "attendance schedule",
                    detail: format!("line {}: need at least epoch_start epoch_end", ln + 1),
                });
            }
            let parse = |t: &str| -> Result<usize> {
                t.parse().map_err(|_| Error::Parse {
                    what: "attendance schedule",
                    detail: format!("line {}: bad number {t:?}", ln + 1),
                })
            };
            let from_epoch = parse(toks[0])?;
            let to_epoch = parse(toks[1])?;
            if from_epoch == 0 || to_epoch < from_epoch {
                return Err(Error::Parse {
                    what: "attendance schedule",
                    detail: format!("line {}: invalid range {from_epoch}..{to_epoch}", ln + 1),
                });
            }
            let client_ids = toks[2..].iter().map(|t| parse(t)).collect::<Result<_>>()?;
            windows.push(AttendanceWindow { from_epoch, to_epoch, client_ids });
        }
        Ok(AttendanceSchedule { windows })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for w in &self.windows {
            out.push_str(&format!("{} {}", w.from_epoch, w.to_epoch));
            for id in &w.client_ids {
                out.push_str(&format!(" {id}"));
            }
            out.push('\n');
        }
        out
    }

    /// Present client ids at an epoch; None means "everyone" (no window).
    pub fn present(&self, epoch: usize) -> Option<BTreeSet<usize>> {
        let mut covered = false;
        let mut ids = BTreeSet::new();
        for w in &self.windows {
            if (w.from_epoch..=w.to_epoch).contains(&epoch) {
                covered = true;
                ids.extend(w.client_ids.iter().copied());
            }
        }
        covered.then_some(ids)
    }

    /// Every id referenced anywhere in the schedule.
    pub fn all_ids(&self) -> BTreeSet<usize> {
        self.windows.iter().flat_map(|w| w.client_ids.iter().copied()).collect()
    }
}

// ---- training campaign ------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEpochReport {
    pub id: usize,
    pub present: bool,
    pub mean_loss: f64,
    pub comm_j: f64,
    pub comp_j: f64,
    pub idle_j: f64,
    pub peak_w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub accuracy: f64,
    pub aggregated: bool,
    pub clients: Vec<ClientEpochReport>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }

    /// One JSON object per line, in epoch order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut epochs = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("{\"tool_version\"") {
                continue;
            }
            epochs.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                what: "training record",
                detail: e.to_string(),
            })?);
        }
        Ok(TrainingRecord { epochs })
    }
}

/// Runs a sequential split-learning campaign.
///
/// Per epoch, present clients take their turns in ascending id order, each
/// covering its whole local dataset in shuffled batches. Global accuracy is
/// measured after every epoch, and every `aggregate_every`-th epoch ends with
/// an aggregation. Absent clients sleep: no turns, no energy events.
pub fn run_training(
    clients: &mut [ClientState],
    server: &mut ServerState,
    schedule: Option<&AttendanceSchedule>,
    epochs: usize,
    test: &[Sample],
    cfg: &TrainCfg,
    rng: &RngStream,
) -> Result<TrainingRecord> {
    validate_roster(clients, server, schedule)?;
    let mut order: Vec<usize> = (0..clients.len()).collect();
    order.sort_by_key(|&i| clients[i].id);

    let mut record = TrainingRecord::default();
    for epoch in 1..=epochs {
        let present = schedule.and_then(|s| s.present(epoch));
        let mut reports = Vec::with_capacity(clients.len());
        for &ci in &order {
            let is_present = present.as_ref().map_or(true, |p| p.contains(&clients[ci].id));
            let client = &mut clients[ci];
            let mut report = ClientEpochReport {
                id: client.id,
                present: is_present,
                mean_loss: 0.0,
                comm_j: 0.0,
                comp_j: 0.0,
                idle_j: 0.0,
                peak_w: 0.0,
            };
            if is_present && !client.dataset.is_empty() {
                let mut idxs: Vec<usize> = (0..client.dataset.len()).collect();
                rng.child("shuffle")
                    .child_idx(epoch as u64)
                    .child_idx(client.id as u64)
                    .shuffle(&mut idxs);
                let mut noise_rng = rng
                    .child("noise")
                    .child_idx(epoch as u64)
                    .child_idx(client.id as u64);
                let mut losses = 0.0;
                let mut turns = 0usize;
                for chunk in idxs.chunks(cfg.batch_size) {
                    let batch: Vec<Sample> =
                        chunk.iter().map(|&i| client.dataset[i].clone()).collect();
                    let metrics = client_turn(client, server, &batch, cfg, &mut noise_rng)?;
                    let events = account_turn_energy(
                        &client.profile,
                        client.id,
                        epoch,
                        client.split_point,
                        metrics.boundary_bytes,
                        1,
                    )?;
                    for ev in events {
                        match ev.kind {
                            crate::energy::EventKind::Comm => report.comm_j += ev.joules,
                            crate::energy::EventKind::Compute => report.comp_j += ev.joules,
                            crate::energy::EventKind::IdleAwake => report.idle_j += ev.joules,
                        }
                        report.peak_w = report.peak_w.max(ev.watts);
                    }
                    losses += metrics.loss;
                    turns += 1;
                }
                report.mean_loss = losses / turns.max(1) as f64;
            }
            reports.push(report);
        }
        let refs: Vec<&ClientState> = order.iter().map(|&i| &clients[i]).collect();
        let accuracy = evaluate_global(server, &refs, test)?;
        let aggregated = epoch % server.aggregate_every == 0 && {
            aggregate(server, &refs)? == AggregateOutcome::Applied
        };
        record.epochs.push(EpochRecord { epoch, accuracy, aggregated, clients: reports });
    }
    Ok(record)
}

fn validate_roster(
    clients: &[ClientState],
    server: &ServerState,
    schedule: Option<&AttendanceSchedule>,
) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("empty client roster".into()));
    }
    let mut ids = BTreeSet::new();
    for c in clients {
        if !ids.insert(c.id) {
            return Err(Error::InvalidArgument(format!("duplicate client id {}", c.id)));
        }
        server.check_split(c.split_point)?;
        if !(c.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("client {} has negative sigma", c.id)));
        }
        if !(0.0..=1.0).contains(&c.alpha) {
            return Err(Error::InvalidArgument(format!("client {} alpha outside [0,1]", c.id)));
        }
    }
    if let Some(schedule) = schedule {
        for id in schedule.all_ids() {
            if !ids.contains(&id) {
                return Err(Error::InvalidArgument(format!(
                    "schedule references unknown client id {id}"
                )));
            }
        }
    }
    Ok(())
}
