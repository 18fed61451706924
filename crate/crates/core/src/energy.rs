//! Synthetic device energy and power model.
//!
//! Real deployments would measure these numbers on hardware; here every
//! quantity is derived from a handful of device coefficients and the model
//! architecture, which keeps runs deterministic and lets tests pin exact
//! values. Per split point s the per-epoch profile is
//!
//!   E_comm(s) = joules/byte * boundary_bytes(s) * batches
//!   E_comp(s) = joules/flop * prefix_flops(s) * batch * batches
//!   E_idle    = idle_watts * awake_idle_seconds
//!   p_peak(s) = base_watts + watts_per_flop * prefix_flops(s)
//!
//! The device follows a sleep-awake duty cycle: a client that is not
//! training emits no events at all, and the idle term only covers awake
//! time around its own turns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelSpec};

/// Bytes per boundary element on the wire (f64).
pub const WIRE_BYTES_PER_ELEM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceParams {
    pub comm_joules_per_byte: f64,
    pub compute_joules_per_flop: f64,
    pub idle_watts: f64,
    /// Awake-but-idle seconds accrued per participated epoch.
    pub awake_idle_s_per_epoch: f64,
    pub base_watts: f64,
    /// Peak-draw slope over per-sample prefix compute.
    pub watts_per_flop: f64,
    pub comm_watts: f64,
    /// Power cap for this device's environment.
    pub p_max: f64,
}

impl Default for DeviceParams {
    fn default() -> Self {
        DeviceParams {
            comm_joules_per_byte: 4e-7,
            compute_joules_per_flop: 2e-9,
            idle_watts: 1.8,
            awake_idle_s_per_epoch: 2.0,
            base_watts: 2.5,
            watts_per_flop: 1e-4,
            comm_watts: 2.0,
            p_max: 12.0,
        }
    }
}

impl DeviceParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("comm_joules_per_byte", self.comm_joules_per_byte),
            ("compute_joules_per_flop", self.compute_joules_per_flop),
            ("idle_watts", self.idle_watts),
            ("base_watts", self.base_watts),
            ("watts_per_flop", self.watts_per_flop),
            ("comm_watts", self.comm_watts),
            ("p_max", self.p_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("device {name} must be positive, got {v}")));
            }
        }
        if self.awake_idle_s_per_epoch < 0.0 {
            return Err(Error::InvalidArgument("negative awake_idle_s_per_epoch".into()));
        }
        Ok(())
    }
}

/// Forward FLOPs of layers 1..=upto for one sample. Dense counts 2*in*out,
/// convolution 2*k*k*c_in*c_out*h_out*w_out, relu and pooling one op per
/// input element, batch-norm two (normalize, scale).
pub fn flops_per_sample(spec: &ModelSpec, upto: usize) -> Result<u64> {
    let shapes = spec.activation_shapes()?;
    if upto > spec.layers.len() {
        return Err(Error::OutOfRange { what: "layer index", got: upto, lo: 0, hi: spec.layers.len() });
    }
    let mut total: u64 = 0;
    for (idx, layer) in spec.layers[..upto].iter().enumerate() {
        let in_elems: u64 = shapes[idx].iter().product::<usize>() as u64;
        let out = &shapes[idx + 1];
        total += match layer {
            LayerSpec::Dense { out } => 2 * in_elems * *out as u64,
            LayerSpec::Relu => in_elems,
            LayerSpec::Conv2dSmall { out_channels, kernel, .. } => {
                let (ho, wo) = (out[1] as u64, out[2] as u64);
                2 * (*kernel as u64).pow(2) * shapes[idx][0] as u64 * *out_channels as u64 * ho * wo
            }
            LayerSpec::MaxPool { .. } => in_elems,
            LayerSpec::BatchNorm => 2 * in_elems,
        };
    }
    Ok(total)
}

/// Bytes crossing the boundary after layer s for one batch.
pub fn boundary_bytes(spec: &ModelSpec, s: usize, batch: usize, bytes_per_elem: usize) -> Result<u64> {
    Ok((spec.boundary_elems(s)? * batch * bytes_per_elem) as u64)
}

/// Per-epoch energy and peak-power table over split points 1..=s_max.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyPowerProfile {
    pub s_max: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub e_comm: Vec<f64>,
    pub e_comp: Vec<f64>,
    pub e_idle: Vec<f64>,
    pub p_peak: Vec<f64>,
    pub p_max: f64,
    pub device: DeviceParams,
}

impl EnergyPowerProfile {
    pub fn e_total(&self, s: usize) -> f64 {
        self.e_comm[s - 1] + self.e_comp[s - 1] + self.e_idle[s - 1]
    }

    pub fn peak(&self, s: usize) -> f64 {
        self.p_peak[s - 1]
    }

    fn check_split(&self, s: usize) -> Result<()> {
        if s < 1 || s > self.s_max {
            return Err(Error::OutOfRange { what: "split point", got: s, lo: 1, hi: self.s_max });
        }
        Ok(())
    }

    /// Tab-separated table with the device coefficients in comment lines.
    /// Floats are written in shortest round-trip form, so parsing the text
    /// back reproduces the profile bit for bit.
    pub fn to_text(&self) -> String {
        let d = &self.device;
        let mut out = String::new();
        out.push_str(&format!("# p_max {}\n", self.p_max));
        out.push_str(&format!(
            "# batch_size {} batches_per_epoch {}\n",
            self.batch_size, self.batches_per_epoch
        ));
        out.push_str(&format!(
            "# device {} {} {} {} {} {} {} {}\n",
            d.comm_joules_per_byte,
            d.compute_joules_per_flop,
            d.idle_watts,
            d.awake_idle_s_per_epoch,
            d.base_watts,
            d.watts_per_flop,
            d.comm_watts,
            d.p_max
        ));
        out.push_str("s\te_comm\te_comp\te_idle\te_total\tp_peak\n");
        for s in 1..=self.s_max {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                s,
                self.e_comm[s - 1],
                self.e_comp[s - 1],
                self.e_idle[s - 1],
                self.e_total(s),
                self.p_peak[s - 1]
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Parse { what: "energy profile", detail };
        let mut p_max = None;
        let mut batch = None;
        let mut device = None;
        let mut rows: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("s\t") {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let mut toks = rest.split_whitespace();
                match toks.next() {
                    Some("p_max") => {
                        p_max = Some(parse_f64(toks.next(), "p_max")?);
                    }
                    Some("batch_size") => {
                        let bs = parse_usize(toks.next(), "batch_size")?;
                        toks.next(); // "batches_per_epoch"
                        batch = Some((bs, parse_usize(toks.next(), "batches_per_epoch")?));
                    }
                    Some("device") => {
                        let mut next = |name| parse_f64(toks.next(), name);
                        device = Some(DeviceParams {
                            comm_joules_per_byte: next("comm_joules_per_byte")?,
                            compute_joules_per_flop: next("compute_joules_per_flop")?,
                            idle_watts: next("idle_watts")?,
                            awake_idle_s_per_epoch: next("awake_idle_s_per_epoch")?,
                            base_watts: next("base_watts")?,
                            watts_per_flop: next("watts_per_flop")?,
                            comm_watts: next("comm_watts")?,
                            p_max: next("p_max")?,
                        });
                    }
                    _ => {} // foreign comment lines are fine
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(bad(format!("expected 6 columns, got {}", cols.len())));
            }
            rows.push((
                parse_usize(Some(cols[0]), "s")?,
                parse_f64(Some(cols[1]), "e_comm")?,
                parse_f64(Some(cols[2]), "e_comp")?,
                parse_f64(Some(cols[3]), "e_idle")?,
                parse_f64(Some(cols[5]), "p_peak")?,
            ));
        }
        let p_max = p_max.ok_or_else(|| bad("missing p_max header".into()))?;
        let (batch_size, batches_per_epoch) =
            batch.ok_or_else(|| bad("missing batch_size header".into()))?;
        let device = device.ok_or_else(|| bad("missing device header".into()))?;
        if rows.is_empty() {
            return Err(bad("no split-point rows".into()));
        }
        for (want, row) in rows.iter().enumerate() {
            if row.0 != want + 1 {
                return Err(bad(format!("row {} out of order (s={})", want + 1, row.0)));
            }
        }
        Ok(EnergyPowerProfile {
            s_max: rows.len(),
            batch_size,
            batches_per_epoch,
            e_comm: rows.iter().map(|r| r.1).collect(),
            e_comp: rows.iter().map(|r| r.2).collect(),
            e_idle: rows.iter().map(|r| r.3).collect(),
            p_peak: rows.iter().map(|r| r.4).collect(),
            p_max,
            device,
        })
    }
}

fn parse_f64(tok: Option<&str>, name: &str) -> Result<f64> {
    tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
        what: "energy profile",
        detail: format!("bad {name} field"),
    })
}

fn parse_usize(tok: Option<&str>, name: &str) -> Result<usize> {
    tok.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
        what: "energy profile",
        detail: format!("bad {name} field"),
    })
}

pub fn build_energy_profile(
    device: &DeviceParams,
    spec: &ModelSpec,
    s_max: usize,
    batch_size: usize,
    batches_per_epoch: usize,
) -> Result<EnergyPowerProfile> {
    device.validate()?;
    if s_max < 1 || s_max >= spec.layers.len() {
        return Err(Error::OutOfRange { what: "s_max", got: s_max, lo: 1, hi: spec.layers.len().saturating_sub(1) });
    }
    if batch_size == 0 || batches_per_epoch == 0 {
        return Err(Error::InvalidArgument("batch_size and batches_per_epoch must be positive".into()));
    }
    let mut e_comm = Vec::with_capacity(s_max);
    let mut e_comp = Vec::with_capacity(s_max);
    let mut e_idle = Vec::with_capacity(s_max);
    let mut p_peak = Vec::with_capacity(s_max);
    for s in 1..=s_max {
        let bytes = boundary_bytes(spec, s, batch_size, WIRE_BYTES_PER_ELEM)? as f64;
        let flops = flops_per_sample(spec, s)? as f64;
        e_comm.push(device.comm_joules_per_byte * bytes * batches_per_epoch as f64);
        e_comp.push(device.compute_joules_per_flop * flops * batch_size as f64 * batches_per_epoch as f64);
        e_idle.push(device.idle_watts * device.awake_idle_s_per_epoch);
        p_peak.push(device.base_watts + device.watts_per_flop * flops);
    }
    // Pooling must shrink the boundary below everything upstream of it;
    // a profile violating that indicates a misconfigured architecture.
    for (idx, layer) in spec.layers[..s_max].iter().enumerate() {
        if matches!(layer, LayerSpec::MaxPool { .. }) {
            let here = e_comm[idx];
            if e_comm[..idx].iter().any(|&earlier| here > earlier + 1e-12) {
                return Err(Error::InvalidArgument(format!(
                    "communication energy rises across the pooling boundary at layer {}",
                    idx + 1
                )));
            }
        }
    }
    Ok(EnergyPowerProfile {
        s_max,
        batch_size,
        batches_per_epoch,
        e_comm,
        e_comp,
        e_idle,
        p_peak,
        p_max: device.p_max,
        device: device.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Comm,
    Compute,
    IdleAwake,
}

/// One accounted slab of energy with the power drawn while it accrued.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEvent {
    pub client_id: usize,
    pub epoch: usize,
    pub kind: EventKind,
    pub joules: f64,
    pub watts: f64,
}

/// Events for one training turn covering `batches` batches. Communication
/// scales with the actual bytes sent; compute and awake-idle are prorated
/// from the per-epoch profile. Zero batches means the device slept: no events.
pub fn account_turn_energy(
    profile: &EnergyPowerProfile,
    client_id: usize,
    epoch: usize,
    s: usize,
    bytes_per_batch: u64,
    batches: usize,
) -> Result<Vec<EnergyEvent>> {
    profile.check_split(s)?;
    if batches == 0 {
        return Ok(Vec::new());
    }
    let d = &profile.device;
    let frac = batches as f64 / profile.batches_per_epoch as f64;
    Ok(vec![
        EnergyEvent {
            client_id,
            epoch,
            kind: EventKind::Comm,
            joules: d.comm_joules_per_byte * bytes_per_batch as f64 * batches as f64,
            watts: d.comm_watts.min(profile.peak(s)),
        },
        EnergyEvent {
            client_id,
            epoch,
            kind: EventKind::Compute,
            joules: profile.e_comp[s - 1] * frac,
            watts: profile.peak(s),
        },
        EnergyEvent {
            client_id,
            epoch,
            kind: EventKind::IdleAwake,
            joules: profile.e_idle[s - 1] * frac,
            watts: d.idle_watts,
        },
    ])
}
