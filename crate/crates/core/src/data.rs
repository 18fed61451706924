//! Synthetic classification datasets.
//!
//! Three families cover the scales the simulator needs: isotropic Gaussian
//! blobs and interleaved spirals for fast planar sanity checks, and small
//! single-channel template images (bars, crosses, checkers and friends plus
//! per-pixel Gaussian noise) for anything that feeds the image-reconstruction
//! attack. Clients receive disjoint slices of one generated pool; the `iid`
//! flag switches between label-balanced dealing and contiguous label shards.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// One labelled sample.
pub type Sample = (Tensor, usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    TwoSpirals,
    MiniImages,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetCfg {
    pub kind: DatasetKind,
    pub n_class: usize,
    /// Samples per client.
    pub per_client: usize,
    /// Held-out test samples (label-balanced).
    pub test: usize,
    pub iid: bool,
    /// Image side length for mini-images; ignored by the planar kinds.
    pub image_size: usize,
    /// Per-pixel Gaussian noise for mini-images.
    pub pixel_noise: f64,
}

impl Default for DatasetCfg {
    fn default() -> Self {
        DatasetCfg {
            kind: DatasetKind::MiniImages,
            n_class: 4,
            per_client: 48,
            test: 96,
            iid: true,
            image_size: 8,
            pixel_noise: 0.1,
        }
    }
}

/// Disjoint per-client training sets plus a shared test set.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub clients: Vec<Vec<Sample>>,
    pub test: Vec<Sample>,
}

/// Per-sample tensor shape for a dataset config.
pub fn sample_shape(cfg: &DatasetCfg) -> Vec<usize> {
    match cfg.kind {
        DatasetKind::Blobs | DatasetKind::TwoSpirals => vec![2],
        DatasetKind::MiniImages => vec![1, cfg.image_size, cfg.image_size],
    }
}

const TEMPLATE_COUNT: usize = 8;

fn validate(cfg: &DatasetCfg) -> Result<()> {
    if cfg.n_class < 2 {
        return Err(Error::InvalidArgument(format!("n_class {} < 2", cfg.n_class)));
    }
    if cfg.kind == DatasetKind::MiniImages {
        if cfg.n_class > TEMPLATE_COUNT {
            return Err(Error::InvalidArgument(format!(
                "mini-images has {TEMPLATE_COUNT} templates, cannot label {} classes",
                cfg.n_class
            )));
        }
        if cfg.image_size < 8 {
            return Err(Error::InvalidArgument(format!(
                "image_size {} < 8",
                cfg.image_size
            )));
        }
        if cfg.pixel_noise < 0.0 {
            return Err(Error::InvalidArgument("negative pixel_noise".into()));
        }
    }
    Ok(())
}

/// Draws one sample of the given class.
fn draw(cfg: &DatasetCfg, class: usize, rng: &mut RngStream) -> Sample {
    let x = match cfg.kind {
        DatasetKind::Blobs => {
            // Class centers sit on a circle; spread keeps classes separable.
            let angle = 2.0 * PI * class as f64 / cfg.n_class as f64;
            let (cx, cy) = (2.5 * angle.cos(), 2.5 * angle.sin());
            Tensor::from_vec(&[2], vec![cx + 0.5 * rng.gaussian(), cy + 0.5 * rng.gaussian()])
                .expect("fixed shape")
        }
        DatasetKind::TwoSpirals => {
            // One interleaved arm per class, radius growing along the arm.
            let t = rng.uniform_in(0.25, 1.0);
            let theta = 3.5 * PI * t + 2.0 * PI * class as f64 / cfg.n_class as f64;
            let r = 2.0 * t;
            Tensor::from_vec(
                &[2],
                vec![
                    r * theta.cos() + 0.05 * rng.gaussian(),
                    r * theta.sin() + 0.05 * rng.gaussian(),
                ],
            )
            .expect("fixed shape")
        }
        DatasetKind::MiniImages => {
            let g = cfg.image_size;
            let mut data = vec![0.0; g * g];
            for r in 0..g {
                for c in 0..g {
                    let on = template_pixel(class, r, c, g);
                    let v = if on { 1.0 } else { 0.0 } + cfg.pixel_noise * rng.gaussian();
                    data[r * g + c] = v.clamp(0.0, 1.0);
                }
            }
            Tensor::from_vec(&[1, g, g], data).expect("fixed shape")
        }
    };
    (x, class)
}

/// Which pixels each class template lights up.
fn template_pixel(class: usize, r: usize, c: usize, g: usize) -> bool {
    let mid = g / 2;
    match class % TEMPLATE_COUNT {
        0 => (r / 2) % 2 == 0,                                   // horizontal bars
        1 => (c / 2) % 2 == 0,                                   // vertical bars
        2 => (r / 2 + c / 2) % 2 == 0,                           // checkerboard
        3 => (r == mid || r + 1 == mid) || (c == mid || c + 1 == mid), // plus
        4 => r.abs_diff(c) <= 1,                                 // main diagonal
        5 => r == 0 || c == 0 || r == g - 1 || c == g - 1,       // frame
        6 => (g / 4..g - g / 4).contains(&r) && (g / 4..g - g / 4).contains(&c), // block
        _ => r.abs_diff(c) <= 1 || (r + c).abs_diff(g - 1) <= 1, // X
    }
}

/// The noise-free class template as a `[1, size, size]` image. Useful as a
/// ground-truth reference when scoring reconstructions.
pub fn template_image(class: usize, size: usize) -> Tensor {
    let mut data = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            data[r * size + c] = if template_pixel(class, r, c, size) { 1.0 } else { 0.0 };
        }
    }
    Tensor::from_vec(&[1, size, size], data).expect("fixed shape")
}

/// A label-balanced pool of n samples (class i gets the i-th slot mod n_class).
pub fn generate_pool(cfg: &DatasetCfg, n: usize, rng: &mut RngStream) -> Result<Vec<Sample>> {
    validate(cfg)?;
    Ok((0..n).map(|i| draw(cfg, i % cfg.n_class, rng)).collect())
}

/// Splits pool indices into disjoint per-client sets.
///
/// `iid` deals each class round-robin so every client sees a near-uniform
/// label histogram; otherwise the pool is sorted by label and cut into
/// contiguous shards, which concentrates classes per client.
pub fn partition_pool(
    labels: &[usize],
    n_clients: usize,
    iid: bool,
) -> Result<Vec<Vec<usize>>> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("partition into zero clients".into()));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let mut parts = vec![Vec::new(); n_clients];
    if iid {
        for (pos, idx) in order.into_iter().enumerate() {
            parts[pos % n_clients].push(idx);
        }
    } else {
        let per = labels.len() / n_clients;
        for (ci, chunk) in order.chunks(per.max(1)).enumerate() {
            parts[ci.min(n_clients - 1)].extend_from_slice(chunk);
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Full dataset construction: one pool, disjoint client slices, a separate
/// balanced test set. Deterministic in (cfg, rng seed).
pub fn make_synthetic_dataset(
    cfg: &DatasetCfg,
    n_clients: usize,
    rng: &RngStream,
) -> Result<SyntheticData> {
    validate(cfg)?;
    if n_clients == 0 {
        return Err(Error::InvalidArgument("zero clients".into()));
    }
    let pool = generate_pool(cfg, cfg.per_client * n_clients, &mut rng.child("pool"))?;
    let labels: Vec<usize> = pool.iter().map(|(_, y)| *y).collect();
    let parts = partition_pool(&labels, n_clients, cfg.iid)?;
    let clients = parts
        .into_iter()
        .map(|idxs| idxs.into_iter().map(|i| pool[i].clone()).collect())
        .collect();
    let test = generate_pool(cfg, cfg.test, &mut rng.child("test"))?;
    Ok(SyntheticData { clients, test })
}
