//! Desk-scale datasets: a synthetic separable image generator, Gaussian
//! label-popularity user distributions for non-IID simulation, user
//! partitioning with disjoint splits, and IDX-format persistence.

pub mod idx;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A labelled image batch. Images are `[N, C, H, W]` with values in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::data(format!(
                "images must be [N, C, H, W], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::data(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::data(
                "dataset must hold at least one sample".to_string(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single sample, `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copies sample `i` into its own `[C, H, W]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.sample_shape();
        let stride = c * h * w;
        let data = self.images.data()[i * stride..(i + 1) * stride].to_vec();
        Tensor::new(vec![c, h, w], data).expect("sample slice")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::data("empty subset".to_string()));
        }
        let [c, h, w] = self.sample_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        Ok(Self {
            images: Tensor::new(vec![indices.len(), c, h, w], data)?,
            labels,
            num_classes: self.num_classes,
        })
    }

    /// Per-class sample indices.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            pools[l].push(i);
        }
        pools
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.num_classes];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }
}

/// Parameters of the synthetic "bars on a ring" image generator.
///
/// Class c places a horizontal bar at ring position `(c * position_stride)
/// mod K` of K equally spaced positions. Telling all K positions apart needs
/// fine localisation (deep features), while the stride scatters neighbouring
/// class *indices* far apart on the ring, so a user distribution that is
/// concentrated in class-index space sees spatially well-separated classes.
/// A distractor bar and pixel noise add difficulty for shallow classifiers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobParams {
    pub height: usize,
    pub width: usize,
    /// Bar length scale (Gaussian sigma along the bar).
    pub sigma_along: f64,
    /// Bar thickness scale.
    pub sigma_perp: f64,
    /// Ring radius as a fraction of the smaller image side.
    pub ring_frac: f64,
    /// Class-index to ring-position stride; must be coprime with the class
    /// count so the mapping stays a bijection.
    pub position_stride: usize,
    /// Max per-axis centre jitter in pixels (uniform, continuous).
    pub jitter: f64,
    /// Additive pixel noise standard deviation.
    pub noise_std: f64,
    /// Relative amplitude of the distractor bar (0 disables it).
    pub distractor_amp: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            height: 28,
            width: 28,
            sigma_along: 3.2,
            sigma_perp: 1.15,
            ring_frac: 0.30,
            position_stride: 3,
            jitter: 2.7,
            noise_std: 0.28,
            distractor_amp: 0.55,
        }
    }
}

/// Generates `n` synthetic samples over `k` classes; deterministic per seed.
pub fn gen_blobs(k: usize, n: usize, params: &BlobParams, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::data("need at least two classes".to_string()));
    }
    if n == 0 {
        return Err(Error::data("need at least one sample".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (params.height, params.width);
    let mut data = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        labels.push(label);
        render_sample(label, k, params, &mut rng, &mut data);
    }
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, k)
}

fn render_sample(
    label: usize,
    k: usize,
    params: &BlobParams,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<f32>,
) {
    let (h, w) = (params.height, params.width);
    let pos = (label * params.position_stride) % k;

    let ring = params.ring_frac * h.min(w) as f64;
    let theta = 2.0 * std::f64::consts::PI * pos as f64 / k as f64;
    let jitter = params.jitter;
    let cy = h as f64 / 2.0 + ring * theta.sin() + rng.gen_range(-jitter..=jitter);
    let cx = w as f64 / 2.0 + ring * theta.cos() + rng.gen_range(-jitter..=jitter);
    let amp = rng.gen_range(0.7..1.0);
    let phi = 0.0;

    // Optional distractor bar with random position and orientation.
    let distractor = (params.distractor_amp > 0.0).then(|| {
        let dy = rng.gen_range(0.2 * h as f64..0.8 * h as f64);
        let dx = rng.gen_range(0.2 * w as f64..0.8 * w as f64);
        let dphi = if rng.gen::<bool>() {
            0.0
        } else {
            std::f64::consts::FRAC_PI_2
        };
        (dy, dx, dphi, amp * params.distractor_amp)
    });

    let bar = |y: f64, x: f64, by: f64, bx: f64, bphi: f64, bamp: f64| -> f64 {
        let dy = y - by;
        let dx = x - bx;
        let along = dx * bphi.cos() + dy * bphi.sin();
        let perp = -dx * bphi.sin() + dy * bphi.cos();
        bamp * (-(along * along) / (2.0 * params.sigma_along * params.sigma_along)
            - (perp * perp) / (2.0 * params.sigma_perp * params.sigma_perp))
            .exp()
    };

    for y in 0..h {
        for x in 0..w {
            let mut v = bar(y as f64, x as f64, cy, cx, phi, amp);
            if let Some((dy, dx, dphi, damp)) = distractor {
                v += bar(y as f64, x as f64, dy, dx, dphi, damp);
            }
            v += params.noise_std * sample_normal(rng);
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-user class-popularity profile: probabilities proportional to a
/// Gaussian over circular class-index distance from a centre class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserDistribution {
    pub probs: Vec<f64>,
    pub center: usize,
    pub sigma: f64,
}

impl UserDistribution {
    /// Gaussian popularity around `center` with spread `sigma`, normalised
    /// over `k` classes. Distance is circular, so edge classes carry no bias.
    pub fn gaussian(k: usize, center: usize, sigma: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::config("need at least two classes".to_string()));
        }
        if center >= k {
            return Err(Error::config(format!("center class {center} out of range")));
        }
        if !(sigma > 0.0) {
            return Err(Error::config(format!("sigma must be > 0, got {sigma}")));
        }
        let mut probs: Vec<f64> = (0..k)
            .map(|c| {
                let raw = (c as i64 - center as i64).unsigned_abs() as usize;
                let d = raw.min(k - raw) as f64;
                (-(d * d) / (2.0 * sigma * sigma)).exp()
            })
            .collect();
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
        Ok(Self {
            probs,
            center,
            sigma,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Draws one class index by inverse-CDF sampling.
    pub fn sample_class(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (c, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return c;
            }
        }
        self.probs.len() - 1
    }
}

/// Draws a user distribution with a uniformly random centre class.
pub fn gen_user_distribution(k: usize, sigma: f64, seed: u64) -> Result<UserDistribution> {
    if k < 2 {
        return Err(Error::config("need at least two classes".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = rng.gen_range(0..k);
    UserDistribution::gaussian(k, center, sigma)
}

/// Samples `n` images whose class frequencies follow `dist`
/// (with-replacement: first a class, then an image of that class).
pub fn sample_user_dataset(
    global: &Dataset,
    dist: &UserDistribution,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::data("need at least one sample".to_string()));
    }
    if dist.num_classes() != global.num_classes {
        return Err(Error::data(format!(
            "distribution over {} classes but dataset has {}",
            dist.num_classes(),
            global.num_classes
        )));
    }
    let pools = global.class_pools();
    for (c, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 && pools[c].is_empty() {
            return Err(Error::data(format!(
                "class {c} has probability {p:.3e} but no samples in the global dataset"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(n);
    for _ in 0..n {
        let c = dist.sample_class(&mut rng);
        let pool = &pools[c];
        indices.push(pool[rng.gen_range(0..pool.len())]);
    }
    global.subset(&indices)
}

/// One simulated user: their popularity profile and disjoint train/test data.
#[derive(Debug, Clone)]
pub struct UserSplit {
    pub dist: UserDistribution,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub n_users: usize,
    /// Total samples drawn per user (train + held-out test).
    pub samples_per_user: usize,
    /// Samples held out for testing, taken from `samples_per_user`.
    pub test_per_user: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            n_users: 4,
            samples_per_user: 225,
            test_per_user: 100,
            sigma: 1.0,
            seed: 13,
        }
    }
}

/// Builds per-user datasets with independent Gaussian popularity profiles.
/// Within a user, samples are drawn without replacement so the train and
/// test splits are disjoint; different users may share global samples.
pub fn partition_users(global: &Dataset, cfg: &PartitionConfig) -> Result<Vec<UserSplit>> {
    if cfg.n_users == 0 {
        return Err(Error::data("need at least one user".to_string()));
    }
    if cfg.test_per_user == 0 || cfg.test_per_user >= cfg.samples_per_user {
        return Err(Error::data(format!(
            "test_per_user ({}) must be in 1..samples_per_user ({})",
            cfg.test_per_user, cfg.samples_per_user
        )));
    }
    let pools = global.class_pools();
    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let mut rng = user_rng(cfg.seed, u);
        let center = rng.gen_range(0..global.num_classes);
        let dist = UserDistribution::gaussian(global.num_classes, center, cfg.sigma)?;

        let mut available = pools.clone();
        let mut indices = Vec::with_capacity(cfg.samples_per_user);
        for _ in 0..cfg.samples_per_user {
            let c = dist.sample_class(&mut rng);
            let pool = &mut available[c];
            if pool.is_empty() {
                return Err(Error::data(format!(
                    "insufficient data: class {c} exhausted while drawing {} samples for user {u}",
                    cfg.samples_per_user
                )));
            }
            let at = rng.gen_range(0..pool.len());
            indices.push(pool.swap_remove(at));
        }
        let split_at = cfg.samples_per_user - cfg.test_per_user;
        let train = global.subset(&indices[..split_at])?;
        let test = global.subset(&indices[split_at..])?;
        users.push(UserSplit { dist, train, test });
    }
    Ok(users)
}

fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (user as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Splits a dataset into (rest, calibration) with a seeded shuffle; the
/// calibration side gets `ceil(fraction * n)` samples.
pub fn split_calibration(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::config(format!(
            "calibration fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = ds.len();
    let n_calib = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    let calib = ds.subset(&indices[..n_calib])?;
    let rest = ds.subset(&indices[n_calib..])?;
    Ok((rest, calib))
}

/// Manifest describing a generated data directory (text key-value format).
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub num_classes: usize,
    pub sigma: f64,
    pub seed: u64,
    /// Per user: (centre class, train stem, test stem).
    pub users: Vec<(usize, String, String)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "classes {}", self.num_classes);
        let _ = writeln!(out, "sigma {}", self.sigma);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "users {}", self.users.len());
        for (i, (center, train, test)) in self.users.iter().enumerate() {
            let _ = writeln!(out, "user.{i}.center {center}");
            let _ = writeln!(out, "user.{i}.train {train}");
            let _ = writeln!(out, "user.{i}.test {test}");
        }
        out
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once(' ') {
                map.insert(k.to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| -> Result<String> {
            map.get(k)
                .cloned()
                .ok_or_else(|| Error::format(path, format!("manifest missing key {k}")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(path, format!("manifest key {k} is not an integer")))
        };
        let num_classes = parse_usize("classes")?;
        let sigma: f64 = get("sigma")?
            .parse()
            .map_err(|_| Error::format(path, "manifest key sigma is not a number"))?;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|_| Error::format(path, "manifest key seed is not an integer"))?;
        let n_users = parse_usize("users")?;
        let mut users = Vec::with_capacity(n_users);
        for i in 0..n_users {
            users.push((
                parse_usize(&format!("user.{i}.center"))?,
                get(&format!("user.{i}.train"))?,
                get(&format!("user.{i}.test"))?,
            ));
        }
        Ok(Self {
            num_classes,
            sigma,
            seed,
            users,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path_str = path.as_ref().display().to_string();
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text, &path_str)
    }
}
