//! Dataset generation and client partitioning.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Classification,
}

/// One `(x, y)` pair. For classification `y` holds the class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub x: Vec<f64>,
    pub y: f64,
}

impl LabeledPoint {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Self { x, y }
    }

    pub fn label(&self) -> usize {
        self.y as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub points: Vec<LabeledPoint>,
    /// Aggregation weight `p_i`; the weights of a federation sum to one.
    pub weight: f64,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label_support(&self) -> BTreeSet<usize> {
        self.points.iter().map(LabeledPoint::label).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedDataset {
    pub clients: Vec<ClientDataset>,
    pub task: Task,
    /// Zero for regression.
    pub n_classes: usize,
}

impl FederatedDataset {
    /// Builds a federation from per-client point lists, assigning ids `0..n`
    /// and size-proportional weights.
    pub fn from_parts(parts: Vec<Vec<LabeledPoint>>, task: Task, n_classes: usize) -> Result<Self> {
        if parts.is_empty() {
            return Err(SimError::config("n_clients", "at least one client is required"));
        }
        if let Some(i) = parts.iter().position(Vec::is_empty) {
            return Err(SimError::config("partition", format!("client {i} would hold no data")));
        }
        let total: usize = parts.iter().map(Vec::len).sum();
        let clients = parts
            .into_iter()
            .enumerate()
            .map(|(client_id, points)| ClientDataset {
                client_id,
                weight: points.len() as f64 / total as f64,
                points,
            })
            .collect();
        Ok(Self {
            clients,
            task,
            n_classes,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn n_points(&self) -> usize {
        self.clients.iter().map(ClientDataset::len).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.clients
            .first()
            .and_then(|c| c.points.first())
            .map_or(0, |p| p.x.len())
    }

    /// All points in client order.
    pub fn points(&self) -> impl Iterator<Item = &LabeledPoint> {
        self.clients.iter().flat_map(|c| c.points.iter())
    }

    pub fn to_pool(&self) -> Pool {
        Pool {
            points: self.points().cloned().collect(),
            n_classes: self.n_classes,
        }
    }
}

/// A flat, unpartitioned labeled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub points: Vec<LabeledPoint>,
    pub n_classes: usize,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for p in &self.points {
            h[p.label()] += 1;
        }
        h
    }

    /// Splits off a class-stratified held-out set of roughly `test_fraction` of each class.
    pub fn train_test_split(&self, test_fraction: f64, seed: u64) -> Result<(Pool, Pool)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(SimError::config("test_fraction", "must lie in [0, 1)"));
        }
        let mut rng = rng_from_seed(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..self.n_classes.max(1) {
            let mut members: Vec<&LabeledPoint> = self
                .points
                .iter()
                .filter(|p| self.n_classes == 0 || p.label() == c)
                .collect();
            members.shuffle(&mut rng);
            let n_test = (members.len() as f64 * test_fraction).round() as usize;
            test.extend(members[..n_test].iter().map(|p| (*p).clone()));
            train.extend(members[n_test..].iter().map(|p| (*p).clone()));
        }
        Ok((
            Pool {
                points: train,
                n_classes: self.n_classes,
            },
            Pool {
                points: test,
                n_classes: self.n_classes,
            },
        ))
    }
}

/// The noisy sine regression task: client `i` draws an amplitude
/// `a_i ~ N(a_mean, a_std^2)` and observes `y = a_i sin(2 pi x) + eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySine {
    pub n_clients: usize,
    pub pts_per_client: usize,
    pub a_mean: f64,
    pub a_std: f64,
    pub noise_std: f64,
}

impl Default for ToySine {
    fn default() -> Self {
        Self {
            n_clients: 50,
            pts_per_client: 2,
            a_mean: 1.0,
            a_std: 0.2,
            noise_std: 0.2,
        }
    }
}

impl ToySine {
    /// Noiseless regression target `E[y | x]`.
    pub fn target(x: f64) -> f64 {
        (2.0 * PI * x).sin()
    }

    fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(SimError::config("n_clients", "must be >= 1"));
        }
        if self.pts_per_client == 0 {
            return Err(SimError::config("pts_per_client", "must be >= 1"));
        }
        if !(self.a_std >= 0.0) {
            return Err(SimError::config("a_std", "must be >= 0"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(SimError::config("noise_std", "must be >= 0"));
        }
        Ok(())
    }

    /// Draws inputs uniformly from `[-1, 1]`.
    pub fn generate(&self, seed: u64) -> Result<FederatedDataset> {
        self.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut parts = Vec::with_capacity(self.n_clients);
        for _ in 0..self.n_clients {
            let a = self.amplitude(&mut rng);
            let pts = (0..self.pts_per_client)
                .map(|_| {
                    let x = rng.random_range(-1.0..=1.0);
                    self.labeled(a, x, &mut rng)
                })
                .collect();
            parts.push(pts);
        }
        FederatedDataset::from_parts(parts, Task::Regression, 0)
    }

    /// Same observation model on caller-supplied inputs, one list per client.
    /// `n_clients` and `pts_per_client` are ignored.
    pub fn generate_at(&self, inputs: &[Vec<f64>], seed: u64) -> Result<FederatedDataset> {
        self.validate()?;
        if inputs.iter().flatten().any(|x| x.abs() > 1.0) {
            return Err(SimError::config("inputs", "toy inputs must lie in [-1, 1]"));
        }
        let mut rng = rng_from_seed(seed);
        let parts = inputs
            .iter()
            .map(|xs| {
                let a = self.amplitude(&mut rng);
                xs.iter().map(|&x| self.labeled(a, x, &mut rng)).collect()
            })
            .collect();
        FederatedDataset::from_parts(parts, Task::Regression, 0)
    }

    fn amplitude(&self, rng: &mut impl Rng) -> f64 {
        self.a_mean + self.a_std * rng.sample::<f64, _>(StandardNormal)
    }

    fn labeled(&self, a: f64, x: f64, rng: &mut impl Rng) -> LabeledPoint {
        let eps = self.noise_std * rng.sample::<f64, _>(StandardNormal);
        LabeledPoint::new(vec![x], a * Self::target(x) + eps)
    }
}

/// `n` evenly spaced inputs on `[lo, hi]`, shuffled and dealt to `n_clients`
/// clients in contiguous groups of `n / n_clients`.
pub fn spread_inputs(n_clients: usize, pts_per_client: usize, lo: f64, hi: f64, seed: u64) -> Vec<Vec<f64>> {
    let n = n_clients * pts_per_client;
    let mut xs: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                0.5 * (lo + hi)
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    xs.shuffle(&mut rng_from_seed(seed));
    xs.chunks(pts_per_client.max(1)).map(<[f64]>::to_vec).collect()
}

/// Gaussian clusters around random unit-sphere centers, rescaled so every
/// input has norm at most one. Points are ordered class by class.
pub fn gen_synthetic_classification(
    n_classes: usize,
    n_per_class: usize,
    d_in: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Pool> {
    if n_classes < 2 {
        return Err(SimError::config("n_classes", "must be >= 2"));
    }
    if d_in < 2 {
        return Err(SimError::config("d_in", "must be >= 2"));
    }
    if n_per_class == 0 {
        return Err(SimError::config("n_per_class", "must be >= 1"));
    }
    if !(cluster_spread > 0.0) {
        return Err(SimError::config("cluster_spread", "must be > 0"));
    }
    let mut rng = rng_from_seed(seed);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..d_in).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / norm).collect()
        })
        .collect();
    let noise = Normal::new(0.0, cluster_spread).expect("spread checked positive");
    let mut points = Vec::with_capacity(n_classes * n_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let x = center.iter().map(|&m| m + noise.sample(&mut rng)).collect();
            points.push(LabeledPoint::new(x, c as f64));
        }
    }
    let max_norm = points
        .iter()
        .map(|p| p.x.iter().map(|a| a * a).sum::<f64>().sqrt())
        .fold(0.0_f64, f64::max);
    if max_norm > 1.0 {
        for p in &mut points {
            p.x.iter_mut().for_each(|a| *a /= max_norm);
        }
    }
    Ok(Pool { points, n_classes })
}

fn task_of(pool: &Pool) -> Task {
    if pool.n_classes == 0 {
        Task::Regression
    } else {
        Task::Classification
    }
}

/// Shuffles the pool and deals it into near-equal client shares (sizes differ by at most one).
pub fn partition_iid(pool: &Pool, n_clients: usize, seed: u64) -> Result<FederatedDataset> {
    if n_clients == 0 {
        return Err(SimError::config("n_clients", "must be >= 1"));
    }
    if pool.len() < n_clients {
        return Err(SimError::config(
            "n_clients",
            format!("{} points cannot fill {n_clients} clients", pool.len()),
        ));
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let base = pool.len() / n_clients;
    let rem = pool.len() % n_clients;
    let mut parts = Vec::with_capacity(n_clients);
    let mut start = 0;
    for i in 0..n_clients {
        let len = base + usize::from(i < rem);
        parts.push(idx[start..start + len].iter().map(|&j| pool.points[j].clone()).collect());
        start += len;
    }
    FederatedDataset::from_parts(parts, task_of(pool), pool.n_classes)
}

/// Label-skewed split: every class is cut into single-label shards,
/// `n_clients * noc` in total, and each client receives `noc` of them from a
/// shuffled shard list dealt round-robin. A client therefore sees at most
/// `noc` distinct labels.
pub fn partition_by_label(pool: &Pool, n_clients: usize, noc: usize, seed: u64) -> Result<FederatedDataset> {
    let n_classes = pool.n_classes;
    if n_classes == 0 {
        return Err(SimError::config("partition", "label partitioning needs a classification pool"));
    }
    if n_clients == 0 {
        return Err(SimError::config("n_clients", "must be >= 1"));
    }
    if noc == 0 || noc > n_classes {
        return Err(SimError::config("noc", format!("must lie in [1, {n_classes}]")));
    }
    let n_shards = n_clients * noc;
    if n_shards < n_classes {
        return Err(SimError::config(
            "noc",
            format!("{n_clients} clients x {noc} classes cannot cover {n_classes} classes"),
        ));
    }
    if pool.len() < n_shards {
        return Err(SimError::config(
            "noc",
            format!("{} points cannot fill {n_shards} shards", pool.len()),
        ));
    }

    let mut by_class: Vec<Vec<&LabeledPoint>> = vec![Vec::new(); n_classes];
    for p in &pool.points {
        by_class[p.label()].push(p);
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| !by_class[c].is_empty()).collect();
    let shards_per_class = apportion(
        &present.iter().map(|&c| by_class[c].len()).collect::<Vec<_>>(),
        n_shards,
    );

    let mut shards: Vec<Vec<&LabeledPoint>> = Vec::with_capacity(n_shards);
    for (&c, &s) in present.iter().zip(&shards_per_class) {
        let members = &by_class[c];
        let base = members.len() / s;
        let rem = members.len() % s;
        let mut start = 0;
        for j in 0..s {
            let len = base + usize::from(j < rem);
            shards.push(members[start..start + len].to_vec());
            start += len;
        }
    }
    let mut order: Vec<usize> = (0..shards.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));

    let mut parts: Vec<Vec<LabeledPoint>> = vec![Vec::new(); n_clients];
    for (pos, &s) in order.iter().enumerate() {
        parts[pos % n_clients].extend(shards[s].iter().map(|p| (*p).clone()));
    }
    FederatedDataset::from_parts(parts, Task::Classification, n_classes)
}

/// Largest-remainder apportionment of `total` shards over groups of the given
/// sizes, at least one shard per group and never more shards than points.
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let mut alloc: Vec<usize> = sizes
        .iter()
        .map(|&s| ((total * s) / n).clamp(1, s))
        .collect();
    let mut assigned: usize = alloc.iter().sum();
    // Hand out or take back shards by remainder until the count matches.
    while assigned < total {
        let g = (0..sizes.len())
            .filter(|&g| alloc[g] < sizes[g])
            .max_by(|&a, &b| {
                let ra = sizes[a] as f64 / alloc[a] as f64;
                let rb = sizes[b] as f64 / alloc[b] as f64;
                ra.total_cmp(&rb).then(b.cmp(&a))
            })
            .expect("enough points for every shard");
        alloc[g] += 1;
        assigned += 1;
    }
    while assigned > total {
        let g = (0..sizes.len())
            .filter(|&g| alloc[g] > 1)
            .min_by(|&a, &b| {
                let ra = sizes[a] as f64 / alloc[a] as f64;
                let rb = sizes[b] as f64 / alloc[b] as f64;
                ra.total_cmp(&rb).then(a.cmp(&b))
            })
            .expect("at least one shard per class fits");
        alloc[g] -= 1;
        assigned -= 1;
    }
    alloc
}

/// Writes `client_id,y,x_0..x_{d-1}` rows.
pub fn write_dataset_csv(data: &FederatedDataset, path: &Path) -> Result<()> {
    let io = |e: csv::Error| SimError::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let d = data.input_dim();
    let mut header = vec!["client_id".to_string(), "y".to_string()];
    header.extend((0..d).map(|j| format!("x_{j}")));
    w.write_record(&header).map_err(io)?;
    for c in &data.clients {
        for p in &c.points {
            let mut row = vec![c.client_id.to_string(), p.y.to_string()];
            row.extend(p.x.iter().map(f64::to_string));
            w.write_record(&row).map_err(io)?;
        }
    }
    w.flush().map_err(|e| SimError::io(path, e))
}

/// Reads the schema written by [`write_dataset_csv`]. Client ids must be contiguous from zero.
pub fn read_dataset_csv(path: &Path, task: Task, n_classes: usize) -> Result<FederatedDataset> {
    let parse_err = |m: String| SimError::Parse {
        path: path.to_path_buf(),
        message: m,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| SimError::io(path, e.into()))?;
    let header = r.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    if header.len() < 3 || &header[0] != "client_id" || &header[1] != "y" {
        return Err(SimError::Schema {
            path: path.to_path_buf(),
            expected: "client_id,y,x_0,...".into(),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut parts: Vec<Vec<LabeledPoint>> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| parse_err(format!("row {}: column {i}: {e}", line + 2)))
        };
        let id: usize = rec[0]
            .parse()
            .map_err(|e| parse_err(format!("row {}: client_id: {e}", line + 2)))?;
        let x = (2..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
        if id >= parts.len() {
            parts.resize_with(id + 1, Vec::new);
        }
        parts[id].push(LabeledPoint::new(x, num(1)?));
    }
    FederatedDataset::from_parts(parts, task, n_classes)
}
