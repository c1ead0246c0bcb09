//! Wireless caching network model.
//!
//! One macro base station (MBS, node index `0`) reaches every user; `N`
//! cache nodes (indices `1..=N`) reach the users inside their coverage
//! radius. Files are MDS coded, so a user recovers a file from any `B`
//! coded bits: it pulls the cached fraction from its fastest nodes first
//! and fetches the shortfall from the MBS.
//!
//! Units: transmission delay is in seconds, replacement cost in
//! dimensionless fraction units, and the replacement weight `beta` in
//! seconds per unit fraction.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on the per-node capacity constraint.
pub const CAPACITY_EPS: f64 = 1e-9;

/// Index of the macro base station in every per-user delay row.
pub const MBS: usize = 0;

/// Radio link parameters shared by all cache nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadioParams {
    pub tx_power_w: f64,
    pub bandwidth_hz: f64,
    pub noise_psd_dbm_hz: f64,
    pub antenna_gain_dbi: f64,
    /// MBS per-bit delay as a multiple of the slowest cache link.
    pub mbs_delay_factor: f64,
}

impl Default for RadioParams {
    fn default() -> Self {
        Self {
            tx_power_w: 1.0,
            bandwidth_hz: 1e5,
            noise_psd_dbm_hz: -152.0,
            antenna_gain_dbi: 1.0,
            mbs_delay_factor: 3.0,
        }
    }
}

/// Geometry of a hexagonal multi-cell layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HexLayout {
    pub n_nodes: usize,
    /// Distance between adjacent cache nodes, meters.
    pub inter_node_distance: f64,
    pub n_users: usize,
    /// Cache node coverage radius, meters.
    pub coverage_radius: f64,
    /// Users are never placed closer than this to a cache node, meters.
    pub inner_exclusion_radius: f64,
}

impl Default for HexLayout {
    fn default() -> Self {
        Self {
            n_nodes: 7,
            inter_node_distance: 500.0,
            n_users: 20,
            coverage_radius: 500.0,
            inner_exclusion_radius: 50.0,
        }
    }
}

/// Node and user geometry with precomputed per-bit delays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub cache_positions: Vec<[f64; 2]>,
    pub user_positions: Vec<[f64; 2]>,
    pub coverage_radius: f64,
    /// `K x (N+1)` seconds per bit; column 0 is the MBS.
    pub per_bit_delay: Vec<Vec<f64>>,
    /// Per user, reachable node indices sorted by ascending delay. The MBS
    /// is always last.
    pub reachable_sets: Vec<Vec<usize>>,
}

/// Seconds needed to deliver one bit over a pathloss-limited link.
///
/// Pathloss is `148.1 + 37.6 log10(d_km)` dB, the rate is the Shannon
/// rate `W log2(1 + SNR)` and the delay is its reciprocal.
pub fn per_bit_delay(
    distance_km: f64,
    tx_power_w: f64,
    bandwidth_hz: f64,
    noise_psd_dbm_hz: f64,
    antenna_gain_dbi: f64,
) -> Result<f64> {
    if !(distance_km > 0.0) || !distance_km.is_finite() {
        return Err(Error::Parameter(format!(
            "distance must be positive, got {distance_km}"
        )));
    }
    if !(tx_power_w > 0.0) {
        return Err(Error::Parameter(format!(
            "transmit power must be positive, got {tx_power_w}"
        )));
    }
    if !(bandwidth_hz > 0.0) {
        return Err(Error::Parameter(format!(
            "bandwidth must be positive, got {bandwidth_hz}"
        )));
    }
    let pathloss_db = 148.1 + 37.6 * distance_km.log10();
    let rx_dbm = 10.0 * (tx_power_w * 1e3).log10() + antenna_gain_dbi - pathloss_db;
    let noise_dbm = noise_psd_dbm_hz + 10.0 * bandwidth_hz.log10();
    let snr = 10f64.powf((rx_dbm - noise_dbm) / 10.0);
    let rate = bandwidth_hz * (1.0 + snr).log2();
    Ok(1.0 / rate)
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Hex lattice centers in spiral order: the center, then ring 1, ring 2, ...
fn hex_centers(count: usize, spacing: f64) -> Vec<[f64; 2]> {
    // Axial directions walking around a ring.
    const DIRS: [(i64, i64); 6] = [(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)];
    let to_xy = |q: i64, r: i64| {
        let (q, r) = (q as f64, r as f64);
        [spacing * (q + r / 2.0), spacing * r * 3f64.sqrt() / 2.0]
    };
    let mut out = vec![[0.0, 0.0]];
    let mut ring = 1i64;
    while out.len() < count {
        // Start at the corner reached by walking `ring` steps along direction 4.
        let (mut q, mut r) = (DIRS[4].0 * ring, DIRS[4].1 * ring);
        for &(dq, dr) in &DIRS {
            for _ in 0..ring {
                out.push(to_xy(q, r));
                q += dq;
                r += dr;
            }
        }
        ring += 1;
    }
    out.truncate(count);
    out
}

/// Uniform sample from the lattice cell around `center`. Neighbors lie along
/// the x axis, so cells are pointy-topped hexagons with vertical flat sides.
fn sample_in_hexagon(rng: &mut impl Rng, center: [f64; 2], inradius: f64) -> [f64; 2] {
    let circumradius = inradius * 2.0 / 3f64.sqrt();
    loop {
        let x = rng.gen_range(-inradius..inradius);
        let y = rng.gen_range(-circumradius..circumradius);
        if 0.5 * x.abs() + 0.5 * 3f64.sqrt() * y.abs() <= inradius {
            return [center[0] + x, center[1] + y];
        }
    }
}

impl Topology {
    /// Builds a topology from explicit positions, computing delays and
    /// reachable sets.
    pub fn from_positions(
        cache_positions: Vec<[f64; 2]>,
        user_positions: Vec<[f64; 2]>,
        coverage_radius: f64,
        radio: &RadioParams,
    ) -> Result<Self> {
        if cache_positions.is_empty() {
            return Err(Error::Parameter(
                "at least one cache node is required".into(),
            ));
        }
        if !(radio.mbs_delay_factor > 1.0) {
            return Err(Error::Parameter("MBS delay factor must exceed 1".into()));
        }
        let mut delays = Vec::with_capacity(user_positions.len());
        let mut reachable_sets = Vec::with_capacity(user_positions.len());
        let mut slowest_link: f64 = 0.0;
        for &user in &user_positions {
            let mut row = vec![0.0; cache_positions.len() + 1];
            let mut reach = Vec::new();
            for (i, &node) in cache_positions.iter().enumerate() {
                let d = distance(user, node);
                row[i + 1] = per_bit_delay(
                    (d / 1000.0).max(1e-3),
                    radio.tx_power_w,
                    radio.bandwidth_hz,
                    radio.noise_psd_dbm_hz,
                    radio.antenna_gain_dbi,
                )?;
                if d <= coverage_radius {
                    reach.push(i + 1);
                    slowest_link = slowest_link.max(row[i + 1]);
                }
            }
            delays.push(row);
            reachable_sets.push(reach);
        }
        let mbs = radio.mbs_delay_factor * slowest_link;
        for (row, reach) in delays.iter_mut().zip(reachable_sets.iter_mut()) {
            // A user with no cache node in range still needs a finite MBS link.
            row[MBS] = if mbs > 0.0 {
                mbs
            } else {
                radio.mbs_delay_factor * row[1..].iter().cloned().fold(0.0, f64::max)
            };
            reach.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            reach.push(MBS);
        }
        Ok(Self {
            cache_positions,
            user_positions,
            coverage_radius,
            per_bit_delay: delays,
            reachable_sets,
        })
    }

    /// Places users uniformly over the hexagonal cells of a multi-cell
    /// network, keeping them out of a small disc around every node.
    ///
    /// Users left without any cache node in range are resampled, up to 100
    /// times each.
    pub fn build_hex(layout: &HexLayout, radio: &RadioParams, seed: u64) -> Result<Self> {
        if layout.n_nodes == 0 {
            return Err(Error::Parameter("n_nodes must be at least 1".into()));
        }
        if !(layout.inner_exclusion_radius < layout.coverage_radius) {
            return Err(Error::Parameter(
                "inner exclusion radius must be smaller than coverage radius".into(),
            ));
        }
        if !(layout.inter_node_distance > 0.0) {
            return Err(Error::Parameter(
                "inter-node distance must be positive".into(),
            ));
        }
        let nodes = hex_centers(layout.n_nodes, layout.inter_node_distance);
        let inradius = layout.inter_node_distance / 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut users = Vec::with_capacity(layout.n_users);
        for k in 0..layout.n_users {
            let mut placed = None;
            for _ in 0..100 {
                let cell = nodes[rng.gen_range(0..nodes.len())];
                let p = sample_in_hexagon(&mut rng, cell, inradius);
                let min_d = nodes
                    .iter()
                    .map(|&n| distance(p, n))
                    .fold(f64::INFINITY, f64::min);
                if min_d < layout.inner_exclusion_radius {
                    continue;
                }
                if min_d <= layout.coverage_radius {
                    placed = Some(p);
                    break;
                }
            }
            match placed {
                Some(p) => users.push(p),
                None => {
                    return Err(Error::Placement(format!(
                        "user {k} found no covered position after 100 attempts"
                    )))
                }
            }
        }
        Self::from_positions(nodes, users, layout.coverage_radius, radio)
    }

    pub fn n_nodes(&self) -> usize {
        self.cache_positions.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_positions.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let topo: Self = serde_json::from_str(text)?;
        topo.validate()?;
        Ok(topo)
    }

    /// Checks the structural invariants of a (possibly hand-built) topology.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        if self.per_bit_delay.len() != self.n_users() || self.reachable_sets.len() != self.n_users()
        {
            return Err(Error::Shape(
                "per-user tables must have one row per user".into(),
            ));
        }
        for (k, (row, reach)) in self
            .per_bit_delay
            .iter()
            .zip(&self.reachable_sets)
            .enumerate()
        {
            if row.len() != n + 1 {
                return Err(Error::Shape(format!(
                    "delay row {k} has {} entries, want {}",
                    row.len(),
                    n + 1
                )));
            }
            if row.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
                return Err(Error::Input(format!(
                    "user {k} has a non-positive or infinite delay"
                )));
            }
            if reach.last() != Some(&MBS) || reach[..reach.len() - 1].contains(&MBS) {
                return Err(Error::Input(format!(
                    "user {k}: reachable set must end with the MBS"
                )));
            }
            if reach.iter().any(|&j| j > n) {
                return Err(Error::Input(format!(
                    "user {k}: reachable node out of range"
                )));
            }
            if reach.windows(2).any(|w| row[w[0]] > row[w[1]]) {
                return Err(Error::Input(format!(
                    "user {k}: reachable set not sorted by delay"
                )));
            }
            if reach[..reach.len() - 1].iter().any(|&j| row[MBS] <= row[j]) {
                return Err(Error::Input(format!(
                    "user {k}: MBS must be strictly slowest"
                )));
            }
        }
        Ok(())
    }
}

/// Cached coded fractions, one row per cache node and one column per file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMatrix {
    n_nodes: usize,
    n_files: usize,
    lambda: Vec<f64>,
    /// Row budget `M`, in files.
    pub capacity: f64,
    /// File size `B`, in bits.
    pub file_size: f64,
}

impl CacheMatrix {
    pub fn zeros(n_nodes: usize, n_files: usize, capacity: f64, file_size: f64) -> Self {
        Self {
            n_nodes,
            n_files,
            lambda: vec![0.0; n_nodes * n_files],
            capacity,
            file_size,
        }
    }

    /// Wraps row-major `N x F` fractions after checking the box and capacity
    /// constraints.
    pub fn from_rows(
        n_nodes: usize,
        n_files: usize,
        lambda: Vec<f64>,
        capacity: f64,
        file_size: f64,
    ) -> Result<Self> {
        if lambda.len() != n_nodes * n_files {
            return Err(Error::Shape(format!(
                "{} fractions for a {n_nodes}x{n_files} cache",
                lambda.len()
            )));
        }
        let cache = Self {
            n_nodes,
            n_files,
            lambda,
            capacity,
            file_size,
        };
        cache.check()?;
        Ok(cache)
    }

    pub fn check(&self) -> Result<()> {
        if let Some(bad) = self.lambda.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("cache fraction {bad} outside [0, 1]")));
        }
        for n in 0..self.n_nodes {
            let sum: f64 = self.row(n).iter().sum();
            if sum > self.capacity + CAPACITY_EPS {
                return Err(Error::Input(format!(
                    "node {} stores {sum} files, capacity {}",
                    n + 1,
                    self.capacity
                )));
            }
        }
        Ok(())
    }

    pub fn is_feasible(&self) -> bool {
        self.check().is_ok()
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_files(&self) -> usize {
        self.n_files
    }

    /// Fractions of cache row `row` (cache node `row + 1`).
    pub fn row(&self, row: usize) -> &[f64] {
        &self.lambda[row * self.n_files..(row + 1) * self.n_files]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.lambda[row * self.n_files..(row + 1) * self.n_files]
    }

    /// Fraction of `file` held by topology node `node` (`1..=N`).
    pub fn fraction(&self, node: usize, file: usize) -> f64 {
        debug_assert!(node >= 1, "the MBS holds no cache row");
        self.lambda[(node - 1) * self.n_files + file]
    }

    pub fn set_fraction(&mut self, node: usize, file: usize, value: f64) {
        self.lambda[(node - 1) * self.n_files + file] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.lambda
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.lambda
    }

    /// Same dimensions and constants, different fractions.
    pub fn with_values(&self, lambda: Vec<f64>) -> Result<Self> {
        Self::from_rows(
            self.n_nodes,
            self.n_files,
            lambda,
            self.capacity,
            self.file_size,
        )
    }
}

/// Weights of the network cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Replacement weight, seconds per unit fraction.
    pub beta: f64,
    /// Discount factor.
    pub gamma: f64,
}

impl CostParams {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        if !(beta >= 0.0) {
            return Err(Error::Parameter(format!(
                "beta must be non-negative, got {beta}"
            )));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Parameter(format!(
                "gamma must lie in [0, 1], got {gamma}"
            )));
        }
        Ok(Self { beta, gamma })
    }
}

/// Delay of fetching via the best `j` nodes of `reach`, `j` counted from 1:
/// full cached fractions from the first `j - 1` nodes, the rest from node `j`.
fn partial_delay(
    delays: &[f64],
    reach: &[usize],
    fractions: impl Fn(usize) -> f64,
    j: usize,
    file_size: f64,
) -> f64 {
    let mut cached = 0.0;
    let mut delay = 0.0;
    for &node in &reach[..j - 1] {
        let lambda = fractions(node);
        cached += lambda;
        delay += lambda * delays[node];
    }
    file_size * (delay + (1.0 - cached) * delays[reach[j - 1]])
}

/// Delay for user `k` to collect `file` under `cache`.
///
/// This is the maximum over `j` of the delay when the file is completed by
/// the `j`-th fastest reachable node, which equals the delay of downloading
/// greedily from the fastest node onwards.
pub fn file_delay(topology: &Topology, cache: &CacheMatrix, user: usize, file: usize) -> f64 {
    let delays = &topology.per_bit_delay[user];
    let reach = &topology.reachable_sets[user];
    let fractions = |node: usize| {
        if node == MBS {
            0.0
        } else {
            cache.fraction(node, file)
        }
    };
    (1..=reach.len())
        .map(|j| partial_delay(delays, reach, fractions, j, cache.file_size))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The individual terms `D_k^{f,j}` whose maximum is [`file_delay`], as
/// affine functions of the fractions: `(constant, [(node, coefficient)])`.
///
/// Used to build the epigraph constraints of the per-slot problem.
pub fn delay_pieces(
    topology: &Topology,
    file_size: f64,
    user: usize,
) -> Vec<(f64, Vec<(usize, f64)>)> {
    let delays = &topology.per_bit_delay[user];
    let reach = &topology.reachable_sets[user];
    (1..=reach.len())
        .map(|j| {
            let last = delays[reach[j - 1]];
            let terms = reach[..j - 1]
                .iter()
                .map(|&node| (node, file_size * (delays[node] - last)))
                .collect();
            (file_size * last, terms)
        })
        .collect()
}

fn check_demand(topology: &Topology, cache: &CacheMatrix, demand: &[f64]) -> Result<()> {
    let expect = topology.n_users() * cache.n_files();
    if demand.len() != expect {
        return Err(Error::Shape(format!(
            "demand has {} entries, want K*F = {expect}",
            demand.len()
        )));
    }
    if let Some(bad) = demand.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::Input(format!("negative or NaN request count {bad}")));
    }
    Ok(())
}

/// Total delay to serve a `K x F` (row-major) request count matrix.
pub fn transmission_cost(topology: &Topology, cache: &CacheMatrix, demand: &[f64]) -> Result<f64> {
    check_demand(topology, cache, demand)?;
    let f = cache.n_files();
    let mut total = 0.0;
    for k in 0..topology.n_users() {
        for file in 0..f {
            let d = demand[k * f + file];
            if d > 0.0 {
                total += d * file_delay(topology, cache, k, file);
            }
        }
    }
    Ok(total)
}

/// Total positive increment of cached fractions between two slots.
pub fn replacement_cost(prev: &CacheMatrix, next: &CacheMatrix) -> Result<f64> {
    if prev.n_nodes() != next.n_nodes() || prev.n_files() != next.n_files() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{} caches",
            prev.n_nodes(),
            prev.n_files(),
            next.n_nodes(),
            next.n_files()
        )));
    }
    Ok(prev
        .as_slice()
        .iter()
        .zip(next.as_slice())
        .map(|(a, b)| (b - a).max(0.0))
        .sum())
}

/// `C = C_d + beta * C_r`.
pub fn network_cost(delay_cost: f64, replacement: f64, params: &CostParams) -> f64 {
    delay_cost + params.beta * replacement
}

/// `sum_t gamma^(t-1) cost_t`. With `gamma = 0` only the first term counts.
pub fn discounted_return(costs: &[f64], gamma: f64) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for &c in costs {
        total += weight * c;
        weight *= gamma;
        if weight == 0.0 {
            break;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// One user, two cache nodes with delays 1 and 2, MBS delay 6.
    pub(crate) fn toy_topology() -> Topology {
        Topology {
            cache_positions: vec![[0.0, 0.0], [100.0, 0.0]],
            user_positions: vec![[10.0, 0.0]],
            coverage_radius: 500.0,
            per_bit_delay: vec![vec![6.0, 1.0, 2.0]],
            reachable_sets: vec![vec![1, 2, 0]],
        }
    }

    fn cache(values: &[f64], n: usize, m: f64) -> CacheMatrix {
        CacheMatrix::from_rows(n, values.len() / n, values.to_vec(), m, 1.0).unwrap()
    }

    #[test]
    fn link_budget_value() {
        // Independent link-budget evaluation: PL = 136.7813 dB, SNR = 0.418671,
        // rate = 50453.996 bit/s.
        let d = per_bit_delay(0.5, 1.0, 1e5, -152.0, 1.0).unwrap();
        assert_relative_eq!(d, 1.982_003_56e-5, max_relative = 1e-8);
        let closer = per_bit_delay(0.25, 1.0, 1e5, -152.0, 1.0).unwrap();
        assert!(closer < d);
    }

    #[test]
    fn link_budget_rejects_bad_parameters() {
        assert!(matches!(
            per_bit_delay(0.0, 1.0, 1e5, -152.0, 1.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            per_bit_delay(0.5, 0.0, 1e5, -152.0, 1.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            per_bit_delay(0.5, 1.0, -1.0, -152.0, 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn hex_topology_defaults() {
        let topo = Topology::build_hex(&HexLayout::default(), &RadioParams::default(), 7).unwrap();
        assert_eq!(topo.n_nodes(), 7);
        assert_eq!(topo.n_users(), 20);
        topo.validate().unwrap();
        for reach in &topo.reachable_sets {
            assert!(reach.len() >= 2, "every user reaches a cache node");
        }
        // MBS delay is three times the slowest reachable cache link.
        let slowest = topo
            .per_bit_delay
            .iter()
            .zip(&topo.reachable_sets)
            .flat_map(|(row, reach)| reach.iter().filter(|&&j| j != MBS).map(move |&j| row[j]))
            .fold(0.0, f64::max);
        for row in &topo.per_bit_delay {
            assert_relative_eq!(row[MBS], 3.0 * slowest);
        }
        for (user, reach) in topo.user_positions.iter().zip(&topo.reachable_sets) {
            for &node in &reach[..reach.len() - 1] {
                assert!(distance(*user, topo.cache_positions[node - 1]) <= 500.0);
            }
            for node in &topo.cache_positions {
                assert!(distance(*user, *node) >= 50.0);
            }
        }
    }

    #[test]
    fn hex_topology_is_deterministic() {
        let a = Topology::build_hex(&HexLayout::default(), &RadioParams::default(), 11).unwrap();
        let b = Topology::build_hex(&HexLayout::default(), &RadioParams::default(), 11).unwrap();
        let c = Topology::build_hex(&HexLayout::default(), &RadioParams::default(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn hex_lattice_spacing() {
        let centers = hex_centers(19, 500.0);
        for (i, a) in centers.iter().enumerate() {
            for b in &centers[i + 1..] {
                assert!(distance(*a, *b) > 499.999);
            }
        }
        let neighbors = centers[1..7]
            .iter()
            .filter(|c| (distance(**c, [0.0, 0.0]) - 500.0).abs() < 1e-9);
        assert_eq!(neighbors.count(), 6);
    }

    #[test]
    fn hex_rejects_bad_radii() {
        let layout = HexLayout {
            inner_exclusion_radius: 600.0,
            ..HexLayout::default()
        };
        assert!(Topology::build_hex(&layout, &RadioParams::default(), 0).is_err());
    }

    #[test]
    fn hex_reports_unplaceable_users() {
        let layout = HexLayout {
            coverage_radius: 60.0,
            inner_exclusion_radius: 59.9,
            ..HexLayout::default()
        };
        assert!(matches!(
            Topology::build_hex(&layout, &RadioParams::default(), 0),
            Err(Error::Placement(_))
        ));
    }

    #[test]
    fn single_cell_reachable_set() {
        let topo = Topology::from_positions(
            vec![[0.0, 0.0]],
            vec![[120.0, 0.0]],
            200.0,
            &RadioParams::default(),
        )
        .unwrap();
        assert_eq!(topo.reachable_sets[0], vec![1, MBS]);
        topo.validate().unwrap();
    }

    #[test]
    fn topology_json_round_trip() {
        let topo = Topology::build_hex(&HexLayout::default(), &RadioParams::default(), 3).unwrap();
        let back = Topology::from_json(&topo.to_json().unwrap()).unwrap();
        assert_eq!(topo, back);
    }

    #[test]
    fn file_delay_examples() {
        let topo = toy_topology();
        assert_relative_eq!(file_delay(&topo, &cache(&[0.5, 0.25], 2, 1.0), 0, 0), 2.5);
        assert_relative_eq!(file_delay(&topo, &cache(&[0.0, 0.0], 2, 1.0), 0, 0), 6.0);
        assert_relative_eq!(file_delay(&topo, &cache(&[1.0, 0.0], 2, 1.0), 0, 0), 1.0);
        // Oversubscribed: only the first node is needed.
        assert_relative_eq!(file_delay(&topo, &cache(&[1.0, 1.0], 2, 1.0), 0, 0), 1.0);
    }

    #[test]
    fn transmission_cost_examples() {
        let topo = toy_topology();
        let c = cache(&[0.5, 0.25], 2, 1.0);
        assert_relative_eq!(transmission_cost(&topo, &c, &[4.0]).unwrap(), 10.0);
        assert_eq!(transmission_cost(&topo, &c, &[0.0]).unwrap(), 0.0);
        assert!(matches!(
            transmission_cost(&topo, &c, &[-1.0]),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            transmission_cost(&topo, &c, &[1.0, 2.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn replacement_cost_examples() {
        let prev = cache(&[0.5, 0.25], 1, 1.0);
        let next = cache(&[0.7, 0.1], 1, 1.0);
        assert_relative_eq!(
            replacement_cost(&prev, &next).unwrap(),
            0.2,
            epsilon = 1e-12
        );
        assert_eq!(replacement_cost(&prev, &prev).unwrap(), 0.0);
        let empty = CacheMatrix::zeros(3, 4, 2.0, 1.0);
        let full = cache(
            &[1.0, 1.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 1.0, 1.0],
            3,
            2.0,
        );
        assert_relative_eq!(replacement_cost(&empty, &full).unwrap(), 6.0);
        assert!(replacement_cost(&empty, &prev).is_err());
    }

    #[test]
    fn network_cost_and_return() {
        let p = CostParams::new(1.5, 0.99).unwrap();
        assert_relative_eq!(network_cost(10.0, 0.2, &p), 10.3);
        assert_eq!(
            network_cost(10.0, 0.2, &CostParams::new(0.0, 0.9).unwrap()),
            10.0
        );
        assert_eq!(network_cost(10.0, 0.0, &p), 10.0);
        assert_relative_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5), 1.75);
        assert_eq!(discounted_return(&[3.5], 0.3), 3.5);
        assert_eq!(discounted_return(&[1.0, 2.0], 0.0), 1.0);
        assert!(CostParams::new(-1.0, 0.5).is_err());
        assert!(CostParams::new(1.0, 1.5).is_err());
    }

    #[test]
    fn cache_matrix_validation() {
        assert!(CacheMatrix::from_rows(1, 2, vec![0.6, 0.6], 1.0, 1.0).is_err());
        assert!(CacheMatrix::from_rows(1, 2, vec![1.2, 0.0], 2.0, 1.0).is_err());
        assert!(CacheMatrix::from_rows(1, 2, vec![0.5, 0.5 + 1e-10], 1.0, 1.0).is_ok());
        assert!(CacheMatrix::from_rows(1, 3, vec![0.5, 0.5], 1.0, 1.0).is_err());
    }
}
