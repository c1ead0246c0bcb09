//! Online request forecasting: request windows are clustered with an
//! online K-means, and each cluster owns an LSTM that maps a normalized
//! window to the normalized next count.
//!
//! Slots are 0-based here. The feature for slot `t` is the window
//! `d_f(t - rho) .. d_f(t - 1)`, so the first predictable slot is `rho`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::ReplayBuffer;
use crate::rng::SeedBank;
use crate::tensor_nn::{Activation, Adam, LstmNet, Parameterized};
use crate::trace::DemandTrace;

/// A request window and its max-normalized form.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub raw: Vec<f64>,
    /// Largest entry of `raw`, or 1 when the window is all zero.
    pub scale: f64,
    pub normalized: Vec<f64>,
}

impl FeatureVector {
    pub fn from_window(raw: Vec<f64>) -> Self {
        let max = raw.iter().copied().fold(0.0, f64::max);
        let scale = if max > 0.0 { max } else { 1.0 };
        let normalized = raw.iter().map(|v| v / scale).collect();
        Self {
            raw,
            scale,
            normalized,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.raw.iter().all(|&v| v == 0.0)
    }
}

/// Window of the `rho` counts of `file` preceding `slot`.
pub fn make_feature(
    trace: &DemandTrace,
    file: usize,
    slot: usize,
    rho: usize,
) -> Result<FeatureVector> {
    if rho == 0 || slot < rho {
        return Err(Error::Window(format!(
            "slot {slot} has fewer than {rho} slots of history"
        )));
    }
    if slot > trace.slots() || file >= trace.files() {
        return Err(Error::Input(format!(
            "slot {slot} / file {file} outside a {}x{} trace",
            trace.slots(),
            trace.files()
        )));
    }
    let raw = (slot - rho..slot)
        .map(|t| trace.aggregate(t, file) as f64)
        .collect();
    Ok(FeatureVector::from_window(raw))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Online K-means state: centers and accumulated member counts `S_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centers: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
}

impl ClusterModel {
    /// K-means++ seeding: the first center is uniform over `features`, each
    /// further center is drawn with probability proportional to the squared
    /// distance to its nearest chosen center. Counts start at zero; the
    /// first [`ClusterModel::update`] turns each center into the mean of
    /// its members.
    pub fn init_kmeanspp(
        features: &[Vec<f64>],
        clusters: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::Input("need at least one cluster".into()));
        }
        if clusters > features.len() {
            return Err(Error::Input(format!(
                "{clusters} clusters requested from {} features",
                features.len()
            )));
        }
        let mut chosen = vec![rng.gen_range(0..features.len())];
        let mut nearest: Vec<f64> = features
            .iter()
            .map(|x| squared_distance(x, &features[chosen[0]]))
            .collect();
        while chosen.len() < clusters {
            let total: f64 = nearest.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.gen::<f64>() * total;
                let mut pick = None;
                for (i, &d) in nearest.iter().enumerate() {
                    if d > 0.0 {
                        pick = Some(i);
                        if target < d {
                            break;
                        }
                        target -= d;
                    }
                }
                pick.unwrap()
            } else {
                // Every remaining feature duplicates a center: pick uniformly
                // among the unchosen ones.
                let free: Vec<usize> = (0..features.len())
                    .filter(|i| !chosen.contains(i))
                    .collect();
                free[rng.gen_range(0..free.len())]
            };
            chosen.push(next);
            for (d, x) in nearest.iter_mut().zip(features) {
                *d = d.min(squared_distance(x, &features[next]));
            }
        }
        Ok(Self {
            centers: chosen.iter().map(|&i| features[i].clone()).collect(),
            counts: vec![0; clusters],
        })
    }

    pub fn clusters(&self) -> usize {
        self.centers.len()
    }

    /// Nearest center by Euclidean distance; ties go to the lowest index.
    pub fn assign(&self, feature: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centers.iter().enumerate() {
            let d = squared_distance(c, feature);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Folds `members` into center `cluster` as a running mean weighted by
    /// the members seen so far.
    pub fn update_center(&mut self, cluster: usize, members: &[&[f64]]) {
        if members.is_empty() {
            return;
        }
        let prev = self.counts[cluster] as f64;
        let total = prev + members.len() as f64;
        let center = &mut self.centers[cluster];
        for (j, c) in center.iter_mut().enumerate() {
            let sum: f64 = members.iter().map(|m| m[j]).sum();
            *c = (*c * prev + sum) / total;
        }
        self.counts[cluster] += members.len() as u64;
    }

    /// Updates every center from one slot's features and assignments.
    pub fn update(&mut self, features: &[&[f64]], assignments: &[usize]) {
        for i in 0..self.clusters() {
            let members: Vec<&[f64]> = features
                .iter()
                .zip(assignments)
                .filter(|(_, &a)| a == i)
                .map(|(f, _)| *f)
                .collect();
            self.update_center(i, &members);
        }
    }
}

/// Hyperparameters of the forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    /// Window length `rho`.
    pub rho: usize,
    pub clusters: usize,
    pub hidden: Vec<usize>,
    pub buffer: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            rho: 12,
            clusters: 4,
            hidden: vec![24, 24, 12],
            buffer: 1000,
            minibatch: 32,
            learning_rate: 5e-4,
        }
    }
}

/// One training sample: a normalized window and the normalized next count.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub window: Vec<f64>,
    pub target: f64,
}

/// One LSTM, optimizer and replay buffer per cluster.
#[derive(Debug, Clone)]
pub struct LstmBank {
    nets: Vec<LstmNet>,
    optimizers: Vec<Adam>,
    buffers: Vec<ReplayBuffer<Sample>>,
    minibatch: usize,
    rng: crate::rng::Rng,
}

fn to_sequence(window: &[f64]) -> Vec<Vec<f64>> {
    window.iter().map(|&v| vec![v]).collect()
}

impl LstmBank {
    pub fn new(members: usize, config: &PredictorConfig, seeds: &SeedBank) -> Self {
        let mut init = seeds.rng("predictor.init");
        let nets: Vec<LstmNet> = (0..members)
            .map(|_| LstmNet::new(1, &config.hidden, 1, Activation::Linear, &mut init))
            .collect();
        let optimizers = nets
            .iter()
            .map(|n| Adam::new(n.num_params(), config.learning_rate))
            .collect();
        Self {
            nets,
            optimizers,
            buffers: (0..members)
                .map(|_| ReplayBuffer::new(config.buffer))
                .collect(),
            minibatch: config.minibatch,
            rng: seeds.rng("predictor.sampling"),
        }
    }

    pub fn len(&self) -> usize {
        self.nets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nets.is_empty()
    }

    pub fn net(&self, member: usize) -> &LstmNet {
        &self.nets[member]
    }

    pub fn net_mut(&mut self, member: usize) -> &mut LstmNet {
        &mut self.nets[member]
    }

    pub fn buffer(&self, member: usize) -> &ReplayBuffer<Sample> {
        &self.buffers[member]
    }

    pub fn push(&mut self, member: usize, sample: Sample) {
        self.buffers[member].push(sample);
    }

    /// Count forecast: `scale * L_i(normalized)`, clamped at zero. An
    /// all-zero window forecasts zero.
    pub fn predict(&self, member: usize, feature: &FeatureVector) -> Result<f64> {
        if feature.is_zero() {
            return Ok(0.0);
        }
        let out = self.nets[member].forward(&to_sequence(&feature.normalized))?[0];
        Ok((feature.scale * out).max(0.0))
    }

    /// One Adam step on a uniform minibatch from `member`'s buffer. Returns
    /// the minibatch loss before the step, or `None` for an empty buffer.
    pub fn train_step(&mut self, member: usize) -> Result<Option<f64>> {
        if self.buffers[member].is_empty() {
            return Ok(None);
        }
        let idx = self.buffers[member].sample_indices(self.minibatch, &mut self.rng);
        let buffer = &self.buffers[member];
        let batch = idx.len();
        let steps = buffer.get(idx[0]).unwrap().window.len();
        if idx
            .iter()
            .any(|&i| buffer.get(i).unwrap().window.len() != steps)
        {
            return Err(Error::Shape(
                "windows in one buffer must share a length".into(),
            ));
        }
        // Step-major input: row `b` of step `t` is sample `b`'s value at `t`.
        let seqs: Vec<Vec<f64>> = (0..steps)
            .map(|t| {
                idx.iter()
                    .map(|&i| buffer.get(i).unwrap().window[t])
                    .collect()
            })
            .collect();
        let net = &mut self.nets[member];
        let out = net.forward_train_batch(&seqs, batch)?;
        let n = batch as f64;
        let mut loss = 0.0;
        let mut dys = Vec::with_capacity(batch);
        for (o, &i) in out.iter().zip(&idx) {
            let err = o - buffer.get(i).unwrap().target;
            loss += err * err / n;
            dys.push(2.0 * err / n);
        }
        let mut grads = net.zero_grads();
        net.backward_batch(&dys, &mut grads)?;
        self.optimizers[member].apply(net, &grads)?;
        Ok(Some(loss))
    }
}

/// `||predicted - actual||^2 / ||actual||^2`, or `None` when `actual` is all
/// zero.
pub fn nmse(predicted: &[f64], actual: &[f64]) -> Result<Option<f64>> {
    if predicted.len() != actual.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} files",
            predicted.len(),
            actual.len()
        )));
    }
    let denom: f64 = actual.iter().map(|a| a * a).sum();
    if denom == 0.0 {
        return Ok(None);
    }
    Ok(Some(squared_distance(predicted, actual) / denom))
}

/// Which forecaster [`run_online`] should run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Clustered windows, one LSTM per cluster.
    ClusteredLstm,
    /// One LSTM per file, trained on that file's history only.
    PerFileLstm,
    /// Predicts the previous slot's count.
    LastValue,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ClusteredLstm => "c-lstm",
            Method::PerFileLstm => "lstm",
            Method::LastValue => "last-value",
        }
    }
}

/// A row of the prediction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub slot: usize,
    pub file_id: u64,
    pub predicted: f64,
    pub actual: u64,
    /// Model that produced the forecast; empty for the last-value rule.
    pub cluster: Option<usize>,
}

/// A row of the NMSE log; `nmse` is empty for slots without requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseRecord {
    pub slot: usize,
    pub nmse: Option<f64>,
    pub running_avg_nmse: Option<f64>,
}

/// Output of one online forecasting pass.
#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub method: Method,
    /// First predicted slot, equal to `rho`.
    pub first_slot: usize,
    /// `predicted[t - first_slot][f]`.
    pub predicted: Vec<Vec<f64>>,
    pub records: Vec<PredictionRecord>,
    pub nmse: Vec<NmseRecord>,
    /// Cluster counts after the last slot (clustered method only).
    pub clusters: Option<ClusterModel>,
    /// Slots skipped in the NMSE average because nothing was requested.
    pub skipped_slots: usize,
}

impl OnlineRun {
    pub fn predicted_at(&self, slot: usize) -> Option<&[f64]> {
        slot.checked_sub(self.first_slot)
            .and_then(|i| self.predicted.get(i))
            .map(Vec::as_slice)
    }

    /// Mean NMSE over slots with requests, from `from_slot` on.
    pub fn average_nmse(&self, from_slot: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .nmse
            .iter()
            .filter(|r| r.slot >= from_slot)
            .filter_map(|r| r.nmse)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    pub fn final_running_nmse(&self) -> Option<f64> {
        self.nmse.last().and_then(|r| r.running_avg_nmse)
    }
}

/// Runs a forecaster over the whole trace.
///
/// Each slot `t >= rho` first predicts all files from their windows (the
/// clustered method assigns each window to its nearest center), then
/// updates the centers, stores `(window, d_f(t) / scale)` in the buffer of
/// the model that produced the forecast, and trains every model once.
pub fn run_online(
    trace: &DemandTrace,
    config: &PredictorConfig,
    method: Method,
    seeds: &SeedBank,
) -> Result<OnlineRun> {
    let rho = config.rho;
    if rho == 0 || trace.slots() <= rho {
        return Err(Error::Window(format!(
            "{} slots leave nothing to predict with rho = {rho}",
            trace.slots()
        )));
    }
    let files = trace.files();
    let mut bank = match method {
        Method::ClusteredLstm => {
            if config.clusters > files {
                return Err(Error::Input(format!(
                    "{} clusters for {files} files",
                    config.clusters
                )));
            }
            Some(LstmBank::new(config.clusters, config, seeds))
        }
        Method::PerFileLstm => Some(LstmBank::new(files, config, seeds)),
        Method::LastValue => None,
    };
    let mut model: Option<ClusterModel> = None;
    let mut kmeans_rng = seeds.rng("predictor.kmeans");

    let mut run = OnlineRun {
        method,
        first_slot: rho,
        predicted: Vec::with_capacity(trace.slots() - rho),
        records: Vec::with_capacity((trace.slots() - rho) * files),
        nmse: Vec::with_capacity(trace.slots() - rho),
        clusters: None,
        skipped_slots: 0,
    };
    let mut nmse_sum = 0.0;
    let mut nmse_n = 0usize;

    for t in rho..trace.slots() {
        let features: Vec<FeatureVector> = (0..files)
            .map(|f| make_feature(trace, f, t, rho))
            .collect::<Result<_>>()?;
        let normalized: Vec<&[f64]> = features.iter().map(|x| x.normalized.as_slice()).collect();
        if method == Method::ClusteredLstm && model.is_none() {
            let owned: Vec<Vec<f64>> = features.iter().map(|x| x.normalized.clone()).collect();
            model = Some(ClusterModel::init_kmeanspp(
                &owned,
                config.clusters,
                &mut kmeans_rng,
            )?);
        }

        // Phase 1: forecast every file.
        let owners: Vec<Option<usize>> = match method {
            Method::ClusteredLstm => {
                let m = model.as_ref().unwrap();
                normalized.iter().map(|x| Some(m.assign(x))).collect()
            }
            Method::PerFileLstm => (0..files).map(Some).collect(),
            Method::LastValue => vec![None; files],
        };
        let mut predicted = Vec::with_capacity(files);
        for (f, feature) in features.iter().enumerate() {
            let p = match (&bank, owners[f]) {
                (Some(bank), Some(owner)) => bank.predict(owner, feature)?,
                _ => *feature.raw.last().unwrap(),
            };
            predicted.push(p);
        }
        let actual_u = trace.aggregate_row(t);
        let actual: Vec<f64> = actual_u.iter().map(|&c| c as f64).collect();
        for f in 0..files {
            run.records.push(PredictionRecord {
                slot: t,
                file_id: trace.file_ids()[f],
                predicted: predicted[f],
                actual: actual_u[f],
                cluster: owners[f],
            });
        }
        let e = nmse(&predicted, &actual)?;
        match e {
            Some(v) => {
                nmse_sum += v;
                nmse_n += 1;
            }
            None => run.skipped_slots += 1,
        }
        run.nmse.push(NmseRecord {
            slot: t,
            nmse: e,
            running_avg_nmse: (nmse_n > 0).then(|| nmse_sum / nmse_n as f64),
        });
        run.predicted.push(predicted);

        // Phase 2: learn from the revealed counts.
        if let Some(m) = model.as_mut() {
            let assignments: Vec<usize> = owners.iter().map(|o| o.unwrap()).collect();
            m.update(&normalized, &assignments);
        }
        if let Some(bank) = bank.as_mut() {
            for (f, feature) in features.iter().enumerate() {
                // A silent window always forecasts zero, so it has nothing
                // to teach the network and its unnormalized target would
                // only destabilize it.
                if feature.is_zero() {
                    continue;
                }
                bank.push(
                    owners[f].unwrap(),
                    Sample {
                        window: feature.normalized.clone(),
                        target: actual[f] / feature.scale,
                    },
                );
            }
            for member in 0..bank.len() {
                bank.train_step(member)?;
            }
        }
    }
    run.clusters = model;
    Ok(run)
}

/// Writes the prediction log as `slot,file_id,predicted,actual,cluster`.
pub fn write_predictions(run: &OnlineRun, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &run.records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the NMSE log as `slot,nmse,running_avg_nmse`.
pub fn write_nmse(run: &OnlineRun, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &run.nmse {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;

    #[test]
    fn feature_examples() {
        let x = FeatureVector::from_window(vec![2.0, 4.0, 8.0]);
        assert_eq!(x.scale, 8.0);
        assert_eq!(x.normalized, vec![0.25, 0.5, 1.0]);
        let z = FeatureVector::from_window(vec![0.0; 4]);
        assert_eq!((z.scale, z.normalized.clone()), (1.0, vec![0.0; 4]));
        assert_eq!(
            FeatureVector::from_window(vec![5.0, 5.0]).normalized,
            vec![1.0, 1.0]
        );
    }

    #[test]
    fn make_feature_window() {
        let trace = DemandTrace::from_aggregate(4, 1, vec![1, 2, 4, 8]).unwrap();
        assert_eq!(
            make_feature(&trace, 0, 4, 3).unwrap().raw,
            vec![2.0, 4.0, 8.0]
        );
        assert!(matches!(
            make_feature(&trace, 0, 2, 3),
            Err(Error::Window(_))
        ));
    }

    #[test]
    fn assignment_examples() {
        let m = ClusterModel {
            centers: vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.3, 0.7]],
            counts: vec![0; 3],
        };
        assert_eq!(m.assign(&[0.3, 0.7]), 2);
        assert_eq!(m.assign(&[0.9, 0.9]), 1);
        let tie = ClusterModel {
            centers: vec![vec![0.0], vec![1.0]],
            counts: vec![0; 2],
        };
        assert_eq!(tie.assign(&[0.5]), 0);
    }

    #[test]
    fn update_examples() {
        let mut m = ClusterModel {
            centers: vec![vec![0.5, 0.5]],
            counts: vec![3],
        };
        m.update_center(0, &[&[1.0, 0.0]]);
        assert_relative_eq!(m.centers[0][0], 0.625);
        assert_relative_eq!(m.centers[0][1], 0.375);
        assert_eq!(m.counts[0], 4);
        m.update_center(0, &[]);
        assert_eq!(m.counts[0], 4);

        let mut fresh = ClusterModel {
            centers: vec![vec![0.9, 0.9]],
            counts: vec![0],
        };
        fresh.update_center(0, &[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(fresh.centers[0], vec![0.5, 0.5]);
    }

    #[test]
    fn kmeanspp_small_cases() {
        let feats = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]];
        let mut rng = rng_from_seed(3);
        let all = ClusterModel::init_kmeanspp(&feats, 3, &mut rng).unwrap();
        let mut got = all.centers.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = feats.clone();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        let one = ClusterModel::init_kmeanspp(&feats, 1, &mut rng).unwrap();
        assert!(feats.contains(&one.centers[0]));
        assert!(ClusterModel::init_kmeanspp(&feats, 4, &mut rng).is_err());
        let dup = vec![vec![1.0]; 3];
        assert_eq!(
            ClusterModel::init_kmeanspp(&dup, 3, &mut rng)
                .unwrap()
                .centers
                .len(),
            3
        );
    }

    #[test]
    fn nmse_examples() {
        assert_eq!(nmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), Some(0.0));
        assert_eq!(nmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), Some(1.0));
        assert_eq!(nmse(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), Some(2.0));
        assert_eq!(nmse(&[1.0], &[0.0]).unwrap(), None);
    }

    #[test]
    fn prediction_scaling_and_clamp() {
        let config = PredictorConfig {
            hidden: vec![2],
            ..PredictorConfig::default()
        };
        let mut bank = LstmBank::new(1, &config, &SeedBank::new(1));
        // Zero every weight and set the head bias so the output is fixed.
        let n = bank.net(0).num_params();
        let params = bank.net_mut(0).params_mut();
        params.iter_mut().for_each(|p| *p = 0.0);
        params[n - 1] = 0.7;
        let x = FeatureVector::from_window(vec![5.0, 10.0]);
        assert_relative_eq!(bank.predict(0, &x).unwrap(), 7.0, epsilon = 1e-12);
        assert_eq!(
            bank.predict(0, &FeatureVector::from_window(vec![0.0, 0.0]))
                .unwrap(),
            0.0
        );
        bank.net_mut(0).params_mut()[n - 1] = -0.1;
        assert_eq!(bank.predict(0, &x).unwrap(), 0.0);
    }

    #[test]
    fn empty_buffer_train_is_noop() {
        let mut bank = LstmBank::new(1, &PredictorConfig::default(), &SeedBank::new(1));
        let before = bank.net(0).params().to_vec();
        assert_eq!(bank.train_step(0).unwrap(), None);
        assert_eq!(bank.net(0).params(), before.as_slice());
    }

    #[test]
    fn last_value_on_constant_trace() {
        let trace = DemandTrace::from_aggregate(20, 2, vec![3; 40]).unwrap();
        let config = PredictorConfig {
            rho: 4,
            ..PredictorConfig::default()
        };
        let run = run_online(&trace, &config, Method::LastValue, &SeedBank::new(0)).unwrap();
        assert_eq!(run.average_nmse(0), Some(0.0));
        assert_eq!(run.predicted.len(), 16);
    }
}
