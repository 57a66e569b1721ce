use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::Adam;
use super::{CalibratedModel, Mlp, Prediction, ReplayBuffer};
use crate::checkpoint::Checkpoint;
use crate::common::RandomSource;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    /// Used when no ground truth is available for fitting beta.
    pub beta: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 5,
            hidden: vec![32, 32],
            beta: 2.0,
        }
    }
}

impl EnsembleConfig {
    /// Five members with three hidden layers of width 200.
    pub fn large() -> Self {
        Self {
            hidden: vec![200, 200, 200],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub bootstrap: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Per member, the mean training loss of every epoch.
    pub member_losses: Vec<Vec<f64>>,
}

impl TrainingReport {
    pub fn final_losses(&self) -> Vec<f64> {
        self.member_losses
            .iter()
            .map(|l| *l.last().unwrap_or(&f64::NAN))
            .collect()
    }

    /// Whether the `window`-epoch moving average of every member's loss
    /// never increases by more than `slack` (relative).
    pub fn moving_average_non_increasing(&self, window: usize, slack: f64) -> bool {
        let window = window.max(1);
        self.member_losses.iter().all(|losses| {
            let avgs: Vec<f64> = losses
                .windows(window)
                .map(|w| w.iter().sum::<f64>() / window as f64)
                .collect();
            avgs.windows(2).all(|p| p[1] <= p[0] * (1.0 + slack))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Normalizer {
    in_mean: Vec<f64>,
    in_std: Vec<f64>,
    in_min: Vec<f64>,
    in_max: Vec<f64>,
    out_mean: Vec<f64>,
    out_std: Vec<f64>,
}

fn mean_std(columns: usize, rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; columns];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; columns];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std = var
        .into_iter()
        .map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 })
        .collect();
    (mean, std)
}

impl Normalizer {
    fn fit(buffer: &ReplayBuffer) -> Self {
        let dx = buffer.state_dim();
        let du = buffer.action_dim();
        let inputs: Vec<Vec<f64>> = buffer
            .iter()
            .map(|t| [t.x.as_slice(), t.u.as_slice()].concat())
            .collect();
        let outputs: Vec<Vec<f64>> = buffer
            .iter()
            .map(|t| t.next.iter().zip(&t.x).map(|(n, x)| n - x).collect())
            .collect();
        let (in_mean, in_std) = mean_std(dx + du, &inputs);
        let (out_mean, out_std) = mean_std(dx, &outputs);
        let mut in_min = vec![f64::INFINITY; dx + du];
        let mut in_max = vec![f64::NEG_INFINITY; dx + du];
        for r in &inputs {
            for i in 0..r.len() {
                in_min[i] = in_min[i].min(r[i]);
                in_max[i] = in_max[i].max(r[i]);
            }
        }
        Self {
            in_mean,
            in_std,
            in_min,
            in_max,
            out_mean,
            out_std,
        }
    }

    fn identity(dim_in: usize, dim_out: usize) -> Self {
        Self {
            in_mean: vec![0.0; dim_in],
            in_std: vec![1.0; dim_in],
            in_min: vec![f64::INFINITY; dim_in],
            in_max: vec![f64::NEG_INFINITY; dim_in],
            out_mean: vec![0.0; dim_out],
            out_std: vec![1.0; dim_out],
        }
    }

    fn encode_input(&self, x: &[f64], u: &[f64], out: &mut Vec<f64>) -> bool {
        out.clear();
        let mut outside = false;
        for (i, v) in x.iter().chain(u).enumerate() {
            let span = (self.in_max[i] - self.in_min[i]).max(0.0);
            let margin = 0.1 * span;
            if *v < self.in_min[i] - margin || *v > self.in_max[i] + margin {
                outside = true;
            }
            out.push((v - self.in_mean[i]) / self.in_std[i]);
        }
        outside
    }
}

/// Deterministic ensemble predicting state increments.
///
/// `mu` is the member mean of `x + delta`, `sigma` the element-wise member
/// standard deviation.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    config: EnsembleConfig,
    state_dim: usize,
    action_dim: usize,
    members: Vec<Mlp>,
    norm: Normalizer,
    trained: bool,
    beta: f64,
}

impl EnsembleModel {
    pub fn new(state_dim: usize, action_dim: usize, config: EnsembleConfig, rng: &mut RandomSource) -> Result<Self> {
        if config.members == 0 {
            return Err(Error::invalid("ensemble needs at least one member"));
        }
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend(&config.hidden);
        sizes.push(state_dim);
        let members = (0..config.members)
            .map(|m| Mlp::new(sizes.clone(), &mut rng.fork(m as u64)))
            .collect();
        Ok(Self {
            beta: config.beta,
            config,
            state_dim,
            action_dim,
            members,
            norm: Normalizer::identity(state_dim + action_dim, state_dim),
            trained: false,
        })
    }

    /// Builds an ensemble from explicit members; inputs and outputs are
    /// left un-normalized.
    pub fn from_members(state_dim: usize, action_dim: usize, members: Vec<Mlp>, beta: f64) -> Result<Self> {
        if members.is_empty()
            || members
                .iter()
                .any(|m| m.input_dim() != state_dim + action_dim || m.output_dim() != state_dim)
        {
            return Err(Error::invalid("member shapes do not match the ensemble"));
        }
        let hidden = members[0].sizes()[1..members[0].sizes().len() - 1].to_vec();
        Ok(Self {
            config: EnsembleConfig {
                members: members.len(),
                hidden,
                beta,
            },
            state_dim,
            action_dim,
            members,
            norm: Normalizer::identity(state_dim + action_dim, state_dim),
            trained: true,
            beta,
        })
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.beta = beta;
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    /// Trains every member on a bootstrap resample of `buffer`.
    pub fn fit(&mut self, buffer: &ReplayBuffer, cfg: &FitConfig, rng: &mut RandomSource) -> Result<TrainingReport> {
        if buffer.is_empty() {
            return Err(Error::invalid("cannot fit an ensemble on an empty buffer"));
        }
        if buffer.state_dim() != self.state_dim || buffer.action_dim() != self.action_dim {
            return Err(Error::invalid("buffer dimensions do not match the ensemble"));
        }
        self.norm = Normalizer::fit(buffer);
        let n = buffer.len();
        let din = self.state_dim + self.action_dim;
        let dout = self.state_dim;
        let mut inputs = Vec::with_capacity(n * din);
        let mut targets = Vec::with_capacity(n * dout);
        let mut scratch = Vec::with_capacity(din);
        for t in buffer.iter() {
            self.norm.encode_input(&t.x, &t.u, &mut scratch);
            inputs.extend_from_slice(&scratch);
            for i in 0..dout {
                targets.push((t.next[i] - t.x[i] - self.norm.out_mean[i]) / self.norm.out_std[i]);
            }
        }
        let streams: Vec<RandomSource> = (0..self.members.len()).map(|m| rng.fork(m as u64)).collect();
        let results: Vec<Result<Vec<f64>>> = self
            .members
            .par_iter_mut()
            .zip(streams)
            .enumerate()
            .map(|(m, (net, mut r))| train_member(m, net, &inputs, &targets, n, din, dout, cfg, &mut r))
            .collect();
        let member_losses = results.into_iter().collect::<Result<Vec<_>>>()?;
        self.trained = true;
        Ok(TrainingReport { member_losses })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(
            "ensemble",
            serde_json::json!({
                "state_dim": self.state_dim,
                "action_dim": self.action_dim,
                "config": self.config,
                "beta": self.beta,
                "trained": self.trained,
                "sizes": self.members[0].sizes(),
            }),
        );
        for (i, m) in self.members.iter().enumerate() {
            c.put(&format!("member_{i}"), vec![m.params().len()], m.params());
        }
        let n = &self.norm;
        let din = n.in_mean.len();
        let dout = n.out_mean.len();
        c.put("in_mean", vec![din], &n.in_mean);
        c.put("in_std", vec![din], &n.in_std);
        c.put("in_min", vec![din], &n.in_min);
        c.put("in_max", vec![din], &n.in_max);
        c.put("out_mean", vec![dout], &n.out_mean);
        c.put("out_std", vec![dout], &n.out_std);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind("ensemble")?;
        let meta = &c.metadata;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Format(format!("ensemble metadata lacks `{k}`")))
        };
        let state_dim: usize = serde_json::from_value(field("state_dim")?.clone())?;
        let action_dim: usize = serde_json::from_value(field("action_dim")?.clone())?;
        let config: EnsembleConfig = serde_json::from_value(field("config")?.clone())?;
        let beta: f64 = serde_json::from_value(field("beta")?.clone())?;
        let trained: bool = serde_json::from_value(field("trained")?.clone())?;
        let sizes: Vec<usize> = serde_json::from_value(field("sizes")?.clone())?;
        let members = (0..config.members)
            .map(|i| {
                let (_, p) = c.get(&format!("member_{i}"))?;
                Mlp::from_parts(sizes.clone(), p).ok_or_else(|| Error::Format("member size mismatch".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = Normalizer {
            in_mean: c.get("in_mean")?.1,
            in_std: c.get("in_std")?.1,
            in_min: c.get("in_min")?.1,
            in_max: c.get("in_max")?.1,
            out_mean: c.get("out_mean")?.1,
            out_std: c.get("out_std")?.1,
        };
        Ok(Self {
            config,
            state_dim,
            action_dim,
            members,
            norm,
            trained,
            beta,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn train_member(
    member: usize,
    net: &mut Mlp,
    inputs: &[f64],
    targets: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    cfg: &FitConfig,
    rng: &mut RandomSource,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = if cfg.bootstrap {
        (0..n).map(|_| rng.gen_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let mut opt = Adam::new(net.params().len(), cfg.lr, cfg.weight_decay);
    let batch = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let mut order = idx.clone();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut bx = Vec::with_capacity(batch * din);
    let mut by = Vec::with_capacity(batch * dout);
    for epoch in 0..cfg.epochs {
        if batch < n {
            order.shuffle(rng);
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&inputs[i * din..(i + 1) * din]);
                by.extend_from_slice(&targets[i * dout..(i + 1) * dout]);
            }
            let (loss, grad) = net.loss_and_grad(&bx, &by, chunk.len());
            if !loss.is_finite() || loss > 1e6 {
                return Err(Error::Divergence { member, epoch, loss });
            }
            opt.step(net.params_mut(), &grad);
            total += loss;
            batches += 1;
        }
        losses.push(total / batches as f64);
    }
    Ok(losses)
}

impl CalibratedModel for EnsembleModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn predict(&self, x: &[f64], u: &[f64]) -> Prediction {
        let mut z = Vec::with_capacity(self.state_dim + self.action_dim);
        let outside = self.norm.encode_input(x, u, &mut z);
        let k = self.members.len() as f64;
        let preds: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| {
                m.forward(&z)
                    .iter()
                    .enumerate()
                    .map(|(i, o)| x[i] + self.norm.out_mean[i] + self.norm.out_std[i] * o)
                    .collect()
            })
            .collect();
        let mut mean = vec![0.0; self.state_dim];
        for p in &preds {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / k;
            }
        }
        let mut std = vec![0.0; self.state_dim];
        for p in &preds {
            for ((s, v), m) in std.iter_mut().zip(p).zip(&mean) {
                *s += (v - m) * (v - m) / k;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
        Prediction {
            mean,
            std,
            out_of_range: outside || !self.trained,
        }
    }

    fn beta(&self) -> f64 {
        self.beta
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A 1-in, 1-out "network" that outputs a constant.
    fn constant_member(value: f64) -> Mlp {
        // sizes [2, 1]: weights for (x, u) then bias
        Mlp::from_parts(vec![2, 1], vec![0.0, 0.0, value]).unwrap()
    }

    #[test]
    fn two_member_mean_and_std() {
        // members predict increments 0 and 2 from x = 0
        let e = EnsembleModel::from_members(1, 1, vec![constant_member(0.0), constant_member(2.0)], 1.0).unwrap();
        let p = e.predict(&[0.0], &[0.0]);
        assert_eq!(p.mean, vec![1.0]);
        assert_eq!(p.std, vec![1.0]);
    }

    #[test]
    fn identical_members_have_zero_sigma() {
        let e = EnsembleModel::from_members(1, 1, vec![constant_member(0.3); 5], 1.0).unwrap();
        assert_eq!(e.predict(&[0.5], &[0.1]).std, vec![0.0]);
    }

    #[test]
    fn empty_buffer_rejected() {
        let mut rng = RandomSource::new(0, 0);
        let mut e = EnsembleModel::new(2, 1, EnsembleConfig::default(), &mut rng).unwrap();
        let buf = ReplayBuffer::new(2, 1, 10).unwrap();
        assert!(e.fit(&buf, &FitConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn memorizes_a_repeated_transition() {
        let mut rng = RandomSource::new(1, 0);
        let cfg = EnsembleConfig {
            members: 2,
            hidden: vec![8],
            beta: 1.0,
        };
        let mut e = EnsembleModel::new(2, 1, cfg, &mut rng).unwrap();
        let mut buf = ReplayBuffer::new(2, 1, 100).unwrap();
        for _ in 0..20 {
            buf.push(&[0.1, 0.2], &[0.3], &[0.15, 0.1]).unwrap();
        }
        let fit = FitConfig {
            epochs: 400,
            lr: 1e-2,
            weight_decay: 0.0,
            ..FitConfig::default()
        };
        let report = e.fit(&buf, &fit, &mut rng).unwrap();
        assert!(
            report.final_losses().iter().all(|l| *l < 1e-6),
            "{:?}",
            report.final_losses()
        );
        let p = e.predict(&[0.1, 0.2], &[0.3]);
        assert!((p.mean[0] - 0.15).abs() < 1e-4 && (p.mean[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let mut rng = RandomSource::new(2, 0);
        let cfg = EnsembleConfig {
            members: 3,
            hidden: vec![4],
            beta: 1.7,
        };
        let mut e = EnsembleModel::new(2, 1, cfg, &mut rng).unwrap();
        let mut buf = ReplayBuffer::new(2, 1, 100).unwrap();
        for i in 0..30 {
            let x = [i as f64 * 0.1, -0.05 * i as f64];
            buf.push(&x, &[0.1], &[x[0] + 0.01, x[1]]).unwrap();
        }
        e.fit(
            &buf,
            &FitConfig {
                epochs: 5,
                ..FitConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        let text = e.to_checkpoint().to_string_pretty().unwrap();
        let back = EnsembleModel::from_checkpoint(&Checkpoint::parse(&text).unwrap()).unwrap();
        let a = e.predict(&[0.3, 0.2], &[0.0]);
        let b = back.predict(&[0.3, 0.2], &[0.0]);
        assert_eq!(a, b);
        assert_eq!(back.beta(), 1.7);
    }
}
