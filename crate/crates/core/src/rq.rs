//! Transformer-encoder risk model: regresses the driving agent's planning
//! horizon from the observation and exposes the ego token's attention as a
//! per-participant importance ranking.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ssev_nn::{
    glorot_uniform, Activation, AdamConfig, Bound, Checkpoint, Dense, Graph, LayerNorm, Mlp,
    MultiHeadAttention, ParamId, ParamStore, Tensor, Var,
};

use crate::agent::{TC_MAX, TC_MIN};
use crate::sim::{StateVector, OBS_DIM, PEDESTRIAN_SLOTS, VEHICLE_SLOTS};
use crate::Error;

pub const TOKEN_WIDTH: usize = 5;
pub const TOKENS: usize = 1 + VEHICLE_SLOTS + PEDESTRIAN_SLOTS;
const _: () = assert!(5 + 5 * VEHICLE_SLOTS + 3 * PEDESTRIAN_SLOTS == OBS_DIM);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RqConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub lr: f64,
    /// Anneal the learning rate to zero along a half cosine over all updates.
    pub cosine_decay: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
}

impl Default for RqConfig {
    fn default() -> Self {
        Self {
            width: 64,
            layers: 2,
            heads: 2,
            mlp_hidden: 128,
            lr: 1e-3,
            cosine_decay: true,
            batch_size: 64,
            epochs: 60,
            validation_fraction: 0.1,
        }
    }
}

/// One row per participant: ego, vehicle slots, then pedestrian slots
/// zero-padded from three to five features.
pub fn tokenize(x: &StateVector) -> Tensor {
    let mut data = Vec::with_capacity(TOKENS * TOKEN_WIDTH);
    data.extend_from_slice(&x.0[..5]);
    for i in 0..VEHICLE_SLOTS {
        data.extend_from_slice(x.vehicle_slot(i));
    }
    for j in 0..PEDESTRIAN_SLOTS {
        data.extend_from_slice(x.pedestrian_slot(j));
        data.extend_from_slice(&[0.0, 0.0]);
    }
    Tensor::matrix(TOKENS, TOKEN_WIDTH, data)
}

pub fn tokenize_batch(xs: &[StateVector]) -> Tensor {
    let mut data = Vec::with_capacity(xs.len() * TOKENS * TOKEN_WIDTH);
    for x in xs {
        data.extend(tokenize(x).into_data());
    }
    Tensor::matrix(xs.len() * TOKENS, TOKEN_WIDTH, data)
}

/// Risk percentage: 100 at the shortest horizon, 0 at the longest.
pub fn rq_from_tc(t_c: f64) -> f64 {
    (TC_MAX - t_c) / (TC_MAX - TC_MIN) * 100.0
}

/// Ego-row attention over the other tokens, renormalized, and the token
/// indices (1-based, ego = 0) sorted by descending score; ties keep the
/// lower index first.
pub fn importance_ranking(theta: &Tensor) -> (Vec<f64>, Vec<usize>) {
    let row = &theta.row_slice(0)[1..];
    let total: f64 = row.iter().sum();
    let scores: Vec<f64> = if total > 0.0 {
        row.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / row.len() as f64; row.len()]
    };
    let mut ranking: Vec<usize> = (1..=scores.len()).collect();
    ranking.sort_by(|&a, &b| scores[b - 1].total_cmp(&scores[a - 1]));
    (scores, ranking)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RqOutput {
    pub t_c_raw: f64,
    pub t_c_hat: f64,
    pub rq_percent: f64,
    /// Score of token `i + 1`.
    pub importance: Vec<f64>,
    pub ranking: Vec<usize>,
    /// Head-averaged attention of the final block.
    pub attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct Block {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct RqModel {
    pub cfg: RqConfig,
    pub store: ParamStore,
    embed: ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    head: Dense,
}

/// Graph handles of one encoder pass.
pub struct EncoderVars {
    pub embedded: Var,
    pub ego: Var,
    pub prediction: Var,
    pub attention: Option<Var>,
}

impl RqModel {
    pub fn new(cfg: RqConfig, seed: u64) -> Self {
        assert!(cfg.heads > 0 && cfg.width % cfg.heads == 0, "width must split across heads");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embed = store.add("embed", glorot_uniform(&mut rng, TOKEN_WIDTH, cfg.width));
        let blocks = (0..cfg.layers)
            .map(|l| Block {
                ln_attn: LayerNorm::new(&mut store, &format!("block{l}.ln_attn"), cfg.width),
                attn: MultiHeadAttention::new(&mut store, &format!("block{l}.attn"), cfg.width, cfg.heads, &mut rng),
                ln_mlp: LayerNorm::new(&mut store, &format!("block{l}.ln_mlp"), cfg.width),
                mlp: Mlp::new(
                    &mut store,
                    &format!("block{l}.mlp"),
                    &[cfg.width, cfg.mlp_hidden, cfg.width],
                    Activation::Relu,
                    &mut rng,
                ),
            })
            .collect();
        let ln_out = LayerNorm::new(&mut store, "ln_out", cfg.width);
        let head = Dense::new(&mut store, "head", cfg.width, 1, &mut rng);
        Self {
            cfg,
            store,
            embed,
            blocks,
            ln_out,
            head,
        }
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    pub fn head_bias_id(&self) -> ParamId {
        self.head.b
    }

    pub fn head_weight_id(&self) -> ParamId {
        self.head.w
    }

    /// Full forward on `[batch * TOKENS, TOKEN_WIDTH]` tokens.
    pub fn encode(&self, g: &mut Graph, p: &Bound, tokens: Var) -> EncoderVars {
        let rows = g.value(tokens).rows();
        assert_eq!(rows % TOKENS, 0, "token rows must be a multiple of {TOKENS}");
        let batch = rows / TOKENS;
        let embedded = g.matmul(tokens, p[self.embed]);
        let mut z = embedded;
        let mut attention = None;
        for b in &self.blocks {
            let n = b.ln_attn.forward(g, p, z);
            let (a, att) = b.attn.forward(g, p, n, TOKENS);
            z = g.add(a, z);
            attention = Some(att);
            let n = b.ln_mlp.forward(g, p, z);
            let m = b.mlp.forward(g, p, n);
            z = g.add(m, z);
        }
        let ego_rows: Vec<usize> = (0..batch).map(|i| i * TOKENS).collect();
        let ego_z = g.take_rows(z, &ego_rows);
        let ego = self.ln_out.forward(g, p, ego_z);
        let prediction = self.head.forward(g, p, ego);
        EncoderVars {
            embedded,
            ego,
            prediction,
            attention,
        }
    }

    /// Unclamped horizon predictions.
    pub fn predict_raw(&self, xs: &[StateVector]) -> Vec<f64> {
        if xs.is_empty() {
            return Vec::new();
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let t = g.input(tokenize_batch(xs));
        let out = self.encode(&mut g, &p, t);
        g.value(out.prediction).data().to_vec()
    }

    pub fn predict_tc(&self, x: &StateVector) -> f64 {
        self.predict_raw(std::slice::from_ref(x))[0].clamp(TC_MIN, TC_MAX)
    }

    pub fn infer(&self, x: &StateVector) -> RqOutput {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let t = g.input(tokenize(x));
        let out = self.encode(&mut g, &p, t);
        let raw = g.value(out.prediction).item();
        let theta = match out.attention {
            Some(a) => g.attention_scores(a).expect("attention node").remove(0),
            None => Tensor::filled(TOKENS, TOKENS, 1.0 / TOKENS as f64),
        };
        let (importance, ranking) = importance_ranking(&theta);
        let t_c_hat = raw.clamp(TC_MIN, TC_MAX);
        RqOutput {
            t_c_raw: raw,
            t_c_hat,
            rq_percent: rq_from_tc(t_c_hat),
            importance,
            ranking,
            attention: (0..TOKENS).map(|r| theta.row_slice(r).to_vec()).collect(),
        }
    }

    /// Mean squared error of the unclamped predictions.
    pub fn mse_loss(&self, g: &mut Graph, p: &Bound, xs: &[StateVector], labels: &[f64]) -> Var {
        let t = g.input(tokenize_batch(xs));
        let y = g.input(Tensor::column(labels));
        let out = self.encode(g, p, t);
        let e = g.sub(out.prediction, y);
        let sq = g.square(e);
        g.mean(sq)
    }

    pub fn mse(&self, records: &[DaRecord]) -> f64 {
        if records.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for chunk in records.chunks(512) {
            let xs: Vec<StateVector> = chunk.iter().map(|r| r.x).collect();
            let pred = self.predict_raw(&xs);
            total += pred
                .iter()
                .zip(chunk)
                .map(|(p, r)| (p - r.tc).powi(2))
                .sum::<f64>();
        }
        total / records.len() as f64
    }

    /// One Adam step on a mini-batch; returns the batch loss before the step.
    pub fn train_step(&mut self, batch: &[&DaRecord], adam: &AdamConfig) -> Result<f64, Error> {
        let xs: Vec<StateVector> = batch.iter().map(|r| r.x).collect();
        let ys: Vec<f64> = batch.iter().map(|r| r.tc).collect();
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let loss = self.mse_loss(&mut g, &p, &xs, &ys);
        let value = g.value(loss).item();
        let grads = g.backward(loss);
        let grads = self.store.collect_grads(&grads, &p);
        self.store
            .adam_step(&grads, adam)
            .map_err(|e| Error::Config(format!("risk-model update rejected: {e}")))?;
        Ok(value)
    }

    pub fn arch(&self) -> serde_json::Value {
        serde_json::json!({
            "width": self.cfg.width,
            "layers": self.cfg.layers,
            "heads": self.cfg.heads,
            "mlp_hidden": self.cfg.mlp_hidden,
            "tokens": TOKENS,
            "token_width": TOKEN_WIDTH,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        Checkpoint::new("rq_model", self.arch())
            .with_tensors(self.store.named_tensors(""))
            .save(path)
            .map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: &Path, mut cfg: RqConfig) -> Result<Self, Error> {
        let ck = Checkpoint::load(path).map_err(|e| Error::io_at(path, e))?;
        let get = |k: &str| {
            ck.arch
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("missing `{k}` in header")))
        };
        cfg.width = get("width")?;
        cfg.layers = get("layers")?;
        cfg.heads = get("heads")?;
        cfg.mlp_hidden = get("mlp_hidden")?;
        let mut model = RqModel::new(cfg, 0);
        model
            .store
            .load_named(&ck.tensors, "")
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaRecord {
    pub x: StateVector,
    pub tc: f64,
}

pub fn write_dataset(path: &Path, records: &[DaRecord]) -> Result<(), Error> {
    let f = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::io_at(path, e))?;
        writeln!(w, "{line}").map_err(|e| Error::io_at(path, e))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<DaRecord>, Error> {
    let f = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io_at(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::io_at(path, e))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RqTrainReport {
    pub epoch_train_loss: Vec<f64>,
    pub epoch_validation_mse: Vec<f64>,
    pub validation_mse: f64,
    pub train_records: usize,
    pub validation_records: usize,
}

/// Shuffles with `seed`, holds out the validation fraction, then runs
/// `cfg.epochs` passes of shuffled mini-batches over the training split.
pub fn train_rq(model: &mut RqModel, records: &[DaRecord], seed: u64) -> Result<RqTrainReport, Error> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = ((records.len() as f64) * model.cfg.validation_fraction).floor() as usize;
    let n_val = if records.len() > 1 { n_val.min(records.len() - 1) } else { 0 };
    let validation: Vec<DaRecord> = idx[..n_val].iter().map(|&i| records[i]).collect();
    let mut train: Vec<usize> = idx[n_val..].to_vec();
    let mut report = RqTrainReport {
        epoch_train_loss: Vec::new(),
        epoch_validation_mse: Vec::new(),
        validation_mse: 0.0,
        train_records: train.len(),
        validation_records: validation.len(),
    };
    let bs = model.cfg.batch_size.max(1);
    let total = model.cfg.epochs * train.len().div_ceil(bs);
    let mut step = 0;
    for _ in 0..model.cfg.epochs {
        train.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in train.chunks(bs) {
            let scale = if model.cfg.cosine_decay {
                0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            } else {
                1.0
            };
            let adam = AdamConfig::with_lr(model.cfg.lr * scale);
            let batch: Vec<&DaRecord> = chunk.iter().map(|&i| &records[i]).collect();
            sum += model.train_step(&batch, &adam)? * batch.len() as f64;
            step += 1;
        }
        report.epoch_train_loss.push(sum / train.len() as f64);
        let val = if validation.is_empty() {
            sum / train.len() as f64
        } else {
            model.mse(&validation)
        };
        report.epoch_validation_mse.push(val);
    }
    report.validation_mse = if validation.is_empty() {
        let all: Vec<DaRecord> = train.iter().map(|&i| records[i]).collect();
        model.mse(&all)
    } else {
        model.mse(&validation)
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rq_endpoints() {
        assert_eq!(rq_from_tc(0.5), 100.0);
        assert_eq!(rq_from_tc(4.0), 0.0);
        assert_eq!(rq_from_tc(2.25), 50.0);
    }

    #[test]
    fn ranking_ties_prefer_lower_index() {
        let mut theta = Tensor::zeros(3, 3);
        theta.set(0, 0, 0.2);
        theta.set(0, 1, 0.4);
        theta.set(0, 2, 0.4);
        let (scores, rank) = importance_ranking(&theta);
        assert_eq!(rank, vec![1, 2]);
        assert_eq!(scores, vec![0.5, 0.5]);
    }

    #[test]
    fn ranking_starts_with_largest() {
        let mut theta = Tensor::zeros(6, 6);
        for (j, v) in [0.0, 0.1, 0.5, 0.2, 0.15, 0.05].into_iter().enumerate() {
            theta.set(0, j, v);
        }
        let (_, rank) = importance_ranking(&theta);
        assert_eq!(rank[0], 2);
    }

    #[test]
    fn pedestrian_tokens_are_padded() {
        let mut x = [0.0; OBS_DIM];
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f64;
        }
        let t = tokenize(&StateVector(x));
        assert_eq!(t.row_slice(6), &[30.0, 31.0, 32.0, 0.0, 0.0]);
        assert_eq!(t.row_slice(7), &[33.0, 34.0, 35.0, 0.0, 0.0]);
        assert_eq!(t.row_slice(1), &[5.0, 6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn zero_head_predicts_bias() {
        let mut m = RqModel::new(RqConfig { width: 4, mlp_hidden: 8, ..RqConfig::default() }, 3);
        *m.store.get_mut(m.head_weight_id()) = Tensor::zeros(4, 1);
        *m.store.get_mut(m.head_bias_id()) = Tensor::scalar(1.7);
        let x = StateVector([0.3; OBS_DIM]);
        assert_eq!(m.predict_raw(&[x])[0], 1.7);
        *m.store.get_mut(m.head_bias_id()) = Tensor::scalar(5.1);
        assert_eq!(m.predict_tc(&x), 4.0);
    }
}
