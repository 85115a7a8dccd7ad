//! The dual-channel network.
//!
//! Goal channel: GRU over embedded positions, destination embedding,
//! modulation `e_i = φ([h^g, d'_i])`, ranking softmax across destinations.
//! Trajectory channel: GRU encoder, then a GRU decoder whose input at every
//! step fuses an attention-weighted control signal over `E` with the previous
//! prediction.
//!
//! Everything operates on batches: `B` samples that share `n_dest`. Rows of
//! `E` are laid out sample-major, `(B·n_dest) × width`.

mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{GtpConfig, Variant};

use crate::data::TrajectorySample;
use crate::error::{GtpError, Result};
use crate::geometry::Point;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Model inputs for samples sharing `n_dest`, in network units.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub n_dest: usize,
    /// `t_obs` tensors of `B × 2`.
    observed: Vec<Tensor>,
    /// `(B·n_dest) × 6`.
    destinations: Tensor,
    /// `B × 2`, the last observed position.
    last: Tensor,
    /// `t_pred` tensors of `B × 2` when targets are known.
    future: Option<Vec<Tensor>>,
    /// 0-based goal per sample.
    goals: Vec<usize>,
}

impl Batch {
    pub fn new(samples: &[&TrajectorySample], config: &GtpConfig) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(GtpError::contract("empty batch"));
        };
        let (b, n) = (samples.len(), first.n_dest());
        if n == 0 {
            return Err(GtpError::contract("sample without destinations"));
        }
        let s = config.position_scale;
        for x in samples {
            if x.observed.len() != config.t_obs {
                return Err(GtpError::contract(format!(
                    "observed length {} but t_obs = {}",
                    x.observed.len(),
                    config.t_obs
                )));
            }
            if x.n_dest() != n {
                return Err(GtpError::contract("batch mixes destination counts"));
            }
            if x.goal == 0 || x.goal > n {
                return Err(GtpError::contract(format!("goal {} outside 1..={n}", x.goal)));
            }
        }
        let rows = |pick: &dyn Fn(&TrajectorySample) -> Point| {
            let mut data = Vec::with_capacity(2 * b);
            for x in samples {
                let p = pick(x);
                data.extend([s * p.x, s * p.y]);
            }
            Tensor::matrix(b, 2, data).expect("b × 2")
        };
        let observed = (0..config.t_obs).map(|t| rows(&|x| x.observed[t])).collect();
        let last = rows(&|x| x.observed[config.t_obs - 1]);
        let future_len = first.future.len();
        let future = if future_len == 0 {
            None
        } else {
            if samples.iter().any(|x| x.future.len() != future_len) {
                return Err(GtpError::contract("batch mixes future lengths"));
            }
            Some((0..future_len).map(|t| rows(&|x| x.future[t])).collect())
        };
        let mut d = Vec::with_capacity(b * n * 6);
        for x in samples {
            for f in &x.destinations {
                let a = f.to_array();
                d.extend([s * a[0], s * a[1], s * a[2], s * a[3], a[4], a[5]]);
            }
        }
        Ok(Batch {
            size: b,
            n_dest: n,
            observed,
            destinations: Tensor::matrix(b * n, 6, d)?,
            last,
            future,
            goals: samples.iter().map(|x| x.goal - 1).collect(),
        })
    }

    pub fn goals(&self) -> &[usize] {
        &self.goals
    }

    pub fn has_future(&self) -> bool {
        self.future.is_some()
    }
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct GoalIds {
    embed_w: ParamId,
    embed_b: ParamId,
    gru: GruIds,
    dest_w: ParamId,
    dest_b: ParamId,
    /// φ split as `D' W_d + h^g W_h + b`.
    modulation: Option<(ParamId, ParamId, ParamId)>,
    rank_w: ParamId,
    rank_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct TrajIds {
    embed_w: ParamId,
    embed_b: ParamId,
    enc: GruIds,
    dec: GruIds,
    /// γ^a split as `E w_e + h w_h + b`.
    attention: Option<(ParamId, ParamId, ParamId)>,
    fuse_c: Option<ParamId>,
    fuse_q: ParamId,
    fuse_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Symbolic handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// One `B × 2` prediction per decoded step (network units).
    pub predictions: Vec<Var>,
    /// `B × n_dest` ranking distribution (goal features only).
    pub rank: Option<Var>,
    /// One `B × n_dest` attention matrix per decoded step.
    pub attention: Vec<Var>,
}

/// Output for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    /// Predicted future in world metres.
    pub predicted: Vec<Point>,
    /// The same points in the sample's frame.
    pub predicted_frame: Vec<Point>,
    /// Ranking distribution over destinations (empty without goal features).
    pub rank: Vec<f64>,
    /// Attention weights, one row per predicted step.
    pub attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct GtpModel {
    config: GtpConfig,
    params: ParamStore,
    goal: Option<GoalIds>,
    traj: TrajIds,
}

fn uniform(store: &mut ParamStore, name: &str, rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    store.insert(name, Tensor::matrix(rows, cols, data)?)?;
    Ok(())
}

fn gru_params(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    uniform(store, &format!("{prefix}.wx"), input, 3 * hidden, input, rng)?;
    uniform(store, &format!("{prefix}.wh"), hidden, 3 * hidden, hidden, rng)?;
    store.insert_zeros(format!("{prefix}.b"), 1, 3 * hidden)?;
    Ok(())
}

impl GtpModel {
    /// Freshly initialised parameters for `config`, seeded by `config.seed`.
    pub fn new(config: GtpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let (h, pe, de, w) = (config.hidden, config.pos_embed, config.dest_embed, config.dest_repr_dim());
        if config.use_goal_features {
            uniform(&mut p, "goal.embed.w", 2, pe, 2, &mut rng)?;
            p.insert_zeros("goal.embed.b", 1, pe)?;
            gru_params(&mut p, "goal.gru", pe, h, &mut rng)?;
            uniform(&mut p, "dest.w", 6, de, 6, &mut rng)?;
            p.insert_zeros("dest.b", 1, de)?;
            if config.use_modulation {
                uniform(&mut p, "mod.wd", de, config.mod_dim, de + h, &mut rng)?;
                uniform(&mut p, "mod.wh", h, config.mod_dim, de + h, &mut rng)?;
                p.insert_zeros("mod.b", 1, config.mod_dim)?;
            }
            uniform(&mut p, "rank.w", w, 1, w, &mut rng)?;
            p.insert_zeros("rank.b", 1, 1)?;
        }
        uniform(&mut p, "traj.embed.w", 2, pe, 2, &mut rng)?;
        p.insert_zeros("traj.embed.b", 1, pe)?;
        gru_params(&mut p, "enc.gru", pe, h, &mut rng)?;
        gru_params(&mut p, "dec.gru", pe, h, &mut rng)?;
        if config.use_goal_features {
            if config.flexible_attention {
                uniform(&mut p, "attn.we", w, 1, w + h, &mut rng)?;
                uniform(&mut p, "attn.wh", h, 1, w + h, &mut rng)?;
                p.insert_zeros("attn.b", 1, 1)?;
            }
            uniform(&mut p, "fuse.wc", w, pe, w + 2, &mut rng)?;
            uniform(&mut p, "fuse.wq", 2, pe, w + 2, &mut rng)?;
        } else {
            uniform(&mut p, "fuse.wq", 2, pe, 2, &mut rng)?;
        }
        p.insert_zeros("fuse.b", 1, pe)?;
        uniform(&mut p, "out.w", h, 2, h, &mut rng)?;
        p.insert_zeros("out.b", 1, 2)?;
        Self::from_params(config, p)
    }

    /// Wraps existing parameters (e.g. from a checkpoint), checking names and shapes.
    pub fn from_params(config: GtpConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (h, pe, de, w) = (config.hidden, config.pos_embed, config.dest_embed, config.dest_repr_dim());
        let get = |name: &str, rows: usize, cols: usize| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| GtpError::Checkpoint(format!("missing parameter {name}")))?;
            let shape = params.get(id).shape();
            if shape != [rows, cols] {
                return Err(GtpError::Checkpoint(format!(
                    "parameter {name} has shape {shape:?}, expected [{rows}, {cols}]"
                )));
            }
            Ok(id)
        };
        let gru = |prefix: &str, input: usize| -> Result<GruIds> {
            Ok(GruIds {
                wx: get(&format!("{prefix}.wx"), input, 3 * h)?,
                wh: get(&format!("{prefix}.wh"), h, 3 * h)?,
                b: get(&format!("{prefix}.b"), 1, 3 * h)?,
            })
        };
        let goal = if config.use_goal_features {
            Some(GoalIds {
                embed_w: get("goal.embed.w", 2, pe)?,
                embed_b: get("goal.embed.b", 1, pe)?,
                gru: gru("goal.gru", pe)?,
                dest_w: get("dest.w", 6, de)?,
                dest_b: get("dest.b", 1, de)?,
                modulation: if config.use_modulation {
                    Some((
                        get("mod.wd", de, config.mod_dim)?,
                        get("mod.wh", h, config.mod_dim)?,
                        get("mod.b", 1, config.mod_dim)?,
                    ))
                } else {
                    None
                },
                rank_w: get("rank.w", w, 1)?,
                rank_b: get("rank.b", 1, 1)?,
            })
        } else {
            None
        };
        let traj = TrajIds {
            embed_w: get("traj.embed.w", 2, pe)?,
            embed_b: get("traj.embed.b", 1, pe)?,
            enc: gru("enc.gru", pe)?,
            dec: gru("dec.gru", pe)?,
            attention: if config.use_goal_features && config.flexible_attention {
                Some((get("attn.we", w, 1)?, get("attn.wh", h, 1)?, get("attn.b", 1, 1)?))
            } else {
                None
            },
            fuse_c: if config.use_goal_features {
                Some(get("fuse.wc", w, pe)?)
            } else {
                None
            },
            fuse_q: get("fuse.wq", 2, pe)?,
            fuse_b: get("fuse.b", 1, pe)?,
            out_w: get("out.w", h, 2)?,
            out_b: get("out.b", 1, 2)?,
        };
        let expected = params.len();
        let model = GtpModel {
            config,
            params,
            goal,
            traj,
        };
        let known = model.goal_channel_ids().len() + model.trajectory_channel_ids().len();
        if known != expected {
            return Err(GtpError::Checkpoint(format!(
                "{expected} parameters stored but the configuration uses {known}"
            )));
        }
        Ok(model)
    }

    pub fn config(&self) -> &GtpConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (GtpConfig, ParamStore) {
        (self.config, self.params)
    }

    /// γ^g, goal GRU, destination embedding, φ and the ranking layer.
    pub fn goal_channel_ids(&self) -> Vec<ParamId> {
        let Some(g) = &self.goal else { return Vec::new() };
        let mut ids = vec![g.embed_w, g.embed_b, g.gru.wx, g.gru.wh, g.gru.b, g.dest_w, g.dest_b];
        if let Some((a, b, c)) = g.modulation {
            ids.extend([a, b, c]);
        }
        ids.extend([g.rank_w, g.rank_b]);
        ids
    }

    /// γ^E, both trajectory GRUs, γ^a, the fusion layer and γ^o.
    pub fn trajectory_channel_ids(&self) -> Vec<ParamId> {
        let t = &self.traj;
        let mut ids = vec![t.embed_w, t.embed_b, t.enc.wx, t.enc.wh, t.enc.b, t.dec.wx, t.dec.wh, t.dec.b];
        if let Some((a, b, c)) = t.attention {
            ids.extend([a, b, c]);
        }
        ids.extend(t.fuse_c);
        ids.extend([t.fuse_q, t.fuse_b, t.out_w, t.out_b]);
        ids
    }

    /// Per-parameter flags, true for the members of `ids`.
    pub fn mask(&self, ids: &[ParamId]) -> Vec<bool> {
        let mut m = vec![false; self.params.len()];
        for id in ids {
            m[id.index()] = true;
        }
        m
    }

    fn dense(t: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (t.param(w), t.param(b));
        let y = t.matmul(x, w)?;
        t.add_row(y, b)
    }

    fn check(t: &Tape, v: Var, context: impl FnOnce() -> String) -> Result<()> {
        if t.value(v).is_finite() {
            Ok(())
        } else {
            Err(GtpError::NonFinite { context: context() })
        }
    }

    fn encode(&self, t: &mut Tape, batch: &Batch, ew: ParamId, eb: ParamId, gru: GruIds, name: &str) -> Result<Var> {
        if batch.observed.len() != self.config.t_obs {
            return Err(GtpError::contract(format!(
                "{} observed steps, expected {}",
                batch.observed.len(),
                self.config.t_obs
            )));
        }
        let mut h = t.input(Tensor::zeros(batch.size, self.config.hidden));
        let (wx, wh, b) = (t.param(gru.wx), t.param(gru.wh), t.param(gru.b));
        for (step, q) in batch.observed.iter().enumerate() {
            let q = t.input(q.clone());
            let x = Self::dense(t, q, ew, eb)?;
            let x = t.tanh(x);
            h = t.gru_cell(h, x, wx, wh, b)?;
            Self::check(t, h, || format!("{name} step {}", step + 1))?;
        }
        Ok(h)
    }

    fn goal_ids(&self) -> Result<&GoalIds> {
        self.goal
            .as_ref()
            .ok_or_else(|| GtpError::contract("goal channel disabled by configuration"))
    }

    /// `h^g_{t_obs}`: goal GRU over embedded observed positions.
    pub fn goal_encode(&self, t: &mut Tape, batch: &Batch) -> Result<Var> {
        let g = *self.goal_ids()?;
        self.encode(t, batch, g.embed_w, g.embed_b, g.gru, "goal encoder")
    }

    /// `h^E_{t_obs}`: trajectory GRU over embedded observed positions.
    pub fn traj_encode(&self, t: &mut Tape, batch: &Batch) -> Result<Var> {
        let tr = self.traj;
        self.encode(t, batch, tr.embed_w, tr.embed_b, tr.enc, "trajectory encoder")
    }

    /// `E`: `φ([h^g, d'_i])` per destination, or `d'_i` alone without modulation.
    pub fn modulate_destinations(&self, t: &mut Tape, goal_state: Option<Var>, batch: &Batch) -> Result<Var> {
        let g = *self.goal_ids()?;
        let d = t.input(batch.destinations.clone());
        let d = Self::dense(t, d, g.dest_w, g.dest_b)?;
        let d = t.tanh(d);
        let Some((wd, wh, b)) = g.modulation else {
            return Ok(d);
        };
        let hg = goal_state.ok_or_else(|| GtpError::contract("modulation needs the goal state"))?;
        let wd = t.param(wd);
        let part_d = t.matmul(d, wd)?;
        let wh = t.param(wh);
        let part_h = t.matmul(hg, wh)?;
        let part_h = t.repeat_rows(part_h, batch.n_dest);
        let e = t.add(part_d, part_h)?;
        let b = t.param(b);
        let e = t.add_row(e, b)?;
        Ok(t.tanh(e))
    }

    /// `r`: one logit per row of `E`, softmax across each sample's destinations.
    pub fn rank_goals(&self, t: &mut Tape, e: Var, n_dest: usize) -> Result<Var> {
        let g = *self.goal_ids()?;
        let rows = t.value(e).rows();
        let logits = Self::dense(t, e, g.rank_w, g.rank_b)?;
        let logits = t.reshape(logits, rows / n_dest, n_dest)?;
        t.softmax_rows(logits)
    }

    /// `α_t = softmax_i(tanh(e_i w_e + h^D_{t-1} w_h + b))`.
    pub fn attention_weights(&self, t: &mut Tape, e: Var, decoder_state: Var, n_dest: usize) -> Result<Var> {
        let (we, wh, b) = self
            .traj
            .attention
            .ok_or_else(|| GtpError::contract("flexible attention disabled by configuration"))?;
        let rows = t.value(e).rows();
        let we = t.param(we);
        let se = t.matmul(e, we)?;
        let wh = t.param(wh);
        let sh = t.matmul(decoder_state, wh)?;
        let sh = t.repeat_rows(sh, n_dest);
        let s = t.add(se, sh)?;
        let b = t.param(b);
        let s = t.add_row(s, b)?;
        let s = t.tanh(s);
        let s = t.reshape(s, rows / n_dest, n_dest)?;
        t.softmax_rows(s)
    }

    /// `c_t = Σ_i α_ti e_i`.
    pub fn control_signal(t: &mut Tape, alpha: Var, e: Var) -> Result<Var> {
        t.combine(alpha, e)
    }

    /// Runs both channels and decodes `t_pred` steps, feeding predictions back.
    pub fn forward(&self, t: &mut Tape, batch: &Batch, t_pred: usize) -> Result<Forward> {
        let (e, rank) = if self.goal.is_some() {
            let hg = if self.config.use_modulation {
                Some(self.goal_encode(t, batch)?)
            } else {
                None
            };
            let e = self.modulate_destinations(t, hg, batch)?;
            Self::check(t, e, || "destination representations".into())?;
            let r = self.rank_goals(t, e, batch.n_dest)?;
            (Some(e), Some(r))
        } else {
            (None, None)
        };
        let tr = self.traj;
        let mut h = self.traj_encode(t, batch)?;
        let mut prev = t.input(batch.last.clone());
        let (dwx, dwh, db) = (t.param(tr.dec.wx), t.param(tr.dec.wh), t.param(tr.dec.b));
        let mut predictions = Vec::with_capacity(t_pred);
        let mut attention = Vec::new();
        for step in 0..t_pred {
            let wq = t.param(tr.fuse_q);
            let mut s = t.matmul(prev, wq)?;
            if let (Some(e), Some(r)) = (e, rank) {
                let alpha = if self.traj.attention.is_some() {
                    self.attention_weights(t, e, h, batch.n_dest)?
                } else {
                    r
                };
                let c = Self::control_signal(t, alpha, e)?;
                let wc = t.param(tr.fuse_c.expect("goal features"));
                let part_c = t.matmul(c, wc)?;
                s = t.add(part_c, s)?;
                attention.push(alpha);
            }
            let fb = t.param(tr.fuse_b);
            let s = t.add_row(s, fb)?;
            let s = t.tanh(s);
            h = t.gru_cell(h, s, dwx, dwh, db)?;
            let q = Self::dense(t, h, tr.out_w, tr.out_b)?;
            Self::check(t, q, || format!("decoder step {}", step + 1))?;
            predictions.push(q);
            prev = q;
        }
        Ok(Forward {
            predictions,
            rank,
            attention,
        })
    }

    /// Mean of `-ln r_{i*}` over the batch.
    pub fn goal_loss(t: &mut Tape, rank: Var, goals: &[usize]) -> Result<Var> {
        t.neg_log_rows(rank, goals)
    }

    /// Mean per-step Euclidean distance to the targets, in metres.
    pub fn trajectory_loss(&self, t: &mut Tape, predictions: &[Var], batch: &Batch) -> Result<Var> {
        let future = batch
            .future
            .as_ref()
            .ok_or_else(|| GtpError::contract("trajectory loss without targets"))?;
        if future.len() != predictions.len() || predictions.is_empty() {
            return Err(GtpError::contract(format!(
                "{} predicted steps vs {} targets",
                predictions.len(),
                future.len()
            )));
        }
        let mut total: Option<Var> = None;
        for (p, y) in predictions.iter().zip(future) {
            let y = t.input(y.clone());
            let d = t.sub(*p, y)?;
            let n = t.row_norms(d);
            total = Some(match total {
                Some(acc) => t.add(acc, n)?,
                None => n,
            });
        }
        let m = t.mean(total.expect("nonempty"))?;
        Ok(t.scale(m, 1.0 / (predictions.len() as f64 * self.config.position_scale)))
    }

    /// Predicts every sample (all must share `n_dest`).
    pub fn predict_batch(&self, samples: &[&TrajectorySample]) -> Result<Vec<PredictionResult>> {
        let batch = Batch::new(samples, &self.config)?;
        let mut t = Tape::new(&self.params);
        let fwd = self.forward(&mut t, &batch, self.config.t_pred)?;
        let inv = 1.0 / self.config.position_scale;
        let rank = fwd.rank.map(|r| t.value(r).clone());
        let alphas: Vec<Tensor> = fwd.attention.iter().map(|a| t.value(*a).clone()).collect();
        let preds: Vec<Tensor> = fwd.predictions.iter().map(|p| t.value(*p).clone()).collect();
        Ok(samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let predicted_frame: Vec<Point> =
                    preds.iter().map(|p| Point::new(p.get(i, 0) * inv, p.get(i, 1) * inv)).collect();
                PredictionResult {
                    predicted: s.frame.from_frame_all(&predicted_frame),
                    predicted_frame,
                    rank: rank.as_ref().map(|r| r.row_slice(i).to_vec()).unwrap_or_default(),
                    attention: alphas.iter().map(|a| a.row_slice(i).to_vec()).collect(),
                }
            })
            .collect())
    }

    pub fn predict(&self, sample: &TrajectorySample) -> Result<PredictionResult> {
        Ok(self.predict_batch(&[sample])?.remove(0))
    }

    /// Goal channel only: the `B × n_dest` ranking distribution.
    pub fn goal_forward(&self, t: &mut Tape, batch: &Batch) -> Result<Var> {
        let hg = if self.config.use_modulation {
            Some(self.goal_encode(t, batch)?)
        } else {
            None
        };
        let e = self.modulate_destinations(t, hg, batch)?;
        self.rank_goals(t, e, batch.n_dest)
    }

    /// Ranking distribution for each sample (goal features only).
    pub fn rank_batch(&self, samples: &[&TrajectorySample]) -> Result<Vec<Vec<f64>>> {
        let batch = Batch::new(samples, &self.config)?;
        let mut t = Tape::new(&self.params);
        let r = self.goal_forward(&mut t, &batch)?;
        let r = t.value(r);
        Ok((0..batch.size).map(|i| r.row_slice(i).to_vec()).collect())
    }
}

/// Mean per-step distance between two equal-length point sequences.
pub fn trajectory_loss(predicted: &[Point], target: &[Point]) -> Result<f64> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(GtpError::contract(format!(
            "trajectory loss over {} and {} points",
            predicted.len(),
            target.len()
        )));
    }
    Ok(predicted.iter().zip(target).map(|(a, b)| a.dist(*b)).sum::<f64>() / predicted.len() as f64)
}

/// `-ln(max(r[goal - 1], 1e-12))` for a 1-based goal.
pub fn goal_loss(rank: &[f64], goal: usize) -> Result<f64> {
    if goal == 0 || goal > rank.len() {
        return Err(GtpError::contract(format!("goal {goal} outside 1..={}", rank.len())));
    }
    let p = rank[goal - 1];
    if p < 1e-12 {
        log::warn!("goal probability {p:e} clamped before log");
    }
    Ok(-p.max(1e-12).ln())
}
