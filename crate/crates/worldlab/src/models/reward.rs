//! Reward-only baselines that skip pixels entirely: a recurrent predictor
//! fed encoded observation, action, and last reward, and a feed-forward
//! variant that maps the last frame plus a whole action plan to all horizon
//! rewards at once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    add_conv, add_dense, add_gated_cell, conv_layer, dense, gated_cell, AdamState, Gradients,
    Graph, ParamSet, Tensor, Var,
};

use super::{
    actions_at, candidate_actions_at, grad_norm, rewards_at, squared_error_mean,
    stack_observations, tile_rows, Belief, Context, GradNorms, LossReport, ModelConfig,
    ModelError, Sequence,
};

const LEAKY_SLOPE: f64 = 0.01;
const CELL_WIDTH: usize = 64;
const ENCODED_WIDTH: usize = 8;

fn add_shared_encoders(p: &mut ParamSet, rng: &mut ChaCha8Rng, adim: usize) {
    add_conv(p, rng, "enc.c1", 3, 3, 3, 8);
    add_conv(p, rng, "enc.c2", 3, 3, 8, 16);
    add_conv(p, rng, "enc.c3", 3, 3, 16, 8);
    add_conv(p, rng, "enc.c4", 3, 3, 8, 8);
    add_dense(p, rng, "aenc.d1", adim, 32);
    add_dense(p, rng, "aenc.d2", 32, 16);
    add_dense(p, rng, "aenc.d3", 16, 8);
    add_dense(p, rng, "renc.d1", 1, 32);
    add_dense(p, rng, "renc.d2", 32, 16);
    add_dense(p, rng, "renc.d3", 16, 8);
}

fn encode_obs(g: &mut Graph, p: &ParamSet, x: Var, image_size: usize) -> Var {
    let n = g.shape(x)[0];
    let mut y = x;
    for name in ["enc.c1", "enc.c2", "enc.c3", "enc.c4"] {
        y = conv_layer(g, p, name, y, 2, 1);
        y = g.leaky_relu(y, LEAKY_SLOPE);
    }
    let spatial = image_size / 16;
    g.reshape(y, vec![n, spatial * spatial * 8])
}

fn encode_action(g: &mut Graph, p: &ParamSet, a: Var) -> Var {
    let mut y = a;
    for name in ["aenc.d1", "aenc.d2", "aenc.d3"] {
        y = dense(g, p, name, y);
        y = g.leaky_relu(y, LEAKY_SLOPE);
    }
    y
}

fn encode_reward(g: &mut Graph, p: &ParamSet, r: Var) -> Var {
    let mut y = r;
    for name in ["renc.d1", "renc.d2", "renc.d3"] {
        y = dense(g, p, name, y);
        y = g.leaky_relu(y, LEAKY_SLOPE);
    }
    y
}

fn obs_feat_width(image_size: usize) -> usize {
    (image_size / 16) * (image_size / 16) * 8
}

/// Recurrent reward predictor: each step the cell consumes the encoded
/// observation (zeros once the future begins), the action, and the previous
/// reward (its own prediction once the future begins).
pub struct RecurrentRewardModel {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamSet,
    pub(crate) adam: AdamState,
    pub(crate) diag_every: u32,
    step: u64,
    obs_feat: usize,
}

impl RecurrentRewardModel {
    pub(crate) fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        if config.scale_level != 0 {
            return Err(ModelError::InvalidScaleLevel {
                design: "recurrent reward",
                level: config.scale_level,
            });
        }
        let s = config.image_size;
        if s % 16 != 0 {
            return Err(ModelError::UnsupportedImageSize {
                design: "recurrent reward",
                multiple: 16,
                size: s,
            });
        }
        let obs_feat = obs_feat_width(s);
        let adim = config.task.action_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        add_shared_encoders(&mut p, &mut rng, adim);
        add_gated_cell(&mut p, &mut rng, "cell", obs_feat + 2 * ENCODED_WIDTH, CELL_WIDTH);
        add_dense(&mut p, &mut rng, "head.d1", CELL_WIDTH, 32);
        add_dense(&mut p, &mut rng, "head.d2", 32, 2);
        add_dense(&mut p, &mut rng, "head.d3", 2, 1);
        Ok(Self {
            config: config.clone(),
            params: p,
            adam: AdamState::new(1e-3, 1e-3),
            diag_every: 0,
            step: 0,
            obs_feat,
        })
    }

    fn head(&self, g: &mut Graph, h: Var) -> Var {
        let d1 = dense(g, &self.params, "head.d1", h);
        let d1 = g.relu(d1);
        let d2 = dense(g, &self.params, "head.d2", d1);
        let d2 = g.relu(d2);
        dense(g, &self.params, "head.d3", d2)
    }

    fn cell_step(&self, g: &mut Graph, h: Var, obs_f: Var, act_f: Var, rew_f: Var) -> Var {
        let oa = g.concat_last(obs_f, act_f);
        let input = g.concat_last(oa, rew_f);
        gated_cell(g, &self.params, "cell", input, h)
    }

    pub(crate) fn train_batch(&mut self, batch: &[Sequence]) -> Result<LossReport, ModelError> {
        let want_diag = self.diag_every > 0 && self.step % self.diag_every as u64 == 0;
        let (report, grads) = self.loss_and_grads(batch, want_diag)?;
        self.adam.adam_step(&mut self.params, &grads)?;
        self.step += 1;
        Ok(report)
    }

    /// Loss report and gradients at the current parameters; the caller owns
    /// the optimizer step, if any.
    pub(crate) fn loss_and_grads(
        &self,
        batch: &[Sequence],
        want_diag: bool,
    ) -> Result<(LossReport, Gradients), ModelError> {
        let l = self.config.sequence_length();
        let ctx = self.config.context_length;
        let b = batch.len();
        let s = self.config.image_size;
        let mut g = Graph::new();

        let obs_in = g.input(stack_observations(batch, 0, ctx, s));
        let feats = encode_obs(&mut g, &self.params, obs_in, s);
        let zero_feat = g.input(Tensor::zeros(vec![b, self.obs_feat]));
        let mut h = g.input(Tensor::zeros(vec![b, CELL_WIDTH]));
        let mut pred_prev: Option<Var> = None;
        let mut err_sum: Option<Var> = None;
        for t in 0..l - 1 {
            let obs_f = if t < ctx {
                g.slice_rows(feats, t * b, b)
            } else {
                zero_feat
            };
            let a = g.input(actions_at(batch, t));
            let act_f = encode_action(&mut g, &self.params, a);
            let rew_in = if t < ctx {
                g.input(rewards_at(batch, t))
            } else {
                pred_prev.unwrap()
            };
            let rew_f = encode_reward(&mut g, &self.params, rew_in);
            h = self.cell_step(&mut g, h, obs_f, act_f, rew_f);
            let pred = self.head(&mut g, h);
            let target = g.input(rewards_at(batch, t + 1));
            let err = squared_error_mean(&mut g, pred, target);
            err_sum = Some(match err_sum {
                None => err,
                Some(acc) => g.add(acc, err),
            });
            pred_prev = Some(pred);
        }

        let reward_loss = g.scale(err_sum.unwrap(), 1.0 / (l - 1) as f64);
        let total = g.scale(reward_loss, self.config.reward_loss_multiplier);
        let grad_norms = if want_diag {
            Some(GradNorms {
                image: 0.0,
                kl: 0.0,
                reward: grad_norm(&g.backward(total)?),
            })
        } else {
            None
        };
        let report = LossReport {
            total: g.value(total).data[0],
            image_nll: 0.0,
            kl: 0.0,
            reward_loss: g.value(reward_loss).data[0],
            grad_norms,
        };
        let grads = g.backward(total)?;
        Ok((report, grads))
    }

    /// Consumes the context transitions whose actions are known; the newest
    /// observation and reward wait in the belief for the first planned
    /// action.
    pub(crate) fn observe_context(&self, ctx: &Context) -> Result<Belief, ModelError> {
        let n = self.config.context_length;
        let s = self.config.image_size;
        let start = ctx.observations.len() - n;
        let mut g = Graph::new();
        let mut data = Vec::with_capacity(n * s * s * 3);
        for o in &ctx.observations[start..] {
            data.extend_from_slice(&o.data);
        }
        let obs_in = g.input(Tensor::new(vec![n, s, s, 3], data));
        let feats = encode_obs(&mut g, &self.params, obs_in, s);
        let mut h = g.input(Tensor::zeros(vec![1, CELL_WIDTH]));
        for i in 0..n - 1 {
            let t = start + i;
            let obs_f = g.slice_rows(feats, i, 1);
            let a_idx = ctx.actions.len() - (n - 1) + i;
            let a = g.input(Tensor::new(
                vec![1, ctx.actions[a_idx].len()],
                ctx.actions[a_idx].clone(),
            ));
            let act_f = encode_action(&mut g, &self.params, a);
            let r = g.input(Tensor::new(vec![1, 1], vec![ctx.rewards[t]]));
            let rew_f = encode_reward(&mut g, &self.params, r);
            h = self.cell_step(&mut g, h, obs_f, act_f, rew_f);
        }
        let last_feat = g.slice_rows(feats, n - 1, 1);
        Ok(Belief::Recurrent {
            h: g.value(h).clone(),
            obs_feat: g.value(last_feat).clone(),
            last_reward: *ctx.rewards.last().unwrap(),
        })
    }

    pub(crate) fn imagine_returns(
        &self,
        belief: &Belief,
        candidates: &[Vec<Vec<f64>>],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, ModelError> {
        let Belief::Recurrent { h, obs_feat, last_reward } = belief else {
            return Err(ModelError::WrongBelief);
        };
        let c = candidates.len();
        let mut g = Graph::new();
        let mut h = g.input(tile_rows(h, c));
        let first_feat = g.input(tile_rows(obs_feat, c));
        let zero_feat = g.input(Tensor::zeros(vec![c, self.obs_feat]));
        let mut rew_in = g.input(Tensor::full(vec![c, 1], *last_reward));
        let mut acc: Option<Var> = None;
        for t in 0..self.config.prediction_horizon {
            let obs_f = if t == 0 { first_feat } else { zero_feat };
            let a = g.input(candidate_actions_at(candidates, t));
            let act_f = encode_action(&mut g, &self.params, a);
            let rew_f = encode_reward(&mut g, &self.params, rew_in);
            h = self.cell_step(&mut g, h, obs_f, act_f, rew_f);
            let pred = self.head(&mut g, h);
            acc = Some(match acc {
                None => pred,
                Some(prev) => g.add(prev, pred),
            });
            rew_in = pred;
        }
        Ok(g.value(acc.unwrap()).data.clone())
    }

    /// Autoregressive rollout over one window's horizon, as (predicted,
    /// actual) reward pairs.
    pub(crate) fn window_eval(&self, window: &Sequence) -> Result<Vec<(f64, f64)>, ModelError> {
        let l = self.config.sequence_length();
        let ctx = self.config.context_length;
        let s = self.config.image_size;
        let mut g = Graph::new();
        let obs_in = g.input(stack_observations(std::slice::from_ref(window), 0, ctx, s));
        let feats = encode_obs(&mut g, &self.params, obs_in, s);
        let zero_feat = g.input(Tensor::zeros(vec![1, self.obs_feat]));
        let mut h = g.input(Tensor::zeros(vec![1, CELL_WIDTH]));
        let mut pred_prev: Option<Var> = None;
        let mut pairs = Vec::with_capacity(l - ctx);
        for t in 0..l - 1 {
            let obs_f = if t < ctx {
                g.slice_rows(feats, t, 1)
            } else {
                zero_feat
            };
            let a = g.input(Tensor::new(
                vec![1, window.actions[t].len()],
                window.actions[t].clone(),
            ));
            let act_f = encode_action(&mut g, &self.params, a);
            let rew_in = if t < ctx {
                g.input(Tensor::new(vec![1, 1], vec![window.rewards[t]]))
            } else {
                pred_prev.unwrap()
            };
            let rew_f = encode_reward(&mut g, &self.params, rew_in);
            h = self.cell_step(&mut g, h, obs_f, act_f, rew_f);
            let pred = self.head(&mut g, h);
            if t + 1 >= ctx {
                pairs.push((g.value(pred).data[0], window.rewards[t + 1]));
            }
            pred_prev = Some(pred);
        }
        Ok(pairs)
    }
}

/// Feed-forward reward predictor: one pass maps the newest frame, the whole
/// action plan, and the last reward to every horizon reward.
pub struct ConvRewardModel {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamSet,
    pub(crate) adam: AdamState,
    pub(crate) diag_every: u32,
    step: u64,
}

impl ConvRewardModel {
    pub(crate) fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        if config.scale_level != 0 {
            return Err(ModelError::InvalidScaleLevel {
                design: "feed-forward reward",
                level: config.scale_level,
            });
        }
        let s = config.image_size;
        if s % 16 != 0 {
            return Err(ModelError::UnsupportedImageSize {
                design: "feed-forward reward",
                multiple: 16,
                size: s,
            });
        }
        let adim = config.task.action_dim();
        let hor = config.prediction_horizon;
        let head_in = obs_feat_width(s) + hor * ENCODED_WIDTH + ENCODED_WIDTH;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        add_shared_encoders(&mut p, &mut rng, adim);
        add_dense(&mut p, &mut rng, "head.d1", head_in, 32);
        add_dense(&mut p, &mut rng, "head.d2", 32, 16);
        add_dense(&mut p, &mut rng, "head.d3", 16, hor);
        Ok(Self {
            config: config.clone(),
            params: p,
            adam: AdamState::new(1e-3, 1e-3),
            diag_every: 0,
            step: 0,
        })
    }

    /// Encoded last frame ++ encoded actions in plan order ++ encoded last
    /// reward, then the three head layers.
    fn predict(
        &self,
        g: &mut Graph,
        obs_feat: Var,
        action_feats: &[Var],
        rew_feat: Var,
    ) -> Var {
        let mut joined = obs_feat;
        for &f in action_feats {
            joined = g.concat_last(joined, f);
        }
        joined = g.concat_last(joined, rew_feat);
        let d1 = dense(g, &self.params, "head.d1", joined);
        let d1 = g.leaky_relu(d1, LEAKY_SLOPE);
        let d2 = dense(g, &self.params, "head.d2", d1);
        let d2 = g.leaky_relu(d2, LEAKY_SLOPE);
        dense(g, &self.params, "head.d3", d2)
    }

    pub(crate) fn train_batch(&mut self, batch: &[Sequence]) -> Result<LossReport, ModelError> {
        let want_diag = self.diag_every > 0 && self.step % self.diag_every as u64 == 0;
        let (report, grads) = self.loss_and_grads(batch, want_diag)?;
        self.adam.adam_step(&mut self.params, &grads)?;
        self.step += 1;
        Ok(report)
    }

    /// Loss report and gradients at the current parameters; the caller owns
    /// the optimizer step, if any.
    pub(crate) fn loss_and_grads(
        &self,
        batch: &[Sequence],
        want_diag: bool,
    ) -> Result<(LossReport, Gradients), ModelError> {
        let l = self.config.sequence_length();
        let ctx = self.config.context_length;
        let hor = self.config.prediction_horizon;
        let b = batch.len();
        let s = self.config.image_size;
        let mut g = Graph::new();

        let obs_in = g.input(stack_observations(batch, ctx - 1, ctx, s));
        let obs_feat = encode_obs(&mut g, &self.params, obs_in, s);
        let mut action_feats = Vec::with_capacity(hor);
        for t in ctx - 1..l - 1 {
            let a = g.input(actions_at(batch, t));
            action_feats.push(encode_action(&mut g, &self.params, a));
        }
        let r = g.input(rewards_at(batch, ctx - 1));
        let rew_feat = encode_reward(&mut g, &self.params, r);
        let pred = self.predict(&mut g, obs_feat, &action_feats, rew_feat);

        let mut target = Vec::with_capacity(b * hor);
        for seq in batch {
            target.extend_from_slice(&seq.rewards[ctx..l]);
        }
        let target = g.input(Tensor::new(vec![b, hor], target));
        let reward_loss = squared_error_mean(&mut g, pred, target);
        let total = g.scale(reward_loss, self.config.reward_loss_multiplier);
        let grad_norms = if want_diag {
            Some(GradNorms {
                image: 0.0,
                kl: 0.0,
                reward: grad_norm(&g.backward(total)?),
            })
        } else {
            None
        };
        let report = LossReport {
            total: g.value(total).data[0],
            image_nll: 0.0,
            kl: 0.0,
            reward_loss: g.value(reward_loss).data[0],
            grad_norms,
        };
        let grads = g.backward(total)?;
        Ok((report, grads))
    }

    pub(crate) fn observe_context(&self, ctx: &Context) -> Result<Belief, ModelError> {
        let n = self.config.context_length;
        let start = ctx.observations.len() - n;
        let a_start = ctx.actions.len() - (n - 1);
        Ok(Belief::FrameWindow {
            frames: ctx.observations[start..].to_vec(),
            actions: ctx.actions[a_start..].to_vec(),
            last_reward: *ctx.rewards.last().unwrap(),
        })
    }

    pub(crate) fn imagine_returns(
        &self,
        belief: &Belief,
        candidates: &[Vec<Vec<f64>>],
    ) -> Result<Vec<f64>, ModelError> {
        let Belief::FrameWindow { frames, last_reward, .. } = belief else {
            return Err(ModelError::WrongBelief);
        };
        let c = candidates.len();
        let hor = self.config.prediction_horizon;
        let s = self.config.image_size;
        let mut g = Graph::new();
        let last = frames.last().unwrap();
        let one = Tensor::new(vec![1, s, s, 3], last.data.clone());
        let obs_in = g.input(tile_rows(&one, c));
        let obs_feat = encode_obs(&mut g, &self.params, obs_in, s);
        let mut action_feats = Vec::with_capacity(hor);
        for t in 0..hor {
            let a = g.input(candidate_actions_at(candidates, t));
            action_feats.push(encode_action(&mut g, &self.params, a));
        }
        let r = g.input(Tensor::full(vec![c, 1], *last_reward));
        let rew_feat = encode_reward(&mut g, &self.params, r);
        let pred = self.predict(&mut g, obs_feat, &action_feats, rew_feat);
        let values = g.value(pred);
        Ok((0..c)
            .map(|i| values.data[i * hor..(i + 1) * hor].iter().sum())
            .collect())
    }

    pub(crate) fn window_eval(&self, window: &Sequence) -> Result<Vec<(f64, f64)>, ModelError> {
        let l = self.config.sequence_length();
        let ctx = self.config.context_length;
        let hor = self.config.prediction_horizon;
        let s = self.config.image_size;
        let mut g = Graph::new();
        let obs_in = g.input(stack_observations(std::slice::from_ref(window), ctx - 1, ctx, s));
        let obs_feat = encode_obs(&mut g, &self.params, obs_in, s);
        let mut action_feats = Vec::with_capacity(hor);
        for t in ctx - 1..l - 1 {
            let a = g.input(Tensor::new(
                vec![1, window.actions[t].len()],
                window.actions[t].clone(),
            ));
            action_feats.push(encode_action(&mut g, &self.params, a));
        }
        let r = g.input(Tensor::new(vec![1, 1], vec![window.rewards[ctx - 1]]));
        let rew_feat = encode_reward(&mut g, &self.params, r);
        let pred = self.predict(&mut g, obs_feat, &action_feats, rew_feat);
        let values = &g.value(pred).data;
        Ok((ctx..l)
            .enumerate()
            .map(|(i, t)| (values[i], window.rewards[t]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Task;
    use crate::models::{normal_tensor, ModelDesign, RewardVariant};

    const S: usize = 16;

    fn toy_config(variant: RewardVariant) -> ModelConfig {
        let mut c = ModelConfig::new(ModelDesign::R(variant), Task::PendulumSwingup);
        c.image_size = S;
        c.context_length = 2;
        c.prediction_horizon = 3;
        c
    }

    fn toy_sequence(len_obs: usize, seed: u64, reward: f64) -> Sequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Sequence {
            observations: (0..len_obs)
                .map(|_| {
                    let t = normal_tensor(&mut rng, vec![S, S, 3]);
                    Tensor::new(vec![S, S, 3], t.data.iter().map(|v| 0.5 + 0.1 * v).collect())
                })
                .collect(),
            actions: (0..len_obs - 1).map(|i| vec![(i as f64 * 0.31).cos()]).collect(),
            rewards: std::iter::once(0.0)
                .chain(std::iter::repeat(reward).take(len_obs - 1))
                .collect(),
            states: Vec::new(),
        }
    }

    #[test]
    fn recurrent_variant_trains_and_reports_only_reward_terms() {
        let cfg = toy_config(RewardVariant::Recurrent);
        let mut m = RecurrentRewardModel::build(&cfg, 3).unwrap();
        let batch: Vec<Sequence> =
            (0..2).map(|i| toy_sequence(cfg.sequence_length(), i, 0.6)).collect();
        let first = m.train_batch(&batch).unwrap();
        assert_eq!(first.image_nll, 0.0);
        assert_eq!(first.kl, 0.0);
        assert!(first.reward_loss > 0.0);
        let mut last = first.total;
        for _ in 0..30 {
            last = m.train_batch(&batch).unwrap().total;
        }
        assert!(last < first.total);
    }

    #[test]
    fn nonzero_scale_level_is_rejected() {
        let mut cfg = toy_config(RewardVariant::Recurrent);
        cfg.scale_level = 1;
        assert!(matches!(
            RecurrentRewardModel::build(&cfg, 0),
            Err(ModelError::InvalidScaleLevel { .. })
        ));
        let mut cfg = toy_config(RewardVariant::Conv);
        cfg.scale_level = 3;
        assert!(matches!(
            ConvRewardModel::build(&cfg, 0),
            Err(ModelError::InvalidScaleLevel { .. })
        ));
    }

    #[test]
    fn image_size_must_fit_the_encoder_stride() {
        let mut cfg = toy_config(RewardVariant::Recurrent);
        cfg.image_size = 24;
        assert!(matches!(
            RecurrentRewardModel::build(&cfg, 0),
            Err(ModelError::UnsupportedImageSize { multiple: 16, .. })
        ));
        let mut cfg = toy_config(RewardVariant::Conv);
        cfg.image_size = 24;
        assert!(matches!(
            ConvRewardModel::build(&cfg, 0),
            Err(ModelError::UnsupportedImageSize { multiple: 16, .. })
        ));
    }

    #[test]
    fn recurrent_imagination_consumes_the_newest_frame() {
        let cfg = toy_config(RewardVariant::Recurrent);
        let m = RecurrentRewardModel::build(&cfg, 8).unwrap();
        let seq = toy_sequence(4, 40, 0.2);
        let ctx = Context::from_sequence_tail(&seq, 2);
        let belief = m.observe_context(&ctx).unwrap();
        let mut other = ctx.clone();
        for v in &mut other.observations.last_mut().unwrap().data {
            *v = 1.0 - *v;
        }
        let belief2 = m.observe_context(&other).unwrap();
        let cands = vec![vec![vec![0.3], vec![0.1], vec![-0.2]]];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = m.imagine_returns(&belief, &cands, &mut rng).unwrap();
        let b = m.imagine_returns(&belief2, &cands, &mut rng).unwrap();
        assert_ne!(a[0].to_bits(), b[0].to_bits());
    }

    #[test]
    fn feed_forward_variant_predicts_whole_horizon_and_overfits() {
        let cfg = toy_config(RewardVariant::Conv);
        let mut m = ConvRewardModel::build(&cfg, 5).unwrap();
        assert_eq!(m.params.get("head.d3.w").unwrap().shape, vec![16, 3]);
        let batch: Vec<Sequence> =
            (0..2).map(|i| toy_sequence(cfg.sequence_length(), 10 + i, 0.8)).collect();
        let first = m.train_batch(&batch).unwrap().total;
        let mut last = first;
        for _ in 0..60 {
            last = m.train_batch(&batch).unwrap().total;
        }
        assert!(last < first);
    }

    #[test]
    fn zeroed_predictor_on_unit_rewards_has_error_exactly_one() {
        let cfg = toy_config(RewardVariant::Conv);
        let mut m = ConvRewardModel::build(&cfg, 9).unwrap();
        let names: Vec<String> = m.params.names().cloned().collect();
        for name in names {
            for v in &mut m.params.get_mut(&name).unwrap().data {
                *v = 0.0;
            }
        }
        let ep = toy_sequence(cfg.sequence_length() + 3, 2, 1.0);
        let pairs = m.window_eval(&ep.window(0, cfg.sequence_length())).unwrap();
        assert_eq!(pairs.len(), cfg.prediction_horizon);
        assert!(pairs.iter().all(|&(p, a)| p == 0.0 && a == 1.0));
    }
}
