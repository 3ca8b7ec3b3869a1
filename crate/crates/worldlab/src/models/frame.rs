//! Frame-dynamics family: a convolutional recurrent predictor that rolls
//! future frames in pixel space through a seven-cell hourglass, with one
//! sequence-wide variational latent inferred from the future during
//! training and drawn from the standard normal at inference. Reward comes
//! either from a head over the predicted frame or from the pooled cell
//! states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    add_conv, add_conv_gated_cell, add_dense, conv_gated_cell, conv_layer, dense, gaussian_kl,
    reparam_sample, AdamState, DiagGaussian, Gradients, Graph, ParamSet, Tensor, Var,
};

use super::{
    actions_at, candidate_actions_at, frame_scale, grad_norm, masked_image_nll, normal_tensor,
    rewards_at, squared_error_mean, stack_observations, tile_rows, Belief, Context, GradNorms,
    LossReport, ModelConfig, ModelDesign, ModelError, Sequence,
};

/// Matches a latent log-variance floor of -5.
const LATENT_STDDEV_FLOOR: f64 = 0.0820849986238988; // exp(-2.5)
const LATENT_CHANNELS: usize = 1;
const ACTION_CHANNELS: usize = 4;

pub struct FrameModel {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamSet,
    pub(crate) adam: AdamState,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) diag_every: u32,
    step: u64,
    filters: [usize; 7],
}

/// Hidden maps of the seven recurrent cells.
struct CellStates([Var; 7]);

impl FrameModel {
    pub(crate) fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let f = frame_scale(config.scale_level)?;
        let s = config.image_size;
        if s % 8 != 0 {
            return Err(ModelError::UnsupportedImageSize {
                design: "frame dynamics",
                multiple: 8,
                size: s,
            });
        }
        let adim = config.task.action_dim();
        let bottleneck = (s / 8) * (s / 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        add_conv(&mut p, &mut rng, "cin", 3, 3, 3, f[0]);
        add_conv_gated_cell(&mut p, &mut rng, "cell1", f[0], f[0]);
        add_conv_gated_cell(&mut p, &mut rng, "cell2", f[0], f[1]);
        add_conv(&mut p, &mut rng, "down1", 3, 3, f[1], f[2]);
        add_conv_gated_cell(&mut p, &mut rng, "cell3", f[2], f[2]);
        add_conv_gated_cell(&mut p, &mut rng, "cell4", f[2], f[3]);
        add_conv(&mut p, &mut rng, "down2", 3, 3, f[3], f[4]);
        add_dense(&mut p, &mut rng, "act", adim, bottleneck * ACTION_CHANNELS);
        add_conv_gated_cell(
            &mut p,
            &mut rng,
            "cell5",
            f[4] + ACTION_CHANNELS + LATENT_CHANNELS,
            f[4],
        );
        add_conv(&mut p, &mut rng, "up1", 3, 3, f[4], f[5]);
        add_conv_gated_cell(&mut p, &mut rng, "cell6", f[5], f[5]);
        add_conv(&mut p, &mut rng, "up2", 3, 3, f[5], f[6]);
        add_conv_gated_cell(&mut p, &mut rng, "cell7", f[6], f[6]);
        add_conv(&mut p, &mut rng, "cout", 3, 3, f[6], 3);
        add_conv(&mut p, &mut rng, "post.c1", 3, 3, 3, 8);
        add_conv(&mut p, &mut rng, "post.c2", 3, 3, 8, 8);
        add_conv(&mut p, &mut rng, "post.mean", 3, 3, 8, LATENT_CHANNELS);
        add_conv(&mut p, &mut rng, "post.rawstd", 3, 3, 8, LATENT_CHANNELS);
        match config.design {
            ModelDesign::Otor => {
                add_conv(&mut p, &mut rng, "rconv.c1", 3, 3, 3, 8);
                add_conv(&mut p, &mut rng, "rconv.c2", 3, 3, 8, 8);
                add_dense(&mut p, &mut rng, "rconv.d1", (s / 4) * (s / 4) * 8, 32);
                add_dense(&mut p, &mut rng, "rconv.d2", 32, 1);
            }
            _ => {
                let pooled: usize = f.iter().sum();
                add_dense(&mut p, &mut rng, "rstates.d1", pooled, 32);
                add_dense(&mut p, &mut rng, "rstates.d2", 32, 1);
            }
        }
        Ok(Self {
            config: config.clone(),
            params: p,
            adam: AdamState::new(1e-3, 1e-3),
            rng,
            diag_every: 0,
            step: 0,
            filters: f,
        })
    }

    fn zero_states(&self, g: &mut Graph, b: usize) -> CellStates {
        let s = self.config.image_size;
        let spatial = [s / 2, s / 2, s / 4, s / 4, s / 8, s / 4, s / 2];
        CellStates(std::array::from_fn(|i| {
            g.input(Tensor::zeros(vec![b, spatial[i], spatial[i], self.filters[i]]))
        }))
    }

    /// One transition: frame plus action plus the sequence latent in, next
    /// frame and updated cell states out.
    fn predict_next(
        &self,
        g: &mut Graph,
        x: Var,
        a: Var,
        z: Var,
        states: &CellStates,
    ) -> (Var, CellStates) {
        let s = self.config.image_size;
        let b = g.shape(x)[0];
        let p = &self.params;
        let y = conv_layer(g, p, "cin", x, 2, 1);
        let y = g.relu(y);
        let s1 = conv_gated_cell(g, p, "cell1", y, states.0[0]);
        let s2 = conv_gated_cell(g, p, "cell2", s1, states.0[1]);
        let y = conv_layer(g, p, "down1", s2, 2, 1);
        let y = g.relu(y);
        let s3 = conv_gated_cell(g, p, "cell3", y, states.0[2]);
        let s4 = conv_gated_cell(g, p, "cell4", s3, states.0[3]);
        let y = conv_layer(g, p, "down2", s4, 2, 1);
        let y = g.relu(y);
        let af = dense(g, p, "act", a);
        let af = g.relu(af);
        let af = g.reshape(af, vec![b, s / 8, s / 8, ACTION_CHANNELS]);
        let y = g.concat_last(y, af);
        let y = g.concat_last(y, z);
        let s5 = conv_gated_cell(g, p, "cell5", y, states.0[4]);
        let y = g.upsample2x(s5);
        let y = conv_layer(g, p, "up1", y, 1, 1);
        let y = g.relu(y);
        let s6 = conv_gated_cell(g, p, "cell6", y, states.0[5]);
        let y = g.upsample2x(s6);
        let y = conv_layer(g, p, "up2", y, 1, 1);
        let y = g.relu(y);
        let s7 = conv_gated_cell(g, p, "cell7", y, states.0[6]);
        let y = g.upsample2x(s7);
        let frame = conv_layer(g, p, "cout", y, 1, 1);
        (frame, CellStates([s1, s2, s3, s4, s5, s6, s7]))
    }

    /// Posterior over the sequence latent from the frames to be predicted:
    /// tower features averaged over time, then mean and raw-stddev heads.
    fn posterior_of(&self, g: &mut Graph, future: Var, steps: usize, b: usize) -> DiagGaussian {
        let p = &self.params;
        let y = conv_layer(g, p, "post.c1", future, 2, 1);
        let y = g.relu(y);
        let y = conv_layer(g, p, "post.c2", y, 2, 1);
        let y = g.relu(y);
        let mut avg: Option<Var> = None;
        for t in 0..steps {
            let slice = g.slice_rows(y, t * b, b);
            avg = Some(match avg {
                None => slice,
                Some(acc) => g.add(acc, slice),
            });
        }
        let avg = g.scale(avg.unwrap(), 1.0 / steps as f64);
        let mean = conv_layer(g, p, "post.mean", avg, 2, 1);
        let raw = conv_layer(g, p, "post.rawstd", avg, 2, 1);
        DiagGaussian::from_raw_std(g, mean, raw, LATENT_STDDEV_FLOOR)
    }

    fn reward_from_frame(&self, g: &mut Graph, frame: Var) -> Var {
        let s = self.config.image_size;
        let n = g.shape(frame)[0];
        let p = &self.params;
        let c1 = conv_layer(g, p, "rconv.c1", frame, 2, 1);
        let c1 = g.relu(c1);
        let c2 = conv_layer(g, p, "rconv.c2", c1, 2, 1);
        let c2 = g.relu(c2);
        let flat = g.reshape(c2, vec![n, (s / 4) * (s / 4) * 8]);
        let d1 = dense(g, p, "rconv.d1", flat);
        let d1 = g.relu(d1);
        dense(g, p, "rconv.d2", d1)
    }

    fn reward_from_states(&self, g: &mut Graph, states: &CellStates, stop: bool) -> Var {
        let mut joined: Option<Var> = None;
        for i in 0..7 {
            let sv = if stop {
                g.stop_gradient(states.0[i])
            } else {
                states.0[i]
            };
            let shape = g.shape(sv).to_vec();
            let pooled = g.block_mean(sv, shape[1]);
            let flat = g.reshape(pooled, vec![shape[0], self.filters[i]]);
            joined = Some(match joined {
                None => flat,
                Some(acc) => g.concat_last(acc, flat),
            });
        }
        let d1 = dense(g, &self.params, "rstates.d1", joined.unwrap());
        let d1 = g.relu(d1);
        dense(g, &self.params, "rstates.d2", d1)
    }

    fn standard_normal_like(&self, g: &mut Graph, q: &DiagGaussian) -> DiagGaussian {
        let shape = g.shape(q.mean).to_vec();
        let zeros = g.input(Tensor::zeros(shape.clone()));
        let ones = g.input(Tensor::full(shape, 1.0));
        DiagGaussian::new(zeros, ones)
    }

    pub(crate) fn train_batch(&mut self, batch: &[Sequence]) -> Result<LossReport, ModelError> {
        let want_diag = self.diag_every > 0 && self.step % self.diag_every as u64 == 0;
        let mut rng = std::mem::replace(&mut self.rng, ChaCha8Rng::seed_from_u64(0));
        let result = self.loss_and_grads(batch, &mut rng, want_diag);
        self.rng = rng;
        let (report, grads) = result?;
        self.adam.adam_step(&mut self.params, &grads)?;
        self.step += 1;
        Ok(report)
    }

    /// Loss report and gradients at the current parameters; the caller owns
    /// the optimizer step, if any.
    pub(crate) fn loss_and_grads(
        &self,
        batch: &[Sequence],
        rng: &mut ChaCha8Rng,
        want_diag: bool,
    ) -> Result<(LossReport, Gradients), ModelError> {
        let l = self.config.sequence_length();
        let ctx = self.config.context_length;
        let hor = l - ctx;
        let b = batch.len();
        let s = self.config.image_size;
        let sharing = self.config.latent_sharing;
        let mut g = Graph::new();

        let future = g.input(stack_observations(batch, ctx, l, s));
        let q = self.posterior_of(&mut g, future, hor, b);
        let noise = g.input(normal_tensor(
            rng,
            vec![b, s / 8, s / 8, LATENT_CHANNELS],
        ));
        let z = reparam_sample(&mut g, q, noise)?;
        let p = self.standard_normal_like(&mut g, &q);
        let kl_raw = gaussian_kl(&mut g, q, p)?;
        let kl = g.scale(kl_raw, 1.0 / b as f64);

        let mut states = self.zero_states(&mut g, b);
        let mut prev_frame: Option<Var> = None;
        let mut nll_sum: Option<Var> = None;
        let mut rew_sum: Option<Var> = None;
        for t in 0..l - 1 {
            let x = if t < ctx {
                g.input(stack_observations(batch, t, t + 1, s))
            } else {
                prev_frame.unwrap()
            };
            let a = g.input(actions_at(batch, t));
            let (frame, new_states) = self.predict_next(&mut g, x, a, z, &states);
            states = new_states;
            if t + 1 >= ctx {
                let target = stack_observations(batch, t + 1, t + 2, s);
                let nll_t =
                    masked_image_nll(&mut g, frame, &target, &self.config.loss_mask, s)?;
                nll_sum = Some(match nll_sum {
                    None => nll_t,
                    Some(acc) => g.add(acc, nll_t),
                });
                let r_hat = match self.config.design {
                    ModelDesign::Otor => {
                        let fin = if sharing { frame } else { g.stop_gradient(frame) };
                        self.reward_from_frame(&mut g, fin)
                    }
                    _ => self.reward_from_states(&mut g, &states, !sharing),
                };
                let r_target = g.input(rewards_at(batch, t + 1));
                let err = squared_error_mean(&mut g, r_hat, r_target);
                rew_sum = Some(match rew_sum {
                    None => err,
                    Some(acc) => g.add(acc, err),
                });
            }
            prev_frame = Some(frame);
        }

        let image_nll = g.scale(nll_sum.unwrap(), 1.0 / (hor * b) as f64);
        let reward_loss = g.scale(rew_sum.unwrap(), 1.0 / hor as f64);
        let weighted_kl = g.scale(kl, self.config.beta);
        let weighted_rew = g.scale(reward_loss, self.config.reward_loss_multiplier);
        let partial = g.add(image_nll, weighted_kl);
        let total = g.add(partial, weighted_rew);

        let grad_norms = if want_diag {
            Some(GradNorms {
                image: grad_norm(&g.backward(image_nll)?),
                kl: grad_norm(&g.backward(weighted_kl)?),
                reward: grad_norm(&g.backward(weighted_rew)?),
            })
        } else {
            None
        };
        let report = LossReport {
            total: g.value(total).data[0],
            image_nll: g.value(image_nll).data[0],
            kl: g.value(kl).data[0],
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

    /// Rolls every candidate in one batch with a fresh standard-normal
    /// latent per candidate, teacher-forcing the stored window first.
    pub(crate) fn imagine_returns(
        &self,
        belief: &Belief,
        candidates: &[Vec<Vec<f64>>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, ModelError> {
        let Belief::FrameWindow { frames, actions, .. } = belief else {
            return Err(ModelError::WrongBelief);
        };
        let c = candidates.len();
        let s = self.config.image_size;
        let mut g = Graph::new();
        let z = g.input(normal_tensor(rng, vec![c, s / 8, s / 8, LATENT_CHANNELS]));
        let mut states = self.zero_states(&mut g, c);
        let tile_frame = |g: &mut Graph, f: &Tensor| {
            let one = Tensor::new(vec![1, s, s, 3], f.data.clone());
            g.input(tile_rows(&one, c))
        };
        for (i, a) in actions.iter().enumerate() {
            let x = tile_frame(&mut g, &frames[i]);
            let av = g.input(tile_rows(&Tensor::new(vec![1, a.len()], a.clone()), c));
            let (_, new_states) = self.predict_next(&mut g, x, av, z, &states);
            states = new_states;
        }
        let mut x = tile_frame(&mut g, frames.last().unwrap());
        let mut acc: Option<Var> = None;
        for t in 0..self.config.prediction_horizon {
            let a = g.input(candidate_actions_at(candidates, t));
            let (frame, new_states) = self.predict_next(&mut g, x, a, z, &states);
            states = new_states;
            let r = match self.config.design {
                ModelDesign::Otor => self.reward_from_frame(&mut g, frame),
                _ => self.reward_from_states(&mut g, &states, false),
            };
            acc = Some(match acc {
                None => r,
                Some(prev) => g.add(prev, r),
            });
            x = frame;
        }
        Ok(g.value(acc.unwrap()).data.clone())
    }

    /// Deterministic rollout (latent at its prior mean, zero) against one
    /// recorded window: mean squared pixel error plus every horizon step's
    /// (predicted, actual) reward pair.
    pub(crate) fn window_eval(
        &self,
        window: &Sequence,
    ) -> Result<(Option<f64>, Vec<(f64, f64)>), ModelError> {
        let l = self.config.sequence_length();
        let ctx = self.config.context_length;
        let s = self.config.image_size;
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(vec![1, s / 8, s / 8, LATENT_CHANNELS]));
        let mut states = self.zero_states(&mut g, 1);
        let mut prev_frame: Option<Var> = None;
        let mut pairs = Vec::with_capacity(l - ctx);
        let mut img_sq = 0.0;
        for t in 0..l - 1 {
            let x = if t < ctx {
                g.input(stack_observations(std::slice::from_ref(window), t, t + 1, s))
            } else {
                prev_frame.unwrap()
            };
            let a = g.input(Tensor::new(
                vec![1, window.actions[t].len()],
                window.actions[t].clone(),
            ));
            let (frame, new_states) = self.predict_next(&mut g, x, a, z, &states);
            states = new_states;
            if t + 1 >= ctx {
                let r_hat = match self.config.design {
                    ModelDesign::Otor => self.reward_from_frame(&mut g, frame),
                    _ => self.reward_from_states(&mut g, &states, false),
                };
                pairs.push((g.value(r_hat).data[0], window.rewards[t + 1]));
                let pred = &g.value(frame).data;
                let truth = &window.observations[t + 1].data;
                let n = truth.len() as f64;
                img_sq += pred
                    .iter()
                    .zip(truth.iter())
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    / n;
            }
            prev_frame = Some(frame);
        }
        let hor = (l - ctx) as f64;
        Ok((Some(img_sq / hor), pairs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Task;
    use crate::models::LossMaskSpec;

    const S: usize = 8;

    fn toy_config(design: ModelDesign) -> ModelConfig {
        let mut c = ModelConfig::new(design, Task::PendulumSwingup);
        c.image_size = S;
        c.scale_level = 1;
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
            actions: (0..len_obs - 1).map(|i| vec![(i as f64 * 0.7).sin()]).collect(),
            rewards: std::iter::once(0.0)
                .chain(std::iter::repeat(reward).take(len_obs - 1))
                .collect(),
            states: Vec::new(),
        }
    }

    #[test]
    fn scale_level_one_uses_the_base_filter_stack() {
        let cfg = toy_config(ModelDesign::Otor);
        let m = FrameModel::build(&cfg, 1).unwrap();
        assert_eq!(m.filters, [1, 1, 2, 2, 4, 2, 1]);
        // Gate kernel of the bottleneck cell sees input, action, and latent
        // channels on top of its own hidden map.
        assert_eq!(
            m.params.get("cell5.gate.k").unwrap().shape,
            vec![3, 3, 4 + ACTION_CHANNELS + LATENT_CHANNELS + 4, 4]
        );
    }

    #[test]
    fn desk_default_doubles_twice_more_than_level_one() {
        let mut cfg = toy_config(ModelDesign::Otor);
        cfg.scale_level = 0;
        let m = FrameModel::build(&cfg, 1).unwrap();
        assert_eq!(m.filters, [4, 4, 8, 8, 16, 8, 4]);
        cfg.scale_level = 7;
        assert!(matches!(
            FrameModel::build(&cfg, 1),
            Err(ModelError::InvalidScaleLevel { .. })
        ));
    }

    #[test]
    fn image_size_must_fit_the_encoder_stride() {
        let mut cfg = toy_config(ModelDesign::Otor);
        cfg.image_size = 12;
        assert!(matches!(
            FrameModel::build(&cfg, 1),
            Err(ModelError::UnsupportedImageSize { multiple: 8, .. })
        ));
    }

    #[test]
    fn elbo_terms_are_populated_and_loss_decreases() {
        let cfg = toy_config(ModelDesign::Otor);
        let mut m = FrameModel::build(&cfg, 4).unwrap();
        let batch: Vec<Sequence> =
            (0..2).map(|i| toy_sequence(cfg.sequence_length(), i, 0.5)).collect();
        let first = m.train_batch(&batch).unwrap();
        assert!(first.image_nll != 0.0);
        assert!(first.kl >= 0.0);
        assert!(first.reward_loss > 0.0);
        let expected = first.image_nll + cfg.beta * first.kl
            + cfg.reward_loss_multiplier * first.reward_loss;
        assert!((first.total - expected).abs() < 1e-12);
        let mut last = first.total;
        for _ in 0..30 {
            last = m.train_batch(&batch).unwrap().total;
        }
        assert!(last < first.total, "loss went {} -> {last}", first.total);
    }

    #[test]
    fn pooled_state_reward_design_trains_with_stop_gradient_default() {
        let cfg = toy_config(ModelDesign::Otlr);
        assert!(!cfg.latent_sharing);
        let mut m = FrameModel::build(&cfg, 6).unwrap();
        let batch: Vec<Sequence> =
            (0..2).map(|i| toy_sequence(cfg.sequence_length(), 20 + i, 0.4)).collect();
        let report = m.train_batch(&batch).unwrap();
        assert!(report.total.is_finite());
        assert!(m.params.contains("rstates.d1.w"));
        assert!(!m.params.contains("rconv.d1.w"));
    }

    #[test]
    fn sharing_toggle_is_forward_invisible_but_moves_the_trunk() {
        let cfg_off = toy_config(ModelDesign::Otlr);
        let mut cfg_on = cfg_off.clone();
        cfg_on.latent_sharing = true;
        let mut a = FrameModel::build(&cfg_off, 9).unwrap();
        let mut b = FrameModel::build(&cfg_on, 9).unwrap();
        let batch: Vec<Sequence> =
            (0..2).map(|i| toy_sequence(cfg_off.sequence_length(), 30 + i, 0.6)).collect();
        let ra = a.train_batch(&batch).unwrap();
        let rb = b.train_batch(&batch).unwrap();
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        let head_a = a.params.get("rstates.d1.w").unwrap();
        let head_b = b.params.get("rstates.d1.w").unwrap();
        assert!(head_a
            .data
            .iter()
            .zip(&head_b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let cell_a = a.params.get("cell5.cand.k").unwrap();
        let cell_b = b.params.get("cell5.cand.k").unwrap();
        assert!(cell_a.data.iter().zip(&cell_b.data).any(|(x, y)| x != y));
    }

    #[test]
    fn imagination_is_rng_deterministic_and_finite() {
        let cfg = toy_config(ModelDesign::Otor);
        let m = FrameModel::build(&cfg, 12).unwrap();
        let seq = toy_sequence(4, 50, 0.2);
        let ctx = Context::from_sequence_tail(&seq, 2);
        let belief = m.observe_context(&ctx).unwrap();
        let candidates: Vec<Vec<Vec<f64>>> = (0..16)
            .map(|i| (0..3).map(|t| vec![((i + t) as f64 * 0.2).cos()]).collect())
            .collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = m.imagine_returns(&belief, &candidates, &mut r1).unwrap();
        let b = m.imagine_returns(&belief, &candidates, &mut r2).unwrap();
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn resize_mask_shrinks_the_scored_grid() {
        let mut cfg = toy_config(ModelDesign::Otor);
        cfg.loss_mask = LossMaskSpec::Resize(0.5);
        let mut m = FrameModel::build(&cfg, 3).unwrap();
        let batch: Vec<Sequence> =
            (0..2).map(|i| toy_sequence(cfg.sequence_length(), 40 + i, 0.3)).collect();
        let masked = m.train_batch(&batch).unwrap();
        let mut m_full = FrameModel::build(&toy_config(ModelDesign::Otor), 3).unwrap();
        let full = m_full.train_batch(&batch).unwrap();
        // A quarter of the pixels are scored, so the summed NLL term drops.
        assert!(masked.image_nll < full.image_nll);
    }

    #[test]
    fn window_eval_covers_both_channels() {
        let cfg = toy_config(ModelDesign::Otlr);
        let m = FrameModel::build(&cfg, 2).unwrap();
        let seq = toy_sequence(cfg.sequence_length(), 60, 0.9);
        let (img, pairs) = m.window_eval(&seq).unwrap();
        assert!(img.unwrap() > 0.0);
        assert_eq!(pairs.len(), cfg.prediction_horizon);
        assert!(pairs.iter().any(|(p, a)| (p - a).abs() > 0.0));
    }
}
