//! Latent-dynamics family: a recurrent state-space cell with a
//! deterministic path and a stochastic path whose prior and posterior are
//! diagonal Gaussians. Covers the designs that predict reward from the
//! latent state, from a decoded frame, and the reward-only variant that
//! drops the decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    add_conv, add_dense, add_gated_cell, conv_layer, dense, gated_cell, gaussian_kl,
    reparam_sample, AdamState, DiagGaussian, Gradients, Graph, ParamSet, Tensor, Var,
};

use super::{
    actions_at, candidate_actions_at, grad_norm, latent_scale, masked_image_nll, normal_tensor,
    rewards_at, squared_error_mean, stack_observations, tile_rows, Belief, Context, GradNorms,
    LossReport, ModelConfig, ModelDesign, ModelError, Sequence,
};

const STDDEV_FLOOR: f64 = 0.1;

pub struct LatentModel {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamSet,
    pub(crate) adam: AdamState,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) diag_every: u32,
    step: u64,
    det: usize,
    stoch: usize,
}

impl LatentModel {
    pub(crate) fn build(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let (fc, det) = latent_scale(config.scale_level)?;
        let stoch = 8;
        let s = config.image_size;
        if s % 4 != 0 {
            return Err(ModelError::UnsupportedImageSize {
                design: "latent dynamics",
                multiple: 4,
                size: s,
            });
        }
        let flat = (s / 4) * (s / 4) * 16;
        let adim = config.task.action_dim();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        add_conv(&mut p, &mut rng, "enc.c1", 3, 3, 3, 8);
        add_conv(&mut p, &mut rng, "enc.c2", 3, 3, 8, 16);
        add_dense(&mut p, &mut rng, "enc.fc", flat, fc);
        add_dense(&mut p, &mut rng, "za", stoch + adim, fc);
        add_gated_cell(&mut p, &mut rng, "cell", fc, det);
        add_dense(&mut p, &mut rng, "prior.fc", det, fc);
        add_dense(&mut p, &mut rng, "prior.mean", fc, stoch);
        add_dense(&mut p, &mut rng, "prior.rawstd", fc, stoch);
        add_dense(&mut p, &mut rng, "post.fc", det + fc, fc);
        add_dense(&mut p, &mut rng, "post.mean", fc, stoch);
        add_dense(&mut p, &mut rng, "post.rawstd", fc, stoch);
        match config.design {
            ModelDesign::Ltor => {
                add_conv(&mut p, &mut rng, "rconv.c1", 3, 3, 3, 8);
                add_conv(&mut p, &mut rng, "rconv.c2", 3, 3, 8, 8);
                add_dense(&mut p, &mut rng, "rconv.d1", (s / 4) * (s / 4) * 8, 32);
                add_dense(&mut p, &mut rng, "rconv.d2", 32, 1);
            }
            _ => {
                add_dense(&mut p, &mut rng, "rhead.d1", det + stoch, fc);
                add_dense(&mut p, &mut rng, "rhead.d2", fc, fc);
                add_dense(&mut p, &mut rng, "rhead.d3", fc, 1);
            }
        }
        if !matches!(config.design, ModelDesign::R(_)) {
            add_dense(&mut p, &mut rng, "dec.fc1", det + stoch, fc);
            add_dense(&mut p, &mut rng, "dec.fc2", fc, flat);
            add_conv(&mut p, &mut rng, "dec.c1", 3, 3, 16, 8);
            add_conv(&mut p, &mut rng, "dec.c2", 3, 3, 8, 3);
        }

        Ok(Self {
            config: config.clone(),
            params: p,
            adam: AdamState::new(1e-3, 1e-3),
            rng,
            diag_every: 0,
            step: 0,
            det,
            stoch,
        })
    }

    fn encode(&self, g: &mut Graph, x: Var) -> Var {
        let s = self.config.image_size;
        let n = g.shape(x)[0];
        let c1 = conv_layer(g, &self.params, "enc.c1", x, 2, 1);
        let c1 = g.relu(c1);
        let c2 = conv_layer(g, &self.params, "enc.c2", c1, 2, 1);
        let c2 = g.relu(c2);
        let flat = g.reshape(c2, vec![n, (s / 4) * (s / 4) * 16]);
        let e = dense(g, &self.params, "enc.fc", flat);
        g.relu(e)
    }

    fn prior_of(&self, g: &mut Graph, h: Var) -> DiagGaussian {
        let f = dense(g, &self.params, "prior.fc", h);
        let f = g.relu(f);
        let mean = dense(g, &self.params, "prior.mean", f);
        let raw = dense(g, &self.params, "prior.rawstd", f);
        DiagGaussian::from_raw_std(g, mean, raw, STDDEV_FLOOR)
    }

    fn posterior_of(&self, g: &mut Graph, h: Var, e: Var) -> DiagGaussian {
        let he = g.concat_last(h, e);
        let f = dense(g, &self.params, "post.fc", he);
        let f = g.relu(f);
        let mean = dense(g, &self.params, "post.mean", f);
        let raw = dense(g, &self.params, "post.rawstd", f);
        DiagGaussian::from_raw_std(g, mean, raw, STDDEV_FLOOR)
    }

    fn step_cell(&self, g: &mut Graph, h: Var, z: Var, a: Var) -> Var {
        let za_in = g.concat_last(z, a);
        let feat = dense(g, &self.params, "za", za_in);
        let feat = g.relu(feat);
        gated_cell(g, &self.params, "cell", feat, h)
    }

    fn decode(&self, g: &mut Graph, h: Var, z: Var) -> Var {
        let s = self.config.image_size;
        let n = g.shape(h)[0];
        let hz = g.concat_last(h, z);
        let f1 = dense(g, &self.params, "dec.fc1", hz);
        let f1 = g.relu(f1);
        let f2 = dense(g, &self.params, "dec.fc2", f1);
        let f2 = g.relu(f2);
        let grid = g.reshape(f2, vec![n, s / 4, s / 4, 16]);
        let u1 = g.upsample2x(grid);
        let c1 = conv_layer(g, &self.params, "dec.c1", u1, 1, 1);
        let c1 = g.relu(c1);
        let u2 = g.upsample2x(c1);
        conv_layer(g, &self.params, "dec.c2", u2, 1, 1)
    }

    fn reward_from_state(&self, g: &mut Graph, h: Var, z: Var) -> Var {
        let hz = g.concat_last(h, z);
        let d1 = dense(g, &self.params, "rhead.d1", hz);
        let d1 = g.relu(d1);
        let d2 = dense(g, &self.params, "rhead.d2", d1);
        let d2 = g.relu(d2);
        dense(g, &self.params, "rhead.d3", d2)
    }

    fn reward_from_frame(&self, g: &mut Graph, frame: Var) -> Var {
        let s = self.config.image_size;
        let n = g.shape(frame)[0];
        let c1 = conv_layer(g, &self.params, "rconv.c1", frame, 2, 1);
        let c1 = g.relu(c1);
        let c2 = conv_layer(g, &self.params, "rconv.c2", c1, 2, 1);
        let c2 = g.relu(c2);
        let flat = g.reshape(c2, vec![n, (s / 4) * (s / 4) * 8]);
        let d1 = dense(g, &self.params, "rconv.d1", flat);
        let d1 = g.relu(d1);
        dense(g, &self.params, "rconv.d2", d1)
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
        if matches!(self.config.design, ModelDesign::R(_)) {
            self.reward_only_loss(batch, rng, want_diag)
        } else {
            self.elbo_loss(batch, rng, want_diag)
        }
    }

    /// Reconstruction NLL plus clamped KL plus weighted reward loss, all on
    /// posterior-filtered states.
    fn elbo_loss(
        &self,
        batch: &[Sequence],
        rng: &mut ChaCha8Rng,
        want_diag: bool,
    ) -> Result<(LossReport, Gradients), ModelError> {
        let l = self.config.sequence_length();
        let b = batch.len();
        let s = self.config.image_size;
        let sharing = self.config.latent_sharing;
        let mut g = Graph::new();

        let obs_in = g.input(stack_observations(batch, 0, l, s));
        let e_all = self.encode(&mut g, obs_in);
        let mut h = g.input(Tensor::zeros(vec![b, self.det]));
        let mut nll_sum: Option<Var> = None;
        let mut kl_sum: Option<Var> = None;
        let mut rew_sum: Option<Var> = None;
        for t in 0..l {
            let e_t = g.slice_rows(e_all, t * b, b);
            let prior = self.prior_of(&mut g, h);
            let post = self.posterior_of(&mut g, h, e_t);
            let noise = g.input(normal_tensor(rng, vec![b, self.stoch]));
            let z = reparam_sample(&mut g, post, noise)?;

            let decoded = self.decode(&mut g, h, z);
            let target = stack_observations(batch, t, t + 1, s);
            let nll_t = masked_image_nll(&mut g, decoded, &target, &self.config.loss_mask, s)?;
            nll_sum = Some(match nll_sum {
                None => nll_t,
                Some(acc) => g.add(acc, nll_t),
            });

            let kl_raw = gaussian_kl(&mut g, post, prior)?;
            let kl_t = g.scale(kl_raw, 1.0 / b as f64);
            let kl_t = g.max_const(kl_t, self.config.free_nats);
            kl_sum = Some(match kl_sum {
                None => kl_t,
                Some(acc) => g.add(acc, kl_t),
            });

            if t >= 1 {
                let r_hat = match self.config.design {
                    ModelDesign::Ltor => {
                        let frame = if sharing { decoded } else { g.stop_gradient(decoded) };
                        self.reward_from_frame(&mut g, frame)
                    }
                    _ => {
                        let (hs, zs) = if sharing {
                            (h, z)
                        } else {
                            (g.stop_gradient(h), g.stop_gradient(z))
                        };
                        self.reward_from_state(&mut g, hs, zs)
                    }
                };
                let r_target = g.input(rewards_at(batch, t));
                let err = squared_error_mean(&mut g, r_hat, r_target);
                rew_sum = Some(match rew_sum {
                    None => err,
                    Some(acc) => g.add(acc, err),
                });
            }

            if t + 1 < l {
                let a = g.input(actions_at(batch, t));
                h = self.step_cell(&mut g, h, z, a);
            }
        }

        let image_nll = g.scale(nll_sum.unwrap(), 1.0 / (l * b) as f64);
        let kl = g.scale(kl_sum.unwrap(), 1.0 / l as f64);
        let reward_loss = g.scale(rew_sum.unwrap(), 1.0 / (l - 1) as f64);
        let weighted_rew = g.scale(reward_loss, self.config.reward_loss_multiplier);
        let partial = g.add(image_nll, kl);
        let total = g.add(partial, weighted_rew);

        let grad_norms = if want_diag {
            Some(GradNorms {
                image: grad_norm(&g.backward(image_nll)?),
                kl: grad_norm(&g.backward(kl)?),
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

    /// Reward-only variant: posterior filtering over the context, then a
    /// prior rollout scored on reward alone, so imagination is exactly the
    /// path being trained.
    fn reward_only_loss(
        &self,
        batch: &[Sequence],
        rng: &mut ChaCha8Rng,
        want_diag: bool,
    ) -> Result<(LossReport, Gradients), ModelError> {
        let l = self.config.sequence_length();
        let ctx = self.config.context_length;
        let b = batch.len();
        let s = self.config.image_size;
        let mut g = Graph::new();

        let obs_in = g.input(stack_observations(batch, 0, ctx, s));
        let e_all = self.encode(&mut g, obs_in);
        let mut h = g.input(Tensor::zeros(vec![b, self.det]));
        let mut rew_sum: Option<Var> = None;
        for t in 0..l {
            let z = if t < ctx {
                let e_t = g.slice_rows(e_all, t * b, b);
                let post = self.posterior_of(&mut g, h, e_t);
                let noise = g.input(normal_tensor(rng, vec![b, self.stoch]));
                reparam_sample(&mut g, post, noise)?
            } else {
                let prior = self.prior_of(&mut g, h);
                let noise = g.input(normal_tensor(rng, vec![b, self.stoch]));
                reparam_sample(&mut g, prior, noise)?
            };
            if t >= 1 {
                let r_hat = self.reward_from_state(&mut g, h, z);
                let r_target = g.input(rewards_at(batch, t));
                let err = squared_error_mean(&mut g, r_hat, r_target);
                rew_sum = Some(match rew_sum {
                    None => err,
                    Some(acc) => g.add(acc, err),
                });
            }
            if t + 1 < l {
                let a = g.input(actions_at(batch, t));
                h = self.step_cell(&mut g, h, z, a);
            }
        }

        let reward_loss = g.scale(rew_sum.unwrap(), 1.0 / (l - 1) as f64);
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

    /// Posterior filtering with deterministic means, so equal contexts give
    /// equal beliefs.
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
        let e_all = self.encode(&mut g, obs_in);
        let mut h = g.input(Tensor::zeros(vec![1, self.det]));
        let mut z = g.input(Tensor::zeros(vec![1, self.stoch]));
        for i in 0..n {
            let e_t = g.slice_rows(e_all, i, 1);
            let post = self.posterior_of(&mut g, h, e_t);
            z = post.mean;
            if i + 1 < n {
                let a_idx = ctx.actions.len() - (n - 1) + i;
                let a = g.input(Tensor::new(
                    vec![1, ctx.actions[a_idx].len()],
                    ctx.actions[a_idx].clone(),
                ));
                h = self.step_cell(&mut g, h, z, a);
            }
        }
        Ok(Belief::Latent {
            h: g.value(h).clone(),
            z: g.value(z).clone(),
        })
    }

    /// Rolls the prior with one latent sample per candidate and sums the
    /// reward means over the horizon.
    pub(crate) fn imagine_returns(
        &self,
        belief: &Belief,
        candidates: &[Vec<Vec<f64>>],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, ModelError> {
        let Belief::Latent { h, z } = belief else {
            return Err(ModelError::WrongBelief);
        };
        let c = candidates.len();
        let mut g = Graph::new();
        let mut h = g.input(tile_rows(h, c));
        let mut z = g.input(tile_rows(z, c));
        let mut acc: Option<Var> = None;
        for t in 0..self.config.prediction_horizon {
            let a = g.input(candidate_actions_at(candidates, t));
            h = self.step_cell(&mut g, h, z, a);
            let prior = self.prior_of(&mut g, h);
            let noise = g.input(normal_tensor(rng, vec![c, self.stoch]));
            z = reparam_sample(&mut g, prior, noise)?;
            let r = match self.config.design {
                ModelDesign::Ltor => {
                    let frame = self.decode(&mut g, h, z);
                    self.reward_from_frame(&mut g, frame)
                }
                _ => self.reward_from_state(&mut g, h, z),
            };
            acc = Some(match acc {
                None => r,
                Some(prev) => g.add(prev, r),
            });
        }
        Ok(g.value(acc.unwrap()).data.clone())
    }

    /// Deterministic prior-mean rollout against one recorded window: mean
    /// squared pixel error plus every horizon step's (predicted, actual)
    /// reward pair.
    pub(crate) fn window_eval(
        &self,
        window: &Sequence,
    ) -> Result<(Option<f64>, Vec<(f64, f64)>), ModelError> {
        let l = self.config.sequence_length();
        let ctx = self.config.context_length;
        let s = self.config.image_size;
        if window.observations.len() != l {
            return Err(ModelError::WrongSequenceLength {
                need: l,
                found: window.observations.len(),
            });
        }
        let predicts_images = self.config.design.predicts_images();
        let mut g = Graph::new();

        let obs_in = g.input(stack_observations(std::slice::from_ref(window), 0, ctx, s));
        let e_all = self.encode(&mut g, obs_in);
        let mut h = g.input(Tensor::zeros(vec![1, self.det]));
        let mut z = g.input(Tensor::zeros(vec![1, self.stoch]));
        for t in 0..ctx {
            let e_t = g.slice_rows(e_all, t, 1);
            let post = self.posterior_of(&mut g, h, e_t);
            z = post.mean;
            if t + 1 < ctx {
                let a = g.input(Tensor::new(
                    vec![1, window.actions[t].len()],
                    window.actions[t].clone(),
                ));
                h = self.step_cell(&mut g, h, z, a);
            }
        }

        let mut pairs = Vec::with_capacity(l - ctx);
        let mut img_sq = 0.0;
        for t in ctx..l {
            let a = g.input(Tensor::new(
                vec![1, window.actions[t - 1].len()],
                window.actions[t - 1].clone(),
            ));
            h = self.step_cell(&mut g, h, z, a);
            let prior = self.prior_of(&mut g, h);
            z = prior.mean;
            let r_hat = match self.config.design {
                ModelDesign::Ltor => {
                    let frame = self.decode(&mut g, h, z);
                    self.reward_from_frame(&mut g, frame)
                }
                _ => self.reward_from_state(&mut g, h, z),
            };
            pairs.push((g.value(r_hat).data[0], window.rewards[t]));
            if predicts_images {
                let frame = self.decode(&mut g, h, z);
                let pred = &g.value(frame).data;
                let truth = &window.observations[t].data;
                let n = truth.len() as f64;
                img_sq += pred
                    .iter()
                    .zip(truth.iter())
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    / n;
            }
        }
        let hor = (l - ctx) as f64;
        Ok((predicts_images.then_some(img_sq / hor), pairs))
    }
}
