//! Upper baseline that plans on the true simulator instead of a learned
//! model. It never trains and never spends agent interaction: candidate
//! scoring rolls copies of the state through the dynamics directly.

use crate::envs::Env;
use crate::tensor::ParamSet;

use super::{Belief, Context, LossReport, ModelConfig, ModelError, Sequence};

pub struct OracleModel {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamSet,
    env: Env,
}

impl OracleModel {
    pub(crate) fn build(config: &ModelConfig) -> Result<Self, ModelError> {
        Ok(Self {
            config: config.clone(),
            params: ParamSet::new(),
            env: Env::new(config.task).with_image_size(config.image_size),
        })
    }

    pub(crate) fn observe_context(&self, ctx: &Context) -> Result<Belief, ModelError> {
        match &ctx.env_state {
            Some(state) => Ok(Belief::Simulator(state.clone())),
            None => Err(ModelError::MissingSimulatorState),
        }
    }

    pub(crate) fn imagine_returns(
        &self,
        belief: &Belief,
        candidates: &[Vec<Vec<f64>>],
    ) -> Result<Vec<f64>, ModelError> {
        let Belief::Simulator(state) = belief else {
            return Err(ModelError::WrongBelief);
        };
        Ok(self
            .env
            .oracle_returns(state, candidates, self.config.action_repeat))
    }

    /// Replays each step from the recorded simulator state, so on our
    /// deterministic tasks both errors come out exactly zero.
    pub(crate) fn window_eval(
        &self,
        window: &Sequence,
    ) -> Result<(Option<f64>, Vec<(f64, f64)>), ModelError> {
        if window.states.is_empty() {
            return Err(ModelError::MissingSimulatorState);
        }
        let l = self.config.sequence_length();
        let ctx = self.config.context_length;
        let mut pairs = Vec::with_capacity(l - ctx);
        let mut img_sq = 0.0;
        for t in ctx..l {
            let plan = vec![vec![window.actions[t - 1].clone()]];
            let predicted =
                self.env
                    .oracle_returns(&window.states[t - 1], &plan, self.config.action_repeat)[0];
            pairs.push((predicted, window.rewards[t]));

            let rendered = self.env.render(&window.states[t]).image;
            let truth = &window.observations[t];
            let n = truth.data.len() as f64;
            img_sq += rendered
                .data
                .iter()
                .zip(&truth.data)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                / n;
        }
        let hor = (l - ctx) as f64;
        Ok((Some(img_sq / hor), pairs))
    }

    pub(crate) fn no_train_report() -> LossReport {
        LossReport {
            total: 0.0,
            image_nll: 0.0,
            kl: 0.0,
            reward_loss: 0.0,
            grad_norms: None,
        }
    }
}
