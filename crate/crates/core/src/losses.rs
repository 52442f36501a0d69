//! Training objectives: prediction loss on gap-evolved forecasts, jump
//! loss on post-update forecasts (negative log likelihood or KL against an
//! assumed observation-noise distribution), and their weighted sum.
//!
//! Per-trajectory losses are sums over masked events; the trainer averages
//! over trajectories in a batch so long stays do not dominate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::RolloutStep;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpKind {
    Nll,
    Kl,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight on the jump term.
    pub lambda: f64,
    pub jump_kind: JumpKind,
    /// Assumed observation-error variance on the log-glucose scale
    /// (KL jump only).
    pub obs_error_var: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            jump_kind: JumpKind::Nll,
            obs_error_var: 0.01,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.jump_kind == JumpKind::Kl && self.obs_error_var <= 0.0 {
            return Err(Error::Config(
                "obs_error_var must be > 0 for the KL jump loss".into(),
            ));
        }
        Ok(())
    }
}

/// Negative log density of `N(mu, sigma^2)` at `y`. The same kernel backs
/// the logarithmic score in `metrics`.
pub fn nll_normal(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::Numeric(format!("nll_normal needs sigma > 0, got {sigma}")));
    }
    Ok(nll_normal_kernel(y, mu, sigma))
}

#[inline]
pub(crate) fn nll_normal_kernel(y: f64, mu: f64, sigma: f64) -> f64 {
    let z = (y - mu) / sigma;
    HALF_LN_2PI + sigma.ln() + 0.5 * z * z
}

/// Graph node for the NLL of a constant observation under `(mu, sigma)`
/// nodes. `1/sigma^2` is expressed as `exp(-2 log sigma)` to stay inside
/// the supported op set.
pub fn nll_normal_node(g: &mut Graph, y: f64, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
    let y_node = g.constant(Tensor::scalar(y));
    let diff = g.sub(y_node, mu)?;
    let sq = g.square(diff)?;
    let log_sigma = g.log(sigma)?;
    let neg2ls = g.scale(log_sigma, -2.0)?;
    let inv_var = g.exp(neg2ls)?;
    let quad = g.hadamard(sq, inv_var)?;
    let half_quad = g.scale(quad, 0.5)?;
    let part = g.add(log_sigma, half_quad)?;
    let c = g.scalar(HALF_LN_2PI);
    g.add(part, c)
}

/// `KL(N(mu, sigma^2) || N(y_obs, obs_var))` as a graph node.
pub fn kl_jump_node(
    g: &mut Graph,
    mu: NodeId,
    sigma: NodeId,
    y_obs: f64,
    obs_var: f64,
) -> Result<NodeId> {
    if obs_var <= 0.0 {
        return Err(Error::Numeric(format!(
            "kl_jump needs obs_error_var > 0, got {obs_var}"
        )));
    }
    let log_sigma = g.log(sigma)?;
    let neg_log_sigma = g.scale(log_sigma, -1.0)?;
    let var = g.square(sigma)?;
    let y_node = g.constant(Tensor::scalar(y_obs));
    let diff = g.sub(mu, y_node)?;
    let sq = g.square(diff)?;
    let num = g.add(var, sq)?;
    let scaled = g.scale(num, 1.0 / (2.0 * obs_var))?;
    let part = g.add(neg_log_sigma, scaled)?;
    let c = g.scalar(0.5 * obs_var.ln() - 0.5);
    g.add(part, c)
}

/// Scalar KL between two normals, used by tests and reporting.
pub fn kl_normal(mu: f64, sigma: f64, y_obs: f64, obs_var: f64) -> Result<f64> {
    if sigma <= 0.0 || obs_var <= 0.0 {
        return Err(Error::Numeric("kl_normal needs positive variances".into()));
    }
    Ok((obs_var.sqrt() / sigma).ln() + (sigma * sigma + (mu - y_obs) * (mu - y_obs)) / (2.0 * obs_var)
        - 0.5)
}

fn masked_nll_sum(
    g: &mut Graph,
    steps: &[RolloutStep],
    pick: impl Fn(&RolloutStep) -> (NodeId, NodeId),
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for step in steps.iter().filter(|s| s.mask) {
        let (mu, sigma) = pick(step);
        let term = nll_normal_node(g, step.y_log, mu, sigma)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| g.scalar(0.0)))
}

/// Sum over masked events `k >= 1` of the NLL of the observation under the
/// forecast evolved across the preceding gap.
pub fn loss_pred(g: &mut Graph, steps: &[RolloutStep]) -> Result<NodeId> {
    masked_nll_sum(g, steps, |s| (s.pre_mu, s.pre_sigma))
}

/// Same kernel applied to the post-update forecasts.
pub fn loss_jump(g: &mut Graph, steps: &[RolloutStep]) -> Result<NodeId> {
    masked_nll_sum(g, steps, |s| (s.post_mu, s.post_sigma))
}

/// Sum of per-event KL divergences between the post-update forecast and
/// the observation-noise distribution centred on the measurement.
pub fn loss_jump_kl(g: &mut Graph, steps: &[RolloutStep], obs_var: f64) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for step in steps.iter().filter(|s| s.mask) {
        let term = kl_jump_node(g, step.post_mu, step.post_sigma, step.y_log, obs_var)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| g.scalar(0.0)))
}

/// `loss_pred + lambda * jump`, with the jump term picked by the config.
pub fn total_loss(g: &mut Graph, steps: &[RolloutStep], cfg: &LossConfig) -> Result<NodeId> {
    cfg.validate()?;
    let pred = loss_pred(g, steps)?;
    if cfg.lambda == 0.0 {
        return Ok(pred);
    }
    let jump = match cfg.jump_kind {
        JumpKind::Nll => loss_jump(g, steps)?,
        JumpKind::Kl => loss_jump_kl(g, steps, cfg.obs_error_var)?,
    };
    let weighted = g.scale(jump, cfg.lambda)?;
    g.add(pred, weighted)
}
