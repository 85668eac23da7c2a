//! Dynamic rank reduction.
//!
//! The kept rank `τ` is the longest prefix of `σ` over which every successor
//! satisfies `|σ_{i+1}| > ε·|σ_i|`. Everything after it is cut from `U`, `σ`,
//! `V` and the matching momentum buffers. Ranks never grow back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::FactorizedParam;
use crate::model::{Model, ParamId, ParamKind};
use crate::regularization::LossConfig;
use crate::training::SgdState;

/// One truncation of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub epoch: usize,
    pub layer: usize,
    pub rank_before: usize,
    pub rank_after: usize,
    pub removed_sigma: Vec<f64>,
    pub params_removed: usize,
}

/// Kept rank for singular values `sigma` under threshold `epsilon`; always in `1..=r`.
pub fn compute_tau(sigma: &[f64], epsilon: f64) -> Result<usize> {
    if sigma.is_empty() {
        return Err(Error::Usage("compute_tau needs at least one singular value".into()));
    }
    let first_failure = sigma
        .windows(2)
        .position(|w| w[1].abs() <= epsilon * w[0].abs());
    Ok(match first_failure {
        Some(i) => i + 1,
        None => sigma.len(),
    })
}

/// Keeps the leading `tau` factor columns. Returns `None` for the event when nothing is cut.
pub fn truncate(
    param: &FactorizedParam,
    tau: usize,
    layer: usize,
    epoch: usize,
) -> Result<(FactorizedParam, Option<PruneEvent>)> {
    let r = param.rank();
    if tau == 0 || tau > r {
        return Err(Error::Usage(format!("cannot truncate rank {r} to {tau}")));
    }
    if tau == r {
        return Ok((param.clone(), None));
    }
    let kept = FactorizedParam {
        u: param.u.take_columns(tau)?,
        sigma: param.sigma.take_prefix(tau)?,
        v: param.v.take_columns(tau)?,
        theta: param.theta,
        bias: param.bias.clone(),
    };
    let removed_sigma = param.sigma.data()[tau..].to_vec();
    let event = PruneEvent {
        epoch,
        layer,
        rank_before: r,
        rank_after: tau,
        params_removed: removed_sigma.len() * (param.h() + param.w() + 1),
        removed_sigma,
    };
    Ok((kept, Some(event)))
}

/// Computes `τ` for every factorized layer and truncates it, momentum included.
pub fn prune_step(
    model: &mut Model,
    mut state: Option<&mut SgdState>,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<Vec<PruneEvent>> {
    let mut events = Vec::new();
    for (layer, l) in model.layers.iter_mut().enumerate() {
        let Some(p) = l.factors_mut() else { continue };
        let tau = compute_tau(p.sigma.data(), cfg.epsilon)?;
        let (kept, event) = truncate(p, tau, layer, epoch)?;
        if let Some(event) = event {
            *p = kept;
            if let Some(state) = state.as_deref_mut() {
                let id = |kind| ParamId { layer, kind };
                state.truncate_columns(id(ParamKind::U), tau)?;
                state.truncate_prefix(id(ParamKind::Sigma), tau)?;
                state.truncate_columns(id(ParamKind::V), tau)?;
            }
            log::debug!(
                "epoch {epoch}: layer {layer} rank {} -> {}",
                event.rank_before,
                event.rank_after
            );
            events.push(event);
        }
    }
    Ok(events)
}
