"""Training objectives for both world-model levels.

Latent tensors are laid out batch-first: a low-level window is
`z (B, T+1, d_z)` with `actions (B, T, 2)`; a high-level batch is
`z (B, N, d_z)` with latent actions `(B, N-1, d_l)`.
"""

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import torch

from utils import ndcompute as nd
from utils.errors import ShapeError, TrajectoryTooShortError


@dataclass
class LossBreakdown:
    l_tf: torch.Tensor
    l_roll: torch.Tensor
    vicreg: torch.Tensor
    proprio: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in ("l_tf", "l_roll", "vicreg", "proprio", "total")}

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_floats().values())


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.new_zeros(())


def _targets(z: torch.Tensor, stop_grad: bool) -> torch.Tensor:
    return nd.stop_gradient(z) if stop_grad else z


def _check_window(z, actions, op):
    if z.dim() != 3 or actions.dim() != 3 or z.shape[0] != actions.shape[0] or z.shape[1] != actions.shape[1] + 1:
        raise ShapeError(op, z.shape, actions.shape)


# -- low level ----------------------------------------------------------------


def loss_teacher_forcing_low(z: torch.Tensor, actions: torch.Tensor, predictor, stop_grad: bool = True) -> torch.Tensor:
    """Mean L1 between P(z_t, a_t) and z_{t+1} over every transition in the window"""
    _check_window(z, actions, "loss_teacher_forcing_low")
    if z.shape[1] < 2:
        raise TrajectoryTooShortError("teacher forcing needs at least two latents per window")
    pred = predictor(z[:, :-1], actions)
    return nd.l1_loss(pred, _targets(z[:, 1:], stop_grad))


def rollout_predictions(z1: torch.Tensor, actions: torch.Tensor, predictor) -> torch.Tensor:
    """(B, d) start, (B, T, a) actions -> (B, T, d) autoregressive predictions"""
    preds = []
    z = z1
    for t in range(actions.shape[1]):
        z = predictor(z, actions[:, t])
        preds.append(z)
    return torch.stack(preds, dim=1)


def loss_rollout_low(z: torch.Tensor, actions: torch.Tensor, T: int, predictor, stop_grad: bool = True) -> torch.Tensor:
    """Sum over j = 2..T of the L1 between the j-step unroll from z_1 and z_{j+1}"""
    _check_window(z, actions, "loss_rollout_low")
    if z.shape[1] < T + 1:
        raise TrajectoryTooShortError(f"rollout of {T} steps needs {T + 1} latents, window has {z.shape[1]}")
    if T < 2:
        return _zero(z)
    preds = rollout_predictions(z[:, 0], actions[:, :T], predictor)
    targets = _targets(z[:, 1:T + 1], stop_grad)
    total = _zero(z)
    for j in range(1, T):
        total = nd.add(total, nd.l1_loss(preds[:, j], targets[:, j]))
    return total


def loss_proprio(z: torch.Tensor, states: torch.Tensor, head) -> torch.Tensor:
    """Element-mean MSE of the linear (x, y, vx, vy) readout"""
    return nd.mse_loss(head(z), states)


def _variance_hinge(x: torch.Tensor, eps: float) -> torch.Tensor:
    # sqrt(eps) is subtracted so a collapsed dimension has std 0 and hinge 1
    std = nd.feature_std(x, eps) - eps ** 0.5
    return nd.mean(nd.relu(1.0 - std))


def vicreg_terms(z: torch.Tensor, pred: Optional[torch.Tensor] = None, target: Optional[torch.Tensor] = None,
                 augmented: Optional[torch.Tensor] = None, eps: float = 1e-8) -> Dict[str, torch.Tensor]:
    """Unweighted variance hinge, covariance, invariance and augmented-variance terms over a (B, d) batch"""
    if z.dim() != 2 or z.shape[0] < 2:
        raise ShapeError("loss_vicreg", z.shape)
    d = z.shape[1]
    variance = _variance_hinge(z, eps)
    covariance = nd.off_diagonal(nd.feature_cov(z)).pow(2).sum() / d
    invariance = _zero(z) if pred is None else nd.mse_loss(pred, target)
    if augmented is None:
        augmented_variance = _zero(z)
    else:
        augmented_variance = _variance_hinge(augmented, eps)
    return {
        "variance": variance,
        "covariance": covariance,
        "invariance": invariance,
        "augmented_variance": augmented_variance,
    }


def loss_vicreg(z: torch.Tensor, weights: Mapping[str, float], pred: Optional[torch.Tensor] = None,
                target: Optional[torch.Tensor] = None, augmented: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Weighted sum of `vicreg_terms`; `weights` maps term name -> coefficient"""
    terms = vicreg_terms(z, pred, target, augmented)
    total = _zero(z)
    for role, value in terms.items():
        total = nd.add(total, nd.mul(value, float(weights.get(role, 0.0))))
    return total


def loss_total_low(z: torch.Tensor, actions: torch.Tensor, states: torch.Tensor, params, cfg) -> LossBreakdown:
    """gamma_tf * L_tf + gamma_roll * L_roll + VICReg + c_prop * L_proprio over one window batch

    `params` provides `low` and `proprio_head`; `cfg` is a TrainLowConfig.
    """
    _check_window(z, actions, "loss_total_low")
    T = min(cfg.pred_T, actions.shape[1])
    l_tf = loss_teacher_forcing_low(z, actions, params.low, cfg.stop_grad_targets)
    l_roll = loss_rollout_low(z, actions, T, params.low, cfg.stop_grad_targets)

    flat = z.reshape(-1, z.shape[-1])
    pred = params.low(z[:, :-1], actions)
    target = _targets(z[:, 1:], cfg.stop_grad_targets)
    augmented = nd.concat([flat, params.proprio_head(flat)], dim=-1)
    vicreg = loss_vicreg(flat, cfg.vicreg_weights(), pred=pred, target=target, augmented=augmented)

    proprio = loss_proprio(flat, states.reshape(-1, states.shape[-1]), params.proprio_head)
    total = nd.add(nd.add(nd.mul(l_tf, cfg.gamma_tf), nd.mul(l_roll, cfg.gamma_roll)),
                   nd.add(vicreg, nd.mul(proprio, cfg.proprio_coef)))
    return LossBreakdown(l_tf=l_tf, l_roll=l_roll, vicreg=vicreg, proprio=proprio, total=total)


# -- high level ---------------------------------------------------------------


def _check_waypoints(z, latent_actions, op):
    if z.dim() != 3 or latent_actions.dim() != 3 or z.shape[1] != latent_actions.shape[1] + 1 \
            or z.shape[0] != latent_actions.shape[0]:
        raise ShapeError(op, z.shape, latent_actions.shape)


def loss_high(z: torch.Tensor, latent_actions: torch.Tensor, predictor) -> torch.Tensor:
    """Mean over waypoint transitions of L1(P2(z_k, l_k), z_{k+1}); waypoint latents come from the frozen encoder"""
    _check_waypoints(z, latent_actions, "loss_high")
    pred = predictor(z[:, :-1], latent_actions)
    return nd.l1_loss(pred, nd.stop_gradient(z[:, 1:]))


def loss_rollout_high(z: torch.Tensor, latent_actions: torch.Tensor, predictor) -> torch.Tensor:
    """Sum over later waypoints of the L1 between the unroll from z_1 and the encoded waypoint"""
    _check_waypoints(z, latent_actions, "loss_rollout_high")
    preds = rollout_predictions(z[:, 0], latent_actions, predictor)
    targets = nd.stop_gradient(z[:, 1:])
    total = _zero(z)
    for k in range(preds.shape[1]):
        total = nd.add(total, nd.l1_loss(preds[:, k], targets[:, k]))
    return total


def loss_total_high(z: torch.Tensor, latent_actions: torch.Tensor, states: torch.Tensor, params, cfg) -> LossBreakdown:
    """gamma_tf * loss_high + gamma_roll * rollout + c_prop * MSE(frozen proprio head on predicted waypoints)

    `params` provides `high` and `proprio_head`; `cfg` is a TrainHighConfig.
    """
    _check_waypoints(z, latent_actions, "loss_total_high")
    l_tf = loss_high(z, latent_actions, params.high)
    l_roll = loss_rollout_high(z, latent_actions, params.high)
    preds = rollout_predictions(z[:, 0], latent_actions, params.high)
    proprio = loss_proprio(preds, states[:, 1:], params.proprio_head)
    vicreg = _zero(z)
    total = nd.add(nd.add(nd.mul(l_tf, cfg.gamma_tf), nd.mul(l_roll, cfg.gamma_roll)),
                   nd.mul(proprio, cfg.proprio_coef))
    return LossBreakdown(l_tf=l_tf, l_roll=l_roll, vicreg=vicreg, proprio=proprio, total=total)
