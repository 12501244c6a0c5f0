"""Phase-1 online preconditioner sweep.

The write-side key of each token is ``d_t * k_t``; ``d`` is then moved by one
projected online-gradient step on the closed-form hypergradient

    h(d) = ((1 - beta <d, k^2>)^2 - 1) / (2 max(|k|^2, eps))

which depends only on the key and the gate, never on the memory state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .types import GateSequence, PreconditionerState, StreamError, TokenStream, WriteKeySequence


@dataclass(frozen=True)
class HypergradSample:
    h_value: float
    h_grad: np.ndarray
    alignment: float
    key_norm_sq: float


def hypergrad_eval(d, k, beta: float, epsilon: float = 1e-6) -> HypergradSample:
    d = np.asarray(d, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(k)) and np.isfinite(beta)):
        raise StreamError("non-finite input to hypergrad_eval")
    k2 = k * k
    n = max(float(k2.sum()), epsilon)
    align = float(np.dot(d, k2))
    resid = 1.0 - beta * align
    h = (resid * resid - 1.0) / (2.0 * n)
    grad = -beta * resid / n * k2
    return HypergradSample(h_value=h, h_grad=grad, alignment=align, key_norm_sq=float(k2.sum()))


def hypergrad_values(d, keys, betas, epsilon: float = 1e-6) -> np.ndarray:
    """Vectorised ``h`` over any leading shape: ``d, keys: [..., K]``, ``betas: [...]``."""
    k2 = keys * keys
    n = np.maximum(k2.sum(-1), epsilon)
    resid = 1.0 - betas * (d * k2).sum(-1)
    return (resid * resid - 1.0) / (2.0 * n)


def _resolve_retention(state: PreconditionerState, retention):
    if retention is not None:
        return np.asarray(retention, dtype=np.float64)
    if state.retention_mode == "constant":
        return np.float64(state.rho)
    if state.retention_mode == "data_dependent":
        raise StreamError("data_dependent retention needs an explicit retention value")
    return np.float64(1.0)


def _affine_step(d, k, beta, retention, eta, epsilon, beta_aware):
    """Unprojected update ``r*d + eta*b*(1 - b<d,k^2>)/n * k^2`` over leading dims."""
    k2 = k * k
    n = np.maximum(k2.sum(-1), epsilon)
    bp = beta if beta_aware else np.ones_like(beta)
    align = (d * k2).sum(-1)
    coef = eta * bp * (1.0 - bp * align) / n
    return retention[..., None] * d + coef[..., None] * k2


def _project(dbar, d_min, d_max):
    d = np.minimum(np.maximum(dbar, d_min), d_max)
    clamped = np.where(dbar < d_min, -1, np.where(dbar > d_max, 1, 0)).astype(np.int8)
    return d, clamped


def precond_step(state: PreconditionerState, k, beta, retention=None) -> PreconditionerState:
    """One projected hypergradient step; shapes broadcast over ``state.d``'s leading dims.

    ``retention`` defaults to 1 (mode ``none``) or ``rho`` (mode ``constant``).
    """
    k = np.asarray(k, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    r = np.broadcast_to(_resolve_retention(state, retention), beta.shape)
    dbar = _affine_step(state.d, k, beta, r, state.eta, state.epsilon, state.beta_aware)
    d, _ = _project(dbar, state.d_min, state.d_max)
    return state.replace(d=d)


def affine_map_coefficients(k, beta: float, retention: float, state: PreconditionerState):
    """Matrix ``A`` and offset ``b`` with ``dbar = A d + b`` before projection."""
    k = np.asarray(k, dtype=np.float64)
    k2 = k * k
    n = max(float(k2.sum()), state.epsilon)
    bp = beta if state.beta_aware else 1.0
    A = retention * np.eye(k.shape[-1]) - (state.eta * bp * bp / n) * np.outer(k2, k2)
    b = (state.eta * bp / n) * k2
    return A, b


def retention_sequence(stream: TokenStream, state: PreconditionerState, gates: Optional[GateSequence]) -> np.ndarray:
    """Per-token retention ``[B,T,H]`` implied by the state's mode."""
    shape = stream.betas.shape
    if state.retention_mode == "none":
        return np.ones(shape)
    if state.retention_mode == "constant":
        return np.full(shape, state.rho)
    if gates is None or gates.retention is None:
        raise StreamError("data_dependent retention requires GateSequence.retention")
    gates.check_against(stream)
    return np.asarray(gates.retention)


def phase1_sweep(
    stream: TokenStream,
    init: PreconditionerState,
    gates: Optional[GateSequence] = None,
    keep_trajectory: bool = False,
) -> WriteKeySequence:
    """Emit ``write_keys[t] = d_t * k_t`` and then advance ``d``, token by token.

    Lanes ``(b, h)`` are independent and run vectorised; ``init.d`` must be
    ``[B,H,K]``.
    """
    B, T, H, K = stream.keys.shape
    if init.d.shape != (B, H, K):
        raise StreamError(f"initial d shape {init.d.shape} != {(B, H, K)}")
    retention = retention_sequence(stream, init, gates)
    keys, betas = stream.keys, stream.betas
    write_keys = np.empty_like(keys)
    traj = np.empty_like(keys) if keep_trajectory else None
    clamped = np.empty(keys.shape, dtype=np.int8) if keep_trajectory else None
    d = np.array(init.d)
    for t in range(T):
        k_t = keys[:, t]
        write_keys[:, t] = d * k_t
        if keep_trajectory:
            traj[:, t] = d
        dbar = _affine_step(d, k_t, betas[:, t], retention[:, t], init.eta, init.epsilon, init.beta_aware)
        d, c = _project(dbar, init.d_min, init.d_max)
        if keep_trajectory:
            clamped[:, t] = c
    return WriteKeySequence(write_keys=write_keys, d_final=d, d_trajectory=traj, clamped=clamped)
