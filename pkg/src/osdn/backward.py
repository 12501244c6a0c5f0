"""Reverse-mode gradients through the recurrent layer and the projected preconditioner recurrence.

Phase 2 yields a cotangent for each write key ``wk_t = d_t * k_t``; it splits
into ``k_t * dwk_t`` for ``d_t`` and ``d_t * dwk_t`` for ``k_t``.  The
``d_t`` cotangents are then swept backwards through the affine-then-clip
phase-1 map, with clipped coordinates passing zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .precond import retention_sequence
from .recurrent import BackboneSpec, initial_state_array, resolve_precond, write_keys_for
from .types import (
    FastWeightState,
    GateSequence,
    PreconditionerState,
    StreamError,
    TokenStream,
    WriteKeySequence,
    validate_stream,
)


@dataclass
class LayerGradients:
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    betas: np.ndarray
    d0: np.ndarray
    init_state: np.ndarray
    retention: Optional[np.ndarray] = None
    alpha_scalar: Optional[np.ndarray] = None
    alpha_vector: Optional[np.ndarray] = None


def backward_write_key(grad_write_keys, keys, d_trajectory):
    """Split write-key cotangents into ``(dL/dk partial, dL/dd_t)``."""
    if d_trajectory is None:
        raise StreamError("backward_write_key needs the retained d trajectory")
    g = np.asarray(grad_write_keys)
    return d_trajectory * g, keys * g


def backward_d_recurrence(
    grad_d,
    stream: TokenStream,
    init: PreconditionerState,
    gates: Optional[GateSequence],
    trajectory: WriteKeySequence,
    grad_d_final=None,
):
    """Reverse sweep over ``d_{t+1} = clip(r_t d_t + c_t(d_t) k_t^2)``.

    ``grad_d[t]`` is the direct cotangent of ``d_t`` (``[B,T,H,K]``).  Returns
    ``(grad_keys_via_d, grad_betas_via_d, grad_d0, grad_retention)``; the last
    is ``None`` unless retention is data dependent.
    """
    if trajectory.d_trajectory is None or trajectory.clamped is None:
        raise StreamError("backward_d_recurrence needs the d trajectory and clamp mask")
    keys, betas = stream.keys, stream.betas
    B, T, H, K = keys.shape
    retention = retention_sequence(stream, init, gates)
    eta, eps = init.eta, init.epsilon
    gk = np.zeros_like(keys)
    gb = np.zeros_like(betas)
    gr = np.zeros_like(betas)
    G = np.zeros((B, H, K)) if grad_d_final is None else np.array(grad_d_final, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        d = trajectory.d_trajectory[:, t]
        k = keys[:, t]
        beta = betas[:, t]
        r = retention[:, t]
        k2 = k * k
        nk = k2.sum(-1)
        n = np.maximum(nk, eps)
        bp = beta if init.beta_aware else np.ones_like(beta)
        align = (d * k2).sum(-1)
        c = eta * bp * (1.0 - bp * align) / n
        gbar = np.where(trajectory.clamped[:, t] == 0, G, 0.0)
        gr[:, t] = (gbar * d).sum(-1)
        dc = (gbar * k2).sum(-1)
        dalign = -eta * bp * bp / n * dc
        dk2 = c[..., None] * gbar + dalign[..., None] * d
        if init.beta_aware:
            gb[:, t] = eta * (1.0 - 2.0 * bp * align) / n * dc
        # the max(|k|^2, eps) floor is a hard switch: no gradient below eps
        dn = np.where(nk >= eps, -c / n * dc, 0.0)
        dk2 = dk2 + dn[..., None]
        gk[:, t] = 2.0 * k * dk2
        G = r[..., None] * gbar + dalign[..., None] * k2 + grad_d[:, t]
    grad_ret = gr if init.retention_mode == "data_dependent" else None
    return gk, gb, G, grad_ret


def _forward_cache(stream, spec, gates, S0, wk_all):
    B, T, H, K = stream.keys.shape
    states = np.empty((T + 1,) + S0.shape)
    states[0] = S0
    S = S0
    for t in range(T):
        k, v, beta, wk = stream.keys[:, t], stream.values[:, t], stream.betas[:, t], wk_all[:, t]
        if spec.backbone == "kda":
            S_bar = gates.alpha_vector[:, t][..., :, None] * S
            u = v - np.einsum("bhkv,bhk->bhv", S_bar, k)
            S = S_bar + beta[..., None, None] * wk[..., :, None] * u[..., None, :]
        else:
            a = gates.alpha_scalar[:, t][..., None, None] if spec.backbone == "gated_delta_net" else 1.0
            S_bar = a * S
            u = v - np.einsum("bhvk,bhk->bhv", S_bar, k)
            S = S_bar + beta[..., None, None] * u[..., :, None] * wk[..., None, :]
        states[t + 1] = S
    return states


def layer_backward(
    stream: TokenStream,
    spec: BackboneSpec,
    grad_outputs,
    gates: Optional[GateSequence] = None,
    init_state: Optional[FastWeightState] = None,
    init_precond: Optional[PreconditionerState] = None,
    grad_final_state=None,
) -> LayerGradients:
    """Gradients of ``sum(grad_outputs * outputs) + sum(grad_final_state * S_T)`` for any variant."""
    validate_stream(stream)
    spec.check_gates(stream, gates)
    precond = resolve_precond(spec, stream, init_precond)
    traj = write_keys_for(stream, spec, gates, precond, keep_trajectory=True)
    wk_all = traj.write_keys
    S0 = initial_state_array(stream, spec, init_state)
    states = _forward_cache(stream, spec, gates, S0, wk_all)

    B, T, H, K = stream.keys.shape
    go = np.asarray(grad_outputs, dtype=np.float64)
    c = stream.query_scale
    gq = np.zeros_like(stream.queries)
    gk = np.zeros_like(stream.keys)
    gv = np.zeros_like(stream.values)
    gb = np.zeros_like(stream.betas)
    gwk = np.zeros_like(stream.keys)
    ga_s = np.zeros_like(stream.betas) if spec.backbone == "gated_delta_net" else None
    ga_v = np.zeros_like(stream.keys) if spec.backbone == "kda" else None
    dS = np.zeros_like(S0) if grad_final_state is None else np.array(grad_final_state, dtype=np.float64)
    kda = spec.backbone == "kda"

    for t in range(T - 1, -1, -1):
        S_prev, S_t = states[t], states[t + 1]
        q = stream.queries[:, t] * c
        k, v, beta, wk = stream.keys[:, t], stream.values[:, t], stream.betas[:, t], wk_all[:, t]
        do = go[:, t]
        if kda:
            alpha = gates.alpha_vector[:, t]
            S_bar = alpha[..., :, None] * S_prev
            u = v - np.einsum("bhkv,bhk->bhv", S_bar, k)
            dS = dS + q[..., :, None] * do[..., None, :]
            gq[:, t] = c * np.einsum("bhkv,bhv->bhk", S_t, do)
            dSu = np.einsum("bhkv,bhv->bhk", dS, u)
            du = beta[..., None] * np.einsum("bhkv,bhk->bhv", dS, wk)
            gb[:, t] = (wk * dSu).sum(-1)
            gwk[:, t] = beta[..., None] * dSu
            gv[:, t] = du
            dS_bar = dS - k[..., :, None] * du[..., None, :]
            gk[:, t] = -np.einsum("bhkv,bhv->bhk", S_bar, du)
            ga_v[:, t] = (dS_bar * S_prev).sum(-1)
            dS = alpha[..., :, None] * dS_bar
        else:
            alpha = gates.alpha_scalar[:, t] if ga_s is not None else None
            S_bar = S_prev if alpha is None else alpha[..., None, None] * S_prev
            u = v - np.einsum("bhvk,bhk->bhv", S_bar, k)
            dS = dS + do[..., :, None] * q[..., None, :]
            gq[:, t] = c * np.einsum("bhvk,bhv->bhk", S_t, do)
            dSwk = np.einsum("bhvk,bhk->bhv", dS, wk)
            du = beta[..., None] * dSwk
            gb[:, t] = (u * dSwk).sum(-1)
            gwk[:, t] = beta[..., None] * np.einsum("bhvk,bhv->bhk", dS, u)
            gv[:, t] = du
            dS_bar = dS - du[..., :, None] * k[..., None, :]
            gk[:, t] = -np.einsum("bhvk,bhv->bhk", S_bar, du)
            if alpha is not None:
                ga_s[:, t] = (dS_bar * S_prev).sum((-1, -2))
                dS = alpha[..., None, None] * dS_bar
            else:
                dS = dS_bar

    gret = None
    if spec.online_scaled:
        gk_direct, gd = backward_write_key(gwk, stream.keys, traj.d_trajectory)
        gk_d, gb_d, gd0, gret = backward_d_recurrence(gd, stream, precond, gates, traj)
        gk = gk + gk_direct + gk_d
        gb = gb + gb_d
    else:
        gk = gk + gwk
        gd0 = np.zeros((B, H, K))
    return LayerGradients(
        queries=gq, keys=gk, values=gv, betas=gb, d0=gd0, init_state=dS,
        retention=gret, alpha_scalar=ga_s, alpha_vector=ga_v,
    )
