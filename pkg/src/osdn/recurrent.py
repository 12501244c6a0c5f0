"""Token-by-token recurrences for DeltaNet, Gated DeltaNet and KDA, with or without online scaling.

These loops are the ground truth for the chunkwise kernels and the source of
the per-token residual trace.  Step functions broadcast over leading batch
dimensions, so one call advances every ``(b, h)`` lane at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .precond import phase1_sweep
from .types import (
    FastWeightState,
    GateSequence,
    PreconditionerState,
    ResidualTrace,
    StreamError,
    TokenStream,
    WriteKeySequence,
    validate_stream,
)

Backbone = Literal["delta_net", "gated_delta_net", "kda"]

# f_before below this is treated as an exactly-solved token (q := 1)
DEGENERATE_LOSS = 1e-30

_VARIANTS = {
    "deltanet": ("delta_net", False, False),
    "osdn": ("delta_net", True, False),
    "osdn-apf": ("delta_net", True, True),
    "gdn": ("gated_delta_net", False, False),
    "osgdn": ("gated_delta_net", True, False),
    "osgdn-apf": ("gated_delta_net", True, True),
    "kda": ("kda", False, False),
    "oskda": ("kda", True, False),
    "oskda-apf": ("kda", True, True),
}


@dataclass(frozen=True)
class BackboneSpec:
    backbone: Backbone = "delta_net"
    online_scaled: bool = False
    apf: bool = False

    def __post_init__(self):
        if self.backbone not in ("delta_net", "gated_delta_net", "kda"):
            raise StreamError(f"unknown backbone {self.backbone!r}")
        if self.apf and not self.online_scaled:
            raise StreamError("APF retention only applies to online-scaled variants")

    @classmethod
    def parse(cls, name: str) -> "BackboneSpec":
        try:
            return cls(*_VARIANTS[name.lower()])
        except KeyError:
            raise StreamError(f"unknown variant {name!r}; choose from {sorted(_VARIANTS)}") from None

    @property
    def name(self) -> str:
        for key, val in _VARIANTS.items():
            if val == (self.backbone, self.online_scaled, self.apf):
                return key
        raise AssertionError("unreachable")

    @property
    def host(self) -> "BackboneSpec":
        return BackboneSpec(self.backbone)

    @property
    def orientation(self) -> str:
        return "KxV" if self.backbone == "kda" else "VxK"

    def check_gates(self, stream: TokenStream, gates: Optional[GateSequence]) -> None:
        if self.backbone == "gated_delta_net" and (gates is None or gates.alpha_scalar is None):
            raise StreamError("gated_delta_net needs GateSequence.alpha_scalar")
        if self.backbone == "kda" and (gates is None or gates.alpha_vector is None):
            raise StreamError("kda needs GateSequence.alpha_vector")
        if self.apf and (gates is None or gates.retention is None):
            raise StreamError("APF variant needs GateSequence.retention")
        if gates is not None:
            gates.check_against(stream)


VARIANTS = tuple(_VARIANTS)
CORE_VARIANTS = ("deltanet", "osdn", "gdn", "osgdn", "kda", "oskda")


def step_delta(S, q, k, wk, v, beta):
    """DeltaNet write with write key ``wk``: ``S' = S + beta u wk^T``, ``u = v - S k``, ``o = S' q``."""
    u = v - np.einsum("...vk,...k->...v", S, k)
    S_new = S + (beta[..., None, None] if np.ndim(beta) else beta) * u[..., :, None] * wk[..., None, :]
    o = np.einsum("...vk,...k->...v", S_new, q)
    return S_new, o, u


def step_gdn(S, q, k, wk, v, beta, alpha):
    """Gated DeltaNet write against the post-gate reference ``alpha S``; returns the residual ``e``."""
    a = alpha[..., None, None] if np.ndim(alpha) else alpha
    S_bar = a * S
    return step_delta(S_bar, q, k, wk, v, beta)


def step_kda(S, q, k, wk, v, beta, alpha_vec):
    """KDA write on a ``K x V`` state: ``S' = Diag(a)S + beta wk u^T`` with ``u = v - (Diag(a)S)^T k``."""
    S_bar = alpha_vec[..., :, None] * S
    u = v - np.einsum("...kv,...k->...v", S_bar, k)
    b = beta[..., None, None] if np.ndim(beta) else beta
    S_new = S_bar + b * wk[..., :, None] * u[..., None, :]
    o = np.einsum("...kv,...k->...v", S_new, q)
    return S_new, o, u


def default_precond(stream: TokenStream, **kwargs) -> PreconditionerState:
    return PreconditionerState.initial(stream.batch, stream.heads, stream.key_dim, **kwargs)


def resolve_precond(spec: BackboneSpec, stream: TokenStream, init_precond: Optional[PreconditionerState]):
    precond = init_precond if init_precond is not None else default_precond(stream)
    if spec.apf:
        precond = precond.replace(retention_mode="data_dependent")
    return precond


def write_keys_for(
    stream: TokenStream,
    spec: BackboneSpec,
    gates: Optional[GateSequence] = None,
    init_precond: Optional[PreconditionerState] = None,
    keep_trajectory: bool = False,
) -> WriteKeySequence:
    """Write keys for any variant: the raw keys for hosts, the phase-1 sweep otherwise."""
    if not spec.online_scaled:
        d = np.ones((stream.batch, stream.heads, stream.key_dim))
        traj = np.ones_like(stream.keys) if keep_trajectory else None
        clamped = np.zeros(stream.keys.shape, np.int8) if keep_trajectory else None
        return WriteKeySequence(stream.keys, d, traj, clamped)
    precond = resolve_precond(spec, stream, init_precond)
    return phase1_sweep(stream, precond, gates, keep_trajectory=keep_trajectory)


def initial_state_array(stream: TokenStream, spec: BackboneSpec, init_state: Optional[FastWeightState]) -> np.ndarray:
    B, _, H, K = stream.keys.shape
    V = stream.value_dim
    if init_state is None:
        return FastWeightState.zeros(B, H, K, V, spec.orientation).S.copy()
    if init_state.orientation != spec.orientation:
        raise StreamError(f"{spec.backbone} uses {spec.orientation} state, got {init_state.orientation}")
    expected = (B, H, V, K) if spec.orientation == "VxK" else (B, H, K, V)
    if init_state.S.shape != expected:
        raise StreamError(f"initial state shape {init_state.S.shape} != {expected}")
    return np.array(init_state.S)


def _loss(S, k, v, orientation):
    pred = np.einsum("...vk,...k->...v", S, k) if orientation == "VxK" else np.einsum("...kv,...k->...v", S, k)
    r = pred - v
    return 0.5 * (r * r).sum(-1)


def run_recurrent(
    stream: TokenStream,
    spec: BackboneSpec,
    gates: Optional[GateSequence] = None,
    init_state: Optional[FastWeightState] = None,
    init_precond: Optional[PreconditionerState] = None,
    write_keys: Optional[WriteKeySequence] = None,
):
    """Exact recurrent forward.  Returns ``(outputs [B,T,H,V], final FastWeightState, ResidualTrace)``.

    Online-scaled variants run the phase-1 sweep first (unless ``write_keys``
    is supplied) and use ``d_t * k_t`` as the write key; reads use ``k_t``.
    The trace measures ``f_t`` against the post-gate reference state.
    """
    validate_stream(stream)
    spec.check_gates(stream, gates)
    if write_keys is None:
        write_keys = write_keys_for(stream, spec, gates, init_precond)
    wk_all = write_keys.write_keys
    S = initial_state_array(stream, spec, init_state)
    B, T, H, K = stream.keys.shape
    out = np.empty((B, T, H, stream.value_dim))
    f_before = np.empty((B, T, H))
    f_after = np.empty((B, T, H))
    grad_sq = np.empty((B, T, H))
    c = stream.query_scale
    for t in range(T):
        q = stream.queries[:, t] * c
        k, v, beta, wk = stream.keys[:, t], stream.values[:, t], stream.betas[:, t], wk_all[:, t]
        if spec.backbone == "delta_net":
            S, o, u = step_delta(S, q, k, wk, v, beta)
        elif spec.backbone == "gated_delta_net":
            alpha = gates.alpha_scalar[:, t]
            S, o, u = step_gdn(S, q, k, wk, v, beta, alpha)
        else:
            alpha = gates.alpha_vector[:, t]
            S, o, u = step_kda(S, q, k, wk, v, beta, alpha)
        out[:, t] = o
        f_before[:, t] = 0.5 * (u * u).sum(-1)
        f_after[:, t] = _loss(S, k, v, spec.orientation)
        grad_sq[:, t] = (u * u).sum(-1) * (k * k).sum(-1)
    degenerate = f_before < DEGENERATE_LOSS
    with np.errstate(divide="ignore", invalid="ignore"):
        q_ratio = np.where(degenerate, 1.0, f_after / np.where(degenerate, 1.0, f_before))
    trace = ResidualTrace(f_before, f_after, grad_sq, q_ratio, degenerate)
    return out, FastWeightState(S, spec.orientation), trace
