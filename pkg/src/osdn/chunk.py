"""Chunk-parallel WY forward kernels for OSDN, OSGDN and OSKDA (and their hosts, d = 1).

Inside a chunk of ``C`` tokens the sequential rank-one writes collapse into a
unit-lower-triangular solve against the asymmetric Gram ``beta_i <k_i, wk_j>``
followed by dense products; only the chunk-boundary state is carried from
chunk to chunk.  Layout inside the kernels is ``[B, H, N, C, .]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .recurrent import BackboneSpec, initial_state_array, write_keys_for
from .types import (FastWeightState, GateSequence, PreconditionerState, StreamError, TokenStream,
                    WriteKeySequence, validate_stream)

GAMMA_FLOOR = 1e-6


@dataclass
class ChunkWorkspace:
    """Intermediate buffers of one chunk, exposed for inspection and tests."""

    chunk_size: int
    gram: np.ndarray          # strictly lower [.., C, C]
    ut_inverse: np.ndarray    # (I + gram)^-1
    cumulative_key: np.ndarray    # W [.., C, K]
    cumulative_value: np.ndarray  # U [.., C, V]
    decay: Optional[np.ndarray] = None   # gamma [.., C] or Gamma [.., C, K]
    suffix: Optional[np.ndarray] = None  # gamma_C / gamma_i, same shape as decay


def ut_solve(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(I + gram) X = rhs`` by forward substitution; ``gram`` strictly lower ``[..., C, C]``."""
    gram = np.asarray(gram)
    rhs = np.asarray(rhs)
    if not (np.all(np.isfinite(gram)) and np.all(np.isfinite(rhs))):
        raise StreamError("non-finite entry in triangular system")
    C = gram.shape[-1]
    if np.any(np.triu(gram) != 0):
        raise StreamError("gram must be strictly lower triangular")
    X = np.array(rhs, copy=True)
    for i in range(1, C):
        X[..., i, :] -= np.einsum("...j,...jm->...m", gram[..., i, :i], X[..., :i, :])
    return X


def _masks(C):
    strict_lower = np.tril(np.ones((C, C), dtype=bool), -1)
    lower = np.tril(np.ones((C, C), dtype=bool), 0)
    return strict_lower, lower


def _chunked(x, C, N, fill=0.0):
    """``[B, T, H, ...]`` -> ``[B, H, N, C, ...]`` with right padding to ``N*C`` tokens."""
    T = x.shape[1]
    pad = N * C - T
    if pad:
        widths = [(0, 0)] * x.ndim
        widths[1] = (0, pad)
        x = np.pad(x, widths, constant_values=fill)
    x = x.reshape(x.shape[0], N, C, *x.shape[2:])
    return np.moveaxis(x, 3, 1)


def _unchunk(o, T):
    B, H, N, C = o.shape[:4]
    o = np.moveaxis(o, 1, 3).reshape(B, N * C, H, *o.shape[4:])
    return o[:, :T]


def _prepare(stream: TokenStream, write_keys, C, dtype):
    if C < 1:
        raise StreamError(f"chunk size must be positive, got {C}")
    T = stream.length
    N = -(-T // C)
    q = _chunked(stream.queries * stream.query_scale, C, N).astype(dtype)
    k = _chunked(stream.keys, C, N).astype(dtype)
    v = _chunked(stream.values, C, N).astype(dtype)
    if isinstance(write_keys, WriteKeySequence):
        write_keys = write_keys.write_keys
    wk = _chunked(np.asarray(write_keys), C, N).astype(dtype)
    # padded tokens carry beta = 0: their rank-one write vanishes in every variant
    beta = _chunked(stream.betas, C, N).astype(dtype)
    return q, k, v, wk, beta, N


def _delta_chunk(q, k, wk, v, beta, S, strict_lower, lower, workspace=False):
    gram = np.einsum("...ik,...jk->...ij", k, wk) * beta[..., :, None]
    gram = np.where(strict_lower, gram, 0.0).astype(k.dtype)
    W = ut_solve(gram, beta[..., None] * k)
    U = ut_solve(gram, beta[..., None] * v)
    St = np.swapaxes(S, -1, -2)
    update = U - W @ St
    score = np.where(lower, q @ np.swapaxes(wk, -1, -2), 0.0).astype(k.dtype)
    out = q @ St + score @ update
    S_next = S + np.swapaxes(update, -1, -2) @ wk
    ws = None
    if workspace:
        eye = np.broadcast_to(np.eye(gram.shape[-1], dtype=k.dtype), gram.shape)
        ws = ChunkWorkspace(gram.shape[-1], gram, ut_solve(gram, eye), W, U)
    return out, S_next, ws


def _gdn_chunk(q, k, wk, v, beta, log_alpha, S, strict_lower, lower, workspace=False):
    g = np.cumsum(log_alpha, axis=-1)                       # log gamma_i
    diff = g[..., :, None] - g[..., None, :]
    ratio = np.exp(np.where(lower, diff, -np.inf)).astype(k.dtype)   # gamma_i / gamma_j, j <= i
    gamma = np.exp(g).astype(k.dtype)
    suffix = np.exp(g[..., -1:] - g).astype(k.dtype)        # gamma_C / gamma_i
    gamma_C = gamma[..., -1]
    gram = np.einsum("...ik,...jk->...ij", k, wk) * ratio * beta[..., :, None]
    gram = np.where(strict_lower, gram, 0.0).astype(k.dtype)
    W = ut_solve(gram, (beta * gamma)[..., None] * k)
    U = ut_solve(gram, beta[..., None] * v)
    St = np.swapaxes(S, -1, -2)
    update = U - W @ St
    score = (q @ np.swapaxes(wk, -1, -2)) * ratio
    out = (gamma[..., None] * q) @ St + score @ update
    S_next = gamma_C[..., None, None] * S + np.swapaxes(update, -1, -2) @ (suffix[..., None] * wk)
    ws = None
    if workspace:
        eye = np.broadcast_to(np.eye(gram.shape[-1], dtype=k.dtype), gram.shape)
        ws = ChunkWorkspace(gram.shape[-1], gram, ut_solve(gram, eye), W, U, gamma, suffix)
    return out, S_next, ws


def _kda_chunk(q, k, wk, v, beta, alpha, S, strict_lower, lower, floor, workspace=False):
    Gamma = np.cumprod(alpha, axis=-2)
    Gamma_safe = np.maximum(Gamma, floor)
    floored = int(np.count_nonzero(Gamma < floor))
    Gamma_C = Gamma[..., -1, :]
    gated_key = Gamma * k
    gated_query = Gamma * q
    normalized_wk = wk / Gamma_safe
    gram = np.einsum("...ik,...jk->...ij", gated_key, normalized_wk) * beta[..., :, None]
    gram = np.where(strict_lower, gram, 0.0).astype(k.dtype)
    W = ut_solve(gram, beta[..., None] * gated_key)
    U = ut_solve(gram, beta[..., None] * v)
    update = U - W @ S
    score = np.where(lower, gated_query @ np.swapaxes(normalized_wk, -1, -2), 0.0).astype(k.dtype)
    out = gated_query @ S + score @ update
    suffix = Gamma_C[..., None, :] / Gamma_safe
    S_next = Gamma_C[..., :, None] * S + np.swapaxes(suffix * wk, -1, -2) @ update
    ws = None
    if workspace:
        eye = np.broadcast_to(np.eye(gram.shape[-1], dtype=k.dtype), gram.shape)
        ws = ChunkWorkspace(gram.shape[-1], gram, ut_solve(gram, eye), W, U, Gamma, suffix)
    return out, S_next, ws, floored


def _run(kind, stream, write_keys, init_state, C, dtype, alpha=None, floor=GAMMA_FLOOR, stats=None, workspaces=None):
    q, k, v, wk, beta, N = _prepare(stream, write_keys, C, dtype)
    spec = BackboneSpec({"osdn": "delta_net", "osgdn": "gated_delta_net", "oskda": "kda"}[kind])
    S = initial_state_array(stream, spec, init_state).astype(dtype)
    if kind == "osgdn":
        a = _chunked(np.log(alpha), C, N).astype(np.float64)
    elif kind == "oskda":
        a = _chunked(alpha, C, N, fill=1.0).astype(dtype)
    strict_lower, lower = _masks(C)
    out = np.empty(v.shape, dtype=dtype)
    floored = 0
    keep = workspaces is not None
    for n in range(N):
        args = (q[:, :, n], k[:, :, n], wk[:, :, n], v[:, :, n], beta[:, :, n])
        if kind == "osdn":
            o, S, ws = _delta_chunk(*args, S, strict_lower, lower, keep)
        elif kind == "osgdn":
            o, S, ws = _gdn_chunk(*args, a[:, :, n], S, strict_lower, lower, keep)
        else:
            o, S, ws, f = _kda_chunk(*args, a[:, :, n], S, strict_lower, lower, floor, keep)
            floored += f
        out[:, :, n] = o
        if keep:
            workspaces.append(ws)
    if stats is not None:
        stats["floored_gamma_entries"] = stats.get("floored_gamma_entries", 0) + floored
        stats["chunks"] = stats.get("chunks", 0) + N
    return _unchunk(out, stream.length), S


def chunk_forward_osdn(stream: TokenStream, write_keys, init_state: Optional[FastWeightState] = None,
                       chunk_size: int = 64, dtype=np.float64, stats=None, workspaces=None):
    """Chunked DeltaNet pass with write keys ``wk`` (``[B,T,H,K]``).

    Returns ``(outputs [B,T,H,V], final_state [B,H,V,K])`` in ``dtype``.
    """
    return _run("osdn", stream, write_keys, init_state, chunk_size, dtype, stats=stats, workspaces=workspaces)


def chunk_forward_osgdn(stream: TokenStream, write_keys, gates: GateSequence,
                        init_state: Optional[FastWeightState] = None, chunk_size: int = 64,
                        dtype=np.float64, stats=None, workspaces=None):
    """Chunked Gated DeltaNet pass in the decay-ratio gauge.

    The ratios ``gamma_i / gamma_j`` are formed from differences of the
    log-cumulative gate, so no division by a small ``gamma`` occurs.
    """
    if gates is None or gates.alpha_scalar is None:
        raise StreamError("chunk_forward_osgdn needs GateSequence.alpha_scalar")
    return _run("osgdn", stream, write_keys, init_state, chunk_size, dtype,
                alpha=gates.alpha_scalar, stats=stats, workspaces=workspaces)


def chunk_forward_oskda(stream: TokenStream, write_keys, gates: GateSequence,
                        init_state: Optional[FastWeightState] = None, chunk_size: int = 64,
                        dtype=np.float64, gamma_floor: float = GAMMA_FLOOR, stats=None, workspaces=None):
    """Chunked KDA pass on the ``K x V`` state with channel-wise cumulative gate ``Gamma``.

    ``Gamma`` is floored at ``gamma_floor`` before any division; the number of
    floored entries is added to ``stats["floored_gamma_entries"]``.
    """
    if gates is None or gates.alpha_vector is None:
        raise StreamError("chunk_forward_oskda needs GateSequence.alpha_vector")
    return _run("oskda", stream, write_keys, init_state, chunk_size, dtype,
                alpha=gates.alpha_vector, floor=gamma_floor, stats=stats, workspaces=workspaces)


def chunk_forward(
    stream: TokenStream,
    spec: BackboneSpec,
    gates: Optional[GateSequence] = None,
    init_state: Optional[FastWeightState] = None,
    init_precond: Optional[PreconditionerState] = None,
    chunk_size: int = 64,
    dtype=np.float64,
    write_keys=None,
    stats=None,
):
    """Two-phase forward for any variant: phase-1 sweep (64-bit), then the chunk kernel in ``dtype``."""
    validate_stream(stream)
    spec.check_gates(stream, gates)
    if write_keys is None:
        write_keys = write_keys_for(stream, spec, gates, init_precond).write_keys
    if spec.backbone == "delta_net":
        out, S = chunk_forward_osdn(stream, write_keys, init_state, chunk_size, dtype, stats)
    elif spec.backbone == "gated_delta_net":
        out, S = chunk_forward_osgdn(stream, write_keys, gates, init_state, chunk_size, dtype, stats)
    else:
        out, S = chunk_forward_oskda(stream, write_keys, gates, init_state, chunk_size, dtype, stats=stats)
    return out, FastWeightState(S, spec.orientation)
