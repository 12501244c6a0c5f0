"""Shared containers for token streams, fast-weight states, preconditioners and gates.

All containers are frozen dataclasses holding read-only float64 arrays.  The
API boundary layout is ``[B, T, H, ...]``; per-lane state is ``[B, H, ...]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np

RetentionMode = Literal["none", "constant", "data_dependent"]
Orientation = Literal["VxK", "KxV"]

UNIT_NORM_TOL = 1e-12


class StreamError(ValueError):
    """Invalid input container.  ``index`` points at the offending entry."""

    def __init__(self, message: str, index=None):
        if index is not None:
            message = f"{message} (at index {tuple(int(i) for i in index)})"
        super().__init__(message)
        self.index = None if index is None else tuple(int(i) for i in index)


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _first_bad(mask: np.ndarray):
    idx = np.argwhere(mask)
    return idx[0] if len(idx) else None


@dataclass(frozen=True)
class TokenStream:
    """Per-token layer inputs ``q, k, v`` of shape ``[B,T,H,K|V]`` and gates ``beta`` ``[B,T,H]``.

    ``scale_queries`` multiplies queries by ``K**-0.5`` inside every forward
    path (recurrent and chunked alike).
    """

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    betas: np.ndarray
    keys_unit_norm: bool = False
    scale_queries: bool = True

    def __post_init__(self):
        for name in ("queries", "keys", "values", "betas"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        q, k, v, b = self.queries, self.keys, self.values, self.betas
        if k.ndim != 4:
            raise StreamError(f"keys must be [B,T,H,K], got shape {k.shape}")
        if q.shape != k.shape:
            raise StreamError(f"queries shape {q.shape} != keys shape {k.shape}")
        if v.ndim != 4 or v.shape[:3] != k.shape[:3]:
            raise StreamError(f"values shape {v.shape} incompatible with keys {k.shape}")
        if b.shape != k.shape[:3]:
            raise StreamError(f"betas shape {b.shape} != {k.shape[:3]}")

    @property
    def batch(self) -> int:
        return self.keys.shape[0]

    @property
    def length(self) -> int:
        return self.keys.shape[1]

    @property
    def heads(self) -> int:
        return self.keys.shape[2]

    @property
    def key_dim(self) -> int:
        return self.keys.shape[3]

    @property
    def value_dim(self) -> int:
        return self.values.shape[3]

    @property
    def query_scale(self) -> float:
        return self.key_dim ** -0.5 if self.scale_queries else 1.0

    def replace(self, **changes) -> "TokenStream":
        return replace(self, **changes)


def validate_stream(stream: TokenStream) -> TokenStream:
    """Check every stream invariant; raise :class:`StreamError` with the first bad index."""
    for name in ("queries", "keys", "values", "betas"):
        bad = _first_bad(~np.isfinite(getattr(stream, name)))
        if bad is not None:
            raise StreamError(f"non-finite entry in {name}", bad)
    bad = _first_bad((stream.betas <= 0.0) | (stream.betas >= 1.0))
    if bad is not None:
        raise StreamError("gate out of open interval (0, 1)", bad)
    if stream.keys_unit_norm:
        norms = np.linalg.norm(stream.keys, axis=-1)
        bad = _first_bad(np.abs(norms - 1.0) > UNIT_NORM_TOL)
        if bad is not None:
            raise StreamError("keys_unit_norm set but key is not unit norm", bad)
    return stream


def normalize_keys(stream: TokenStream) -> TokenStream:
    norms = np.linalg.norm(stream.keys, axis=-1, keepdims=True)
    bad = _first_bad(norms[..., 0] == 0.0)
    if bad is not None:
        raise StreamError("cannot normalize zero key", bad)
    return stream.replace(keys=stream.keys / norms, keys_unit_norm=True)


@dataclass(frozen=True)
class PreconditionerState:
    """Diagonal write-key preconditioner ``d`` (shape ``[..., K]``) and its update rule.

    Defaults: box ``[0.5, 2.0]``, ``eta=0.003``, ``epsilon=1e-6``, beta-aware
    feedback, no retention.
    """

    d: np.ndarray
    d_min: float = 0.5
    d_max: float = 2.0
    eta: float = 0.003
    epsilon: float = 1e-6
    beta_aware: bool = True
    retention_mode: RetentionMode = "none"
    rho: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "d", _frozen(self.d))
        if not (np.isfinite(self.eta) and self.eta >= 0.0):
            raise StreamError(f"eta must be finite and non-negative, got {self.eta}")
        if not (np.isfinite(self.epsilon) and self.epsilon > 0.0):
            raise StreamError(f"epsilon must be finite and positive, got {self.epsilon}")
        if not (0.0 < self.d_min <= self.d_max):
            raise StreamError(f"need 0 < d_min <= d_max, got [{self.d_min}, {self.d_max}]")
        if self.retention_mode not in ("none", "constant", "data_dependent"):
            raise StreamError(f"unknown retention_mode {self.retention_mode!r}")
        if self.retention_mode == "constant" and not (0.0 < self.rho <= 1.0):
            raise StreamError(f"constant retention must lie in (0, 1], got {self.rho}")
        bad = _first_bad(~np.isfinite(self.d) | (self.d < self.d_min) | (self.d > self.d_max))
        if bad is not None:
            raise StreamError("preconditioner entry outside the box", bad)

    @classmethod
    def initial(cls, batch: int, heads: int, key_dim: int, d0=1.0, **kwargs) -> "PreconditionerState":
        d = np.broadcast_to(np.asarray(d0, dtype=np.float64), (batch, heads, key_dim))
        return cls(d=d, **kwargs)

    def replace(self, **changes) -> "PreconditionerState":
        return replace(self, **changes)


@dataclass(frozen=True)
class FastWeightState:
    """Matrix memory per lane: ``[B,H,V,K]`` (``VxK``) or ``[B,H,K,V]`` (``KxV``, KDA)."""

    S: np.ndarray
    orientation: Orientation = "VxK"

    def __post_init__(self):
        object.__setattr__(self, "S", _frozen(self.S))
        if self.orientation not in ("VxK", "KxV"):
            raise StreamError(f"unknown orientation {self.orientation!r}")
        if self.S.ndim != 4:
            raise StreamError(f"state must be 4-d [B,H,.,.], got shape {self.S.shape}")
        bad = _first_bad(~np.isfinite(self.S))
        if bad is not None:
            raise StreamError("non-finite state entry", bad)

    @classmethod
    def zeros(cls, batch, heads, key_dim, value_dim, orientation: Orientation = "VxK"):
        shape = (batch, heads, value_dim, key_dim) if orientation == "VxK" else (batch, heads, key_dim, value_dim)
        return cls(np.zeros(shape), orientation)


@dataclass(frozen=True)
class GateSequence:
    """Backbone decay signals; every present entry must lie in (0, 1]."""

    alpha_scalar: Optional[np.ndarray] = None   # [B,T,H]   GDN forget gate
    alpha_vector: Optional[np.ndarray] = None   # [B,T,H,K] KDA channel gate
    retention: Optional[np.ndarray] = None      # [B,T,H]   preconditioner retention

    def __post_init__(self):
        for name in ("alpha_scalar", "alpha_vector", "retention"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = _frozen(arr)
            object.__setattr__(self, name, arr)
            bad = _first_bad(~np.isfinite(arr) | (arr <= 0.0) | (arr > 1.0))
            if bad is not None:
                raise StreamError(f"{name} entry outside (0, 1]", bad)

    def check_against(self, stream: TokenStream) -> None:
        B, T, H, K = stream.keys.shape
        expected = {"alpha_scalar": (B, T, H), "alpha_vector": (B, T, H, K), "retention": (B, T, H)}
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr is not None and arr.shape != shape:
                raise StreamError(f"{name} shape {arr.shape} != {shape}")


@dataclass(frozen=True)
class WriteKeySequence:
    """Phase-1 output: write keys ``d_t * k_t`` with ``d_t`` taken before the token's update.

    ``clamped`` is -1/0/+1 per coordinate (clipped at ``d_min`` / free /
    clipped at ``d_max``) for the update performed *at* token ``t``.
    """

    write_keys: np.ndarray
    d_final: np.ndarray
    d_trajectory: Optional[np.ndarray] = None
    clamped: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "write_keys", _frozen(self.write_keys))
        object.__setattr__(self, "d_final", _frozen(self.d_final))
        if self.d_trajectory is not None:
            object.__setattr__(self, "d_trajectory", _frozen(self.d_trajectory))
        if self.clamped is not None:
            object.__setattr__(self, "clamped", _frozen(self.clamped, np.int8))


@dataclass(frozen=True)
class ResidualTrace:
    """Per-token residual records, arrays of shape ``[B,T,H]``.

    ``q`` is ``f_after / f_before`` except where ``f_before`` is (numerically)
    zero, where it is 1 by convention.
    """

    f_before: np.ndarray
    f_after: np.ndarray
    grad_norm_sq: np.ndarray
    q: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("f_before", "f_after", "grad_norm_sq", "q"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        deg = self.degenerate
        if deg is None:
            deg = self.q == 1.0
        object.__setattr__(self, "degenerate", _frozen(deg, bool))
        if np.any(self.f_before < 0) or np.any(self.f_after < 0):
            raise StreamError("negative loss in residual trace")

    @property
    def length(self) -> int:
        return self.q.shape[1]

    def position_bin(self, n_bins: int) -> np.ndarray:
        """Relative-position bin index for every token position ``t``."""
        T = self.length
        return (np.arange(T) * n_bins) // T
