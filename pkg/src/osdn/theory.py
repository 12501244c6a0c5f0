"""Numerical audits of the convergence statements behind online scaling.

Two settings are covered.  The population setting runs full-gradient
right-preconditioned steps ``S <- S - grad f(S) D`` on an explicit quadratic
and checks the super-geometric product bound against the right-Newton
comparator ``D* = pinv(Sigma)``.  The token-local setting takes a traced
recurrent run and checks the AM-GM contraction bound on ``prod q_t`` against
diagonal comparators, plus the repeated-key telescoping identity.

Products of ratios are always accumulated as sums of logs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .precond import hypergrad_values
from .recurrent import DEGENERATE_LOSS, BackboneSpec, run_recurrent
from .types import (
    FastWeightState,
    PreconditionerState,
    ResidualTrace,
    StreamError,
    TokenStream,
    WriteKeySequence,
    UNIT_NORM_TOL,
)

PINV_CUTOFF = 1e-12
BOUND_SLACK = 1e-13


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def sym_pinv(M, cutoff: float = PINV_CUTOFF):
    """Pseudoinverse of a symmetric PSD matrix, dropping eigenvalues below ``cutoff * lambda_max``."""
    w, Q = np.linalg.eigh(M)
    lam_max = max(float(w.max()), 0.0)
    keep = w > cutoff * lam_max if lam_max > 0 else np.zeros_like(w, dtype=bool)
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return (Q * inv) @ Q.T


# --------------------------------------------------------------------------- population quadratic


@dataclass(frozen=True)
class QuadraticProblem:
    """``f(S) = 0.5 tr(S Sigma S^T) - tr(S C^T) + 0.5 E|v|^2`` with ``Sigma = E[k k^T]``, ``C = E[v k^T]``."""

    sigma: np.ndarray
    cross: np.ndarray
    value_energy: float
    mixing: Optional[np.ndarray] = None
    noise_std: float = 0.0

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise StreamError(f"key covariance must be square, got {sigma.shape}")
        if np.max(np.abs(sigma - sigma.T)) > 1e-12 * max(1.0, np.abs(sigma).max()):
            raise StreamError("key covariance is not symmetric")
        sigma = 0.5 * (sigma + sigma.T)
        if np.linalg.eigvalsh(sigma).min() < -1e-12 * max(1.0, np.abs(sigma).max()):
            raise StreamError("key covariance is not positive semidefinite")
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "cross", np.asarray(self.cross, dtype=np.float64))

    @classmethod
    def from_moments(cls, sigma, cross, value_energy) -> "QuadraticProblem":
        return cls(sigma, cross, float(value_energy))

    @classmethod
    def from_samples(cls, keys, values) -> "QuadraticProblem":
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        n = keys.shape[0]
        return cls(keys.T @ keys / n, values.T @ keys / n, float((values * values).sum() / n))

    @classmethod
    def random(cls, K: int, V: int, rng, eig_range=(0.5, 4.0), rank=None, noise_std=0.1) -> "QuadraticProblem":
        """Gaussian keys with a random rotated spectrum and a linear-plus-noise value map."""
        Q, _ = np.linalg.qr(rng.normal(size=(K, K)))
        lam = rng.uniform(*eig_range, size=K)
        if rank is not None:
            lam[rank:] = 0.0
        sigma = (Q * lam) @ Q.T
        sigma = 0.5 * (sigma + sigma.T)
        A = rng.normal(size=(V, K))
        energy = float(np.trace(A @ sigma @ A.T) + V * noise_std ** 2)
        return cls(sigma, A @ sigma, energy, mixing=A, noise_std=noise_std)

    @classmethod
    def diagonal(cls, diag, V: int, rng, noise_std=0.1) -> "QuadraticProblem":
        sigma = np.diag(np.asarray(diag, dtype=np.float64))
        A = rng.normal(size=(V, sigma.shape[0]))
        energy = float(np.trace(A @ sigma @ A.T) + V * noise_std ** 2)
        return cls(sigma, A @ sigma, energy, mixing=A, noise_std=noise_std)

    @property
    def key_dim(self) -> int:
        return self.sigma.shape[0]

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.eigvalsh(self.sigma).max())

    @property
    def newton(self) -> np.ndarray:
        """The right-Newton comparator ``D* = pinv(Sigma)``."""
        return sym_pinv(self.sigma)

    @property
    def optimum(self) -> np.ndarray:
        return self.cross @ self.newton

    @property
    def f_star(self) -> float:
        return self.loss(self.optimum)

    def loss(self, S) -> float:
        return float(0.5 * np.sum((S @ self.sigma) * S) - np.sum(S * self.cross) + 0.5 * self.value_energy)

    def grad(self, S):
        return S @ self.sigma - self.cross

    def gap(self, S) -> float:
        """``f(S) - f*`` computed from ``S - S*`` (no cancellation against ``f*``)."""
        E = S - self.optimum
        return float(0.5 * np.sum((E @ self.sigma) * E))

    def sample(self, n: int, rng):
        """Draw ``(keys [n,K], values [n,V])`` realising ``Sigma`` and ``C`` (needs the mixing map)."""
        if self.mixing is None:
            raise StreamError("problem built from moments has no sampler")
        w, Q = np.linalg.eigh(self.sigma)
        root = Q * np.sqrt(np.clip(w, 0.0, None))
        keys = rng.normal(size=(n, self.key_dim)) @ root.T
        values = keys @ self.mixing.T + self.noise_std * rng.normal(size=(n, self.mixing.shape[0]))
        return keys, values


def hyper_feedback(D, g, sigma) -> float:
    """Population feedback ``h(D) = [-tr(G D) + 0.5 tr(Sigma D^T G D)] / |g|^2`` with ``G = g^T g``."""
    gg = float(np.sum(g * g))
    if gg == 0.0:
        return 0.0
    G = g.T @ g
    return float((-np.trace(G @ D) + 0.5 * np.trace(sigma @ D.T @ G @ D)) / gg)


def hyper_feedback_grad(D, g, sigma):
    gg = float(np.sum(g * g))
    if gg == 0.0:
        return np.zeros_like(D)
    G = g.T @ g
    return (-G + G @ D @ sigma) / gg


def population_step(S, D, problem: QuadraticProblem):
    """One right-preconditioned full-gradient step.  Returns ``(S', h(D))``; ``h = 0`` when ``grad f(S) = 0``."""
    g = problem.grad(S)
    return S - g @ D, hyper_feedback(D, g, problem.sigma)


@dataclass
class RegretLedger:
    h_decision: list = field(default_factory=list)
    h_comparator: list = field(default_factory=list)
    log_ratios: list = field(default_factory=list)
    gaps: list = field(default_factory=list)
    rejected: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.h_decision)

    @property
    def regret(self) -> np.ndarray:
        """Cumulative regret ``R_t`` after each step."""
        return np.cumsum(np.asarray(self.h_decision) - np.asarray(self.h_comparator))

    @property
    def log_product(self) -> np.ndarray:
        return np.cumsum(self.log_ratios)


@dataclass
class PopulationReport:
    learner: str
    steps: int
    lipschitz: float
    log_prod_ratio: float
    log_bound: float
    prefix_ok: bool
    rayleigh_ok: bool
    monotone: bool
    guard: bool
    verdict: str
    n_rejected: int
    decomposition: dict
    ledger: RegretLedger
    pinv_cutoff: float = PINV_CUTOFF

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "ledger"}
        out["theorem"] = "population-super-geometric"
        return out


def _box_qp(M, b, lo, hi, tol=1e-10, max_iter=100_000):
    """Minimise ``0.5 x^T M x - b^T x`` on a box by FISTA with adaptive restart.

    Returns ``(x, stationarity, iterations)`` where stationarity is the norm of
    the unit-step projected-gradient map.
    """
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), b.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), b.shape)
    lip = float(np.linalg.eigvalsh(M).max()) if M.size else 0.0
    x = np.clip(np.zeros_like(b), lo, hi)

    def stat(z):
        return float(np.linalg.norm(z - np.clip(z - (M @ z - b), lo, hi)))

    if lip <= 0.0:
        x = np.where(b > 0, hi, np.where(b < 0, lo, x))
        return x, stat(x), 0
    step = 1.0 / lip
    y, t = x.copy(), 1.0
    for it in range(1, max_iter + 1):
        x_new = np.clip(y - step * (M @ y - b), lo, hi)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        if np.dot(y - x_new, x_new - x) > 0:
            t_new, y = 1.0, x_new.copy()
        else:
            y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        if it % 10 == 0 and stat(x) <= tol:
            return x, stat(x), it
    return x, stat(x), max_iter


def run_population_osgm(
    problem: QuadraticProblem,
    learner: str = "diagonal",
    T: int = 200,
    S0=None,
    rng=None,
    step: Optional[float] = None,
    init_scale: Optional[float] = None,
    box=None,
    guard: bool = True,
    stop_ratio: float = 1e-13,
) -> PopulationReport:
    """Online gradient descent on the population feedback ``h_t`` with a chosen learner.

    ``learner`` is ``diagonal`` or ``dense`` (OGD from ``init_scale * I`` with
    step ``step``), ``oracle`` (always plays ``D*``) or ``adversarial``
    (always plays ``2.5 D*``, which overshoots).  With ``guard`` on, a
    decision that would increase ``f`` is replaced by ``D = 0`` and logged.
    The run stops early once the gap falls below ``stop_ratio`` of its start.
    """
    if learner not in ("diagonal", "dense", "oracle", "adversarial"):
        raise StreamError(f"unknown learner {learner!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    K = problem.key_dim
    L = problem.lipschitz
    sigma = problem.sigma
    Dstar = problem.newton
    if S0 is None:
        S0 = rng.normal(size=(problem.cross.shape[0], K))
    step = 0.5 / L if step is None else step
    init_scale = 1.0 / L if init_scale is None else init_scale
    if box is None:
        diag = np.diag(sigma)
        box = (0.0, 2.0 / max(float(diag[diag > 0].min()), 1e-300)) if np.any(diag > 0) else (0.0, 1.0)
    lo, hi = box

    D = init_scale * np.eye(K)
    ledger = RegretLedger()
    M_diag = np.zeros((K, K))
    b_diag = np.zeros(K)
    S = np.array(S0, dtype=np.float64)
    gap0 = problem.gap(S)
    monotone = True
    rayleigh_ok = True
    decisions = []
    for _ in range(T):
        gap = problem.gap(S)
        g = problem.grad(S)
        gg = float(np.sum(g * g))
        if gap <= stop_ratio * gap0 or gg == 0.0:
            break
        if learner == "oracle":
            D = Dstar
        elif learner == "adversarial":
            D = 2.5 * Dstar
        S_new = S - g @ D
        h_dec = hyper_feedback(D, g, sigma)
        h_star = hyper_feedback(Dstar, g, sigma)
        rejected = problem.gap(S_new) > gap
        played = D
        if rejected:
            if guard:
                played = np.zeros_like(D)
                S_new, h_dec = S, 0.0
            else:
                monotone = False
        if h_star < 0 and 1.0 / abs(h_star) > 2.0 * L * (1.0 + 1e-9):
            rayleigh_ok = False
        G = g.T @ g
        M_diag += sigma * G / gg
        b_diag += np.diag(G) / gg
        decisions.append((played, g))
        gap_new = problem.gap(S_new)
        ledger.h_decision.append(h_dec)
        ledger.h_comparator.append(h_star)
        ledger.log_ratios.append(float(_log(gap_new / gap)))
        ledger.gaps.append(gap_new)
        ledger.rejected.append(bool(rejected))
        # learner update from the feedback gradient at its own proposal
        if learner in ("diagonal", "dense"):
            grad = hyper_feedback_grad(D, g, sigma)
            if learner == "diagonal":
                d = np.clip(np.diag(D) - step * np.diag(grad), lo, hi)
                D = np.diag(d)
            else:
                D = D - step * grad
        S = S_new

    n = ledger.steps
    if n == 0:
        log_prod, log_bound, prefix_ok = 0.0, 0.0, True
    else:
        R = ledger.regret
        lp = ledger.log_product
        tau = np.arange(1, n + 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            rhs = tau * _log(np.maximum(2.0 * L * R / tau, 0.0) + BOUND_SLACK)
        ok = (lp == -np.inf) | (lp <= rhs + 1e-9 * tau)
        prefix_ok = bool(np.all(ok))
        log_prod, log_bound = float(lp[-1]), float(rhs[-1])

    if not monotone:
        verdict = "N/A"
    else:
        verdict = "PASS" if (prefix_ok and rayleigh_ok) else "FAIL"

    decomposition = _regret_decomposition(decisions, sigma, Dstar, M_diag, b_diag, lo, hi)
    return PopulationReport(
        learner=learner, steps=n, lipschitz=L, log_prod_ratio=log_prod, log_bound=log_bound,
        prefix_ok=prefix_ok, rayleigh_ok=rayleigh_ok, monotone=monotone, guard=guard, verdict=verdict,
        n_rejected=int(np.sum(ledger.rejected)), decomposition=decomposition, ledger=ledger,
    )


def _regret_decomposition(decisions, sigma, Dstar, M, b, lo, hi) -> dict:
    """Split regret to ``D*`` into learner-vs-box, box-vs-diagonal and diagonal-vs-``D*`` terms."""
    if not decisions:
        return {"ogd_regret": 0.0, "box_gap": 0.0, "diagonal_gap": 0.0, "total": 0.0, "residual": 0.0}
    d_box, _, _ = _box_qp(M, b, lo, hi)
    d_diag = np.linalg.lstsq(M, b, rcond=None)[0]
    hs = np.array([
        [hyper_feedback(P, g, sigma), hyper_feedback(np.diag(d_box), g, sigma),
         hyper_feedback(np.diag(d_diag), g, sigma), hyper_feedback(Dstar, g, sigma)]
        for P, g in decisions
    ])
    ogd = float(np.sum(hs[:, 0] - hs[:, 1]))
    box_gap = float(np.sum(hs[:, 1] - hs[:, 2]))
    diag_gap = float(np.sum(hs[:, 2] - hs[:, 3]))
    total = float(np.sum(hs[:, 0] - hs[:, 3]))
    return {
        "ogd_regret": ogd, "box_gap": box_gap, "diagonal_gap": diag_gap, "total": total,
        "residual": total - (ogd + box_gap + diag_gap),
        "d_box": d_box.tolist(), "d_diag": d_diag.tolist(),
    }


# --------------------------------------------------------------------------- token-local audits


@dataclass(frozen=True)
class EpsMinimizer:
    d: np.ndarray
    eps: float
    stationarity: float
    iterations: int
    converged: bool


def eps_diag(d, keys, betas, active=None) -> float:
    """Comparator gap ``(1/2T) sum (1 - beta <d, k^2>)^2``; inactive tokens contribute 1."""
    resid = 1.0 - betas * ((keys * keys) @ d)
    terms = resid * resid if active is None else np.where(active, resid * resid, 1.0)
    return float(terms.sum() / (2.0 * len(betas)))


def minimize_eps_diag(keys, betas=None, box=(0.5, 2.0), active=None, tol=1e-10, max_iter=100_000):
    """Box-constrained minimiser of the comparator gap.

    ``keys`` is ``[T,K]`` with ``betas [T]``, or a :class:`TokenStream`, in
    which case every ``(b, h)`` lane is solved and ``(d [B,H,K], eps [B,H])``
    is returned instead of an :class:`EpsMinimizer`.
    """
    if isinstance(keys, TokenStream):
        stream = keys
        _require_unit(stream)
        B, T, H, K = stream.keys.shape
        d_out = np.empty((B, H, K))
        e_out = np.empty((B, H))
        for b in range(B):
            for h in range(H):
                res = minimize_eps_diag(stream.keys[b, :, h], stream.betas[b, :, h], box, tol=tol, max_iter=max_iter)
                d_out[b, h], e_out[b, h] = res.d, res.eps
        return d_out, e_out
    keys = np.asarray(keys, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    T = len(betas)
    A = betas[:, None] * keys * keys
    if active is not None:
        A = A[np.asarray(active, dtype=bool)]
    M = A.T @ A / T
    rhs = A.sum(0) / T
    d, stat, it = _box_qp(M, rhs, box[0], box[1], tol=tol, max_iter=max_iter)
    return EpsMinimizer(d=d, eps=eps_diag(d, keys, betas, active), stationarity=stat,
                        iterations=it, converged=stat <= tol)


def _require_unit(stream: TokenStream):
    norms = np.linalg.norm(stream.keys, axis=-1)
    bad = np.argwhere(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if len(bad):
        raise StreamError("token-local audit requires unit-norm keys", bad[0])


@dataclass
class ComparatorVerdict:
    name: str
    eps: float
    regret: float
    log_rhs: float
    holds: bool


@dataclass
class TokenLocalReport:
    lane: tuple
    T: int
    log_prod_q: float
    identity_err: float
    n_degenerate: int
    comparators: list

    @property
    def holds(self) -> bool:
        return all(c.holds for c in self.comparators)

    def to_dict(self) -> dict:
        return {
            "theorem": "token-local-contraction", "lane": list(self.lane), "T": self.T,
            "lhs": self.log_prod_q, "identity_err": self.identity_err, "n_degenerate": self.n_degenerate,
            "comparators": [c.__dict__ for c in self.comparators],
            "verdict": "PASS" if self.holds else "FAIL",
        }


def token_local_audit(
    trace: ResidualTrace,
    stream: TokenStream,
    write_keys: WriteKeySequence,
    box=(0.5, 2.0),
    comparators: Optional[dict] = None,
    epsilon: float = 1e-6,
) -> list:
    """Audit ``prod q_t <= (2 eps_T(d) + 2 R_T(d)/T)^T`` lane by lane.

    Degenerate tokens (``q_t = 1`` by convention) use ``h_t = 0`` for every
    ``d`` and contribute 1 to the comparator gap, which keeps the AM-GM chain
    exact.  The minimised comparator is always audited; ``comparators`` maps
    extra names to ``[K]`` vectors.
    """
    _require_unit(stream)
    if write_keys.d_trajectory is None:
        raise StreamError("token_local_audit needs the d trajectory")
    B, T, H, K = stream.keys.shape
    reports = []
    for b in range(B):
        for h in range(H):
            k = stream.keys[b, :, h]
            beta = stream.betas[b, :, h]
            dt = write_keys.d_trajectory[b, :, h]
            deg = trace.degenerate[b, :, h]
            active = ~deg
            q = trace.q[b, :, h]
            h_alg = np.where(active, hypergrad_values(dt, k, beta, epsilon), 0.0)
            identity_err = float(np.max(np.abs(np.where(active, q - (1.0 + 2.0 * h_alg), 0.0)), initial=0.0))
            lhs = float(np.sum(_log(q)))
            best = minimize_eps_diag(k, beta, box, active=active)
            cands = {"eps_diag_min": best.d}
            for name, d in (comparators or {}).items():
                cands[name] = np.asarray(d, dtype=np.float64)
            verdicts = []
            for name, d in cands.items():
                h_cmp = np.where(active, hypergrad_values(np.broadcast_to(d, k.shape), k, beta, epsilon), 0.0)
                regret = float(np.sum(h_alg - h_cmp))
                eps = eps_diag(d, k, beta, active)
                base = 2.0 * eps + 2.0 * regret / T
                log_rhs = float(T * _log(max(base + BOUND_SLACK, 0.0)))
                verdicts.append(ComparatorVerdict(name, eps, regret, log_rhs, bool(lhs <= log_rhs)))
            reports.append(TokenLocalReport((b, h), T, lhs, identity_err, int(deg.sum()), verdicts))
    return reports


@dataclass
class RepeatedKeyReport:
    lane: tuple
    n_classes: int
    log_lhs: float
    log_rhs: float
    abs_err: float
    holds: bool

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["lane"] = list(self.lane)
        d["theorem"] = "repeated-key-identity"
        d["verdict"] = "PASS" if self.holds else "FAIL"
        return d


def _classes(keys):
    uniq, labels = np.unique(keys, axis=0, return_inverse=True)
    return uniq, labels.reshape(-1)


def repeated_key_audit(
    stream: TokenStream,
    trace: ResidualTrace,
    final_state: FastWeightState,
    init_state: Optional[FastWeightState] = None,
    rel_tol: float = 1e-10,
) -> list:
    """Check ``prod_c F_c(S_T)/F_c(S_0) = prod_t q_t`` per lane for typed, block-orthogonal keys.

    Classes are the distinct key rows; each class must carry one value.  Losses
    below the degenerate threshold count as exactly zero on both sides.
    """
    B, T, H, K = stream.keys.shape
    S_T = final_state.S
    S_0 = np.zeros_like(S_T) if init_state is None else init_state.S
    vxk = final_state.orientation == "VxK"
    reports = []
    for b in range(B):
        for h in range(H):
            keys = stream.keys[b, :, h]
            vals = stream.values[b, :, h]
            uniq, labels = _classes(keys)
            support = np.abs(uniq) > 0
            if np.any(support.sum(0) > 1):
                raise StreamError("class keys do not have disjoint supports", (b, h))
            for c in range(len(uniq)):
                vc = vals[labels == c]
                if np.any(vc != vc[0]):
                    raise StreamError(f"class {c} carries more than one value", (b, h))
            lhs = 0.0
            for c in range(len(uniq)):
                k_c, v_c = uniq[c], vals[labels == c][0]
                F = []
                for S in (S_0[b, h], S_T[b, h]):
                    pred = S @ k_c if vxk else S.T @ k_c
                    F.append(0.5 * float(np.sum((pred - v_c) ** 2)))
                if F[0] < DEGENERATE_LOSS:
                    continue
                lhs += -np.inf if F[1] < DEGENERATE_LOSS else float(np.log(F[1] / F[0]))
            fa = trace.f_after[b, :, h]
            q = np.where(trace.degenerate[b, :, h], 1.0, np.where(fa < DEGENERATE_LOSS, 0.0, trace.q[b, :, h]))
            rhs = float(np.sum(_log(q)))
            if lhs == -np.inf and rhs == -np.inf:
                err, ok = 0.0, True
            else:
                err = abs(lhs - rhs)
                ok = bool(err <= rel_tol * max(1.0, abs(rhs)))
            reports.append(RepeatedKeyReport((b, h), len(uniq), lhs, rhs, err, ok))
    return reports


@dataclass
class CounterexampleReport:
    T: int
    log_prod_q: float
    states: np.ndarray
    distance_to_optimum: float

    def to_dict(self) -> dict:
        return {
            "theorem": "token-local-non-implication", "T": self.T, "lhs": self.log_prod_q,
            "rhs": float("-inf"), "distance_to_optimum": self.distance_to_optimum,
            "states_tail": self.states[-4:].tolist(),
            "verdict": "PASS" if (self.log_prod_q == -np.inf and self.distance_to_optimum > 0.5) else "FAIL",
        }


def alternating_target_counterexample(T: int = 16, beta: float = 0.5) -> CounterexampleReport:
    """``K = V = 1``, ``k = 1``, ``v_t = (-1)^t`` with exact per-token Newton writes (``d = 1/beta``).

    Every token-local residual is killed, yet the state flips between ``+1``
    and ``-1`` and never approaches the population minimiser ``0``.
    """
    t = np.arange(1, T + 1)
    values = ((-1.0) ** t).reshape(1, T, 1, 1)
    ones = np.ones((1, T, 1, 1))
    stream = TokenStream(ones, ones, values, np.full((1, T, 1), beta), keys_unit_norm=True, scale_queries=False)
    d0 = 1.0 / beta
    precond = PreconditionerState.initial(1, 1, 1, d0=d0, eta=0.0, d_min=min(0.5, d0), d_max=max(2.0, d0))
    out, S, trace = run_recurrent(stream, BackboneSpec("delta_net", online_scaled=True), init_precond=precond)
    states = out[0, :, 0, 0]  # q = 1 without scaling, so o_t = S_t
    return CounterexampleReport(T, float(np.sum(_log(trace.q))), states, float(abs(S.S[0, 0, 0, 0])))


def convexity_gap(problem: QuadraticProblem, S, D1, D2, lam: float) -> float:
    """``h(lam D1 + (1-lam) D2) - [lam h(D1) + (1-lam) h(D2)]``; non-positive for convex ``h``."""
    g = problem.grad(S)
    mid = hyper_feedback(lam * D1 + (1 - lam) * D2, g, problem.sigma)
    return mid - (lam * hyper_feedback(D1, g, problem.sigma) + (1 - lam) * hyper_feedback(D2, g, problem.sigma))


def newton_exactness(problem: QuadraticProblem, S) -> float:
    """``|grad f(S')| / |grad f(S)|`` after one step with ``D*``."""
    S_new, _ = population_step(S, problem.newton, problem)
    return float(np.linalg.norm(problem.grad(S_new)) / np.linalg.norm(problem.grad(S)))
