"""Diagnostics behind the command line: equivalence grid, residual-ratio replay, theory bundle, benchmark.

Each ``cmd_*`` function takes a config dataclass and returns a report dict
whose numeric content is a pure function of the config (timings aside).
"""

from __future__ import annotations

import hashlib
import itertools
import time
from dataclasses import asdict, dataclass

import numpy as np

from .chunk import chunk_forward
from .precond import phase1_sweep
from .recurrent import CORE_VARIANTS, BackboneSpec, default_precond, run_recurrent, write_keys_for
from .theory import (
    QuadraticProblem,
    alternating_target_counterexample,
    minimize_eps_diag,
    newton_exactness,
    repeated_key_audit,
    run_population_osgm,
    token_local_audit,
)
from .types import GateSequence, PreconditionerState, StreamError, TokenStream

Q_FLOOR = 1e-300


# --------------------------------------------------------------------------- stream generators


def random_stream(rng, B, T, H, K, V, unit_keys=True, beta_range=(0.05, 0.95), scale_queries=True):
    keys = rng.normal(size=(B, T, H, K))
    if unit_keys:
        keys /= np.linalg.norm(keys, axis=-1, keepdims=True)
    return TokenStream(
        queries=rng.normal(size=(B, T, H, K)), keys=keys, values=rng.normal(size=(B, T, H, V)),
        betas=rng.uniform(*beta_range, size=(B, T, H)), keys_unit_norm=unit_keys, scale_queries=scale_queries,
    )


def random_gates(rng, B, T, H, K, alpha_range=(0.95, 1.0), retention_range=(0.5, 1.0)):
    lo, hi = alpha_range
    return GateSequence(
        alpha_scalar=rng.uniform(lo, hi, size=(B, T, H)),
        alpha_vector=rng.uniform(lo, hi, size=(B, T, H, K)),
        retention=rng.uniform(*retention_range, size=(B, T, H)),
    )


def dictionary(K: int, n_dict: int, mode: str = "orthogonal", rng=None) -> np.ndarray:
    """``n_dict`` unit keys; orthogonal mode uses equal-weight disjoint coordinate blocks."""
    if mode == "orthogonal":
        if n_dict > K:
            raise StreamError(f"orthogonal dictionary of {n_dict} keys needs K >= {n_dict}, got K={K}")
        m = K // n_dict
        D = np.zeros((n_dict, K))
        for c in range(n_dict):
            D[c, c * m:(c + 1) * m] = 1.0 / np.sqrt(m)
        return D
    if mode == "gaussian":
        D = rng.normal(size=(n_dict, K))
        return D / np.linalg.norm(D, axis=-1, keepdims=True)
    raise StreamError(f"unknown dictionary mode {mode!r}")


def typed_stream(rng, B, T, H, K, V, n_dict, repeat=2, dict_mode="orthogonal",
                 beta_range=(0.55, 0.9), value_mode="per_token"):
    """Typed-key stream: one segment of length ``T // repeat`` concatenated ``repeat`` times.

    Keys come from the dictionary, queries equal keys, and each class has its
    own gate ``beta``.  ``value_mode='per_class'`` ties values to the class
    (the repeated-key regime); ``per_token`` draws fresh values per segment
    position.  Returns ``(stream, labels [B,T,H])``.
    """
    if T % repeat:
        raise StreamError(f"T={T} not divisible by repeat={repeat}")
    seg = T // repeat
    dic = dictionary(K, n_dict, dict_mode, rng)
    labels = rng.integers(0, n_dict, size=(B, seg, H))
    class_beta = rng.uniform(*beta_range, size=(B, H, n_dict))
    keys = dic[labels]
    bi = np.arange(B)[:, None, None]
    hi = np.arange(H)[None, None, :]
    betas = class_beta[bi, hi, labels]
    if value_mode == "per_class":
        class_v = rng.normal(size=(B, H, n_dict, V))
        values = class_v[bi, hi, labels]
    elif value_mode == "per_token":
        values = rng.normal(size=(B, seg, H, V))
    else:
        raise StreamError(f"unknown value mode {value_mode!r}")
    tile = lambda a: np.concatenate([a] * repeat, axis=1)
    stream = TokenStream(tile(keys), tile(keys), tile(values), tile(betas), keys_unit_norm=(dict_mode == "orthogonal"))
    return stream, tile(labels)


def q_geo(q, mask=None):
    """Geometric mean of ``q`` in the log domain with a floor; returns ``(value, n_tokens, n_floored)``."""
    q = np.asarray(q, dtype=np.float64)
    if mask is not None:
        q = q[mask]
    if q.size == 0:
        return float("nan"), 0, 0
    floored = int(np.sum(q < Q_FLOOR))
    return float(np.exp(np.mean(np.log(np.maximum(q, Q_FLOOR))))), int(q.size), floored


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------- equiv


@dataclass(frozen=True)
class EquivConfig:
    seed: int = 0
    variants: tuple = CORE_VARIANTS
    batch: tuple = (1, 2)
    length: tuple = (32, 128)
    heads: tuple = (1, 2)
    key_dim: tuple = (8, 16)
    value_dim: tuple = (8, 16)
    chunk: tuple = (1, 16, 32, 0)      # 0 means C = T
    tolerance: float = 1e-9
    tolerance32: float = 7e-3
    eta: float = 0.05
    check32: bool = True


def cmd_equiv(cfg: EquivConfig) -> dict:
    """Chunkwise vs recurrent over the grid; ``ok`` is false iff any case exceeds its tolerance."""
    rows = []
    for case, (name, B, T, H, K, V) in enumerate(itertools.product(
            cfg.variants, cfg.batch, cfg.length, cfg.heads, cfg.key_dim, cfg.value_dim)):
        rng = np.random.default_rng([cfg.seed, case])
        stream = random_stream(rng, B, T, H, K, V)
        gates = random_gates(rng, B, T, H, K)
        spec = BackboneSpec.parse(name)
        precond = default_precond(stream, eta=cfg.eta)
        wk = write_keys_for(stream, spec, gates, precond)
        out_r, S_r, _ = run_recurrent(stream, spec, gates, init_precond=precond, write_keys=wk)
        scale_o = max(float(np.abs(out_r).max()), 1e-300)
        scale_s = max(float(np.abs(S_r.S).max()), 1e-300)
        for C in cfg.chunk:
            C = T if C == 0 else C
            out_c, S_c = chunk_forward(stream, spec, gates, init_precond=precond, chunk_size=C, write_keys=wk)
            err_o = float(np.abs(out_c - out_r).max())
            err_s = float(np.abs(S_c.S - S_r.S).max())
            row = {"variant": name, "B": B, "T": T, "H": H, "K": K, "V": V, "C": C,
                   "err_out": err_o, "err_state": err_s, "rel32_out": None, "rel32_state": None}
            ok = err_o <= cfg.tolerance and err_s <= cfg.tolerance
            if cfg.check32:
                o32, s32 = chunk_forward(stream, spec, gates, init_precond=precond, chunk_size=C,
                                         dtype=np.float32, write_keys=wk)
                row["rel32_out"] = float(np.abs(o32.astype(np.float64) - out_r).max() / scale_o)
                row["rel32_state"] = float(np.abs(s32.S - S_r.S).max() / scale_s)
                ok = ok and row["rel32_out"] <= cfg.tolerance32 and row["rel32_state"] <= cfg.tolerance32
            row["ok"] = bool(ok)
            rows.append(row)
    worst = max(rows, key=lambda r: max(r["err_out"], r["err_state"]))
    return {"command": "equiv", "config": asdict(cfg), "ok": all(r["ok"] for r in rows),
            "n_cases": len(rows), "n_failed": sum(not r["ok"] for r in rows), "worst": worst, "rows": rows}


# --------------------------------------------------------------------------- replay


@dataclass(frozen=True)
class ReplayConfig:
    seed: int = 0
    variant: str = "osdn"
    batch: int = 4
    length: int = 512
    heads: int = 2
    key_dim: int = 16
    value_dim: int = 16
    chunk: int = 64
    n_dict: int = 8
    repeat: int = 2
    dict_mode: str = "orthogonal"
    value_mode: str = "per_token"
    beta_range: tuple = (0.55, 0.9)
    eta: float = 0.1
    d_min: float = 0.5
    d_max: float = 2.0
    retention_mode: str = "none"
    rho: float = 1.0
    n_bins: int = 8

    def __post_init__(self):
        for name in ("batch", "length", "heads", "key_dim", "value_dim", "chunk", "n_dict", "n_bins"):
            if getattr(self, name) < 1:
                raise StreamError(f"{name} must be positive")
        if self.repeat < 1:
            raise StreamError("repeat must be >= 1")


def _replay_inputs(cfg: ReplayConfig, seed):
    rng = np.random.default_rng(seed)
    stream, labels = typed_stream(rng, cfg.batch, cfg.length, cfg.heads, cfg.key_dim, cfg.value_dim,
                                  cfg.n_dict, cfg.repeat, cfg.dict_mode, cfg.beta_range, cfg.value_mode)
    gates = GateSequence(
        alpha_scalar=np.ones(stream.betas.shape), alpha_vector=np.ones(stream.keys.shape),
        retention=rng.uniform(0.9, 1.0, size=stream.betas.shape),
    )
    return stream, labels, gates


def _aggregate(q, labels, cfg: ReplayConfig):
    T = q.shape[1]
    seam = T // cfg.repeat
    pos = np.broadcast_to(np.arange(T)[None, :, None], q.shape)
    bins = (pos * cfg.n_bins) // T
    out = {"overall": q_geo(q)[0], "second_half": q_geo(q, pos >= seam)[0] if cfg.repeat > 1 else None}
    out["bins"] = []
    for b in range(cfg.n_bins):
        val, n, fl = q_geo(q, bins == b)
        lo, hi = b * T // cfg.n_bins, (b + 1) * T // cfg.n_bins
        seams = [s * seam for s in range(1, cfg.repeat) if lo <= s * seam < hi]
        out["bins"].append({"bin": b, "q_geo": val, "n_tokens": n, "n_floored": fl, "seam": bool(seams)})
    out["classes"] = [{"class": c, "q_geo": q_geo(q, labels == c)[0]} for c in range(cfg.n_dict)]
    return out


def cmd_replay(cfg: ReplayConfig) -> dict:
    """Residual-ratio replay of the online-scaled variant against its ``d = 1`` host on identical streams."""
    spec = BackboneSpec.parse(cfg.variant)
    if not spec.online_scaled:
        raise StreamError("replay compares an online-scaled variant with its host; pick an os* variant")
    stream, labels, gates = _replay_inputs(cfg, cfg.seed)
    precond = PreconditionerState.initial(
        cfg.batch, cfg.heads, cfg.key_dim, eta=cfg.eta, d_min=cfg.d_min, d_max=cfg.d_max,
        retention_mode=cfg.retention_mode, rho=cfg.rho,
    )
    _, _, tr_os = run_recurrent(stream, spec, gates, init_precond=precond)
    _, _, tr_host = run_recurrent(stream, spec.host, gates)
    os_agg = _aggregate(tr_os.q, labels, cfg)
    host_agg = _aggregate(tr_host.q, labels, cfg)
    rows = []
    for who, name, agg in (("os", spec.name, os_agg), ("host", spec.host.name, host_agg)):
        rows.append({"backbone": spec.backbone, "variant": name, "bin": "all", "q_geo": agg["overall"],
                     "n_tokens": int(tr_os.q.size)})
        for b in agg["bins"]:
            rows.append({"backbone": spec.backbone, "variant": name, "bin": b["bin"], "q_geo": b["q_geo"],
                         "n_tokens": b["n_tokens"]})
    target_os = os_agg["second_half"] if cfg.repeat > 1 else os_agg["overall"]
    target_host = host_agg["second_half"] if cfg.repeat > 1 else host_agg["overall"]
    return {
        "command": "replay", "config": asdict(cfg), "os": os_agg, "host": host_agg,
        "reduction": 1.0 - target_os / target_host, "os_below_host": bool(target_os < target_host),
        "ok": True, "rows": rows,
        "n_degenerate": {"os": int(tr_os.degenerate.sum()), "host": int(tr_host.degenerate.sum())},
    }


# --------------------------------------------------------------------------- theory


@dataclass(frozen=True)
class TheoryConfig:
    seed: int = 0
    n_problems: int = 10
    key_dim: int = 6
    value_dim: int = 4
    steps: int = 200
    n_streams: int = 10
    stream_length: int = 64
    eta: float = 0.05


def cmd_theory(cfg: TheoryConfig) -> dict:
    """Run every audit; ``ok`` is false iff some verdict is FAIL (N/A does not fail)."""
    audits = []

    def add(theorem, lhs, rhs, verdict, seed, **extra):
        audits.append({"theorem": theorem, "lhs": lhs, "rhs": rhs, "verdict": verdict, "seed": seed, **extra})

    for i in range(cfg.n_problems):
        seed = [cfg.seed, 0, i]
        rng = np.random.default_rng(seed)
        prob = QuadraticProblem.random(cfg.key_dim, cfg.value_dim, rng)
        rep = run_population_osgm(prob, "diagonal", T=cfg.steps, rng=rng)
        add("population-super-geometric", rep.log_prod_ratio, rep.log_bound, rep.verdict, i,
            learner="diagonal", steps=rep.steps, n_rejected=rep.n_rejected, rayleigh_ok=rep.rayleigh_ok)
        ratio = newton_exactness(prob, rng.normal(size=(cfg.value_dim, cfg.key_dim)))
        add("exact-newton-step", ratio, 1e-10, "PASS" if ratio <= 1e-10 else "FAIL", i)
        dense = run_population_osgm(prob, "dense", T=cfg.steps, rng=rng)
        dec = dense.decomposition
        resid_ok = abs(dec["residual"]) <= 1e-10 * max(1.0, abs(dec["total"]))
        add("regret-decomposition", dec["total"], dec["ogd_regret"] + dec["box_gap"] + dec["diagonal_gap"],
            "PASS" if resid_ok else "FAIL", i)

    rng = np.random.default_rng([cfg.seed, 1])
    prob = QuadraticProblem.random(cfg.key_dim, cfg.value_dim, rng)
    adv = run_population_osgm(prob, "adversarial", T=10, rng=rng, guard=False)
    add("population-super-geometric", adv.log_prod_ratio, adv.log_bound, adv.verdict, -1,
        learner="adversarial", guard=False)
    one = run_population_osgm(prob, "oracle", T=1, rng=rng)
    add("population-super-geometric", one.log_prod_ratio, one.log_bound, one.verdict, -1, learner="oracle", steps=1)

    for i in range(cfg.n_streams):
        rng = np.random.default_rng([cfg.seed, 2, i])
        for T in (cfg.stream_length, 1):
            stream = random_stream(rng, 1, T, 1, 8, 4)
            precond = default_precond(stream, eta=cfg.eta)
            spec = BackboneSpec.parse("osdn")
            wk = phase1_sweep(stream, precond, keep_trajectory=True)
            _, _, trace = run_recurrent(stream, spec, init_precond=precond, write_keys=wk)
            for rep in token_local_audit(trace, stream, wk, (precond.d_min, precond.d_max),
                                         comparators={"d_final": wk.d_final[0, 0]}):
                for c in rep.comparators:
                    add("token-local-contraction", rep.log_prod_q, c.log_rhs, "PASS" if c.holds else "FAIL", i,
                        comparator=c.name, T=T, identity_err=rep.identity_err)

    for i in range(cfg.n_streams):
        rng = np.random.default_rng([cfg.seed, 3, i])
        stream, _ = typed_stream(rng, 1, 12, 1, 6, 3, n_dict=3, repeat=4, value_mode="per_class",
                                 beta_range=(0.05, 0.95))
        _, S_T, trace = run_recurrent(stream, BackboneSpec.parse("osdn"), init_precond=default_precond(stream, eta=0.2))
        for rep in repeated_key_audit(stream, trace, S_T):
            add("repeated-key-identity", rep.log_lhs, rep.log_rhs, "PASS" if rep.holds else "FAIL", i)

    cx = alternating_target_counterexample(16)
    d = cx.to_dict()
    add(d["theorem"], d["lhs"], d["rhs"], d["verdict"], -1, distance_to_optimum=d["distance_to_optimum"])

    for beta, want_d, want_eps in ((0.5, 2.0, 0.0), (0.1, 2.0, 0.32)):
        res = minimize_eps_diag(np.tile([1.0, 0.0], (8, 1)), np.full(8, beta), (0.5, 2.0))
        ok = res.converged and abs(res.d[0] - want_d) <= 1e-10 and abs(res.eps - want_eps) <= 1e-10
        add("eps-diag-minimiser", res.eps, want_eps, "PASS" if ok else "FAIL", -1, beta=beta)

    for a in audits:
        for k in ("lhs", "rhs"):
            a[k] = _json_float(a[k])
    verdicts = [a["verdict"] for a in audits]
    return {"command": "theory", "config": asdict(cfg), "ok": "FAIL" not in verdicts,
            "n_pass": verdicts.count("PASS"), "n_fail": verdicts.count("FAIL"), "n_na": verdicts.count("N/A"),
            "audits": audits}


def _json_float(x):
    x = float(x)
    if np.isfinite(x):
        return x
    return "-inf" if x < 0 else ("inf" if x > 0 else "nan")


# --------------------------------------------------------------------------- bench


@dataclass(frozen=True)
class BenchConfig:
    seed: int = 0
    variants: tuple = ("deltanet", "osdn", "gdn", "osgdn", "kda", "oskda")
    batch: int = 1
    length: int = 1024
    heads: int = 2
    key_dim: int = 32
    value_dim: int = 32
    chunk: int = 64
    repeats: int = 5
    warmup: int = 1

    def __post_init__(self):
        if self.warmup < 1:
            raise StreamError("warmup must be >= 1")
        if self.repeats < 5:
            raise StreamError("need at least 5 timed repeats")


def _median_time(fn, repeats, warmup):
    for _ in range(warmup):
        result = fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), result


def cmd_bench(cfg: BenchConfig) -> dict:
    """Median wall time of phase 1, chunked and recurrent forwards.

    ``numeric`` holds output digests and is deterministic; ``timing`` is not.
    """
    rng = np.random.default_rng(cfg.seed)
    B, T, H, K, V = cfg.batch, cfg.length, cfg.heads, cfg.key_dim, cfg.value_dim
    stream = random_stream(rng, B, T, H, K, V)
    gates = random_gates(rng, B, T, H, K)
    numeric, timing = [], []
    n_tok = B * T * H
    for name in cfg.variants:
        spec = BackboneSpec.parse(name)
        precond = default_precond(stream)
        t_p1, wk = _median_time(lambda: write_keys_for(stream, spec, gates, precond), cfg.repeats, cfg.warmup)
        if not spec.online_scaled:
            t_p1 = 0.0
        t_ch, (out_c, S_c) = _median_time(
            lambda: chunk_forward(stream, spec, gates, chunk_size=cfg.chunk, write_keys=wk), cfg.repeats, cfg.warmup)
        t_rec, (out_r, S_r, _) = _median_time(
            lambda: run_recurrent(stream, spec, gates, write_keys=wk), cfg.repeats, cfg.warmup)
        numeric.append({"variant": name, "chunk_digest": digest(out_c, S_c.S), "recurrent_digest": digest(out_r, S_r.S),
                        "write_key_digest": digest(wk.write_keys)})
        timing.append({
            "variant": name,
            "phase1_tok_s": n_tok / t_p1 if t_p1 > 0 else None,
            "chunk_tok_s": n_tok / t_ch, "recurrent_tok_s": n_tok / t_rec,
            "phase1_share_pct": 100.0 * t_p1 / (t_p1 + t_ch),
            "phase1_s": t_p1, "chunk_s": t_ch, "recurrent_s": t_rec,
        })
    return {"command": "bench", "config": asdict(cfg), "ok": True, "numeric": numeric, "timing": timing}
