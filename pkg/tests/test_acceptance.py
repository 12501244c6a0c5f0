"""Acceptance suite: ten criteria, each printing one PASS/FAIL line.

Run under pytest (``pytest tests/test_acceptance.py -s``) or directly with
``python3 tests/test_acceptance.py``.
"""

import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from test_backward import layer_fd_errors  # noqa: E402

from osdn.cli import run as cli_run  # noqa: E402
from osdn.diagnostics import (  # noqa: E402
    EquivConfig,
    ReplayConfig,
    cmd_equiv,
    cmd_replay,
    random_gates,
    random_stream,
    typed_stream,
)
from osdn.precond import (  # noqa: E402
    _affine_step,
    hypergrad_eval,
    hypergrad_values,
    phase1_sweep,
    precond_step,
)
from osdn.recurrent import CORE_VARIANTS, VARIANTS, BackboneSpec, default_precond, run_recurrent  # noqa: E402
from osdn.theory import (  # noqa: E402
    QuadraticProblem,
    alternating_target_counterexample,
    newton_exactness,
    repeated_key_audit,
    run_population_osgm,
    token_local_audit,
)
from osdn.types import GateSequence  # noqa: E402


def _unit(rng, n, K):
    k = rng.normal(size=(n, K))
    return k / np.linalg.norm(k, axis=-1, keepdims=True)


def criterion_1():
    rep = cmd_equiv(EquivConfig())
    variants = {r["variant"] for r in rep["rows"]}
    w = rep["worst"]
    worst32 = max(r["rel32_out"] for r in rep["rows"] if r.get("rel32_out") is not None)
    ok = rep["ok"] and variants == set(CORE_VARIANTS) and rep["n_cases"] == 6 * 2 * 2 * 2 * 2 * 2 * 4
    return ok, (f"{rep['n_cases']} cases, worst 64-bit err {max(w['err_out'], w['err_state']):.2e} (<=1e-9), "
                f"worst 32-bit rel {worst32:.2e} (<=7e-3)")


def criterion_2(n=10_000):
    rng = np.random.default_rng(2)
    K, V = 6, 4
    k = _unit(rng, n, K) * rng.uniform(0.5, 2.0, (n, 1))
    d = rng.uniform(0.5, 2.0, (n, K))
    beta = rng.uniform(0.01, 0.99, n)
    S = rng.normal(size=(n, V, K))
    v = rng.normal(size=(n, V))
    e = np.einsum("nvk,nk->nv", S, k) - v
    f0 = 0.5 * np.sum(e * e, -1)
    S1 = S - beta[:, None, None] * e[:, :, None] * (d * k)[:, None, :]
    e1 = np.einsum("nvk,nk->nv", S1, k) - v
    f1 = 0.5 * np.sum(e1 * e1, -1)
    brute = (f1 - f0) / (np.sum(e * e, -1) * np.sum(k * k, -1))
    err_h = float(np.abs(hypergrad_values(d, k, beta) - brute).max())
    # h is quadratic in d, so a wide central difference carries no truncation error
    step = 1e-3
    fd = np.stack([(hypergrad_values(d + step * ei, k, beta) - hypergrad_values(d - step * ei, k, beta)) / (2 * step)
                   for ei in np.eye(K)], -1)
    grad = np.stack([hypergrad_eval(d[i], k[i], beta[i]).h_grad for i in range(n)])
    rel = np.linalg.norm(fd - grad, axis=-1) / np.maximum(np.linalg.norm(grad, axis=-1), 1e-6)
    err_g = float(rel.max())
    return err_h <= 1e-12 and err_g <= 1e-6, f"{n} tokens, |h-brute| {err_h:.2e} (<=1e-12), grad rel {err_g:.2e} (<=1e-6)"


def criterion_3(n=10_000):
    rng = np.random.default_rng(3)
    K = 8
    k = _unit(rng, n, K)
    d = rng.uniform(0.5, 2.0, (n, K))
    beta = rng.uniform(0.01, 0.99, n)
    factor = (1 - beta * np.sum(d * k * k, -1)) ** 2
    descent = bool(np.all(factor < 1))
    worst = 0.0
    n_tok = 0
    for seed in range(5):
        r = np.random.default_rng(100 + seed)
        s = random_stream(r, 2, 256, 4, K, 4)
        p = default_precond(s, eta=0.2)
        wk = phase1_sweep(s, p, keep_trajectory=True)
        _, _, tr = run_recurrent(s, BackboneSpec.parse("osdn"), init_precond=p, write_keys=wk)
        h = hypergrad_values(wk.d_trajectory, s.keys, s.betas)
        live = ~tr.degenerate
        worst = max(worst, float(np.abs(tr.q - (1 + 2 * h))[live].max()))
        n_tok += int(live.sum())
    ok = descent and worst <= 1e-12 and n_tok >= 10_000
    return ok, f"{n} draws max factor {factor.max():.4f} (<1), {n_tok} traced tokens |q-(1+2h)| {worst:.2e} (<=1e-12)"


def criterion_4(n=100):
    rng = np.random.default_rng(4)
    s = random_stream(rng, 2, 64, 2, 8, 6)
    g = random_gates(rng, 2, 64, 2, 8)
    p = default_precond(s, eta=0.3, retention_mode="data_dependent")
    base = phase1_sweep(s, p, g).write_keys
    changed = 0
    for _ in range(n):
        other = s.replace(values=rng.normal(size=s.values.shape) * rng.uniform(0.1, 10),
                          queries=rng.normal(size=s.queries.shape))
        changed += not np.array_equal(phase1_sweep(other, p, g).write_keys, base)
    return changed == 0, f"{n} value/query perturbations, {changed} changed write keys (need 0)"


def criterion_5(n=2_000):
    rng = np.random.default_rng(5)
    K = 6
    worst = 0.0
    for _ in range(n):
        k = rng.normal(size=K)
        beta, r, eta = rng.uniform(0.01, 0.99), rng.uniform(0.0, 1.0), rng.uniform(0.0, 2.0)
        d1, d2 = rng.uniform(0.5, 2.0, (2, K))
        lam = rng.uniform()
        step = lambda d: _affine_step(d, k, np.float64(beta), np.asarray(r), eta, 1e-6, True)
        err = np.abs(step(lam * d1 + (1 - lam) * d2) - (lam * step(d1) + (1 - lam) * step(d2))).max()
        worst = max(worst, float(err))
    s = random_stream(rng, 2, 64, 2, K, 4)
    p = default_precond(s, eta=0.3)
    ones = GateSequence(retention=np.ones(s.betas.shape))
    o1, S1, _ = run_recurrent(s, BackboneSpec.parse("osdn"), init_precond=p)
    o2, S2, _ = run_recurrent(s, BackboneSpec.parse("osdn-apf"), ones, init_precond=p)
    a = phase1_sweep(s, p).write_keys
    b = phase1_sweep(s, p.replace(retention_mode="data_dependent"), ones).write_keys
    st = precond_step(p, s.keys[:, 0], s.betas[:, 0])
    st_r = precond_step(p.replace(retention_mode="data_dependent"), s.keys[:, 0], s.betas[:, 0], np.ones((2, 2)))
    bitwise = (np.array_equal(o1, o2) and np.array_equal(S1.S, S2.S) and np.array_equal(a, b)
               and np.array_equal(st.d, st_r.d))
    return worst <= 1e-12 and bitwise, f"superposition err {worst:.2e} (<=1e-12), retention=1 bitwise={bitwise}"


def criterion_6():
    worst, where = 0.0, ""
    for name in VARIANTS:
        errs = layer_fd_errors(name)
        for k, v in errs.items():
            if v > worst:
                worst, where = v, f"{name}/{k}"
    return worst <= 1e-5, f"{len(VARIANTS)} variants at (1,16,1,4,4), worst rel err {worst:.2e} at {where} (<=1e-5)"


def criterion_7(n=12):
    fails, newton, steps = [], 0.0, []
    for seed in range(n):
        rng = np.random.default_rng(700 + seed)
        K = int(rng.integers(2, 9))
        p = QuadraticProblem.random(K, 3, rng)
        r = run_population_osgm(p, "diagonal", T=200, rng=rng, guard=True)
        steps.append(r.steps)
        if not (r.verdict == "PASS" and r.prefix_ok):
            fails.append(seed)
        newton = max(newton, newton_exactness(p, rng.normal(size=(3, K))))
    ok = not fails and newton <= 1e-10
    return ok, f"{n} problems ({min(steps)}-{max(steps)} steps to a 1e-13 gap), prefix-bound failures {fails}, Newton grad ratio {newton:.2e} (<=1e-10)"


def criterion_8(n=10):
    bad_local = 0
    lanes = 0
    for seed in range(n):
        rng = np.random.default_rng(800 + seed)
        s = random_stream(rng, 1, 128, 2, 8, 4)
        p = default_precond(s, eta=0.1)
        wk = phase1_sweep(s, p, keep_trajectory=True)
        _, _, tr = run_recurrent(s, BackboneSpec.parse("osdn"), init_precond=p, write_keys=wk)
        for rep in token_local_audit(tr, s, wk):
            lanes += 1
            bad_local += not rep.holds
    worst_rk = 0.0
    rk_bad = 0
    for seed in range(n):
        rng = np.random.default_rng(850 + seed)
        s, _ = typed_stream(rng, 2, 64, 2, 8, 4, n_dict=4, repeat=4, value_mode="per_class", beta_range=(0.05, 0.95))
        _, S, tr = run_recurrent(s, BackboneSpec.parse("osdn"), init_precond=default_precond(s, eta=0.1))
        for rep in repeated_key_audit(s, tr, S, rel_tol=1e-10):
            rk_bad += not rep.holds
            if np.isfinite(rep.abs_err):
                worst_rk = max(worst_rk, rep.abs_err)
    cx = alternating_target_counterexample(64)
    cx_ok = cx.log_prod_q == -np.inf and cx.distance_to_optimum >= 0.5
    ok = bad_local == 0 and rk_bad == 0 and cx_ok
    return ok, (f"token-local {lanes - bad_local}/{lanes} lanes hold; repeated-key worst log err {worst_rk:.2e} "
                f"(<=1e-10), {rk_bad} failed; counterexample prod q=0 with distance {cx.distance_to_optimum:.2f}")


def criterion_9(n=10):
    gaps = []
    for seed in range(n):
        rep = cmd_replay(ReplayConfig(seed=seed))
        gaps.append((rep["os"]["second_half"], rep["host"]["second_half"]))
    ok = all(a < b for a, b in gaps)
    worst = max(a / b for a, b in gaps)
    return ok, f"{n} seeds, OS below host in {sum(a < b for a, b in gaps)}; worst ratio os/host {worst:.3f}"


DETERMINISM_RUNS = [
    ["equiv", "--length", "32", "128", "--chunk", "1", "16", "0"],
    ["replay"],
    ["theory"],
    ["bench", "--length", "128", "--key-dim", "8", "--value-dim", "8"],
]


def criterion_10():
    mismatched = []
    with tempfile.TemporaryDirectory() as tmp:
        for argv in DETERMINISM_RUNS:
            for fmt in ("json", "csv"):
                blobs = []
                for i in range(2):
                    out = Path(tmp) / f"{argv[0]}-{fmt}-{i}"
                    cli_run(argv + ["--seed", "11", "--format", fmt, "--out", str(out)])
                    blobs.append((out / f"{argv[0]}.{fmt}").read_bytes())
                if blobs[0] != blobs[1]:
                    mismatched.append(f"{argv[0]}.{fmt}")
    return not mismatched, f"{len(DETERMINISM_RUNS)} subcommands x 2 formats, mismatches {mismatched}"


CRITERIA = {
    1: ("chunkwise/recurrent equivalence", criterion_1),
    2: ("closed-form hypergradient identity", criterion_2),
    3: ("monotone descent and q identity", criterion_3),
    4: ("phase-1 decoupling", criterion_4),
    5: ("retention affinity", criterion_5),
    6: ("full-layer gradient check", criterion_6),
    7: ("population regret audit", criterion_7),
    8: ("token-local and repeated-key audits", criterion_8),
    9: ("direction-of-effect replay", criterion_9),
    10: ("CLI determinism", criterion_10),
}


def evaluate(i):
    name, fn = CRITERIA[i]
    t0 = time.perf_counter()
    ok, detail = fn()
    line = f"{'PASS' if ok else 'FAIL'} criterion {i} ({name}): {detail} [{time.perf_counter() - t0:.1f}s]"
    print(line)
    return ok, line


@pytest.mark.parametrize("i", sorted(CRITERIA))
def test_criterion(i):
    from conftest import ACCEPTANCE_LINES

    ok, line = evaluate(i)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


if __name__ == "__main__":
    results = [evaluate(i)[0] for i in sorted(CRITERIA)]
    sys.exit(0 if all(results) else 1)
