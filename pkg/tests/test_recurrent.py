import numpy as np
import pytest

from osdn.precond import hypergrad_values, phase1_sweep
from osdn.recurrent import (
    CORE_VARIANTS,
    VARIANTS,
    BackboneSpec,
    run_recurrent,
    step_delta,
    step_gdn,
    step_kda,
)
from osdn.types import FastWeightState, GateSequence, PreconditionerState, StreamError, TokenStream

from conftest import make_case


def test_step_delta_exact_write():
    k = np.array([0.6, 0.8])
    q = np.array([1.0, 2.0])
    v = np.array([1.0, -1.0, 3.0])
    S, o, u = step_delta(np.zeros((3, 2)), q, k, k, v, 1.0)
    np.testing.assert_allclose(S, np.outer(v, k), atol=1e-15)
    np.testing.assert_allclose(o, np.dot(k, q) * v, atol=1e-15)


def test_step_delta_identity_form(rng):
    S = rng.normal(size=(4, 4))
    q, k, v = rng.normal(size=(3, 4))
    d = rng.uniform(0.5, 2, 4)
    beta = 0.37
    S1, _, _ = step_delta(S, q, k, d * k, v, beta)
    S2 = S @ (np.eye(4) - beta * np.outer(k, d * k)) + beta * np.outer(v, d * k)
    assert np.abs(S1 - S2).max() <= 1e-15 * max(1, np.abs(S2).max()) * 8
    # d = 1 is the unscaled path, bitwise
    a, _, _ = step_delta(S, q, k, k, v, beta)
    b, _, _ = step_delta(S, q, k, np.ones(4) * k, v, beta)
    np.testing.assert_array_equal(a, b)


def test_step_gdn(rng):
    S = rng.normal(size=(3, 4))
    q, k, wk = rng.normal(size=(3, 4))
    v = rng.normal(size=3)
    np.testing.assert_array_equal(step_gdn(S, q, k, wk, v, 0.4, 1.0)[0], step_delta(S, q, k, wk, v, 0.4)[0])
    S0, _, _ = step_gdn(S, q, k, wk, v, 0.4, 0.0)
    np.testing.assert_allclose(S0, 0.4 * np.outer(v, wk), atol=1e-15)
    S9, _, e = step_gdn(S, q, k, wk, v, 0.4, 0.9)
    ref = S @ (0.9 * (np.eye(4) - 0.4 * np.outer(k, wk))) + 0.4 * np.outer(v, wk)
    assert np.abs(S9 - ref).max() <= 1e-14
    np.testing.assert_allclose(e, v - 0.9 * S @ k, atol=1e-15)


def test_step_kda(rng):
    S = rng.normal(size=(4, 3))
    q, k = rng.normal(size=(2, 4))
    v = rng.normal(size=3)
    d = rng.uniform(0.5, 2, 4)
    # orientation duality with alpha = 1, d = 1
    Sk, ok, _ = step_kda(S, q, k, k, v, 0.6, np.ones(4))
    Sd, od, _ = step_delta(S.T, q, k, k, v, 0.6)
    np.testing.assert_allclose(Sk, Sd.T, atol=1e-15)
    np.testing.assert_allclose(ok, od, atol=1e-14)
    a = rng.uniform(0.5, 1, 4)
    np.testing.assert_allclose(step_kda(S, q, k, d * k, v, 0.0, a)[0], a[:, None] * S, atol=1e-16)
    S1, _, _ = step_kda(S, q, k, d * k, v, 0.6, a)
    ref = (np.eye(4) - 0.6 * np.outer(d * k, k)) @ np.diag(a) @ S + 0.6 * np.outer(d * k, v)
    assert np.abs(S1 - ref).max() <= 1e-14


def test_spec_parsing_and_gates():
    assert set(CORE_VARIANTS) <= set(VARIANTS)
    assert BackboneSpec.parse("OSKDA").orientation == "KxV"
    assert BackboneSpec.parse("osgdn-apf").host.name == "gdn"
    with pytest.raises(StreamError):
        BackboneSpec.parse("mamba")
    with pytest.raises(StreamError):
        BackboneSpec("delta_net", online_scaled=False, apf=True)
    stream, _ = make_case(1)
    with pytest.raises(StreamError, match="alpha_scalar"):
        run_recurrent(stream, BackboneSpec.parse("gdn"))
    with pytest.raises(StreamError, match="retention"):
        run_recurrent(stream, BackboneSpec.parse("osdn-apf"), GateSequence())
    with pytest.raises(StreamError, match="state"):
        run_recurrent(stream, BackboneSpec.parse("kda"), GateSequence(alpha_vector=np.ones(stream.keys.shape)),
                      init_state=FastWeightState.zeros(2, 2, 6, 5, "VxK"))


@pytest.mark.parametrize("backbone", ["delta_net", "gated_delta_net", "kda"])
def test_frozen_identity_preconditioner_matches_host_bitwise(backbone):
    stream, gates = make_case(2)
    frozen = PreconditionerState.initial(2, 2, 6, eta=0.0)
    o1, S1, t1 = run_recurrent(stream, BackboneSpec(backbone), gates)
    o2, S2, t2 = run_recurrent(stream, BackboneSpec(backbone, True), gates, init_precond=frozen)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(S1.S, S2.S)
    np.testing.assert_array_equal(t1.q, t2.q)


def test_single_exact_write_kills_residual():
    # beta is confined to (0, 1); beta = 0.5 with d = 2 realises the same exact write as beta = 1, d = 1
    k = np.array([0.6, 0.8]).reshape(1, 1, 1, 2)
    s = TokenStream(k, k, np.ones((1, 1, 1, 3)), np.full((1, 1, 1), 0.5), keys_unit_norm=True)
    p = PreconditionerState.initial(1, 1, 2, d0=2.0, eta=0.0)
    _, _, tr = run_recurrent(s, BackboneSpec("delta_net", True), init_precond=p)
    assert tr.q[0, 0, 0] <= 1e-30


def test_host_unit_keys_quarter_ratio():
    stream, _ = make_case(3, T=40)
    stream = stream.replace(betas=np.full(stream.betas.shape, 0.5))
    _, _, tr = run_recurrent(stream, BackboneSpec.parse("deltanet"))
    assert np.abs(tr.q[~tr.degenerate] - 0.25).max() <= 1e-12


@pytest.mark.parametrize("name", VARIANTS)
def test_residual_identity_and_q_identity(name):
    stream, gates = make_case(4, T=48)
    spec = BackboneSpec.parse(name)
    p = PreconditionerState.initial(2, 2, 6, eta=0.3)
    wk = phase1_sweep(stream, p.replace(retention_mode="data_dependent") if spec.apf else p, gates,
                      keep_trajectory=True) if spec.online_scaled else None
    _, _, tr = run_recurrent(stream, spec, gates, init_precond=p)
    d = wk.d_trajectory if wk is not None else np.ones(stream.keys.shape)
    factor = (1 - stream.betas * (d * stream.keys ** 2).sum(-1)) ** 2
    live = ~tr.degenerate
    np.testing.assert_allclose(tr.f_after[live], tr.f_before[live] * factor[live], rtol=1e-12, atol=1e-300)
    h = hypergrad_values(d, stream.keys, stream.betas)
    assert np.abs(tr.q - (1 + 2 * h))[live].max() <= 1e-12
    np.testing.assert_allclose(tr.grad_norm_sq, 2 * tr.f_before * (stream.keys ** 2).sum(-1), rtol=1e-14)


def test_degenerate_convention():
    k = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
    s = TokenStream(np.tile(k, (1, 2, 1, 1)), np.tile(k, (1, 2, 1, 1)), np.zeros((1, 2, 1, 2)), np.full((1, 2, 1), 0.5))
    _, _, tr = run_recurrent(s, BackboneSpec.parse("deltanet"))
    assert tr.degenerate.all() and np.all(tr.q == 1.0)


def test_init_state_used():
    stream, gates = make_case(9)
    S0 = FastWeightState(np.random.default_rng(0).normal(size=(2, 2, 5, 6)))
    o_a, _, _ = run_recurrent(stream, BackboneSpec.parse("deltanet"), init_state=S0)
    o_b, _, _ = run_recurrent(stream, BackboneSpec.parse("deltanet"))
    assert not np.allclose(o_a, o_b)


def test_query_scaling_flag():
    stream, _ = make_case(10)
    o1, _, _ = run_recurrent(stream, BackboneSpec.parse("deltanet"))
    o2, _, _ = run_recurrent(stream.replace(scale_queries=False), BackboneSpec.parse("deltanet"))
    np.testing.assert_allclose(o1 * np.sqrt(6), o2, rtol=1e-12, atol=1e-14)
