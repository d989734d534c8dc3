import sys
from dataclasses import dataclass

import numpy as np
import pytest

from mmtta import data as D
from mmtta import harness as H
from mmtta import tensor as T
from mmtta.model import build_model


def small_model(seed=0, hidden=8, depth=2, K=4, f2=5, f3=3, dtype=np.float64):
    """Tiny float64 model with randomized BN affine parameters (no budget check)."""
    model = build_model(f2, f3, K, hidden=hidden, depth=depth, seed=seed, dtype=dtype, check_budget=False)
    rng = np.random.default_rng(seed + 1000)
    for m in ("2d", "3d"):
        src = model[m, "source"]
        for layer in src.layers:
            layer.b.data = rng.normal(0, 0.3, layer.b.data.shape).astype(dtype)
        for bn in src.bn_states:
            bn.gamma.data = rng.uniform(0.5, 1.5, bn.gamma.data.shape).astype(dtype)
            bn.beta.data = rng.normal(0, 0.3, bn.beta.data.shape).astype(dtype)
            bn.mu = rng.normal(0, 0.5, bn.mu.shape).astype(dtype)
            bn.sigma = rng.uniform(0.5, 2.0, bn.sigma.shape).astype(dtype)
    model.reset_roles()
    return model


def manual_forward(branch, x, batch_stats):
    """Plain-numpy replay of a branch forward pass, returning probabilities."""
    h = x
    for layer, bn in zip(branch.layers[:-1], branch.bn_states):
        h = h @ layer.W.data + layer.b.data
        if batch_stats:
            mu = h.mean(axis=0, keepdims=True)
            sigma = np.sqrt(h.var(axis=0, keepdims=True) + T.BN_EPS)
        else:
            mu, sigma = bn.mu, bn.sigma
        h = np.maximum(bn.gamma.data * (h - mu) / sigma + bn.beta.data, 0)
    head = branch.layers[-1]
    return T.softmax_rows_array(h @ head.W.data + head.b.data)


def random_probs(rng, n, k, sharp=1.0):
    return T.softmax_rows_array(rng.normal(0, sharp, (n, k)))


def central_difference(f, params, h=1e-6):
    """Numerical gradient of scalar f() w.r.t. every entry of every Param."""
    out = {}
    for p in params:
        g = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = f()
            p.data[idx] = orig - h
            fm = f()
            p.data[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        out[p] = g
    return out


def loss_case(model, x2, x3, kind, labels=None, valid=None):
    """Record one adaptation loss family on the fast branches; returns (tape, loss)."""
    tape = T.GradTape()
    z2 = model["2d", "fast"].forward(tape, x2)
    z3 = model["3d", "fast"].forward(tape, x3)
    p2, p3 = T.softmax_rows(z2), T.softmax_rows(z3)
    if kind == "entropy":
        loss = T.add(T.mean_entropy(p2), T.mean_entropy(p3))
    elif kind == "entropy_ens":
        loss = T.mean_entropy(T.softmax_rows(T.average(z2, z3)))
    elif kind == "consistency":
        loss = T.mean_symmetric_kl(p2, p3)
    elif kind == "pseudo":
        loss = T.add(T.masked_nll(p2, labels["2d"], valid["2d"]), T.masked_nll(p3, labels["3d"], valid["3d"]))
    elif kind == "mmtta":
        loss = T.add(T.masked_nll(p2, labels, valid), T.masked_nll(p3, labels, valid))
    return tape, loss


def gradient_case(seed, kind, grad_through_stats=True):
    """Analytic and central-difference gradients of one loss family w.r.t. the fast BN affines."""
    rng = np.random.default_rng(seed)
    model = small_model(seed)
    model.set_grad_through_stats(grad_through_stats)
    x2, x3 = rng.normal(size=(9, 5)), rng.normal(size=(9, 3))
    K = model.num_classes
    labels = valid = None
    if kind == "pseudo":
        labels = {m: rng.integers(0, K, 9) for m in ("2d", "3d")}
        valid = {m: rng.random(9) < 0.7 for m in ("2d", "3d")}
        for v in valid.values():
            v[0] = True
    elif kind == "mmtta":
        labels, valid = rng.integers(0, K, 9), rng.random(9) < 0.6
        valid[0] = True
    tape, loss = loss_case(model, x2, x3, kind, labels, valid)
    analytic = T.backward(tape, loss)
    params = model["2d", "fast"].affine_params() + model["3d", "fast"].affine_params()

    def f():
        return float(loss_case(model, x2, x3, kind, labels, valid)[1].value.reshape(()))

    numeric = central_difference(f, params)
    return params, analytic, numeric


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@dataclass
class Pinned:
    """The pinned fixture: sensor-swap preset, data seed 0, pretraining seed 0."""

    spec: object
    model: object
    source_test: list
    target: list


def build_pinned() -> Pinned:
    spec = D.preset("sensor-swap", seed=0)
    model = H.pretrain(D.generate(spec, "source"), spec.K, H.PretrainConfig(seed=0))
    return Pinned(spec, model, D.generate(spec, "source-test"), D.generate(spec, "target"))


@pytest.fixture(scope="session")
def pinned() -> Pinned:
    return build_pinned()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
