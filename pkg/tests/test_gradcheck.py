import numpy as np
import pytest

from contextcluster import gradcheck, tensor as T


@pytest.fixture(scope="module")
def report():
    return gradcheck.run()


def test_every_check_passes(report):
    bad = {k: v for k, v in report.items() if not v < 1e-4}
    assert not bad


def test_registry_covers_engine_and_block(report):
    must = {"matmul", "add", "mul", "div", "sigmoid", "gelu", "exp", "log", "sum", "mean",
            "max", "concat", "split", "reshape", "transpose", "gather_rows", "scatter_rows",
            "broadcast_to", "clip", "l2_normalize", "group_norm", "cross_entropy",
            "aggregate", "dispatch", "cluster_mix", "reduce_points", "context_cluster_op",
            "coc_block"}
    assert must <= set(report)


def bad_sigmoid(t):
    y = 1.0 / (1.0 + np.exp(-t.data))
    return T._make(y, (t,), lambda g: (g * y,), "sigmoid")  # missing (1 - y)


def test_detects_wrong_backward(monkeypatch):
    monkeypatch.setattr(gradcheck, "CHECKS", dict(gradcheck.CHECKS))
    gradcheck.op_check("bad_sigmoid", bad_sigmoid, (3, 4))
    assert gradcheck.run(["bad_sigmoid"])["bad_sigmoid"] > 1e-2
