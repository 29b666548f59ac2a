import re
import sys

import numpy as np
import pytest

from attentive_gnn.attention import AttentionConfig, init_params
from attentive_gnn.episodes import generate_synthetic, sample_task
from attentive_gnn.training import frozen


def replace_param(params, name, tensor):
    """Constant copy of ``params`` with the tensor called ``name`` swapped for ``tensor``."""
    p = frozen(params)
    if name == "fusion.w1":
        p.fusion_w1 = tensor
    elif name == "fusion.w2":
        p.fusion_w2 = tensor
    elif name == "readout.weight":
        p.readout_w = tensor
    elif name == "readout.bias":
        p.readout_b = tensor
    else:
        m = re.fullmatch(r"layer(\d+)\.(?:mlp(\d+)\.(weight|bias)|W)", name)
        lp = p.layers[int(m.group(1)) - 1]
        if m.group(2) is None:
            lp.W = tensor
        elif m.group(3) == "weight":
            lp.mlp_weights[int(m.group(2))] = tensor
        else:
            lp.mlp_biases[int(m.group(2))] = tensor
    return p


@pytest.fixture
def small_setup():
    """V=6 (3-way 1-shot, one query per class), d=4, m=3, K=2."""
    ds = generate_synthetic(6, 10, 4, 2.0, 1.0, seed=3)
    task = sample_task(ds, 3, 1, 1, "transductive", "uniform", seed=11)
    cfg = AttentionConfig(alpha=0.5, beta=0.7, layers=2, hidden_m=3)
    params = init_params(cfg, 4, 3, np.random.default_rng(5))
    return task, params, cfg


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
