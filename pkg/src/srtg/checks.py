"""Standard gradient-verification battery.

Each check compares analytic gradients against central finite differences
(eps 1e-5) and reports the max relative error. Gated units run with the gate
bypassed so the finite-difference surface stays smooth; the hard open/close
routing is exercised separately by the consistency tests.
"""

from __future__ import annotations

import numpy as np

from srtg import tensor as tt
from srtg.blocks import BlockSpec, build_block
from srtg.gate import LstmState, init_lstm_params, lstm_cell_step, srtg_unit
from srtg.tensor import Tensor, grad_check

__all__ = ["CHECK_TOLERANCES", "run_checks"]

CHECK_TOLERANCES = {
    "primitives": 1e-5,
    "lstm_layer": 1e-4,
    "srtg_unit_multiplicative": 1e-4,
    "srtg_unit_additive": 1e-4,
    "simple_block_final": 1e-4,
    "bottleneck_block_final": 1e-4,
}


def _check_primitives():
    rng = np.random.default_rng(0)
    worst = 0.0
    x = Tensor(rng.standard_normal((1, 2, 3, 3, 3)))
    w = Tensor(rng.standard_normal((2, 2, 3, 3, 3)) * 0.4, requires_grad=True)
    b = Tensor(rng.standard_normal(2) * 0.1, requires_grad=True)
    worst = max(
        worst,
        grad_check(lambda: tt.sum_all(tt.tanh(tt.conv3d(x, w, b, padding=(1, 1, 1)))), [w, b]),
    )
    v = Tensor(rng.standard_normal((1, 3, 2, 2, 2)) * 0.5, requires_grad=True)
    worst = max(worst, grad_check(lambda: tt.sum_all(tt.sigmoid(tt.spatial_avg_pool(v))), [v]))
    m = Tensor(rng.standard_normal((3, 4)) * 0.5, requires_grad=True)
    worst = max(
        worst, grad_check(lambda: tt.sum_all(tt.mul(tt.softmax_last(m), m)), [m])
    )
    return worst


def _check_lstm_layer():
    # one layer, T=3, C=2, unrolled by hand
    rng = np.random.default_rng(1)
    params = init_lstm_params(2, num_layers=1, rng=rng)
    xs = Tensor(rng.standard_normal((1, 3, 2)))

    def f():
        state = LstmState(h=Tensor(np.zeros((1, 2))), c=Tensor(np.zeros((1, 2))))
        acc = None
        for t in range(3):
            h, state = lstm_cell_step(tt.time_slice(xs, t), state, params.layers[0])
            s = tt.sum_all(h)
            acc = s if acc is None else tt.add(acc, s)
        return acc

    return grad_check(f, [p for _, p in params.named("l")])


def _check_srtg_unit(mode):
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 3, 4, 2, 2)))
    params = init_lstm_params(3, rng=np.random.default_rng(3))

    def f():
        out, _ = srtg_unit(x, params, gate_active=False, mode=mode)
        return tt.sum_all(tt.tanh(out))

    return grad_check(f, [p for _, p in params.named("l")])


def _check_block(depth_kind):
    rng = np.random.default_rng(4)
    cin = 3 if depth_kind == "simple" else 4
    spec = BlockSpec(
        depth_kind=depth_kind,
        conv_kind="full_3d",
        placement="final",
        in_channels=cin,
        out_channels=cin,
        stride=(1, 1, 1),
        fusion_mode="multiplicative",
        gate_active=False,
    )
    block = build_block(spec, np.random.default_rng(5))
    x = Tensor(rng.standard_normal((1, cin, 3, 3, 3)))
    params = [p for _, p in block.named_params("b")]

    def f():
        return tt.mean_all(tt.tanh(block.forward(x, training=True, gate_log=[])))

    return grad_check(f, params)


def run_checks(targets=None) -> dict[str, float]:
    """Run the named checks (default: all); returns {name: max rel error}."""
    runners = {
        "primitives": _check_primitives,
        "lstm_layer": _check_lstm_layer,
        "srtg_unit_multiplicative": lambda: _check_srtg_unit("multiplicative"),
        "srtg_unit_additive": lambda: _check_srtg_unit("additive"),
        "simple_block_final": lambda: _check_block("simple"),
        "bottleneck_block_final": lambda: _check_block("bottleneck"),
    }
    names = list(runners) if not targets else list(targets)
    results = {}
    for name in names:
        if name not in runners:
            raise ValueError(f"unknown grad-check target {name!r}")
        results[name] = runners[name]()
    return results
