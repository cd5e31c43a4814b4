"""Finite-difference verification of every backward pass.

Each component builds a deterministic scalar loss over fixed random inputs
with a fixed random weighting (so gradients are generically nonzero) and
compares analytic gradients against central differences. The full-model
check runs the whole pipeline: embedding, one rearrangeable block at k=3
with 4 maps, classification head, cross-entropy.
"""

from __future__ import annotations

import numpy as np

from .heads import Heads, embed, position_loss, symbol_loss
from .model import Model, ModelConfig, SwitchUnit, shuffle_layer, swap_half, switch_layer
from .tensor import (
    DTYPES,
    Parameter,
    Tensor,
    add,
    affine,
    concat_features,
    gather_cells,
    grad_check,
    mul,
    one_minus,
    relu,
    reshape,
    scale,
    scale_by,
    sigmoid,
    split_features,
    sub,
    tanh,
    total,
)

TOLERANCE = {"f64": 1e-4, "f32": 1e-2}


def _weighted(tape, x, weight):
    return total(tape, mul(tape, x, Tensor(weight)))


def _core_op_checks(dtype, h):
    np_dtype = DTYPES[dtype]
    rng = np.random.default_rng(1234)

    def arr(*shape):
        return rng.uniform(-1, 1, size=shape).astype(np_dtype)

    x = Parameter("x", arr(3, 4))
    y = Parameter("y", arr(3, 4))
    w = Parameter("w", arr(4, 3))
    b = Parameter("b", arr(3))
    s = Parameter("s", arr(1))
    cells = Parameter("cells", arr(2, 4, 3))
    table = Parameter("table", arr(5, 3))
    tokens = rng.integers(0, 5, size=(2, 4))
    perm = rng.permutation(4)
    wx = arr(3, 4)
    wc = arr(2, 4, 3)
    wa = arr(3, 3)

    checks = {
        "affine": (lambda t: _weighted(t, affine(t, x, w, b), wa), [x, w, b]),
        "sigmoid": (lambda t: _weighted(t, sigmoid(t, x), wx), [x]),
        "tanh": (lambda t: _weighted(t, tanh(t, x), wx), [x]),
        "relu": (lambda t: _weighted(t, relu(t, x), wx), [x]),
        "add": (lambda t: _weighted(t, add(t, x, y), wx), [x, y]),
        "sub": (lambda t: _weighted(t, sub(t, x, y), wx), [x, y]),
        "mul": (lambda t: _weighted(t, mul(t, x, y), wx), [x, y]),
        "scale": (lambda t: _weighted(t, scale(t, x, 1.3), wx), [x]),
        "one_minus": (lambda t: _weighted(t, one_minus(t, x), wx), [x]),
        "scale_by": (lambda t: _weighted(t, scale_by(t, x, s), wx), [x, s]),
        "concat_split": (
            lambda t: _weighted(
                t, concat_features(t, *reversed(split_features(t, x, 1))),
                np.concatenate([wx[:, 1:], wx[:, :1]], axis=1)),
            [x]),
        "gather_cells": (lambda t: _weighted(t, gather_cells(t, cells, perm), wc), [cells]),
        "reshape": (lambda t: _weighted(t, reshape(t, cells, (2, 12)), wc.reshape(2, 12)),
                    [cells]),
        "embed": (lambda t: _weighted(t, embed(t, tokens, table), wc[:, :, :3].repeat(1, axis=0)),
                  [table]),
    }
    return checks


def _layer_checks(dtype, h):
    np_dtype = DTYPES[dtype]
    rng = np.random.default_rng(4321)
    m = 4
    state = rng.uniform(-1, 1, size=(2, 8, m)).astype(np_dtype)
    ws = rng.uniform(-1, 1, size=(2, 8, m)).astype(np_dtype)
    pair_w = rng.uniform(-1, 1, size=(3, 2 * m)).astype(np_dtype)
    pair = Parameter("pair", rng.uniform(-1, 1, size=(3, 2 * m)).astype(np_dtype))
    s1 = Parameter("s1", rng.uniform(-1, 1, size=(3, m)).astype(np_dtype))
    s2 = Parameter("s2", rng.uniform(-1, 1, size=(3, m)).astype(np_dtype))
    cells_p = Parameter("state", state)

    checks = {
        "shuffle_layer": (
            lambda t: _weighted(t, shuffle_layer(t, cells_p, "left"), ws), [cells_p]),
        "swap_half": (
            lambda t: _weighted(t, concat_features(t, *swap_half(t, s1, s2)),
                                np.concatenate([pair_w[:, :m], pair_w[:, m:]], axis=1)),
            [s1, s2]),
    }
    for variant in ("baseline", "no_swap", "swap_gate", "two_fc", "two_fc_gate"):
        unit = SwitchUnit(f"unit_{variant}", m, variant, np.random.default_rng(7), np_dtype)

        def fn(t, u=unit):
            return _weighted(t, u(t, pair), pair_w)

        checks[f"switch_unit[{variant}]"] = (fn, unit.parameters() + [pair])

    layer_unit = SwitchUnit("layer_unit", m, "baseline", np.random.default_rng(8), np_dtype)
    checks["switch_layer"] = (
        lambda t: _weighted(t, switch_layer(t, cells_p, layer_unit), ws),
        layer_unit.parameters() + [cells_p])

    logits_s = Parameter("logits_s", rng.uniform(-1, 1, size=(2, 4, 3)).astype(np_dtype))
    targets_s = rng.integers(0, 3, size=(2, 4))
    logits_p = Parameter("logits_p", rng.uniform(-1, 1, size=(2, 6)).astype(np_dtype))
    targets_p = rng.integers(0, 6, size=2)
    checks["symbol_loss"] = (lambda t: symbol_loss(t, logits_s, targets_s)[0], [logits_s])
    checks["position_loss"] = (lambda t: position_loss(t, logits_p, targets_p)[0], [logits_p])
    return checks


def full_model_check(dtype: str = "f64", h: float = 1e-4, maps: int = 4, k: int = 3,
                     blocks: int = 1, floor: float = 1e-8):
    """End-to-end gradient check: embed -> network -> head -> cross-entropy.

    Uses a larger step than the per-op checks: through seven gated layers
    some gradient entries shrink to ~1e-8 while the loss stays O(1), so at
    h=1e-5 central differences are dominated by cancellation noise
    (eps*|L|/2h) rather than by any backward-pass defect. h=1e-4 keeps both
    noise and truncation comfortably inside the 1e-4 tolerance.
    """
    rng = np.random.default_rng(99)
    cfg = ModelConfig(maps=maps, blocks=blocks, residual=blocks > 1)
    model = Model(cfg, k, np.random.default_rng(5), dtype=dtype)
    heads = Heads(vocab_size=6, maps=maps, kind="symbols",
                  rng=np.random.default_rng(6), dtype=dtype)
    n = 1 << k
    tokens = rng.integers(0, 6, size=(2, n))
    targets = rng.integers(0, 6, size=(2, n))

    def loss_fn(tape):
        x = heads.embed(tape, tokens)
        out = model.forward(tape, x)
        loss, _ = heads.loss(tape, heads.logits(tape, out), targets)
        return loss

    params = model.parameters() + heads.parameters()
    return grad_check(loss_fn, params, h=h, floor=floor)


def run_gradcheck_suite(dtype: str = "f64"):
    """Worst relative error per component; see TOLERANCE for pass levels.

    f64 probes with h=1e-5 per op and h=1e-4 end to end. f32 cannot resolve
    perturbations that small (the loss quantizes at ~1e-7 relative), so it
    uses h=1e-2 with the error floor raised to match single precision;
    tolerance is relaxed to 1e-2 accordingly.
    """
    if dtype == "f64":
        h, full_h, floor = 1e-5, 1e-4, 1e-8
    else:
        h, full_h, floor = 1e-2, 1e-2, 3e-3
    results = []
    checks = {}
    checks.update(_core_op_checks(dtype, h))
    checks.update(_layer_checks(dtype, h))
    for name, (fn, params) in checks.items():
        worst, _ = grad_check(fn, params, h=h, floor=floor)
        results.append((name, worst))
    worst, _ = full_model_check(dtype=dtype, h=full_h, floor=floor)
    results.append(("full_model[k=3,m=4,B=1]", worst))
    return results
