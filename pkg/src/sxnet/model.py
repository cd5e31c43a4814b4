"""Shuffle-exchange sequence networks.

A model instance for length 2**k alternates switch layers (a learnable
2-to-2 cell function applied to adjacent pairs) with parameter-free shuffle
layers that permute cells by a one-bit rotation of their index. k switch
layers with left shuffles followed by the mirror image with right shuffles
form one rearrangeable block of 2k-1 switch and 2k-2 shuffle stages; blocks
stack with the trailing switch layer of every non-final block dropped and
with learnably scaled residual bridges between corresponding layers of
consecutive blocks.

Weight sharing makes the parameter set independent of sequence length, so
one set of switch units can be instantiated at any k; that aliasing is what
length generalization rides on.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    DTYPES,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    add,
    affine,
    concat_features,
    gather_cells,
    mul,
    one_minus,
    relu,
    reshape,
    scale_by,
    sigmoid,
    split_features,
    tanh,
)

VARIANTS = ("baseline", "no_swap", "swap_gate", "two_fc", "two_fc_gate")
SHARINGS = ("consecutive", "minimal", "none")


class ConfigError(ValueError):
    """A model or run configuration field is invalid."""


@dataclass(frozen=True)
class ModelConfig:
    maps: int
    blocks: int = 1
    variant: str = "baseline"
    sharing: str = "consecutive"
    residual: bool = True
    benes: bool = True              # False: single shuffle direction (ablation)
    residual_sigmoid: bool = False  # squash residual scales through a sigmoid

    def validate(self) -> "ModelConfig":
        if self.maps < 2 or self.maps % 2 != 0:
            raise ConfigError(f"maps must be a positive even integer, got {self.maps}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.sharing not in SHARINGS:
            raise ConfigError(f"sharing must be one of {SHARINGS}, got {self.sharing!r}")
        return self


# ---------------------------------------------------------------------------
# index rotation and shuffle layers


def rotate_index(x: int, k: int, direction: str) -> int:
    """Cyclic one-bit shift of x treated as a k-bit number."""
    n = 1 << k
    if not 0 <= x < n:
        raise ValueError(f"index {x} outside 0..{n - 1}")
    if direction == "left":
        return ((x * 2) % n) + (x >> (k - 1))
    if direction == "right":
        return (x >> 1) + (x % 2) * (n >> 1)
    raise ValueError(f"direction must be 'left' or 'right', got {direction!r}")


@functools.lru_cache(maxsize=None)
def shuffle_permutation(k: int, direction: str) -> np.ndarray:
    """index_map with out[x] = in[rotate(x, k, direction)]."""
    return np.array([rotate_index(x, k, direction) for x in range(1 << k)])


def shuffle_layer(tape: Tape | None, state: Tensor, direction: str) -> Tensor:
    n = state.data.shape[1]
    if n < 1 or n & (n - 1):
        raise ShapeError(f"shuffle_layer: cell count {n} is not a power of two")
    k = n.bit_length() - 1
    if k == 0:
        return state
    return gather_cells(tape, state, shuffle_permutation(k, direction))


def swap_half(tape: Tape | None, s1: Tensor, s2: Tensor) -> tuple[Tensor, Tensor]:
    """Exchange the second feature halves of two equal-width cell tensors."""
    m = s1.data.shape[-1]
    if m != s2.data.shape[-1]:
        raise ShapeError(f"swap_half: widths {m} and {s2.data.shape[-1]} differ")
    if m % 2 != 0:
        raise ConfigError(f"swap_half needs an even feature width, got {m}")
    a, b = split_features(tape, s1, m // 2)
    c, d = split_features(tape, s2, m // 2)
    return concat_features(tape, a, d), concat_features(tape, c, b)


# ---------------------------------------------------------------------------
# switch units

GLOROT_SHAPES = {
    # per-variant learnable tensors of one switch unit, widths in units of m
    "baseline": (("w1r", 2, 2), ("w2r", 2, 2), ("wu", 2, 2), ("w1c", 2, 1), ("w2c", 2, 1)),
    "no_swap": (("w1r", 2, 2), ("w2r", 2, 2), ("wu", 2, 2), ("w1c", 2, 1), ("w2c", 2, 1)),
    "swap_gate": (("w1r", 2, 2), ("w2r", 2, 2), ("wu", 2, 2), ("wg", 2, 2), ("w1c", 2, 1), ("w2c", 2, 1)),
    "two_fc": (("wa", 2, 4), ("wb", 4, 2)),
    "two_fc_gate": (("wa", 2, 4), ("wb", 4, 2), ("wu", 2, 2)),
}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class SwitchUnit:
    """Learnable 2-to-2 cell function over a concatenated pair of width 2m."""

    def __init__(self, key: str, maps: int, variant: str, rng: np.random.Generator, dtype):
        self.key = key
        self.maps = maps
        self.variant = variant
        self.params: dict[str, Parameter] = {}
        for name, fi, fo in GLOROT_SHAPES[variant]:
            bias = f"b{name[1:]}"
            self.params[name] = Parameter(f"{key}.{name}", glorot(rng, fi * maps, fo * maps, dtype))
            self.params[bias] = Parameter(f"{key}.{bias}", np.zeros(fo * maps, dtype=dtype))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def _mix_path(self, tape, s: Tensor) -> Tensor:
        """Default copy path: second feature halves of the pair swapped."""
        m = self.maps
        if self.variant == "no_swap":
            return s
        s1, s2 = split_features(tape, s, m)
        if self.variant == "swap_gate":
            # learned gate choosing straight-through vs the fully swapped pair
            pq = self.params
            swapped = concat_features(tape, s2, s1)
            g = sigmoid(tape, affine(tape, s, pq["wg"], pq["bg"]))
            return add(tape, mul(tape, g, s), mul(tape, one_minus(tape, g), swapped))
        o1, o2 = swap_half(tape, s1, s2)
        return concat_features(tape, o1, o2)

    def __call__(self, tape: Tape | None, s: Tensor, gates: list | None = None) -> Tensor:
        m = self.maps
        if s.data.shape[-1] != 2 * m:
            raise ShapeError(f"switch_unit {self.key}: width {s.data.shape[-1]} != {2 * m}")
        pq = self.params
        if self.variant == "two_fc":
            hidden = relu(tape, affine(tape, s, pq["wa"], pq["ba"]))
            return affine(tape, hidden, pq["wb"], pq["bb"])
        if self.variant == "two_fc_gate":
            hidden = relu(tape, affine(tape, s, pq["wa"], pq["ba"]))
            cand = affine(tape, hidden, pq["wb"], pq["bb"])
        else:
            r1 = sigmoid(tape, affine(tape, s, pq["w1r"], pq["b1r"]))
            r2 = sigmoid(tape, affine(tape, s, pq["w2r"], pq["b2r"]))
            c1 = tanh(tape, affine(tape, mul(tape, r1, s), pq["w1c"], pq["b1c"]))
            c2 = tanh(tape, affine(tape, mul(tape, r2, s), pq["w2c"], pq["b2c"]))
            cand = concat_features(tape, c1, c2)
        u = sigmoid(tape, affine(tape, s, pq["wu"], pq["bu"]))
        if gates is not None:
            gates.append(u)
        mixed = self._mix_path(tape, s)
        return add(tape, mul(tape, u, mixed), mul(tape, one_minus(tape, u), cand))


def switch_unit(tape: Tape | None, pair: Tensor, unit: SwitchUnit) -> Tensor:
    return unit(tape, pair)


def switch_layer(tape: Tape | None, state: Tensor, unit: SwitchUnit,
                 gates: list | None = None) -> Tensor:
    """Apply one unit to every adjacent non-overlapping cell pair."""
    batch, n, m = state.data.shape
    if n % 2 != 0:
        raise ShapeError(f"switch_layer: odd cell count {n}")
    pairs = reshape(tape, state, (batch * n // 2, 2 * m))
    out = unit(tape, pairs, gates)
    return reshape(tape, out, (batch, n, m))


# ---------------------------------------------------------------------------
# layer plans


@dataclass(frozen=True)
class SwitchSlot:
    unit: str
    save: tuple | None = None     # (block, layer): stash this layer's input
    bridge: tuple | None = None   # (block, layer): saved input to add
    scale: str | None = None      # residual scale parameter key


@dataclass(frozen=True)
class ShuffleSlot:
    direction: str


@dataclass(frozen=True)
class LayerPlan:
    k: int
    slots: tuple = field(default_factory=tuple)

    @property
    def switch_count(self) -> int:
        return sum(1 for s in self.slots if isinstance(s, SwitchSlot))

    @property
    def shuffle_count(self) -> int:
        return sum(1 for s in self.slots if isinstance(s, ShuffleSlot))

    def unit_keys(self) -> list[str]:
        seen = []
        for s in self.slots:
            if isinstance(s, SwitchSlot) and s.unit not in seen:
                seen.append(s.unit)
        return seen


def _unit_key(cfg: ModelConfig, block: int, j: int, k: int, alloc_k: int) -> str:
    """Parameter-group key for switch layer j (1-based) of a block."""
    final_block = block == cfg.blocks
    if cfg.sharing == "none":
        return f"b{block}.layer{j}"
    if final_block and j == 2 * k - 1:
        return "final"
    if cfg.sharing == "consecutive":
        return f"b{block}.first" if j <= k - 1 else f"b{block}.second"
    # minimal: per-depth units anchored at alloc_k; layers past the anchor
    # reuse the centermost unit of their half, so longer instances extend
    # the middle of the block while the outer layers keep their own weights
    cap = max(alloc_k - 1, 1)
    if j <= k - 1:
        return f"b{block}.fwd{min(j, cap)}"
    return f"b{block}.rev{min(2 * k - 1 - j, cap)}"


def _scale_key(block: int, j: int, k: int, alloc_k: int, sharing: str) -> str:
    if sharing == "none":
        return f"res.b{block}.layer{j}"
    cap = max(alloc_k - 1, 1)
    if j <= k - 1:
        return f"res.b{block}.fwd{min(j, cap)}"
    return f"res.b{block}.rev{min(2 * k - 1 - j, cap)}"


def layer_plan(cfg: ModelConfig, k: int, alloc_k: int) -> LayerPlan:
    """Slot sequence for one instance of length 2**k."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    slots = []
    for b in range(1, cfg.blocks + 1):
        n_switch = 2 * k - 1 if b == cfg.blocks else 2 * k - 2
        for j in range(1, n_switch + 1):
            save = (b, j) if b < cfg.blocks else None
            bridge = scale = None
            if b > 1 and j <= 2 * k - 2:
                bridge = (b - 1, j)
                scale = _scale_key(b, j, k, alloc_k, cfg.sharing)
            slots.append(SwitchSlot(_unit_key(cfg, b, j, k, alloc_k), save, bridge, scale))
            if j <= 2 * k - 2:
                direction = "left" if (j <= k - 1 or not cfg.benes) else "right"
                slots.append(ShuffleSlot(direction))
    return LayerPlan(k=k, slots=tuple(slots))


# ---------------------------------------------------------------------------
# the model


class Model:
    """Parameter store plus per-length layer plans sharing those parameters.

    alloc_k anchors the parameter allocation; instances may be built for any
    k when the sharing scheme permits it (any k for consecutive/minimal,
    exactly alloc_k for none).
    """

    def __init__(self, config: ModelConfig, alloc_k: int, rng: np.random.Generator,
                 dtype: str = "f32"):
        config.validate()
        if alloc_k < 1:
            raise ConfigError(f"alloc_k must be >= 1, got {alloc_k}")
        self.config = config
        self.alloc_k = alloc_k
        self.dtype = dtype
        np_dtype = DTYPES[dtype]
        self.units: dict[str, SwitchUnit] = {}
        self.scales: dict[str, Parameter] = {}
        self._plans: dict[int, LayerPlan] = {}

        plan = layer_plan(config, alloc_k, alloc_k)
        for slot in plan.slots:
            if not isinstance(slot, SwitchSlot):
                continue
            if slot.unit not in self.units:
                self.units[slot.unit] = SwitchUnit(slot.unit, config.maps, config.variant,
                                                   rng, np_dtype)
            if slot.scale is not None and config.residual and slot.scale not in self.scales:
                init = -np.log(9.0) if config.residual_sigmoid else 0.1  # both gate to 0.1
                self.scales[slot.scale] = Parameter(
                    slot.scale, np.full((1,), init, dtype=np_dtype))
        self._plans[alloc_k] = plan

    def plan(self, k: int) -> LayerPlan:
        if k not in self._plans:
            if self.config.sharing == "none" and k != self.alloc_k:
                raise ConfigError(
                    f"sharing='none' permits only the allocated length 2**{self.alloc_k}")
            self._plans[k] = layer_plan(self.config, k, self.alloc_k)
        return self._plans[k]

    def parameters(self) -> list[Parameter]:
        out = []
        for unit in self.units.values():
            out.extend(unit.parameters())
        out.extend(self.scales.values())
        return out

    def forward(self, tape: Tape | None, state: Tensor,
                gates: list | None = None) -> Tensor:
        batch, n, m = state.data.shape
        if m != self.config.maps:
            raise ShapeError(f"forward: state has {m} maps, model built for {self.config.maps}")
        if n < 2 or n & (n - 1):
            raise ShapeError(f"forward: cell count {n} is not a power of two >= 2")
        k = n.bit_length() - 1
        plan = self.plan(k)
        saved: dict[tuple, Tensor] = {}
        for slot in plan.slots:
            if isinstance(slot, ShuffleSlot):
                state = shuffle_layer(tape, state, slot.direction)
                continue
            if slot.bridge is not None and self.config.residual:
                sc = self.scales[slot.scale]
                gate = sigmoid(tape, sc) if self.config.residual_sigmoid else sc
                state = add(tape, state, scale_by(tape, saved[slot.bridge], gate))
            if slot.save is not None:
                saved[slot.save] = state
            state = switch_layer(tape, state, self.units[slot.unit], gates)
        return state


def build_model(config: ModelConfig, k: int, seed: int = 0, alloc_k: int | None = None,
                dtype: str = "f32") -> Model:
    """Allocate parameters (anchored at alloc_k, default k) and plan length 2**k."""
    model = Model(config, alloc_k if alloc_k is not None else k,
                  np.random.default_rng(seed), dtype=dtype)
    model.plan(k)
    return model


def forward(model: Model, state: Tensor, tape: Tape | None = None) -> Tensor:
    return model.forward(tape, state)


def count_parameters(config: ModelConfig, k: int) -> int:
    """Exact learnable scalar count of the core network for length 2**k."""
    model = Model(config, k, np.random.default_rng(0))
    return sum(p.data.size for p in model.parameters())
