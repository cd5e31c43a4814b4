"""Seeded generators for the algorithmic task suite.

Encodings (pad is always token 0):
  dup / copy / rev / sort / select: symbols drawn from 1..12
  add: little-endian binary digits, '0'->1, '1'->2, '+'->3;
       input = digits(a) ++ sep ++ digits(b), target = digits(a+b) from 0
  mul: same digits with 'x'->4 as separator, target = digits(a*b)

Little-endian digit order lets carries travel toward increasing positions.
Every generator is a pure function of (size, rng) and returns a padded
sample; the curriculum widens the sampled raw size linearly over the first
third of training and assigns each sample the smallest power-of-two
instance its encoding fits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .heads import pad_to_pow2

ALPHABET = 12
D0, D1, ADD_SEP, MUL_SEP = 1, 2, 3, 4


def next_pow2(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length() if n > 1 else 1


@dataclass
class TaskSample:
    input: np.ndarray
    target: Optional[np.ndarray]
    target_position: Optional[int]
    raw_length: int


@dataclass(frozen=True)
class TaskSpec:
    name: str
    vocab_size: int
    kind: str                      # "symbols" | "position"
    min_size: int
    pad_mode: str                  # fixed_start | random_position
    gen: Callable[..., TaskSample]
    encoded_len: Callable[[int], int]


def _pad_pair(inp, tgt, size_hint, pad_len):
    if pad_len is None:
        pad_len = next_pow2(max(len(inp), len(tgt)))
    pi, _ = pad_to_pow2(inp, pad_len)
    pt, _ = pad_to_pow2(tgt, pad_len)
    return TaskSample(pi, pt, None, size_hint)


def gen_duplication(half_len: int, rng, pad_len: int | None = None) -> TaskSample:
    symbols = rng.integers(1, ALPHABET + 1, size=half_len)
    target = np.concatenate([symbols, symbols])
    return _pad_pair(symbols, target, 2 * half_len, pad_len)


def gen_copy(length: int, rng, pad_len: int | None = None) -> TaskSample:
    symbols = rng.integers(1, ALPHABET + 1, size=length)
    return _pad_pair(symbols, symbols.copy(), length, pad_len)


def gen_reversal(length: int, rng, pad_len: int | None = None) -> TaskSample:
    symbols = rng.integers(1, ALPHABET + 1, size=length)
    return _pad_pair(symbols, symbols[::-1].copy(), length, pad_len)


def gen_sort(length: int, rng, pad_len: int | None = None) -> TaskSample:
    symbols = rng.integers(1, ALPHABET + 1, size=length)
    return _pad_pair(symbols, np.sort(symbols), length, pad_len)


def _digits_to_int(digits) -> int:
    return sum(int(d) << i for i, d in enumerate(digits))


def _int_to_tokens(value: int) -> np.ndarray:
    n = max(value.bit_length(), 1)
    return np.array([((value >> i) & 1) + 1 for i in range(n)], dtype=np.int64)


def _gen_arith(total_len: int, rng, sep: int, op, pad_len):
    if total_len < 3:
        raise ValueError(f"arithmetic tasks need size >= 3, got {total_len}")
    bound = (total_len - 1) // 2
    da = int(rng.integers(1, bound + 1))
    db = int(rng.integers(1, bound + 1))
    a_digits = rng.integers(0, 2, size=da)
    b_digits = rng.integers(0, 2, size=db)
    inp = np.concatenate([a_digits + 1, [sep], b_digits + 1]).astype(np.int64)
    result = op(_digits_to_int(a_digits), _digits_to_int(b_digits))
    return _pad_pair(inp, _int_to_tokens(result), len(inp), pad_len)


def gen_binary_add(total_len: int, rng, pad_len: int | None = None) -> TaskSample:
    return _gen_arith(total_len, rng, ADD_SEP, lambda a, b: a + b, pad_len)


def gen_binary_mul(total_len: int, rng, pad_len: int | None = None) -> TaskSample:
    return _gen_arith(total_len, rng, MUL_SEP, lambda a, b: a * b, pad_len)


def gen_selection(length: int, rng, pad_len: int | None = None) -> TaskSample:
    """Pointer task: trailing query repeats a symbol unique in the body."""
    if length < 3:
        raise ValueError(f"selection needs size >= 3, got {length}")
    body_len = length - 1
    answer = int(rng.integers(1, ALPHABET + 1))
    pos = int(rng.integers(0, body_len))
    others = [s for s in range(1, ALPHABET + 1) if s != answer]
    body = rng.choice(others, size=body_len).astype(np.int64)
    body[pos] = answer
    inp = np.concatenate([body, [answer]])
    if pad_len is None:
        pad_len = next_pow2(length)
    padded, offset = pad_to_pow2(inp, pad_len, mode="random_position", rng=rng)
    return TaskSample(padded, None, pos + offset, length)


TASKS = {
    "dup": TaskSpec("dup", ALPHABET + 1, "symbols", 1, "fixed_start",
                    gen_duplication, lambda s: 2 * s),
    "copy": TaskSpec("copy", ALPHABET + 1, "symbols", 1, "fixed_start",
                     gen_copy, lambda s: s),
    "rev": TaskSpec("rev", ALPHABET + 1, "symbols", 1, "fixed_start",
                    gen_reversal, lambda s: s),
    "sort": TaskSpec("sort", ALPHABET + 1, "symbols", 1, "fixed_start",
                     gen_sort, lambda s: s),
    "add": TaskSpec("add", 4, "symbols", 3, "fixed_start",
                    gen_binary_add, lambda s: s),
    "mul": TaskSpec("mul", 5, "symbols", 3, "fixed_start",
                    gen_binary_mul, lambda s: s),
    "select": TaskSpec("select", ALPHABET + 1, "position", 3, "random_position",
                       gen_selection, lambda s: s),
}


def max_size_for(spec: TaskSpec, pad_len: int) -> int:
    size = pad_len
    while size > spec.min_size and spec.encoded_len(size) > pad_len:
        size -= 1
    if spec.encoded_len(size) > pad_len:
        raise ValueError(f"{spec.name}: no size fits padded length {pad_len}")
    return size


def curriculum_next(spec: TaskSpec, step: int, rng, max_size: int,
                    warm_steps: int) -> tuple[int, int]:
    """Draw a raw size from a range that widens over warm_steps.

    Returns (size, padded length), the padded length being the smallest
    power of two the encoded sample fits.
    """
    lo = spec.min_size
    if warm_steps > 0:
        frac = min(step / warm_steps, 1.0)
    else:
        frac = 1.0
    hi = lo + int(round(frac * (max_size - lo)))
    size = int(rng.integers(lo, hi + 1))
    return size, next_pow2(spec.encoded_len(size))


def make_batch(spec: TaskSpec, size: int, pad_len: int, batch: int, rng):
    """Stack `batch` fresh samples at one raw size and padded length."""
    samples = [spec.gen(size, rng, pad_len) for _ in range(batch)]
    inputs = np.stack([s.input for s in samples])
    if spec.kind == "symbols":
        targets = np.stack([s.target for s in samples])
    else:
        targets = np.array([s.target_position for s in samples])
    return inputs, targets


def eval_sizes(spec: TaskSpec, pad_len: int) -> tuple[int, int]:
    """Raw-size range whose encodings land exactly in this length class."""
    hi = max_size_for(spec, pad_len)
    lo = hi
    while lo > spec.min_size and spec.encoded_len(lo - 1) > pad_len // 2:
        lo -= 1
    return lo, hi


def make_eval_batch(spec: TaskSpec, pad_len: int, batch: int, rng):
    """Samples of this length class (encoding in (pad_len/2, pad_len])."""
    lo, hi = eval_sizes(spec, pad_len)
    sizes = rng.integers(lo, hi + 1, size=batch)
    samples = [spec.gen(int(s), rng, pad_len) for s in sizes]
    inputs = np.stack([s.input for s in samples])
    if spec.kind == "symbols":
        targets = np.stack([s.target for s in samples])
    else:
        targets = np.array([s.target_position for s in samples])
    return inputs, targets


def dump_samples(spec: TaskSpec, sizes, rng, fh) -> None:
    """One sample per line: `input <ids> target <ids>` (or target_position)."""
    for size in sizes:
        s = spec.gen(int(size), rng)
        fields = ["input", " ".join(str(t) for t in s.input)]
        if spec.kind == "symbols":
            fields += ["target", " ".join(str(t) for t in s.target)]
        else:
            fields += ["target_position", str(s.target_position)]
        fh.write(" ".join(fields) + "\n")
