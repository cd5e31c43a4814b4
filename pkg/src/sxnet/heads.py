"""Input embedding, power-of-two padding, and the two output heads.

Token id 0 is the pad symbol everywhere. Sequence tasks use a per-position
linear classification head with softmax cross-entropy over every position,
padding included (targets carry explicit pad ids, so the net has to learn
to keep blanks blank). The pointer head maps each position to one scalar
and applies softmax over positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import DTYPES, Parameter, ShapeError, Tape, Tensor, _accumulate, affine, reshape

PAD_ID = 0


@dataclass(frozen=True)
class Vocabulary:
    size: int
    pad_id: int = PAD_ID

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary needs size >= 2, got {self.size}")


def pad_to_pow2(tokens, target_len: int, mode: str = "fixed_start", rng=None):
    """Place tokens in a zero-filled buffer of length target_len.

    Returns (padded array, offset). fixed_start pins the sequence at 0;
    random_position draws the offset uniformly over the valid range.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if target_len & (target_len - 1) or target_len < 1:
        raise ValueError(f"target length {target_len} is not a power of two")
    if len(tokens) > target_len:
        raise ValueError(f"sequence of length {len(tokens)} does not fit {target_len}")
    if mode == "fixed_start":
        offset = 0
    elif mode == "random_position":
        if rng is None:
            raise ValueError("random_position padding needs an rng")
        offset = int(rng.integers(0, target_len - len(tokens) + 1))
    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    out = np.zeros(target_len, dtype=np.int64)
    out[offset:offset + len(tokens)] = tokens
    return out, offset


def embed(tape: Tape | None, tokens: np.ndarray, table: Parameter) -> Tensor:
    """Row lookup [batch, n] -> [batch, n, m]; grads accumulate per row."""
    tokens = np.asarray(tokens)
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= table.data.shape[0]:
        raise ValueError(
            f"token id outside embedding table of size {table.data.shape[0]}")
    out = Tensor(table.data[tokens])
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            gt = np.zeros_like(table.data)
            np.add.at(gt, tokens.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _accumulate(table, gt)
        tape.record(backward)
    return out


def symbol_logits(tape: Tape | None, state: Tensor, w: Parameter, b: Parameter) -> Tensor:
    """Shared per-position affine map [batch, n, m] -> [batch, n, classes]."""
    batch, n, m = state.data.shape
    flat = reshape(tape, state, (batch * n, m))
    out = affine(tape, flat, w, b)
    return reshape(tape, out, (batch, n, w.data.shape[1]))


def position_logits(tape: Tape | None, state: Tensor, w: Parameter) -> Tensor:
    """Per-position scalar [batch, n, m] -> [batch, n].

    No bias: softmax over positions is invariant to constant shifts, so a
    bias would be a permanently gradient-dead parameter.
    """
    batch, n, m = state.data.shape
    flat = reshape(tape, state, (batch * n, m))
    out = affine(tape, flat, w, Tensor(np.zeros(1, dtype=state.data.dtype)))
    return reshape(tape, out, (batch, n))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def symbol_loss(tape: Tape | None, logits: Tensor, targets: np.ndarray,
                mask_padding: bool = False):
    """Mean per-position cross-entropy and argmax accuracy.

    Padding positions (target 0) count like any other unless mask_padding.
    """
    targets = np.asarray(targets)
    batch, n, classes = logits.data.shape
    if targets.shape != (batch, n):
        raise ShapeError(f"symbol_loss: targets {targets.shape} vs logits {logits.data.shape}")
    if targets.min() < 0 or targets.max() >= classes:
        raise ValueError(f"target id outside 0..{classes - 1}")
    logp = _log_softmax(logits.data.astype(np.float64))
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    weights = np.ones((batch, n)) if not mask_padding else (targets != PAD_ID).astype(np.float64)
    denom = max(weights.sum(), 1.0)
    loss_val = -(picked * weights).sum() / denom
    out = Tensor(np.asarray(loss_val, dtype=logits.data.dtype))
    pred = logits.data.argmax(axis=-1)
    accuracy = float(((pred == targets) * weights).sum() / denom)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            soft = np.exp(logp)
            soft[np.arange(batch)[:, None], np.arange(n)[None, :], targets] -= 1.0
            soft *= (weights / denom)[..., None]
            _accumulate(logits, (soft * g.reshape(())).astype(logits.data.dtype))
        tape.record(backward)
    return out, accuracy


def sequence_accuracy(logits_data: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of samples with every position predicted correctly."""
    pred = logits_data.argmax(axis=-1)
    return float((pred == targets).all(axis=-1).mean())


def position_loss(tape: Tape | None, logits: Tensor, target_positions: np.ndarray):
    """Softmax-over-positions cross-entropy and argmax-position accuracy."""
    targets = np.asarray(target_positions)
    batch, n = logits.data.shape
    if targets.shape != (batch,):
        raise ShapeError(f"position_loss: targets {targets.shape} vs logits {logits.data.shape}")
    if targets.min() < 0 or targets.max() >= n:
        raise ValueError(f"target position outside 0..{n - 1}")
    logp = _log_softmax(logits.data.astype(np.float64))
    loss_val = -logp[np.arange(batch), targets].mean()
    out = Tensor(np.asarray(loss_val, dtype=logits.data.dtype))
    accuracy = float((logits.data.argmax(axis=-1) == targets).mean())
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return
            soft = np.exp(logp)
            soft[np.arange(batch), targets] -= 1.0
            soft /= batch
            _accumulate(logits, (soft * g.reshape(())).astype(logits.data.dtype))
        tape.record(backward)
    return out, accuracy


class Heads:
    """Embedding table plus the output head for one task family."""

    def __init__(self, vocab_size: int, maps: int, kind: str, rng: np.random.Generator,
                 dtype: str = "f32"):
        if kind not in ("symbols", "position"):
            raise ValueError(f"unknown head kind {kind!r}")
        np_dtype = DTYPES[dtype]
        self.vocab = Vocabulary(vocab_size)
        self.kind = kind
        bound = np.sqrt(6.0 / (vocab_size + maps))
        self.table = Parameter(
            "embed.table", rng.uniform(-bound, bound, size=(vocab_size, maps)).astype(np_dtype))
        out_dim = vocab_size if kind == "symbols" else 1
        bound = np.sqrt(6.0 / (maps + out_dim))
        self.out_w = Parameter(
            "head.w", rng.uniform(-bound, bound, size=(maps, out_dim)).astype(np_dtype))
        self.out_b = Parameter("head.b", np.zeros(out_dim, dtype=np_dtype)) \
            if kind == "symbols" else None

    def parameters(self) -> list[Parameter]:
        out = [self.table, self.out_w]
        if self.out_b is not None:
            out.append(self.out_b)
        return out

    def embed(self, tape, tokens):
        return embed(tape, tokens, self.table)

    def logits(self, tape, state):
        if self.kind == "symbols":
            return symbol_logits(tape, state, self.out_w, self.out_b)
        return position_logits(tape, state, self.out_w)

    def loss(self, tape, logits, targets, mask_padding=False):
        if self.kind == "symbols":
            return symbol_loss(tape, logits, targets, mask_padding=mask_padding)
        return position_loss(tape, logits, targets)
