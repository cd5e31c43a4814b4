"""Training loop: Adam, curriculum over shared-weight instances, eval, checkpoints.

One logical thread owns the parameters. Each step draws a raw sample size
from the curriculum, pads to the smallest power-of-two instance it fits
(floored at min_len so the shared units actually train), and runs
forward/backward on that instance; instances for every length alias the
same parameter store, so gradients from any length accumulate into the
same buffers and a longer instance is runnable the moment it is planned.

Checkpoints are a single binary file: magic ``SXNC``, version u32 LE, a
length-prefixed JSON header (run config plus (name, dtype, shape) per
tensor in fixed order), raw little-endian tensor payloads in header order,
per-tensor Adam first/second moments in the same order, then a
length-prefixed JSON rng state. Round trips are byte-identical.
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, replace

import numpy as np

from .heads import Heads
from .model import ConfigError, Model, ModelConfig
from .tasks import TASKS, curriculum_next, make_batch, make_eval_batch, max_size_for
from .tensor import Parameter, Tape
from .tensor import add as tensor_add
from .tensor import mul as tensor_mul
from .tensor import one_minus as tensor_one_minus
from .tensor import scale as tensor_scale
from .tensor import total as tensor_total

MAGIC = b"SXNC"
VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss or a gradient went non-finite; the last checkpoint is retained."""


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, truncated, or shaped wrong."""


@dataclass(frozen=True)
class TrainConfig:
    task: str
    model: ModelConfig
    train_len: int = 16
    min_len: int = 8
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 5.0              # 0 disables gradient-norm clipping
    seed: int = 1
    eval_lens: tuple = ()          # default: trained, 2x, 4x, 8x
    eval_every: int = 250
    eval_samples: int = 64
    log_every: int = 50
    checkpoint_every: int = 0      # 0: only at the end
    fixed_size: bool = False       # skip the curriculum, train at max size only
    pad_jitter: float = 0.0        # P(repad a batch to a random larger instance)
    gate_pressure: float = 0.0     # weight of the update-gate saturation penalty
    mask_padding: bool = False
    dtype: str = "f32"

    def validate(self) -> "TrainConfig":
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {sorted(TASKS)}")
        self.model.validate()
        if self.train_len < 2 or self.train_len & (self.train_len - 1):
            raise ConfigError(f"train_len must be a power of two >= 2, got {self.train_len}")
        if self.min_len < 1 or self.min_len & (self.min_len - 1):
            raise ConfigError(f"min_len must be a power of two, got {self.min_len}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        for L in self.resolved_eval_lens():
            if L < 2 or L & (L - 1):
                raise ConfigError(f"eval length {L} is not a power of two")
        return self

    def resolved_eval_lens(self) -> tuple:
        if self.eval_lens:
            return tuple(self.eval_lens)
        return (self.train_len, 2 * self.train_len, 4 * self.train_len, 8 * self.train_len)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    for p in params:
        total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor
    return norm


def adam_step(params, state: AdamState) -> None:
    """Standard Adam update with bias correction; zeroes gradients after."""
    for p in params:
        if not np.isfinite(p.grad).all():
            raise TrainingDiverged(f"non-finite gradient in {p.name}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()


# ---------------------------------------------------------------------------
# train state


@dataclass
class TrainState:
    config: TrainConfig
    model: Model
    heads: Heads
    adam: AdamState
    rng: np.random.Generator
    step: int = 0

    def parameters(self) -> list[Parameter]:
        return self.model.parameters() + self.heads.parameters()


def instantiate_shared(model: Model, lengths) -> dict:
    """Layer plans per length, all aliasing the model's parameter store."""
    lengths = sorted(set(int(x) for x in lengths))
    if model.config.sharing == "none" and len(lengths) > 1:
        raise ConfigError("sharing='none' cannot instantiate multiple lengths")
    return {L: model.plan(L.bit_length() - 1) for L in lengths}


def init_state(config: TrainConfig) -> TrainState:
    config.validate()
    spec = TASKS[config.task]
    k = config.train_len.bit_length() - 1
    model = Model(config.model, k, np.random.default_rng([config.seed, 0]),
                  dtype=config.dtype)
    heads = Heads(spec.vocab_size, config.model.maps, spec.kind,
                  np.random.default_rng([config.seed, 1]), dtype=config.dtype)
    adam = AdamState(model.parameters() + heads.parameters(),
                     lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    return TrainState(config, model, heads, adam,
                      np.random.default_rng([config.seed, 2]), step=0)


def _forward_loss(state: TrainState, tape, inputs, targets):
    x = state.heads.embed(tape, inputs)
    gates = [] if state.config.gate_pressure > 0 else None
    out = state.model.forward(tape, x, gates=gates)
    logits = state.heads.logits(tape, out)
    loss, accuracy = state.heads.loss(tape, logits, targets,
                                      mask_padding=state.config.mask_padding)
    if gates:
        # 4*u*(1-u) peaks at the undecided gate value 0.5; pressing it down
        # pushes routing decisions toward discrete, which is what survives
        # instantiation at depths never trained
        count = sum(g.data.size for g in gates)
        penalty = None
        for g in gates:
            term = tensor_total(tape, tensor_mul(tape, g, tensor_one_minus(tape, g)))
            penalty = term if penalty is None else tensor_add(tape, penalty, term)
        loss = tensor_add(tape, loss,
                          tensor_scale(tape, penalty, 4.0 * state.config.gate_pressure / count))
    return loss, accuracy, logits


def train_step(state: TrainState, inputs, targets) -> tuple[float, float]:
    tape = Tape()
    loss, accuracy, _ = _forward_loss(state, tape, inputs, targets)
    loss_val = float(loss.data)
    if not math.isfinite(loss_val):
        raise TrainingDiverged(f"non-finite loss at step {state.step + 1}")
    tape.backward(loss)
    params = state.parameters()
    clip_gradients(params, state.config.clip)
    adam_step(params, state.adam)
    state.step += 1
    return loss_val, accuracy


def prediction_accuracy(pred: np.ndarray, targets: np.ndarray, kind: str):
    """(per-position accuracy, whole-sample accuracy) for one batch."""
    if kind == "symbols":
        return float((pred == targets).mean()), float((pred == targets).all(axis=-1).mean())
    hit = float((pred == targets).mean())
    return hit, hit


def evaluate(state: TrainState, length: int, n_samples: int = 64, seed: int = 0) -> dict:
    """Accuracy on fresh seeded samples of one length class; no mutation."""
    spec = TASKS[state.config.task]
    rng = np.random.default_rng([seed, length, 0x5EED])
    per_symbol_hits = 0.0
    whole_hits = 0.0
    seen = 0
    while seen < n_samples:
        b = min(64, n_samples - seen)
        inputs, targets = make_eval_batch(spec, length, b, rng)
        x = state.heads.embed(None, inputs)
        out = state.model.forward(None, x)
        logits = state.heads.logits(None, out)
        per, whole = prediction_accuracy(logits.data.argmax(axis=-1), targets, spec.kind)
        per_symbol_hits += per * b
        whole_hits += whole * b
        seen += b
    return {"accuracy": per_symbol_hits / n_samples, "whole_seq": whole_hits / n_samples}


def _eval_record(state: TrainState, step: int) -> dict:
    return {
        str(L): round(evaluate(state, L, state.config.eval_samples,
                               seed=state.config.seed * 1_000_003 + step)["accuracy"], 6)
        for L in state.config.resolved_eval_lens()
    }


def train(config: TrainConfig, resume: str | None = None, out_dir: str | None = None,
          stop_when=None):
    """Run the configured task; returns (state, metrics list).

    stop_when, if given, is called with each eval record ({length: acc})
    and may return True to finish early; the step budget still caps the run.
    """
    config.validate()
    if resume is not None:
        state = load_checkpoint(resume, expect_model=config.model)
        state.config = config
    else:
        state = init_state(config)
    spec = TASKS[config.task]
    max_size = max_size_for(spec, config.train_len)
    warm_steps = math.ceil(config.steps / 3)
    metrics: list[dict] = []
    metrics_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "a")

    def emit(record):
        metrics.append(record)
        if metrics_fh:
            metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
            metrics_fh.flush()

    def checkpoint():
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "checkpoint.sxnc"), state)

    last_wall = time.perf_counter()
    try:
        while state.step < config.steps:
            if config.fixed_size or spec.pad_mode == "random_position":
                size, pad = max_size, config.train_len
            else:
                size, pad = curriculum_next(spec, state.step, state.rng, max_size, warm_steps)
                pad = min(max(pad, min(config.min_len, config.train_len)), config.train_len)
                if config.pad_jitter > 0 and float(state.rng.random()) < config.pad_jitter:
                    # break the content-size/instance-size binding: repad to a
                    # random larger instance so rules must be length-uniform
                    choices = [p2 for p2 in (pad, 2 * pad, 4 * pad, 8 * pad)
                               if p2 <= config.train_len]
                    pad = int(state.rng.choice(choices))
            inputs, targets = make_batch(spec, size, pad, config.batch, state.rng)
            loss, accuracy = train_step(state, inputs, targets)
            step = state.step
            is_eval = config.eval_every > 0 and (step % config.eval_every == 0
                                                 or step == config.steps)
            if is_eval or (config.log_every > 0 and step % config.log_every == 0):
                now = time.perf_counter()
                record = {
                    "step": step,
                    "task": config.task,
                    "train_length": pad,
                    "loss": round(loss, 6),
                    "accuracy": round(accuracy, 6),
                    "eval": _eval_record(state, step) if is_eval else {},
                    "wall_ms": round((now - last_wall) * 1e3, 3),
                }
                last_wall = now
                emit(record)
                if is_eval and stop_when is not None and stop_when(record["eval"]):
                    break
            if config.checkpoint_every > 0 and step % config.checkpoint_every == 0:
                checkpoint()
        checkpoint()
    finally:
        if metrics_fh:
            metrics_fh.close()
    return state, metrics


def train_seeds(config: TrainConfig, seeds, out_dir=None, stop_when=None):
    """Multi-seed mode: one full run per seed, shared configuration."""
    results = []
    for seed in seeds:
        sub = os.path.join(out_dir, f"seed{seed}") if out_dir else None
        results.append(train(replace(config, seed=seed), out_dir=sub, stop_when=stop_when))
    return results


# ---------------------------------------------------------------------------
# checkpoints


def _dtype_tag(arr: np.ndarray) -> str:
    return "f64" if arr.dtype == np.float64 else "f32"


def _np_dtype(tag: str):
    if tag == "f64":
        return np.dtype("<f8")
    if tag == "f32":
        return np.dtype("<f4")
    raise CheckpointError(f"unknown dtype tag {tag!r}")


def save_checkpoint(path: str, state: TrainState) -> None:
    params = state.parameters()
    header = {
        "version": VERSION,
        "config": asdict(state.config),
        "alloc_k": state.model.alloc_k,
        "step": state.step,
        "adam_t": state.adam.t,
        "tensors": [[p.name, _dtype_tag(p.data), list(p.data.shape)] for p in params],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype=_np_dtype(_dtype_tag(p.data))).tobytes())
        for p in params:
            dt = _np_dtype(_dtype_tag(p.data))
            fh.write(np.ascontiguousarray(state.adam.m[p.name], dtype=dt).tobytes())
            fh.write(np.ascontiguousarray(state.adam.v[p.name], dtype=dt).tobytes())
        rng_blob = json.dumps(state.rng.bit_generator.state, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)
    os.replace(tmp, path)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path: str, expect_model: ModelConfig | None = None) -> TrainState:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != VERSION:
            raise CheckpointError(f"checkpoint version {version}, expected {VERSION}")
        hlen = struct.unpack("<I", _read_exact(fh, 4, "header length"))[0]
        try:
            header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as e:
            raise CheckpointError(f"unparseable checkpoint header: {e}") from e

        cfg_dict = dict(header["config"])
        model_cfg = ModelConfig(**cfg_dict.pop("model"))
        cfg_dict["eval_lens"] = tuple(cfg_dict.get("eval_lens") or ())
        config = TrainConfig(model=model_cfg, **cfg_dict)
        if expect_model is not None and expect_model != model_cfg:
            # rebuild against the expected config so the mismatch is named
            model_cfg_build = expect_model
        else:
            model_cfg_build = model_cfg

        spec = TASKS[config.task]
        model = Model(model_cfg_build, header["alloc_k"], np.random.default_rng(0),
                      dtype=config.dtype)
        heads = Heads(spec.vocab_size, model_cfg_build.maps, spec.kind,
                      np.random.default_rng(0), dtype=config.dtype)
        params = {p.name: p for p in model.parameters() + heads.parameters()}

        listed = header["tensors"]
        if sorted(params) != sorted(name for name, _, _ in listed):
            missing = set(params) ^ {name for name, _, _ in listed}
            raise CheckpointError(f"tensor set mismatch: {sorted(missing)}")
        order = []
        for name, tag, shape in listed:
            p = params[name]
            if tuple(shape) != p.data.shape:
                raise CheckpointError(
                    f"tensor {name}: checkpoint has shape {tuple(shape)}, "
                    f"model expects {p.data.shape}")
            order.append((p, _np_dtype(tag), tuple(shape)))
        if expect_model is not None and expect_model != model_cfg:
            raise CheckpointError(
                f"model config mismatch: checkpoint {model_cfg}, expected {expect_model}")
        for p, dt, shape in order:
            raw = _read_exact(fh, dt.itemsize * int(np.prod(shape, dtype=np.int64)),
                              f"tensor {p.name}")
            p.data = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
            p.zero_grad()
        adam = AdamState([p for p, _, _ in order], lr=config.lr, beta1=config.beta1,
                         beta2=config.beta2, eps=config.eps)
        adam.t = header["adam_t"]
        for p, dt, shape in order:
            size = dt.itemsize * int(np.prod(shape, dtype=np.int64))
            adam.m[p.name] = np.frombuffer(_read_exact(fh, size, f"adam m {p.name}"),
                                           dtype=dt).reshape(shape).copy()
            adam.v[p.name] = np.frombuffer(_read_exact(fh, size, f"adam v {p.name}"),
                                           dtype=dt).reshape(shape).copy()
        rlen = struct.unpack("<I", _read_exact(fh, 4, "rng length"))[0]
        rng_state = json.loads(_read_exact(fh, rlen, "rng state").decode("utf-8"))
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
    return TrainState(config, model, heads, adam, rng, step=header["step"])
