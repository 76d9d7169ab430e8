"""Optimizer, learning-rate schedule, training loop and checkpoints.

Checkpoint layout (little-endian)::

    b"VLTCKPT\\0"  | uint64 header length | UTF-8 JSON header | float32 payload

The header lists every parameter as ``{"name", "shape", "offset"}`` where
``offset`` is the byte offset into the payload. There is no checksum:
value corruption inside the payload is not detected.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from . import tensor as T
from .models import ClassifierHead, FreezeSpec, ModelConfig, UnimodalModel, VLModel, apply_freeze, build
from .tensor import DropoutStream, Tensor

log = logging.getLogger(__name__)

MAGIC = b"VLTCKPT\0"
FORMAT_VERSION = 1
NO_DECAY_SUFFIXES = ("bias", "bq", "bk", "bv", "bo", "b1", "b2", "gamma", "beta")


class CheckpointError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, checkpoint: Path | None):
        self.step = step
        self.checkpoint = checkpoint
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {checkpoint}")


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Bias-corrected AdamW over the parameters that are trainable at construction.

    Moments are allocated only for trainable parameters, so frozen modules
    cost no optimizer memory.
    """

    def __init__(
        self,
        named_params: Iterable[tuple[str, Tensor]],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.params: list[tuple[str, Tensor]] = [(n, p) for n, p in named_params if p.requires_grad]
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]
        self.decay = [not n.rsplit(".", 1)[-1] in NO_DECAY_SUFFIXES for n, _ in self.params]

    def state_elements(self) -> int:
        return sum(m.size + v.size for m, v in zip(self.m, self.v))

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"missing gradient for trainable parameter {name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for (name, p), m, v, decay in zip(self.params, self.m, self.v, self.decay):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if decay and self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype, copy=False)


def adamw_step(params: list[tuple[str, Tensor]], state: AdamW, lr_t: float) -> None:
    """Functional spelling of :meth:`AdamW.step`; ``params`` must be the state's own."""
    if [id(p) for _, p in params] != [id(p) for _, p in state.params]:
        raise ValueError("parameter list does not match optimizer state")
    state.step(lr_t)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.dtype.type(factor)
    return total


# ---------------------------------------------------------------------------
# schedule and config


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    objectives: tuple[str, ...] = ("mlm", "itm")

    def __post_init__(self):
        self.objectives = tuple(self.objectives)

    def validate(self) -> "TrainConfig":
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        return self

    @property
    def warmup_steps(self) -> int:
        return int(self.warmup_fraction * self.steps)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to peak, then linear decay reaching 0 at ``steps``."""
    if not 0 <= step < config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps})")
    w = config.warmup_steps
    if step < w:
        return config.lr * step / w
    return config.lr * (config.steps - step) / (config.steps - w)


# ---------------------------------------------------------------------------
# checkpoints


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path, tensors: list[tuple[str, np.ndarray]], meta: dict[str, Any]) -> None:
    params = []
    offset = 0
    for name, arr in tensors:
        params.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = dict(meta, format_version=FORMAT_VERSION, params=params, payload_bytes=offset)
    hb = _header_bytes(header)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    """Parse a checkpoint file into (header, name -> float32 array)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if start + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: malformed header: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    payload = raw[start + hlen :]
    expected = sum(int(np.prod(p["shape"], dtype=np.int64)) * 4 for p in header["params"])
    if expected != header.get("payload_bytes") or len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, header describes {expected}")
    tensors = {}
    cursor = 0
    for p in header["params"]:
        n = int(np.prod(p["shape"], dtype=np.int64))
        if p["offset"] != cursor:
            raise CheckpointError(f"{path}: parameter {p['name']} offset {p['offset']} != {cursor}")
        tensors[p["name"]] = np.frombuffer(payload, dtype="<f4", count=n, offset=cursor).reshape(p["shape"]).astype(np.float32)
        cursor += n * 4
    return header, tensors


def save_checkpoint(model, path, step: int = 0, extra: dict[str, Any] | None = None) -> None:
    meta: dict[str, Any] = {"step": step, "seed": model.config.seed, "config": model.config.to_dict()}
    if isinstance(model, UnimodalModel):
        meta["kind"] = "unimodal"
        meta["unimodal"] = {"kind": model.kind, "num_outputs": model.out.bias.size}
    else:
        meta["kind"] = "vl"
        meta["heads"] = model.heads.specs()
    if extra:
        meta["extra"] = extra
    write_checkpoint(path, [(n, p.data) for n, p in model.named_parameters()], meta)


def load_checkpoint(path):
    """Rebuild the model described by the header and load every parameter."""
    header, tensors = read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    if header.get("kind") == "unimodal":
        u = header["unimodal"]
        model = UnimodalModel(u["kind"], config, u["num_outputs"], config.initializer(config.seed))
    else:
        model = build(config)
        rng = config.initializer(0)
        heads = header.get("heads", {})
        # the JSON header sorts keys; the parameter list keeps registration order
        order = [p["name"].split(".")[1] for p in header["params"] if p["name"].startswith("heads.")]
        for name in sorted(heads, key=lambda h: order.index(h) if h in order else len(order)):
            spec = heads[name]
            model.heads.add(name, ClassifierHead(spec["d_in"], spec["n_out"], rng, spec.get("hidden")))
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(tensors))
    unexpected = sorted(set(tensors) - set(params))
    if missing or unexpected:
        raise CheckpointError(f"{path}: missing {missing[:5]}, unexpected {unexpected[:5]}")
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.copy()
    object.__setattr__(model, "checkpoint_header", header)
    return model


# ---------------------------------------------------------------------------
# training loop

LossFn = Callable[[Any, Any, Any], tuple[Tensor, dict[str, float]]]


@dataclass
class TrainResult:
    records: list[dict[str, Any]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    optimizer: AdamW | None = None


def _fmt(x: float) -> float:
    return float(np.float32(x))


def train(
    model,
    loss_fn: LossFn,
    batches: Callable[[int], Any],
    config: TrainConfig,
    freeze: FreezeSpec | None = None,
    run_dir: Path | None = None,
    eval_fn: Callable[[Any, int], dict[str, float]] | None = None,
) -> TrainResult:
    """Run ``config.steps`` optimizer steps.

    ``batches(step)`` must return the batch for that step deterministically.
    ``loss_fn(model, batch, ctx)`` returns the scalar loss and named float
    components. Freezing is applied before the optimizer is built.
    """
    config.validate()
    if freeze is not None:
        apply_freeze(model, freeze)
    opt = AdamW(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    trainable = [p for _, p in opt.params]
    result = TrainResult(optimizer=opt)
    metrics_f = timing_f = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        metrics_f = open(run_dir / "metrics.jsonl", "w", encoding="utf-8")
        timing_f = open(run_dir / "timing.jsonl", "w", encoding="utf-8")
    last_good: Path | None = None
    t0 = time.perf_counter()
    model.train()
    try:
        for step in range(config.steps):
            lr = lr_schedule(step, config)
            batch = batches(step)
            model.zero_grad()
            ctx = model.context(train=True, stream=DropoutStream(config.seed, step))
            with T.Tape():
                loss, parts = loss_fn(model, batch, ctx)
                if not np.isfinite(loss.data):
                    if run_dir is not None:
                        last_good = run_dir / "last_good.ckpt"
                        save_checkpoint(model, last_good, step)
                    raise TrainingAborted(step, last_good)
                if trainable:
                    T.backward(loss)
            for p in trainable:
                # parameters the objective never reached get an explicit zero grad
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            gnorm = clip_grad_norm(trainable, config.clip_norm)
            opt.step(lr)
            rec = {"step": step, "lr": _fmt(lr), "loss": _fmt(loss.data), "grad_norm": _fmt(gnorm)}
            rec.update({k: _fmt(v) for k, v in parts.items()})
            if eval_fn is not None and config.eval_every and (step + 1) % config.eval_every == 0:
                model.eval()
                rec["eval"] = {k: _fmt(v) for k, v in eval_fn(model, step).items()}
                model.train()
            result.records.append(rec)
            if metrics_f is not None:
                metrics_f.write(json.dumps(rec, sort_keys=True) + "\n")
                timing_f.write(json.dumps({"step": step, "wall_clock": time.perf_counter() - t0}) + "\n")
            if run_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                path = run_dir / f"step{step + 1:06d}.ckpt"
                save_checkpoint(model, path, step + 1)
                result.checkpoints.append(path)
                last_good = path
        if run_dir is not None:
            path = run_dir / "final.ckpt"
            save_checkpoint(model, path, config.steps)
            result.checkpoints.append(path)
    finally:
        model.eval()
        model.zero_grad()
        if metrics_f is not None:
            metrics_f.close()
            timing_f.close()
    return result


def finetune(model, loss_fn: LossFn, batches, config: TrainConfig, run_dir: Path | None = None, eval_fn=None) -> TrainResult:
    """Fine-tuning trains every weight: any prior freezing is undone."""
    return train(model, loss_fn, batches, config, FreezeSpec(), run_dir, eval_fn)


def train_config_dict(config: TrainConfig) -> dict[str, Any]:
    d = asdict(config)
    d["objectives"] = list(config.objectives)
    return d
