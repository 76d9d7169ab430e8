"""One-tower and two-tower vision-language encoders.

Parameter names are hierarchical and dot-separated, e.g.
``text_encoder.block3.ffn.w1``; they are the checkpoint contract.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from . import tensor as T
from .layers import (
    EVAL,
    Context,
    CrossModalStack,
    Encoder,
    Init,
    Linear,
    Module,
    PatchEmbedding,
    TextEmbedding,
    cross_stream_param_count,
    encoder_block_param_count,
)
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

ONE_TOWER = "one_tower"
TWO_TOWER = "two_tower"


class ConfigError(ValueError):
    pass


@dataclass
class EncoderDims:
    hidden: int
    heads: int
    layers: int
    intermediate: int
    embed: int | None = None  # text embedding size; None means equal to hidden


@dataclass
class ModelConfig:
    model_type: str = TWO_TOWER
    vocab_size: int = 64
    max_text_len: int = 24
    image_height: int = 32
    image_width: int = 32
    image_channels: int = 3
    patch_size: int = 8
    # one_tower uses ``text`` as the single shared tuple
    text: EncoderDims = field(default_factory=lambda: EncoderDims(64, 4, 2, 128))
    vision: EncoderDims | None = field(default_factory=lambda: EncoderDims(64, 4, 2, 128))
    cross: EncoderDims | None = field(default_factory=lambda: EncoderDims(64, 4, 2, 128))
    dropout: float = 0.0
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("text", "vision", "cross"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, EncoderDims(**v))
        if self.model_type == TWO_TOWER and self.cross is not None and self.cross.hidden is None:
            self.cross.hidden = max(self.text.hidden, self.vision.hidden)

    @property
    def num_patches(self) -> int:
        return (self.image_height // self.patch_size) * (self.image_width // self.patch_size)

    def validate(self) -> "ModelConfig":
        if self.model_type not in (ONE_TOWER, TWO_TOWER):
            raise ConfigError(f"model_type must be {ONE_TOWER!r} or {TWO_TOWER!r}, got {self.model_type!r}")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} not divisible by patch size {self.patch_size}"
            )
        towers = [("text", self.text)]
        if self.model_type == TWO_TOWER:
            if self.vision is None or self.cross is None:
                raise ConfigError("two_tower needs vision and cross dims")
            towers += [("vision", self.vision), ("cross", self.cross)]
        for name, dims in towers:
            if dims.hidden % dims.heads:
                raise ConfigError(f"{name}.hidden={dims.hidden} not divisible by heads={dims.heads}")
            if min(dims.hidden, dims.heads, dims.intermediate) < 1 or dims.layers < 0:
                raise ConfigError(f"{name} dims must be positive: {dims}")
        if not self.init_std > 0.0:
            raise ConfigError(f"init_std must be positive, got {self.init_std}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        return self

    @property
    def pooled_dim(self) -> int:
        return self.text.hidden if self.model_type == ONE_TOWER else 2 * self.cross.hidden

    @property
    def text_state_dim(self) -> int:
        return self.text.hidden if self.model_type == ONE_TOWER else self.cross.hidden

    @property
    def image_state_dim(self) -> int:
        return self.text_state_dim

    def initializer(self, seed) -> Init:
        return Init(np.random.default_rng(seed), self.init_std)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FreezeSpec:
    """Per-module trainability. Embedding flags left as ``None`` follow
    their encoder's flag; ``encoder`` is the one-tower shared stack."""

    text_embedding: bool | None = None
    text_encoder: bool = False
    vision_embedding: bool | None = None
    vision_encoder: bool = False
    cross_modal: bool = False
    head: bool = False
    encoder: bool = False

    def frozen_groups(self) -> set[str]:
        out = set()
        text_emb = self.text_encoder if self.text_embedding is None else self.text_embedding
        vis_emb = self.vision_encoder if self.vision_embedding is None else self.vision_embedding
        flags = {
            "text_embedding": text_emb,
            "text_encoder": self.text_encoder,
            "vision_embedding": vis_emb,
            "vision_encoder": self.vision_encoder,
            "cross_modal": self.cross_modal,
            "head": self.head,
            "encoder": self.encoder,
        }
        for k, v in flags.items():
            if v:
                out.add(k)
        return out

    def any_frozen(self) -> bool:
        return bool(self.frozen_groups())

    @classmethod
    def everything(cls) -> "FreezeSpec":
        return cls(True, True, True, True, True, True, True)


# rows of the freeze grid, (text_encoder, vision_encoder)
FREEZE_GRID = (
    ("Unfrozen", "Unfrozen", FreezeSpec()),
    ("Frozen", "Unfrozen", FreezeSpec(text_encoder=True)),
    ("Unfrozen", "Frozen", FreezeSpec(vision_encoder=True)),
    ("Frozen", "Frozen", FreezeSpec(text_encoder=True, vision_encoder=True)),
)


@dataclass
class CheckpointSource:
    path: str
    # target name prefix -> source name prefix
    remap: dict[str, str]


@dataclass
class InitSource:
    """Random init plus optional checkpoint sources applied in order."""

    checkpoints: list[CheckpointSource] = field(default_factory=list)

    @classmethod
    def random(cls) -> "InitSource":
        return cls()


@dataclass
class ModelOutput:
    text_states: Tensor
    image_states: Tensor
    pooled: Tensor
    sequence: Tensor | None = None  # one-tower joint sequence


class Pooler(Module):
    def __init__(self, dim: int, rng):
        super().__init__()
        self.dense = Linear(dim, dim, rng)

    def __call__(self, first_token: Tensor) -> Tensor:
        return T.tanh(self.dense(first_token))


class ClassifierHead(Module):
    """One linear layer, or two with GELU between when ``hidden`` is set."""

    def __init__(self, d_in: int, n_out: int, rng: np.random.Generator, hidden: int | None = None):
        super().__init__()
        object.__setattr__(self, "spec", {"d_in": d_in, "n_out": n_out, "hidden": hidden})
        if hidden:
            self.fc1 = Linear(d_in, hidden, rng)
            self.fc2 = Linear(hidden, n_out, rng)
        else:
            self.fc = Linear(d_in, n_out, rng)

    @property
    def n_out(self) -> int:
        return self.spec["n_out"]

    def __call__(self, x: Tensor) -> Tensor:
        if self.spec["hidden"]:
            return self.fc2(T.gelu(self.fc1(x)))
        return self.fc(x)

    def zero_(self) -> "ClassifierHead":
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
        return self


class Heads(Module):
    """Socket for named output heads (pretraining and task heads)."""

    def add(self, name: str, head: Module) -> Module:
        setattr(self, name, head)
        return head

    def remove(self, name: str) -> None:
        self._children.pop(name, None)
        if name in self.__dict__:
            object.__delattr__(self, name)

    def keep_only(self, names) -> None:
        for name in list(self._children):
            if name not in names:
                self.remove(name)

    def names(self) -> list[str]:
        return list(self._children)

    def specs(self) -> dict[str, dict]:
        return {n: dict(h.spec) for n, h in self._children.items()}

    def get(self, name: str) -> Module | None:
        return self._children.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._children


class VLModel(Module):
    """Shared plumbing for both architectures."""

    config: ModelConfig

    def __init__(self, config: ModelConfig):
        super().__init__()
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "init_report", {"mapped": [], "random": []})

    def param_group(self, name: str) -> str:
        top = name.split(".", 1)[0]
        return self.GROUPS.get(top, top)

    def named_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        out: dict[str, list[tuple[str, Tensor]]] = {}
        for n, p in self.named_parameters():
            out.setdefault(self.param_group(n), []).append((n, p))
        return out

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def context(self, train: bool = False, stream=None) -> Context:
        return Context(self.config.dropout, train, stream)


class OneTowerModel(VLModel):
    GROUPS = {"pooler": "encoder", "heads": "head"}

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config)
        d = config.text
        self.text_embedding = TextEmbedding(config.vocab_size, config.max_text_len, d.embed or d.hidden, d.hidden, rng)
        self.vision_embedding = PatchEmbedding(
            config.image_height, config.image_width, config.image_channels, config.patch_size, d.hidden, rng
        )
        self.encoder = Encoder(d.hidden, d.heads, d.intermediate, d.layers, rng)
        self.pooler = Pooler(d.hidden, rng)
        self.heads = Heads()

    def forward(self, text_ids: np.ndarray, text_mask: np.ndarray, images: np.ndarray, ctx: Context = EVAL) -> ModelOutput:
        text_ids = np.asarray(text_ids)
        n_text = text_ids.shape[1]
        text = self.text_embedding(text_ids, ctx, token_type=0)
        image = self.vision_embedding(images, ctx)
        image = T.add(image, self.text_embedding.type_vector(1))
        seq = T.concat([text, image], axis=1)
        b = text_ids.shape[0]
        mask = np.concatenate([np.asarray(text_mask, bool), np.ones((b, image.shape[1]), bool)], axis=1)
        seq = self.encoder(seq, mask, ctx)
        pooled = self.pooler(T.slice_(seq, (slice(None), 0)))
        return ModelOutput(
            text_states=T.slice_(seq, (slice(None), slice(0, n_text))),
            image_states=T.slice_(seq, (slice(None), slice(n_text, None))),
            pooled=pooled,
            sequence=seq,
        )


class TwoTowerModel(VLModel):
    GROUPS = {"heads": "head"}

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__(config)
        t, v, x = config.text, config.vision, config.cross
        self.text_embedding = TextEmbedding(config.vocab_size, config.max_text_len, t.embed or t.hidden, t.hidden, rng)
        self.text_encoder = Encoder(t.hidden, t.heads, t.intermediate, t.layers, rng)
        self.vision_embedding = PatchEmbedding(
            config.image_height, config.image_width, config.image_channels, config.patch_size, v.hidden, rng
        )
        self.vision_encoder = Encoder(v.hidden, v.heads, v.intermediate, v.layers, rng)
        self.cross_modal = _CrossModal(t.hidden, v.hidden, x, rng)
        self.heads = Heads()

    def forward(self, text_ids: np.ndarray, text_mask: np.ndarray, images: np.ndarray, ctx: Context = EVAL) -> ModelOutput:
        text_mask = np.asarray(text_mask, bool)
        text = self.text_encoder(self.text_embedding(text_ids, ctx), text_mask, ctx)
        image = self.vision_embedding(images, ctx)
        vision_mask = np.ones(image.shape[:2], bool)
        image = self.vision_encoder(image, vision_mask, ctx)
        return self.cross_modal(text, image, text_mask, vision_mask, ctx)


class _CrossModal(Module):
    """Projections into the cross-modal width, the fusion stack, and poolers."""

    def __init__(self, d_text: int, d_vision: int, dims: EncoderDims, rng):
        super().__init__()
        self.text_proj = Linear(d_text, dims.hidden, rng)
        self.vision_proj = Linear(d_vision, dims.hidden, rng)
        self.stack = CrossModalStack(dims.hidden, dims.heads, dims.intermediate, dims.layers, rng)
        self.text_pooler = Pooler(dims.hidden, rng)
        self.vision_pooler = Pooler(dims.hidden, rng)

    def __call__(self, text, image, text_mask, vision_mask, ctx) -> ModelOutput:
        text = self.text_proj(text)
        image = self.vision_proj(image)
        text, image = self.stack(text, image, text_mask, vision_mask, ctx)
        pooled = T.concat(
            [
                self.text_pooler(T.slice_(text, (slice(None), 0))),
                self.vision_pooler(T.slice_(image, (slice(None), 0))),
            ],
            axis=-1,
        )
        return ModelOutput(text_states=text, image_states=image, pooled=pooled)


class UnimodalModel(Module):
    """Text-only or vision-only encoder used to produce init-source checkpoints.

    Its names (``text_embedding.*`` / ``vision_embedding.*``, ``encoder.*``)
    line up with the one-tower model.
    """

    def __init__(self, kind: str, config: ModelConfig, num_outputs: int, rng: np.random.Generator):
        super().__init__()
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "config", config)
        d = config.text
        if kind == "text":
            self.text_embedding = TextEmbedding(config.vocab_size, config.max_text_len, d.embed or d.hidden, d.hidden, rng)
        elif kind == "vision":
            self.vision_embedding = PatchEmbedding(
                config.image_height, config.image_width, config.image_channels, config.patch_size, d.hidden, rng
            )
        else:
            raise ConfigError(f"unimodal kind must be 'text' or 'vision', got {kind!r}")
        self.encoder = Encoder(d.hidden, d.heads, d.intermediate, d.layers, rng)
        self.out = Linear(d.hidden, num_outputs, rng)

    def context(self, train: bool = False, stream=None) -> Context:
        return Context(self.config.dropout, train, stream)

    def forward(self, inputs: np.ndarray, mask: np.ndarray | None = None, ctx: Context = EVAL) -> Tensor:
        if self.kind == "text":
            x = self.text_embedding(inputs, ctx)
        else:
            x = self.vision_embedding(inputs, ctx)
            mask = np.ones(x.shape[:2], bool)
        return self.encoder(x, np.asarray(mask, bool), ctx)


# ---------------------------------------------------------------------------
# build / freeze / accounting


def build(config: ModelConfig, init: InitSource | None = None, rng_seed: int | None = None) -> VLModel:
    """Allocate and initialise a model.

    Checkpoint sources copy parameters whose remapped name exists in the
    source; everything else stays at its random init and is listed in
    ``model.init_report["random"]``.
    """
    config.validate()
    seed = config.seed if rng_seed is None else rng_seed
    rng = config.initializer(seed)
    cls = OneTowerModel if config.model_type == ONE_TOWER else TwoTowerModel
    model = cls(config, rng)
    init = init or InitSource()
    mapped: set[str] = set()
    for src in init.checkpoints:
        mapped |= load_from_checkpoint(model, src)
    model.init_report["mapped"] = sorted(mapped)
    model.init_report["random"] = [n for n, _ in model.named_parameters() if n not in mapped]
    if init.checkpoints and model.init_report["random"]:
        log.warning("parameters left at random init: %s", model.init_report["random"])
    return model


def load_from_checkpoint(model: Module, source: CheckpointSource) -> set[str]:
    from .engine import read_checkpoint

    _, tensors = read_checkpoint(source.path)
    params = dict(model.named_parameters())
    mapped = set()
    for target_prefix, source_prefix in source.remap.items():
        for name, p in params.items():
            if not name.startswith(target_prefix):
                continue
            src_name = source_prefix + name[len(target_prefix):]
            if src_name not in tensors:
                continue
            arr = tensors[src_name]
            if arr.shape != p.shape:
                raise ShapeError(f"init {name} from {src_name}", p.shape, arr.shape)
            p.data = arr.astype(p.dtype, copy=True)
            mapped.add(name)
    return mapped


def apply_freeze(model: VLModel, spec: FreezeSpec) -> None:
    """Mark parameters of frozen groups non-trainable (and unfreeze the rest)."""
    frozen = spec.frozen_groups()
    for name, p in model.named_parameters():
        p.requires_grad = model.param_group(name) not in frozen
        if not p.requires_grad:
            p.grad = None


def param_report(model: VLModel) -> dict[str, dict[str, int]]:
    """Per-group ``{"total", "trainable"}`` element counts plus an ``"all"`` row."""
    report: dict[str, dict[str, int]] = {}
    for group, items in model.named_groups().items():
        total = sum(p.size for _, p in items)
        trainable = sum(p.size for _, p in items if p.requires_grad)
        report[group] = {"total": total, "trainable": trainable}
    report["all"] = {
        "total": sum(r["total"] for r in report.values()),
        "trainable": sum(r["trainable"] for r in report.values()),
    }
    return report


def format_param_report(report: dict[str, dict[str, int]]) -> str:
    rows = [("module", "total", "trainable", "fraction")]
    for group, r in report.items():
        frac = r["trainable"] / r["total"] if r["total"] else 0.0
        rows.append((group, f"{r['total']:,}", f"{r['trainable']:,}", f"{frac:.4f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def closed_form_counts(config: ModelConfig) -> dict[str, int]:
    """Per-group parameter counts from the layer formulas (no heads)."""
    c = config
    t = c.text
    e = t.embed or t.hidden
    text_emb = (c.vocab_size + c.max_text_len + 2) * e + 2 * e + (e * t.hidden + t.hidden if e != t.hidden else 0)
    patch_in = c.patch_size * c.patch_size * c.image_channels

    def patch_emb(d):
        return patch_in * d + d + d + (c.num_patches + 1) * d + 2 * d

    if c.model_type == ONE_TOWER:
        return {
            "text_embedding": text_emb,
            "vision_embedding": patch_emb(t.hidden),
            "encoder": t.layers * encoder_block_param_count(t.hidden, t.intermediate) + t.hidden * t.hidden + t.hidden,
        }
    v, x = c.vision, c.cross
    return {
        "text_embedding": text_emb,
        "text_encoder": t.layers * encoder_block_param_count(t.hidden, t.intermediate),
        "vision_embedding": patch_emb(v.hidden),
        "vision_encoder": v.layers * encoder_block_param_count(v.hidden, v.intermediate),
        "cross_modal": (t.hidden + 1) * x.hidden
        + (v.hidden + 1) * x.hidden
        + x.layers * 2 * cross_stream_param_count(x.hidden, x.intermediate)
        + 2 * (x.hidden * x.hidden + x.hidden),
    }
