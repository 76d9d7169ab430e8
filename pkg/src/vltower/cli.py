"""Command-line entry points.

Usage::

    vltower <command> [--config FILE] [--allow-frozen-finetune] [path.to.field=value ...]

Every command resolves a :class:`RunConfig` from the defaults, an optional
YAML file and the overrides (applied last, left to right), writes the
resolved document to ``<run_dir>/config.yaml`` and then does its work.
Tables go to stdout; logs go to stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from . import tensor as T
from .data import COLORS, TASKS, Corpus, ManifestError, PPMError, Vocab, corpus_digest, encode_text, gen_synthetic
from .engine import (
    CheckpointError,
    TrainConfig,
    TrainingAborted,
    finetune,
    load_checkpoint,
    save_checkpoint,
    train,
    train_config_dict,
)
from .models import (
    FREEZE_GRID,
    ONE_TOWER,
    TWO_TOWER,
    CheckpointSource,
    ConfigError,
    EncoderDims,
    FreezeSpec,
    InitSource,
    ModelConfig,
    UnimodalModel,
    VLModel,
    apply_freeze,
    build,
    format_param_report,
    param_report,
)
from .pretrain import IGNORE, ItmSpec, MlmSpec, PretrainStream, apply_mlm_mask, attach_pretrain_heads, evaluate_pretrain, example_rng, pretrain_loss
from .tasks import TaskError, TaskSpec, TaskStream, attach_task_head, dump_predictions, evaluate_task, task_loss

log = logging.getLogger("vltower")

# exit codes by failure category
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_REFUSED = 4
EXIT_TRAINING = 5

# reference values from the published study, shown only as labeled context
REFERENCE_FREEZE = {
    ("Unfrozen", "Unfrozen"): (0.741, 0.672, 0.724),
    ("Frozen", "Unfrozen"): (0.735, 0.675, 0.702),
    ("Unfrozen", "Frozen"): (0.741, 0.672, 0.740),
    ("Frozen", "Frozen"): (0.738, 0.665, 0.721),
}
REFERENCE_INIT = {"Random": (0.699, 0.551, 0.554), "ViT-like": (0.685, 0.534, 0.522), "BERT-like": (0.692, 0.545, 0.507)}
REFERENCE_TASKS = ("snli_ve", "nlvr2", "ref_res")
# combined digest of `vltower gen-data` with the default data config
PUBLISHED_DIGEST = "a91f15ab6aec4bb701a4e67e8e80b575b960edb85a926a010798d0b901cf4c35"
TASK_TITLES = {"snli_ve": "SNLI-VE", "nlvr2": "NLVR2", "ref_res": "RefRes", "vqa": "VQA", "retrieval": "Retrieval"}

# target prefix -> source prefix for unimodal source checkpoints
INIT_REMAPS = {
    (ONE_TOWER, "text"): {"text_embedding.": "text_embedding.", "encoder.": "encoder."},
    (ONE_TOWER, "vision"): {"vision_embedding.": "vision_embedding.", "encoder.": "encoder."},
    (TWO_TOWER, "text"): {"text_embedding.": "text_embedding.", "text_encoder.": "encoder."},
    (TWO_TOWER, "vision"): {"vision_embedding.": "vision_embedding.", "vision_encoder.": "encoder."},
}


class UsageError(Exception):
    """A refused request, e.g. fine-tuning with frozen modules."""


# ---------------------------------------------------------------------------
# run config


def desk_model() -> ModelConfig:
    return ModelConfig(
        model_type=TWO_TOWER,
        vocab_size=len(Vocab.default()),
        max_text_len=16,
        text=EncoderDims(64, 4, 2, 128),
        vision=EncoderDims(64, 4, 2, 128),
        cross=EncoderDims(64, 4, 2, 128),
        init_std=0.125,
    )


@dataclass
class DataConfig:
    root: str = "data"
    seed: int = 0
    pretrain_counts: dict[str, int] = field(default_factory=lambda: {"train": 5000, "dev": 500})
    task_counts: dict[str, int] = field(default_factory=lambda: {"train": 3000, "dev": 600})

    def corpus_dir(self, task: str) -> Path:
        return Path(self.root) / task


@dataclass
class ObjectiveConfig:
    mask_prob: float = 0.15
    negative_prob: float = 0.5
    itm_hidden: int | None = 128
    eval_batches: int = 8
    eval_batch_size: int = 128
    eval_seed: int = 1


@dataclass
class InitConfig:
    # random | text | vision
    source: str = "random"
    text_checkpoint: str | None = None
    vision_checkpoint: str | None = None

    def resolve(self, model_type: str) -> InitSource:
        if self.source == "random":
            return InitSource.random()
        if self.source not in ("text", "vision"):
            raise ConfigError(f"init.source must be random, text or vision, got {self.source!r}")
        path = self.text_checkpoint if self.source == "text" else self.vision_checkpoint
        if not path:
            raise ConfigError(f"init.source={self.source} needs init.{self.source}_checkpoint")
        if not Path(path).exists():
            raise FileNotFoundError(f"{self.source} source checkpoint not found: {path}")
        return InitSource([CheckpointSource(path, INIT_REMAPS[(model_type, self.source)])])


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=desk_model)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(steps=300, objectives=()))
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    freeze: FreezeSpec = field(default_factory=FreezeSpec)
    init: InitConfig = field(default_factory=InitConfig)
    data: DataConfig = field(default_factory=DataConfig)
    tasks: list[str] = field(default_factory=lambda: list(REFERENCE_TASKS))
    # input checkpoint for finetune / evaluate
    checkpoint: str | None = None
    run_dir: str = "runs/run"
    allow_frozen_finetune: bool = False
    bootstrap_steps: int = 300

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.pretrain.validate()
        self.finetune.validate()
        for t in self.tasks:
            if t not in TASKS or t == "pretrain":
                raise ConfigError(f"unknown task {t!r}; expected a subset of {TASKS[1:]}")
        if self.model.vocab_size < len(Vocab.default()):
            raise ConfigError(f"model.vocab_size={self.model.vocab_size} is smaller than the corpus vocabulary")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["pretrain"] = train_config_dict(self.pretrain)
        d["finetune"] = train_config_dict(self.finetune)
        return d


def _field_types(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _dataclass_in(tp) -> type | None:
    if is_dataclass(tp):
        return tp
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        for arg in typing.get_args(tp):
            if is_dataclass(arg):
                return arg
    return None


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = _field_types(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        where = f" under {path}" if path else ""
        raise ConfigError(f"unknown config field(s){where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _dataclass_in(hints[name])
        if sub is not None and value is not None:
            value = _build(sub, value, f"{path}.{name}" if path else name)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def _set_path(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for i, k in enumerate(keys[:-1]):
        nxt = node.get(k) if isinstance(node, dict) else None
        if not isinstance(nxt, dict):
            if k in node and nxt is None:
                nxt = {}
                node[k] = nxt
            else:
                raise ConfigError(f"override {dotted!r}: {'.'.join(keys[: i + 1])} is not a config section")
        node = nxt
    node[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like path.to.field=value")
    key, raw = text.split("=", 1)
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"override {text!r} has an empty field name")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"override {text!r}: {e}") from None
    return key, value


def resolve_config(config_file: str | None = None, overrides: list[str] = ()) -> RunConfig:
    """Defaults, then the YAML file, then the overrides."""
    doc = RunConfig().to_dict()
    if config_file:
        try:
            loaded = yaml.safe_load(Path(config_file).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{config_file}: {e}") from None
        _build(RunConfig, loaded, "")  # reject unknown fields with the file's own paths
        doc = _merge(doc, loaded)
    for item in overrides:
        key, value = parse_override(item)
        _set_path(doc, key, value)
    cfg = _build(RunConfig, doc, "")
    try:
        return cfg.validate()
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("pretrain_counts", "task_counts"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def write_resolved(cfg: RunConfig, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")


# ---------------------------------------------------------------------------
# reports


def format_table(header: list[str], rows: list[list[Any]]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.3f}"
        if isinstance(v, int) and not isinstance(v, bool):
            return f"{v:,}"
        return "-" if v is None else str(v)

    body = [[cell(v) for v in r] for r in rows]
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)), "  ".join("-" * w for w in widths)]
    for r in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines)


def write_jsonl(path: Path, rows: list[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def freeze_report(results: list[dict[str, Any]], tasks: list[str]) -> str:
    header = ["text_encoder", "vision_encoder"]
    header += [f"desk {TASK_TITLES[t]}" for t in tasks]
    header += [f"reference {TASK_TITLES[t]}" for t in REFERENCE_TASKS]
    header += ["trainable", "optimizer_state"]
    rows = []
    for r in results:
        ref = REFERENCE_FREEZE[(r["text_encoder"], r["vision_encoder"])]
        rows.append(
            [r["text_encoder"], r["vision_encoder"]]
            + [r["accuracy"].get(t) for t in tasks]
            + list(ref)
            + [r["trainable"], r["optimizer_state"]]
        )
    return format_table(header, rows)


def init_report(results: list[dict[str, Any]], tasks: list[str]) -> str:
    header = ["encoder_init"] + [f"desk {TASK_TITLES[t]}" for t in tasks]
    header += [f"reference {TASK_TITLES[t]}" for t in REFERENCE_TASKS] + ["mapped_params"]
    rows = [
        [r["row"]] + [r["accuracy"].get(t) for t in tasks] + list(REFERENCE_INIT[r["row"]]) + [r["mapped"]] for r in results
    ]
    return format_table(header, rows)


# ---------------------------------------------------------------------------
# building blocks shared by commands


def load_corpus(cfg: RunConfig, task: str) -> Corpus:
    root = cfg.data.corpus_dir(task)
    if not (root / "manifest.jsonl").exists():
        raise FileNotFoundError(f"no {task} corpus at {root}; run `vltower gen-data` first")
    return Corpus.load(root, (cfg.model.image_height, cfg.model.image_width, cfg.model.image_channels))


def pretrain_model(
    cfg: RunConfig,
    corpus: Corpus,
    run_dir: Path,
    freeze: FreezeSpec | None = None,
    init: InitSource | None = None,
    model_config: ModelConfig | None = None,
) -> tuple[VLModel, dict[str, Any]]:
    mcfg = model_config or cfg.model
    model = build(mcfg, init or cfg.init.resolve(mcfg.model_type))
    attach_pretrain_heads(model, itm_hidden=cfg.objectives.itm_hidden)
    objectives = tuple(cfg.pretrain.objectives)
    mlm, itm = MlmSpec(cfg.objectives.mask_prob), ItmSpec(cfg.objectives.negative_prob)
    stream = PretrainStream(
        corpus, cfg.pretrain.batch_size, mcfg.max_text_len, cfg.pretrain.seed, "train", mlm, itm, objectives
    )
    dev = PretrainStream(corpus, cfg.objectives.eval_batch_size, mcfg.max_text_len, cfg.objectives.eval_seed, "dev", mlm, itm)

    def evaluate(m, step):
        return evaluate_pretrain(m, dev, cfg.objectives.eval_batches)

    result = train(
        model,
        lambda m, b, ctx: pretrain_loss(m, b, ctx, objectives),
        stream,
        cfg.pretrain,
        freeze if freeze is not None else cfg.freeze,
        run_dir,
        evaluate,
    )
    summary = {
        "steps": cfg.pretrain.steps,
        "final_loss": result.records[-1]["loss"],
        "trainable": sum(p.size for _, p in model.trainable_parameters()),
        "total": model.num_parameters(),
        "optimizer_state": result.optimizer.state_elements(),
        "eval": {k: float(v) for k, v in evaluate(model, cfg.pretrain.steps).items()},
    }
    (run_dir / "pretrain_summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    return model, summary


def finetune_task(cfg: RunConfig, checkpoint: Path, task: str, out_dir: Path, freeze: FreezeSpec | None = None) -> dict[str, Any]:
    """Fine-tune one task from ``checkpoint``, evaluate on dev, dump predictions."""
    corpus = load_corpus(cfg, task)
    model = load_checkpoint(checkpoint)
    attach_task_head(model, TaskSpec(task), cfg.finetune.seed)
    stream = TaskStream(corpus, task, cfg.finetune.batch_size, model.config.max_text_len, cfg.finetune.seed)
    loss = lambda m, b, ctx: task_loss(m, task, b, ctx)  # noqa: E731
    if freeze is None:
        finetune(model, loss, stream, cfg.finetune, out_dir)
    else:
        train(model, loss, stream, cfg.finetune, freeze, out_dir)
    return evaluate_into(model, task, corpus, out_dir)


def evaluate_into(model: VLModel, task: str, corpus: Corpus, out_dir: Path) -> dict[str, Any]:
    metrics, records = evaluate_task(model, task, corpus, "dev", model.config.max_text_len)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_predictions(out_dir / "predictions.jsonl", records)
    row = {"task": task, **{k: float(v) if isinstance(v, float) else v for k, v in metrics.items()}}
    (out_dir / "eval.json").write_text(json.dumps(row, sort_keys=True) + "\n", encoding="utf-8")
    return row


def check_finetune_freeze(cfg: RunConfig) -> FreezeSpec | None:
    """``None`` means the standard all-trainable fine-tune."""
    if not cfg.freeze.any_frozen():
        return None
    if not cfg.allow_frozen_finetune:
        raise UsageError(
            "fine-tuning trains every weight; the config freezes "
            f"{sorted(cfg.freeze.frozen_groups())}. Pass --allow-frozen-finetune to override."
        )
    log.warning("fine-tuning with frozen groups %s (override)", sorted(cfg.freeze.frozen_groups()))
    return cfg.freeze


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, out) -> None:
    rows = []
    digests = []
    for task in ["pretrain"] + list(cfg.tasks):
        counts = cfg.data.pretrain_counts if task == "pretrain" else cfg.data.task_counts
        root = gen_synthetic(cfg.data.corpus_dir(task), cfg.data.seed, dict(counts), task)
        d = corpus_digest(root)
        digests.append(f"{task}:{d}")
        rows.append({"corpus": task, "path": str(root), "digest": d, **{f"n_{k}": v for k, v in counts.items()}})
    combined = combined_digest(digests)
    Path(cfg.data.root).joinpath("DIGESTS").write_text("\n".join(digests + [f"combined:{combined}"]) + "\n")
    print(format_table(["corpus", "digest"], [[r["corpus"], r["digest"]] for r in rows]), file=out)
    print(f"combined digest: {combined}", file=out)
    if cfg.data == DataConfig(root=cfg.data.root) and list(cfg.tasks) == list(REFERENCE_TASKS):
        status = "matches" if combined == PUBLISHED_DIGEST else "DIFFERS FROM"
        print(f"{status} the published default digest", file=out)


def combined_digest(lines: list[str]) -> str:
    import hashlib

    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def cmd_pretrain(cfg: RunConfig, out) -> None:
    corpus = load_corpus(cfg, "pretrain")
    run_dir = Path(cfg.run_dir)
    write_resolved(cfg, run_dir)
    _, summary = pretrain_model(cfg, corpus, run_dir)
    rows = [[k, summary["eval"][k]] for k in sorted(summary["eval"])]
    rows += [["trainable", summary["trainable"]], ["optimizer_state", summary["optimizer_state"]]]
    print(format_table(["metric", "value"], rows), file=out)
    print(f"checkpoint: {run_dir / 'final.ckpt'}", file=out)


def _input_checkpoint(cfg: RunConfig) -> Path:
    if not cfg.checkpoint:
        raise ConfigError("this command needs checkpoint=<path>")
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def cmd_finetune(cfg: RunConfig, out) -> None:
    freeze = check_finetune_freeze(cfg)
    ckpt = _input_checkpoint(cfg)
    run_dir = Path(cfg.run_dir)
    write_resolved(cfg, run_dir)
    rows = []
    for task in cfg.tasks:
        rows.append(finetune_task(cfg, ckpt, task, run_dir / task, freeze))
    write_jsonl(run_dir / "metrics_summary.jsonl", rows)
    print(_task_table(rows), file=out)


def _task_table(rows: list[dict[str, Any]]) -> str:
    return format_table(
        ["task", "accuracy", "chance", "p_value", "n"],
        [[TASK_TITLES[r["task"]], r.get("accuracy"), r.get("chance"), f"{r['p_value']:.2e}" if "p_value" in r else None, r["n"]] for r in rows],
    )


def cmd_evaluate(cfg: RunConfig, out) -> None:
    """``checkpoint`` is a fine-tuned checkpoint, or a fine-tune run directory
    holding ``<task>/final.ckpt``."""
    src = _input_checkpoint(cfg)
    run_dir = Path(cfg.run_dir)
    write_resolved(cfg, run_dir)
    rows = []
    for task in cfg.tasks:
        path = src / task / "final.ckpt" if src.is_dir() else src
        if not path.exists():
            raise FileNotFoundError(f"no fine-tuned checkpoint for {task} at {path}")
        model = load_checkpoint(path)
        if task not in model.heads and task != "retrieval":
            raise TaskError(f"{path} has no {task} head; fine-tune it first")
        rows.append(evaluate_into(model, task, load_corpus(cfg, task), run_dir / task))
    write_jsonl(run_dir / "metrics_summary.jsonl", rows)
    print(_task_table(rows), file=out)


def pretrain_param_model(cfg: RunConfig) -> VLModel:
    """The model ``pretrain`` would optimize: backbone plus pretraining heads."""
    model = build(cfg.model)
    attach_pretrain_heads(model, itm_hidden=cfg.objectives.itm_hidden)
    apply_freeze(model, cfg.freeze)
    return model


def cmd_param_report(cfg: RunConfig, out) -> None:
    model = pretrain_param_model(cfg)
    report = param_report(model)
    print(format_param_report(report), file=out)
    trainable = report["all"]["trainable"]
    print(f"trainable fraction: {trainable / report['all']['total']:.4f}", file=out)
    print(f"optimizer state elements: {2 * trainable:,}", file=out)


def _grid_slug(text: str, vision: str) -> str:
    return f"text-{text.lower()}_vision-{vision.lower()}"


def run_cell(cell_dir: Path, work: Callable[[], dict[str, Any]]) -> dict[str, Any]:
    """Resumable grid cell: a finished cell leaves ``result.json`` behind."""
    done = cell_dir / "result.json"
    if done.exists():
        log.info("skipping finished cell %s", cell_dir.name)
        return json.loads(done.read_text(encoding="utf-8"))
    cell_dir.mkdir(parents=True, exist_ok=True)
    result = work()
    done.write_text(json.dumps(result, sort_keys=True) + "\n", encoding="utf-8")
    return result


def cmd_ablate_freeze(cfg: RunConfig, out) -> None:
    if cfg.model.model_type != TWO_TOWER:
        raise ConfigError("ablate-freeze runs on two-tower models")
    run_dir = Path(cfg.run_dir)
    write_resolved(cfg, run_dir)
    corpus = load_corpus(cfg, "pretrain")
    results = []
    for text, vision, spec in FREEZE_GRID:
        cell = run_dir / _grid_slug(text, vision)

        def work(spec=spec, cell=cell, text=text, vision=vision):
            _, summary = pretrain_model(cfg, corpus, cell / "pretrain", freeze=spec)
            acc = {}
            for task in cfg.tasks:
                acc[task] = finetune_task(cfg, cell / "pretrain" / "final.ckpt", task, cell / task)["accuracy"]
            return {
                "text_encoder": text,
                "vision_encoder": vision,
                "trainable": summary["trainable"],
                "total": summary["total"],
                "optimizer_state": summary["optimizer_state"],
                "pretrain_eval": summary["eval"],
                "accuracy": acc,
            }

        results.append(run_cell(cell, work))
    write_jsonl(run_dir / "report.jsonl", results)
    table = freeze_report(read_jsonl(run_dir / "report.jsonl"), list(cfg.tasks))
    (run_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table, file=out)


def cmd_bootstrap(cfg: RunConfig, out) -> None:
    """Train text-only and vision-only source encoders for init-compare."""
    run_dir = Path(cfg.run_dir)
    write_resolved(cfg, run_dir)
    corpus = load_corpus(cfg, "pretrain")
    mcfg = replace(cfg.model, model_type=ONE_TOWER)
    tc = replace(cfg.pretrain, steps=cfg.bootstrap_steps, eval_every=0, checkpoint_every=0)
    paths = {}
    for kind in ("text", "vision"):
        paths[kind] = bootstrap_source(kind, mcfg, corpus, tc, run_dir / f"{kind}_source")
    print(format_table(["source", "checkpoint"], [[k, str(v)] for k, v in paths.items()]), file=out)


def _first_object_color(record: dict) -> int:
    objs = sorted(record["scene"]["objects"])
    return list(COLORS).index(objs[0][3])


def bootstrap_source(kind: str, mcfg: ModelConfig, corpus: Corpus, tc: TrainConfig, out_dir: Path) -> Path:
    """Text: masked-token prediction over captions. Vision: color of the
    first object in reading order, from the CLS state."""
    idx = corpus.split("train")
    vocab = corpus.vocab
    n_out = mcfg.vocab_size if kind == "text" else len(COLORS)
    model = UnimodalModel(kind, mcfg, n_out, mcfg.initializer([mcfg.seed, 17]))
    spec = MlmSpec()

    def batches(step):
        rng = np.random.default_rng([tc.seed, step, 1 << 23])
        return rng.choice(idx, size=min(tc.batch_size, len(idx)), replace=False)

    def loss_fn(m, pick, ctx):
        if kind == "text":
            ids, mask = encode_text([corpus.records[int(i)]["caption"] for i in pick], vocab, mcfg.max_text_len)
            labels = np.full(ids.shape, IGNORE, dtype=np.int64)
            for b in range(len(pick)):
                ids[b], labels[b] = apply_mlm_mask(ids[b], spec, example_rng(tc.seed, int(pick[b]), b), len(vocab))
            states = m.forward(ids, mask, ctx)
            rows, cols = np.nonzero(labels != IGNORE)
            if rows.size == 0:
                return T.Tensor(np.zeros((), np.float32)), {}
            logits = m.out(T.slice_(states, (rows, cols)))
            loss = T.cross_entropy(logits, labels[rows, cols])
        else:
            states = m.forward(corpus.images[pick], None, ctx)
            labels = np.array([_first_object_color(corpus.records[int(i)]) for i in pick])
            loss = T.cross_entropy(m.out(T.slice_(states, (slice(None), 0))), labels)
        return loss, {}

    train(model, loss_fn, batches, tc, None, out_dir)
    return out_dir / "final.ckpt"


def cmd_init_compare(cfg: RunConfig, out) -> None:
    mcfg = replace(cfg.model, model_type=ONE_TOWER)
    sources = {}
    for kind in ("text", "vision"):
        path = getattr(cfg.init, f"{kind}_checkpoint")
        if not path or not Path(path).exists():
            raise FileNotFoundError(
                f"missing {kind} source checkpoint ({path!r}); run `vltower bootstrap` and set init.{kind}_checkpoint"
            )
        sources[kind] = path
    corpus = load_corpus(cfg, "pretrain")
    run_dir = Path(cfg.run_dir)
    write_resolved(cfg, run_dir)
    rows = [("Random", None), ("ViT-like", "vision"), ("BERT-like", "text")]
    results = []
    for row, kind in rows:
        cell = run_dir / row.lower()

        def work(row=row, kind=kind, cell=cell):
            init = InitSource() if kind is None else InitSource([CheckpointSource(sources[kind], INIT_REMAPS[(ONE_TOWER, kind)])])
            model, summary = pretrain_model(cfg, corpus, cell / "pretrain", FreezeSpec(), init, mcfg)
            acc = {}
            for task in cfg.tasks:
                acc[task] = finetune_task(cfg, cell / "pretrain" / "final.ckpt", task, cell / task)["accuracy"]
            return {
                "row": row,
                "init": kind or "random",
                "mapped": len(model.init_report["mapped"]),
                "pretrain_eval": summary["eval"],
                "accuracy": acc,
            }

        results.append(run_cell(cell, work))
    write_jsonl(run_dir / "report.jsonl", results)
    table = init_report(read_jsonl(run_dir / "report.jsonl"), list(cfg.tasks))
    (run_dir / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table, file=out)


COMMANDS: dict[str, Callable[[RunConfig, Any], None]] = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "ablate-freeze": cmd_ablate_freeze,
    "init-compare": cmd_init_compare,
    "param-report": cmd_param_report,
    "bootstrap": cmd_bootstrap,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vltower", description="Desk-scale vision-language encoder experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("overrides", nargs="*", metavar="path.to.field=value")
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--allow-frozen-finetune", action="store_true", help="fine-tune even if the config freezes modules")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.allow_frozen_finetune:
            overrides.append("allow_frozen_finetune=true")
        cfg = resolve_config(args.config, overrides)
        COMMANDS[args.command](cfg, out)
    except (FileNotFoundError, CheckpointError, ManifestError, PPMError) as e:
        print(f"error [input]: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, TaskError, ValueError) as e:
        print(f"error [config]: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as e:
        print(f"error [refused]: {e}", file=sys.stderr)
        return EXIT_REFUSED
    except TrainingAborted as e:
        print(f"error [training]: {e}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
