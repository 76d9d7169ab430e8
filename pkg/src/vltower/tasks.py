"""Downstream task heads, batch assembly and metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .data import SNLI_LABELS, VQA_ANSWERS, Batch, Corpus, corpus_batch
from .layers import EVAL, Context
from .models import ClassifierHead, VLModel
from .pretrain import ItmSpec, make_itm_batch
from .tensor import Tensor

TASK_KINDS = ("snli_ve", "nlvr2", "ref_res", "retrieval", "vqa")


class TaskError(ValueError):
    pass


@dataclass
class TaskSpec:
    kind: str
    num_classes: int | None = None
    head_hidden: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskError(f"unknown task {self.kind!r}; expected one of {TASK_KINDS}")
        if self.num_classes is None:
            self.num_classes = {"snli_ve": 3, "nlvr2": 2, "ref_res": 4, "retrieval": 2, "vqa": len(VQA_ANSWERS)}[self.kind]

    def head_input_dim(self, model: VLModel) -> int:
        cfg = model.config
        if self.kind == "nlvr2":
            return 2 * cfg.pooled_dim
        if self.kind == "ref_res":
            return cfg.image_state_dim
        return cfg.pooled_dim


def attach_task_head(model: VLModel, spec: TaskSpec, seed: int = 0) -> ClassifierHead:
    """Add (or reuse) the head for ``spec``. Retrieval scores with the ITM head."""
    if spec.kind == "retrieval":
        head = model.heads.get("itm")
        if head is None:
            head = model.heads.add("itm", ClassifierHead(model.config.pooled_dim, 2, model.config.initializer([seed, 11])))
        return head
    existing = model.heads.get(spec.kind)
    n_out = 1 if spec.kind == "ref_res" else spec.num_classes
    if existing is not None:
        if existing.n_out != n_out:
            raise TaskError(f"{spec.kind} head has {existing.n_out} outputs, task needs {n_out}")
        return existing
    rng = model.config.initializer([seed, TASK_KINDS.index(spec.kind), 13])
    return model.heads.add(spec.kind, ClassifierHead(spec.head_input_dim(model), n_out, rng, spec.head_hidden))


# ---------------------------------------------------------------------------
# forwards


def snli_ve_forward(model: VLModel, head, images, text_ids, text_mask, ctx: Context = EVAL) -> Tensor:
    """Logits over (entailment, neutral, contradiction)."""
    return head(model.forward(text_ids, text_mask, images, ctx).pooled)


def vqa_forward(model: VLModel, head, images, text_ids, text_mask, ctx: Context = EVAL) -> Tensor:
    return head(model.forward(text_ids, text_mask, images, ctx).pooled)


def nlvr2_pooled(model: VLModel, images_a, images_b, text_ids, text_mask, ctx: Context = EVAL) -> Tensor:
    """Shared-weight passes over (statement, image_a) and (statement, image_b), concatenated."""
    a = model.forward(text_ids, text_mask, images_a, ctx).pooled
    b = model.forward(text_ids, text_mask, images_b, ctx).pooled
    return T.concat([a, b], axis=-1)


def nlvr2_forward(model: VLModel, head, images_a, images_b, text_ids, text_mask, ctx: Context = EVAL) -> Tensor:
    return head(nlvr2_pooled(model, images_a, images_b, text_ids, text_mask, ctx))


def region_pooling(regions: Sequence[Sequence[Sequence[int]]], num_patches: int, dtype=np.float32) -> np.ndarray:
    """(B, K, N+1) averaging weights over image positions; position 0 is the image CLS."""
    ks = {len(r) for r in regions}
    if len(ks) != 1:
        raise TaskError(f"all examples in a batch need the same candidate count, got {sorted(ks)}")
    k = ks.pop()
    if k < 2:
        raise TaskError(f"reference resolution needs at least 2 candidates, got {k}")
    w = np.zeros((len(regions), k, num_patches + 1), dtype=dtype)
    for b, cands in enumerate(regions):
        for j, patches in enumerate(cands):
            if len(patches) == 0:
                raise TaskError(f"example {b}: candidate {j} covers no patches")
            for p in patches:
                if not 0 <= p < num_patches:
                    raise TaskError(f"example {b}: patch index {p} outside [0, {num_patches})")
                w[b, j, 1 + p] += 1.0 / len(patches)
    return w


def ref_res_forward(model: VLModel, head, images, text_ids, text_mask, regions, ctx: Context = EVAL) -> Tensor:
    """(B, K) candidate scores: the scorer applied to each region's mean image state."""
    out = model.forward(text_ids, text_mask, images, ctx)
    w = region_pooling(regions, model.config.num_patches, out.image_states.dtype)
    pooled = T.matmul(Tensor(w), out.image_states)
    scores = head(pooled)
    return T.reshape(scores, scores.shape[:2])


def task_logits(model: VLModel, kind: str, batch: Batch, ctx: Context = EVAL) -> Tensor:
    head = model.heads.get("itm" if kind == "retrieval" else kind)
    if head is None:
        raise TaskError(f"model has no {kind} head")
    if kind in ("snli_ve", "retrieval"):
        return snli_ve_forward(model, head, batch.images, batch.text_ids, batch.text_mask, ctx)
    if kind == "vqa":
        return vqa_forward(model, head, batch.images, batch.text_ids, batch.text_mask, ctx)
    if kind == "nlvr2":
        return nlvr2_forward(model, head, batch.images, batch.images2, batch.text_ids, batch.text_mask, ctx)
    return ref_res_forward(model, head, batch.images, batch.text_ids, batch.text_mask, batch.regions, ctx)


def task_loss(model: VLModel, kind: str, batch: Batch, ctx: Context = EVAL) -> tuple[Tensor, dict[str, float]]:
    loss = T.cross_entropy(task_logits(model, kind, batch, ctx), batch.labels)
    return loss, {kind: float(loss.data)}


# ---------------------------------------------------------------------------
# retrieval


def score_matrix(model: VLModel, itm_head, texts: Batch, images: np.ndarray) -> np.ndarray:
    """``S[t, i]`` = matched-class ITM logit for text ``t`` with image ``i``."""
    n_t, n_i = len(texts), len(images)
    scores = np.empty((n_t, n_i), dtype=np.float64)
    with T.no_record():
        for t in range(n_t):
            ids = np.repeat(texts.text_ids[t : t + 1], n_i, axis=0)
            mask = np.repeat(texts.text_mask[t : t + 1], n_i, axis=0)
            logits = itm_head(model.forward(ids, mask, images).pooled)
            scores[t] = logits.data[:, 1]
    return scores


def rank(scores: np.ndarray) -> np.ndarray:
    """Per-row descending order; ties go to the lower index."""
    return np.argsort(-scores, axis=1, kind="stable")


def recall_at_k(ranked: np.ndarray, targets: np.ndarray, k: int) -> float:
    k = min(k, ranked.shape[1])
    hits = (ranked[:, :k] == np.asarray(targets)[:, None]).any(axis=1)
    return float(hits.mean())


def retrieval_rank(model: VLModel, itm_head, texts: Batch, images: np.ndarray, direction: str = "text_to_image") -> dict[str, Any]:
    """Exhaustive scoring; text ``j`` is paired with image ``j``."""
    scores = score_matrix(model, itm_head, texts, images)
    if direction == "image_to_text":
        scores = scores.T
    elif direction != "text_to_image":
        raise TaskError(f"direction must be text_to_image or image_to_text, got {direction!r}")
    ranked = rank(scores)
    targets = np.arange(scores.shape[0])
    return {
        "ranked": ranked,
        "recall@1": recall_at_k(ranked, targets, 1),
        "recall@5": recall_at_k(ranked, targets, 5),
    }


# ---------------------------------------------------------------------------
# metrics


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ValueError(f"accuracy needs equal non-empty shapes, got {predictions.shape} and {labels.shape}")
    return float((predictions == labels).mean())


def binomial_pvalue(successes: int, trials: int, chance: float) -> float:
    """Two-sided exact binomial test against ``chance``."""
    return float(stats.binomtest(successes, trials, chance, alternative="two-sided").pvalue)


# ---------------------------------------------------------------------------
# corpora -> batches


def labels_for(kind: str, record: dict) -> int:
    if kind == "vqa":
        return VQA_ANSWERS.index(record["answer"])
    return int(record["label"])


def check_answer_vocab(model: VLModel, answers: Sequence[str] = VQA_ANSWERS) -> None:
    head = model.heads.get("vqa")
    if head is not None and head.n_out != len(answers):
        raise TaskError(f"vqa head predicts {head.n_out} answers but the eval set has {len(answers)}")


class TaskStream:
    """Deterministic fine-tuning batches from a task corpus."""

    def __init__(self, corpus: Corpus, kind: str, batch_size: int, max_len: int, seed: int = 0, split: str = "train"):
        self.corpus, self.kind = corpus, kind
        self.indices = corpus.split(split)
        self.batch_size = min(batch_size, len(self.indices))
        self.max_len, self.seed = max_len, seed

    def __call__(self, step: int) -> Batch:
        rng = np.random.default_rng([self.seed, step, 1 << 22])
        pick = rng.choice(self.indices, size=self.batch_size, replace=False)
        if self.kind == "retrieval":
            return self._retrieval_batch(pick, rng)
        return corpus_batch(self.corpus, pick, self.max_len, lambda r: labels_for(self.kind, r))

    def _retrieval_batch(self, pick, rng) -> Batch:
        # in-batch negatives for the ITM scorer
        shown, labels = make_itm_batch(pick, ItmSpec(), rng)
        batch = corpus_batch(self.corpus, pick, self.max_len, lambda r: 1)
        batch.images = self.corpus.images[shown]
        batch.labels = labels
        return batch


def evaluate_task(model: VLModel, kind: str, corpus: Corpus, split: str = "dev", max_len: int = 24, batch_size: int = 64) -> tuple[dict[str, float], list[dict[str, Any]]]:
    """Metrics plus per-example prediction records for ``split``."""
    idx = corpus.split(split)
    if kind == "retrieval":
        return _evaluate_retrieval(model, corpus, idx, max_len)
    if kind == "vqa":
        check_answer_vocab(model)
    preds, labels, records = [], [], []
    with T.no_record():
        for start in range(0, len(idx), batch_size):
            chunk = idx[start : start + batch_size]
            batch = corpus_batch(corpus, chunk, max_len, lambda r: labels_for(kind, r))
            scores = task_logits(model, kind, batch).data
            p = scores.argmax(-1)
            preds.append(p)
            labels.append(batch.labels)
            for i, rid in enumerate(batch.ids):
                records.append(
                    {"id": rid, "label": int(batch.labels[i]), "prediction": int(p[i]), "scores": [float(s) for s in scores[i]]}
                )
    preds_a, labels_a = np.concatenate(preds), np.concatenate(labels)
    acc = accuracy(preds_a, labels_a)
    chance = 1.0 / {"snli_ve": 3, "nlvr2": 2, "ref_res": len(corpus.records[idx[0]].get("regions", [0, 0])), "vqa": len(VQA_ANSWERS)}[kind]
    metrics = {
        "accuracy": acc,
        "n": int(len(preds_a)),
        "chance": chance,
        "p_value": binomial_pvalue(int((preds_a == labels_a).sum()), len(preds_a), chance),
    }
    return metrics, records


def _evaluate_retrieval(model, corpus: Corpus, idx, max_len: int, gallery: int = 20):
    idx = idx[:gallery]
    texts = corpus_batch(corpus, idx, max_len)
    res = retrieval_rank(model, model.heads.itm, texts, corpus.images[idx])
    records = [
        {"id": corpus.records[int(i)]["id"], "label": j, "prediction": int(res["ranked"][j, 0]), "scores": []}
        for j, i in enumerate(idx)
    ]
    return {"recall@1": res["recall@1"], "recall@5": res["recall@5"], "n": int(len(idx))}, records


def dump_predictions(path, records: list[dict[str, Any]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


SNLI_CLASSES = SNLI_LABELS
