"""Masked language modeling and image-text matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import CLS, MASK, PAD, SEP, UNK, Batch, Corpus, encode_text
from .layers import EVAL, Context
from .models import ClassifierHead, VLModel
from .tensor import Tensor

IGNORE = -100


@dataclass
class MlmSpec:
    mask_prob: float = 0.15
    # fractions of selected positions replaced by [MASK], a random token, or kept
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    ignore_index: int = IGNORE
    special_ids: frozenset[int] = field(default_factory=lambda: frozenset({PAD, CLS, SEP, MASK, UNK}))

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"MLM split must sum to 1, got {self.split}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must be in [0, 1], got {self.mask_prob}")


@dataclass
class ItmSpec:
    negative_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.negative_prob < 1.0:
            raise ValueError(f"negative_prob must be in (0, 1), got {self.negative_prob}")


def example_rng(seed: int, step: int, example: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, example])


def apply_mlm_mask(
    token_ids: np.ndarray, spec: MlmSpec, rng: np.random.Generator, vocab_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a token sequence for MLM.

    Returns ``(corrupted, labels)`` where labels hold the original id at
    selected positions and ``spec.ignore_index`` elsewhere.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    maskable = ~np.isin(ids, list(spec.special_ids))
    selected = maskable & (rng.random(ids.shape) < spec.mask_prob)
    labels = np.where(selected, ids, spec.ignore_index)
    choice = rng.random(ids.shape)
    to_mask = selected & (choice < spec.split[0])
    to_random = selected & (choice >= spec.split[0]) & (choice < spec.split[0] + spec.split[1])
    replacement_pool = np.array([i for i in range(vocab_size) if i not in spec.special_ids], dtype=np.int64)
    corrupted = ids.copy()
    corrupted[to_mask] = MASK
    n_rand = int(to_random.sum())
    if n_rand:
        corrupted[to_random] = replacement_pool[rng.integers(0, len(replacement_pool), size=n_rand)]
    return corrupted, labels


def make_itm_batch(
    image_ids: np.ndarray,
    spec: ItmSpec,
    rng: np.random.Generator,
    pool: np.ndarray | None = None,
    force_negative: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Pick the image shown with each caption.

    Each example is independently made a negative with probability
    ``spec.negative_prob`` by substituting a uniformly chosen *different*
    image from ``pool`` (default: the distinct images of the batch).
    Returns ``(shown_image_ids, labels)`` with label 1 = matched.
    """
    image_ids = np.asarray(image_ids)
    pool = np.unique(image_ids) if pool is None else np.unique(np.asarray(pool))
    if pool.size < 2:
        raise ValueError("image-text matching needs at least 2 distinct images in the pool")
    n = len(image_ids)
    negate = rng.random(n) < spec.negative_prob
    if force_negative is not None:
        forced = np.asarray(force_negative, dtype=bool)
        negate = np.where(forced, True, negate)
    shown = image_ids.copy()
    for i in np.flatnonzero(negate):
        pos = np.searchsorted(pool, image_ids[i])
        own = pos < pool.size and pool[pos] == image_ids[i]
        # uniform over the pool minus the positive image
        j = int(rng.integers(pool.size - 1 if own else pool.size))
        if own and j >= pos:
            j += 1
        shown[i] = pool[j]
    return shown, (~negate).astype(np.int64)


def attach_pretrain_heads(model: VLModel, seed: int | None = None, itm_hidden: int | None = None) -> None:
    cfg = model.config
    rng = cfg.initializer([cfg.seed if seed is None else seed, 7])
    if "mlm" not in model.heads:
        model.heads.add("mlm", ClassifierHead(cfg.text_state_dim, cfg.vocab_size, rng))
    if "itm" not in model.heads:
        model.heads.add("itm", ClassifierHead(cfg.pooled_dim, 2, rng, itm_hidden))


def mlm_logits(model: VLModel, text_states: Tensor, labels: np.ndarray, ignore_index: int = IGNORE) -> tuple[Tensor | None, np.ndarray]:
    """Vocab logits at the labelled text positions only, shape (M, V)."""
    rows, cols = np.nonzero(labels != ignore_index)
    if rows.size == 0:
        return None, np.zeros(0, dtype=np.int64)
    picked = T.slice_(text_states, (rows, cols))
    return model.heads.mlm(picked), labels[rows, cols]


def pretrain_loss(
    model: VLModel,
    batch: Batch,
    ctx: Context = EVAL,
    objectives: tuple[str, ...] = ("mlm", "itm"),
) -> tuple[Tensor, dict[str, float]]:
    """``total = mlm + itm`` with unit weights; either term may be disabled."""
    if not objectives:
        raise ValueError("at least one pretraining objective is required")
    out = model.forward(batch.text_ids, batch.text_mask, batch.images, ctx)
    terms = []
    parts: dict[str, float] = {}
    if "mlm" in objectives:
        logits, labels = mlm_logits(model, out.text_states, batch.mlm_labels)
        if logits is None:
            mlm = Tensor(np.zeros((), dtype=out.pooled.dtype))
        else:
            mlm = T.cross_entropy(logits, labels)
        terms.append(mlm)
        parts["mlm"] = float(mlm.data)
    if "itm" in objectives:
        itm = T.cross_entropy(model.heads.itm(out.pooled), batch.itm_labels)
        terms.append(itm)
        parts["itm"] = float(itm.data)
    total = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    return total, parts


class PretrainStream:
    """Deterministic pretraining batches: ``stream(step)`` depends only on
    ``(seed, step)``. ITM negatives are drawn from the whole split; MLM
    labels are kept only on matched pairs."""

    def __init__(
        self,
        corpus: Corpus,
        batch_size: int,
        max_len: int,
        seed: int = 0,
        split: str = "train",
        mlm: MlmSpec | None = None,
        itm: ItmSpec | None = None,
        objectives: tuple[str, ...] = ("mlm", "itm"),
    ):
        self.corpus = corpus
        self.indices = corpus.split(split)
        self.batch_size = min(batch_size, len(self.indices))
        self.max_len = max_len
        self.seed = seed
        self.mlm = mlm or MlmSpec()
        self.itm = itm or ItmSpec()
        self.objectives = tuple(objectives)

    def __call__(self, step: int, corrupt: bool = True) -> Batch:
        rng = np.random.default_rng([self.seed, step, 1 << 20])
        pick = rng.choice(self.indices, size=self.batch_size, replace=False)
        return self.make(pick, step, corrupt)

    def make(self, pick: np.ndarray, step: int, corrupt: bool = True) -> Batch:
        """Every caption is corrupted, matched or not, so a [MASK] token
        never reveals the ITM label. ``corrupt=False`` yields the same
        pairing with clean captions and no MLM labels."""
        captions = [self.corpus.records[int(i)]["caption"] for i in pick]
        ids, mask = encode_text(captions, self.corpus.vocab, self.max_len)
        if "itm" in self.objectives:
            rng = np.random.default_rng([self.seed, step, 1 << 21])
            shown, itm_labels = make_itm_batch(pick, self.itm, rng, pool=self.indices)
        else:
            shown, itm_labels = pick, np.ones(len(pick), dtype=np.int64)
        corrupted = ids.copy()
        mlm_labels = np.full(ids.shape, IGNORE, dtype=np.int64)
        if corrupt and "mlm" in self.objectives:
            vsize = len(self.corpus.vocab)
            for b in range(len(pick)):
                c, lab = apply_mlm_mask(ids[b], self.mlm, example_rng(self.seed, step, b), vsize)
                corrupted[b] = c
                if itm_labels[b] == 1:
                    mlm_labels[b] = lab
        return Batch(
            text_ids=corrupted,
            text_mask=mask,
            images=self.corpus.images[shown],
            mlm_labels=mlm_labels,
            itm_labels=itm_labels,
            ids=[self.corpus.records[int(i)]["id"] for i in pick],
        )


def evaluate_pretrain(model: VLModel, stream: PretrainStream, n_batches: int = 4, offset: int = 10**6) -> dict[str, float]:
    """Held-out MLM loss and ITM accuracy over fixed evaluation batches.

    MLM is scored on corrupted captions, ITM on the same pairs with clean
    captions: a masked color or shape word can make a mismatch undecidable.
    """
    mlm_sum = mlm_n = 0.0
    correct = total = 0
    with T.no_record():
        for k in range(n_batches):
            if "mlm" in model.heads:
                batch = stream(offset + k)
                out = model.forward(batch.text_ids, batch.text_mask, batch.images)
                logits, labels = mlm_logits(model, out.text_states, batch.mlm_labels)
                if logits is not None:
                    mlm_sum += float(T.cross_entropy(logits, labels).data) * len(labels)
                    mlm_n += len(labels)
            if "itm" not in model.heads:
                continue
            batch = stream(offset + k, corrupt=False)
            out = model.forward(batch.text_ids, batch.text_mask, batch.images)
            pred = model.heads.itm(out.pooled).data.argmax(-1)
            correct += int((pred == batch.itm_labels).sum())
            total += len(pred)
    metrics = {}
    if mlm_n:
        metrics["mlm_loss"] = mlm_sum / mlm_n
    if total:
        metrics["itm_acc"] = correct / total
    return metrics
