"""
Benchmark construction and scoring.

Construction mirrors a similarity-ranked distractor protocol: multiple-choice
items are built by picking the k most-similar wrong answers to the gold
string from an answer pool (ties broken lexicographically, then by pool
order), and 5-candidate items can be expanded to 10 by appending the five
most-similar unused strings.  Candidate order is shuffled deterministically
per item id, with the gold index recorded after the shuffle.

Scoring covers four task families: multiple-choice accuracy, open-answer
accuracy plus a 0–5 token-F1 score, mean average precision, and nDCG.  Model
predictions come from the language model itself: each candidate is scored by
the mean next-token cross-entropy of its tokens given the visual prefix and
the question, and the candidate with the lowest loss wins.

The similarity backend is pluggable; the default is a deterministic
bag-of-words cosine, so the whole harness runs without any external model.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .jsonio import derive_seed
from .losses import ccl, kl_align, vtg_loss
from .models.encoder import encode_batch
from .models.lm import BOS, EOS, PAD, Vocab
from .models.pipeline import PipelineModel, concat_guidance

__all__ = [
    "EvalItem",
    "SimilarityFn",
    "bow_cosine",
    "build_mcq",
    "expand_candidates",
    "score_mcq",
    "normalize_answer",
    "score_open",
    "mean_ap",
    "ndcg",
    "candidate_losses",
    "greedy_decode",
    "run_eval",
    "save_items",
    "load_items",
    "pair_features",
    "mapping_metrics",
    "retrieval_top1",
]

TASK_TYPES = ("mcq", "open", "retrieval", "multilabel")


# ---------------------------------------------------------------------------
# Items
# ---------------------------------------------------------------------------


@dataclass
class EvalItem:
    item_id: str
    question: str
    candidates: list[str]  # ordered; shuffled at construction
    gold_index: int
    task_type: str = "mcq"
    provenance: list[str] = field(default_factory=list)  # source pool ids

    def validate(self) -> None:
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"unknown task type {self.task_type!r}")
        if not 0 <= self.gold_index < len(self.candidates):
            raise ValueError(
                f"gold index {self.gold_index} outside candidate list "
                f"of length {len(self.candidates)}"
            )
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError(f"item {self.item_id!r} has duplicate candidates")
        if self.task_type != "open" and len(self.candidates) not in (4, 5, 10):
            raise ValueError(
                f"item {self.item_id!r} has {len(self.candidates)} candidates; "
                "choice items carry 4, 5, or 10"
            )

    @property
    def gold(self) -> str:
        return self.candidates[self.gold_index]

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "question": self.question,
            "candidates": list(self.candidates),
            "gold_index": self.gold_index,
            "task_type": self.task_type,
            "provenance": list(self.provenance),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalItem":
        item = cls(
            item_id=obj["item_id"],
            question=obj["question"],
            candidates=list(obj["candidates"]),
            gold_index=int(obj["gold_index"]),
            task_type=obj.get("task_type", "mcq"),
            provenance=list(obj.get("provenance", [])),
        )
        item.validate()
        return item


def save_items(path: str | Path, items: Sequence[EvalItem]) -> None:
    """One JSON document per line."""
    lines = [json.dumps(item.to_json(), ensure_ascii=False) for item in items]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_items(path: str | Path) -> list[EvalItem]:
    items = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            items.append(EvalItem.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"{path}:{i + 1}: bad eval item: {exc}") from exc
    return items


# ---------------------------------------------------------------------------
# Similarity backends
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimilarityFn:
    """Pluggable text-similarity backend: embed to a vector, score two vectors."""

    name: str
    embed: Callable[[str], Any]
    score: Callable[[Any, Any], float]


def _bow(text: str) -> Counter:
    return Counter(text.lower().split())


def _cosine(a: Counter, b: Counter) -> float:
    if not a or not b:
        return 0.0
    dot = sum(c * b[t] for t, c in a.items())
    na = np.sqrt(sum(c * c for c in a.values()))
    nb = np.sqrt(sum(c * c for c in b.values()))
    return float(dot / (na * nb))


def bow_cosine() -> SimilarityFn:
    """Bag-of-words cosine over lowercased whitespace tokens."""
    return SimilarityFn(name="bow-cosine", embed=_bow, score=_cosine)


# ---------------------------------------------------------------------------
# Item construction
# ---------------------------------------------------------------------------


def _ranked_monogold(
    gold: str, pool: Sequence[str], sim: SimilarityFn, exclude: set[str]
) -> list[str]:
    """Pool entries ranked most-similar-to-gold first; deterministic ties."""
    gold_vec = sim.embed(gold)
    seen: set[str] = set()
    scored = []
    for idx, text in enumerate(pool):
        if text in exclude or text in seen:
            continue
        seen.add(text)
        scored.append((-sim.score(gold_vec, sim.embed(text)), text, idx))
    scored.sort()
    return [text for _, text, _ in scored]


def build_mcq(
    gold: str,
    pool: Sequence[str],
    k: int,
    sim: SimilarityFn,
    seed: int,
    *,
    item_id: str = "",
    question: str = "",
    task_type: str = "mcq",
    provenance: Sequence[str] = (),
) -> EvalItem:
    """
    Gold plus the k most-similar wrong answers, deterministically shuffled.

    Ties in similarity break lexicographically, then by pool position.  The
    shuffle is seeded from (seed, item_id) so items are reproducible no matter
    in which order they are built.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if gold not in pool:
        raise ValueError("pool must contain the gold answer")
    ranked = _ranked_monogold(gold, pool, sim, exclude={gold})
    if len(ranked) < k:
        raise ValueError(
            f"pool has only {len(ranked)} distinct non-gold strings; need {k}"
        )
    candidates = [gold] + ranked[:k]
    rng = np.random.default_rng(derive_seed("mcq-shuffle", seed, item_id))
    order = rng.permutation(len(candidates))
    shuffled = [candidates[i] for i in order]
    item = EvalItem(
        item_id=item_id,
        question=question,
        candidates=shuffled,
        gold_index=shuffled.index(gold),
        task_type=task_type,
        provenance=list(provenance),
    )
    item.validate()
    return item


def expand_candidates(
    item: EvalItem, pool: Sequence[str], sim: SimilarityFn
) -> EvalItem:
    """Grow a 5-candidate item to 10 by appending the most-similar new strings."""
    if len(item.candidates) != 5:
        raise ValueError(
            f"expansion starts from 5 candidates, item has {len(item.candidates)}"
        )
    ranked = _ranked_monogold(item.gold, pool, sim, exclude=set(item.candidates))
    if len(ranked) < 5:
        raise ValueError(
            f"pool has only {len(ranked)} usable new strings; need 5 to expand"
        )
    expanded = EvalItem(
        item_id=item.item_id,
        question=item.question,
        candidates=list(item.candidates) + ranked[:5],
        gold_index=item.gold_index,
        task_type=item.task_type,
        provenance=list(item.provenance),
    )
    expanded.validate()
    return expanded


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def score_mcq(predictions: dict[str, int], items: Sequence[EvalItem]) -> float:
    """Exact fraction of items whose predicted index is the gold index."""
    if not items:
        raise ValueError("no items to score")
    missing = sorted(i.item_id for i in items if i.item_id not in predictions)
    if missing:
        raise ValueError(f"missing prediction(s) for item(s): {missing}")
    hits = sum(1 for i in items if predictions[i.item_id] == i.gold_index)
    return hits / len(items)


_ARTICLES = {"a", "an", "the"}
_PUNCT = re.compile(r"[^\w\s]")


def normalize_answer(text: str) -> list[str]:
    """Lowercase, strip punctuation, drop article words; returns tokens."""
    cleaned = _PUNCT.sub(" ", text.lower())
    return [t for t in cleaned.split() if t not in _ARTICLES]


def score_open(pred: str, gold: str) -> tuple[int, float]:
    """
    Exact-match accuracy and a 0–5 answer-quality score.

    The score is 5 x token-level F1 between normalized token multisets — a
    deterministic stand-in for judge-model grading, not comparable to any
    judge-scored numbers.
    """
    p_tokens = normalize_answer(pred)
    g_tokens = normalize_answer(gold)
    acc = 1 if p_tokens == g_tokens else 0
    if not p_tokens and not g_tokens:
        return 1, 5.0
    if not p_tokens or not g_tokens:
        return acc, 0.0
    overlap = Counter(p_tokens) & Counter(g_tokens)
    tp = sum(overlap.values())
    if tp == 0:
        return acc, 0.0
    precision = tp / len(p_tokens)
    recall = tp / len(g_tokens)
    f1 = 2 * precision * recall / (precision + recall)
    return acc, 5.0 * f1


def mean_ap(per_query: Sequence[Sequence[int]]) -> float:
    """
    Mean average precision over queries.

    Each query is its relevance flags in rank order (1 = relevant).  AP is the
    mean of precision@rank over the relevant ranks.
    """
    if not per_query:
        raise ValueError("no queries")
    aps = []
    for qi, flags in enumerate(per_query):
        flags = [int(bool(f)) for f in flags]
        n_rel = sum(flags)
        if n_rel == 0:
            raise ValueError(f"query {qi} has no relevant items")
        hits = 0
        precisions = []
        for rank, f in enumerate(flags, start=1):
            if f:
                hits += 1
                precisions.append(hits / rank)
        aps.append(sum(precisions) / n_rel)
    return float(np.mean(aps))


def ndcg(gains: Sequence[float], ideal: Sequence[float]) -> float:
    """
    Normalized discounted cumulative gain with raw (non-exponentiated) gains.

    ``gains`` are in rank order; ``ideal`` is the best achievable ordering
    (must be sorted descending).  Discount is 1/log2(rank + 1).
    """
    gains = [float(g) for g in gains]
    ideal = [float(g) for g in ideal]
    if any(g < 0 for g in gains) or any(g < 0 for g in ideal):
        raise ValueError("gains must be non-negative")
    if any(ideal[i] < ideal[i + 1] for i in range(len(ideal) - 1)):
        raise ValueError("ideal gains must be sorted descending")
    if not any(ideal):
        raise ValueError("ideal gains are all zero; nDCG undefined")

    def dcg(seq: Sequence[float]) -> float:
        return sum(g / np.log2(i + 1) for i, g in enumerate(seq, start=1))

    return float(dcg(gains) / dcg(ideal))


# ---------------------------------------------------------------------------
# Model predictions
# ---------------------------------------------------------------------------


def _pack_single(
    token_ids: list[int], prompt_len: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    in_ids = np.array([[BOS] + token_ids[:-1]], dtype=np.int64)
    targets = np.array([token_ids], dtype=np.int64)
    mask = np.ones_like(targets, dtype=bool)
    mask[0, :prompt_len] = False
    return in_ids, targets, mask


def _guidance_prefix(model: PipelineModel, ego_frames: np.ndarray) -> np.ndarray:
    """Visual prefix the model sees downstream: [F(x); x] from the ego clip."""
    x_feats, _ = encode_batch(model.ego_enc, np.asarray(ego_frames)[None, :, :])
    mapped, _ = model.map_f.forward(x_feats)
    return concat_guidance(x_feats, mapped)


def candidate_losses(
    model: PipelineModel, ego_frames: np.ndarray, question: str, candidates: Sequence[str]
) -> list[float]:
    """Mean text loss per candidate given the visual prefix and the question."""
    vocab = model.vocab
    prefix = _guidance_prefix(model, ego_frames)
    question_ids = vocab.encode(question)
    out = []
    for cand in candidates:
        cand_ids = vocab.encode(cand, add_eos=True)
        in_ids, targets, mask = _pack_single(
            question_ids + cand_ids, len(question_ids)
        )
        logits, _ = model.lm.forward(prefix, in_ids)
        out.append(vtg_loss(logits, targets, mask))
    return out


def greedy_decode(
    model: PipelineModel,
    ego_frames: np.ndarray,
    question: str,
    max_new_tokens: int = 16,
) -> str:
    """Deterministic greedy generation of an answer string."""
    vocab = model.vocab
    prefix = _guidance_prefix(model, ego_frames)
    ids = [BOS] + vocab.encode(question)
    out: list[int] = []
    # never step past the LM's position table; the prefix occupies rows too
    budget = model.lm.max_len - prefix.shape[1] - len(ids)
    for _ in range(min(max_new_tokens, max(budget, 0))):
        logits, _ = model.lm.forward(prefix, np.array([ids], dtype=np.int64))
        nxt = int(np.argmax(logits[0, -1]))
        if nxt in (EOS, PAD, BOS):
            break
        out.append(nxt)
        ids.append(nxt)
    return vocab.decode(out)


def run_eval(
    model: PipelineModel,
    items: Sequence[EvalItem],
    frames_by_item: dict[str, np.ndarray],
    *,
    lineage: Sequence[str] = ("init",),
) -> dict:
    """
    Score every item with the model; returns per-task metrics + predictions.

    Choice-style items are predicted by lowest candidate loss; open items by
    greedy decoding.  Retrieval items contribute average precision with the
    gold as the single relevant entry; multilabel items contribute nDCG with a
    unit gain at the gold rank.
    """
    if "init" not in lineage:
        raise ValueError("model lineage must include at least the init stage")
    if not items:
        raise ValueError("no items to evaluate")
    by_task: dict[str, list[EvalItem]] = {}
    for item in items:
        item.validate()
        if item.task_type not in TASK_TYPES:
            raise ValueError(f"unsupported task type {item.task_type!r}")
        if item.item_id not in frames_by_item:
            raise ValueError(f"no clip frames for item {item.item_id!r}")
        by_task.setdefault(item.task_type, []).append(item)

    predictions: dict[str, Any] = {}
    per_task: dict[str, dict] = {}
    primary: list[float] = []

    if "mcq" in by_task:
        subset = by_task["mcq"]
        preds = {}
        for item in subset:
            losses = candidate_losses(
                model, frames_by_item[item.item_id], item.question, item.candidates
            )
            preds[item.item_id] = int(np.argmin(losses))
        acc = score_mcq(preds, subset)
        predictions.update(preds)
        per_task["mcq"] = {"n": len(subset), "accuracy": acc}
        primary.append(acc)

    if "open" in by_task:
        subset = by_task["open"]
        accs, scores = [], []
        for item in subset:
            answer = greedy_decode(
                model, frames_by_item[item.item_id], item.question
            )
            predictions[item.item_id] = answer
            a, s = score_open(answer, item.gold)
            accs.append(a)
            scores.append(s)
        per_task["open"] = {
            "n": len(subset),
            "accuracy": float(np.mean(accs)),
            "score": float(np.mean(scores)),
        }
        primary.append(float(np.mean(accs)))

    if "retrieval" in by_task:
        subset = by_task["retrieval"]
        queries = []
        for item in subset:
            losses = candidate_losses(
                model, frames_by_item[item.item_id], item.question, item.candidates
            )
            order = np.argsort(losses, kind="stable")
            flags = [1 if i == item.gold_index else 0 for i in order]
            predictions[item.item_id] = int(order[0])
            queries.append(flags)
        value = mean_ap(queries)
        per_task["retrieval"] = {"n": len(subset), "map": value}
        primary.append(value)

    if "multilabel" in by_task:
        subset = by_task["multilabel"]
        values = []
        for item in subset:
            losses = candidate_losses(
                model, frames_by_item[item.item_id], item.question, item.candidates
            )
            order = np.argsort(losses, kind="stable")
            gains = [1.0 if i == item.gold_index else 0.0 for i in order]
            ideal = sorted(gains, reverse=True)
            predictions[item.item_id] = int(order[0])
            values.append(ndcg(gains, ideal))
        per_task["multilabel"] = {"n": len(subset), "ndcg": float(np.mean(values))}
        primary.append(float(np.mean(values)))

    return {
        "n_items": len(items),
        "per_task": per_task,
        "aggregate": float(np.mean(primary)),
        "predictions": predictions,
    }


# ---------------------------------------------------------------------------
# Feature-space diagnostics (view-mapping quality on paired clips)
# ---------------------------------------------------------------------------


def pair_features(model: PipelineModel, pairs: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Encode both views of each clip pair; returns (ego_feats, exo_feats)."""
    if not pairs:
        raise ValueError("no clip pairs given")
    ego = np.stack([p.ego.flat for p in pairs])
    exo = np.stack([p.exo[0].flat for p in pairs])
    x, _ = encode_batch(model.ego_enc, ego)
    y, _ = encode_batch(model.exo_enc, exo)
    return x, y


def mapping_metrics(model: PipelineModel, pairs: Sequence) -> dict[str, float]:
    """Cycle errors and alignment KL of the view maps over held-out pairs."""
    x, y = pair_features(model, pairs)
    fwd, bwd = ccl(model.map_f, model.map_g, x, y)
    mapped, _ = model.map_f.forward(x)
    return {
        "cycle_forward": fwd,
        "cycle_backward": bwd,
        "cycle": fwd + bwd,
        "kl": kl_align(y, mapped),
    }


def retrieval_top1(
    model: PipelineModel, pairs: Sequence, direction: str = "ego2exo"
) -> float:
    """Fraction of pairs whose mapped features sit nearest (L1) to their own
    other-view features among all pairs.

    ``"ego2exo"`` maps first-person features forward and matches them against
    the third-person features; ``"exo2ego"`` runs the inverse map the other
    way round.
    """
    x, y = pair_features(model, pairs)
    if direction == "ego2exo":
        mapped, _ = model.map_f.forward(x)
        target = y
    elif direction == "exo2ego":
        mapped, _ = model.map_g.forward(y)
        target = x
    else:
        raise ValueError(f"unknown retrieval direction {direction!r}")
    a = mapped.reshape(len(pairs), -1)
    b = target.reshape(len(pairs), -1)
    dist = np.abs(a[:, None, :] - b[None, :, :]).mean(axis=-1)
    return float(np.mean(np.argmin(dist, axis=1) == np.arange(len(pairs))))
