"""Item construction, metric hand values, and model-in-the-loop scoring."""

import math
from collections import Counter

import numpy as np
import pytest

from exoego.datasets import build_synth_dataset, build_vocab, mcq_items, open_items
from exoego.evalharness import (
    EvalItem,
    bow_cosine,
    build_mcq,
    candidate_losses,
    expand_candidates,
    greedy_decode,
    load_items,
    mapping_metrics,
    mean_ap,
    ndcg,
    normalize_answer,
    pair_features,
    retrieval_top1,
    run_eval,
    save_items,
    score_mcq,
    score_open,
)
from exoego.models.pipeline import ModelConfig, build_model
from exoego.synthworld import WorldConfig

POOL = [
    "pick up the red cup",
    "pick up the blue cup",
    "pick up the red pan",
    "open the red cup",
    "wipe the counter top",
    "close the jar firmly",
    "shake the red cup",
]


@pytest.fixture(scope="module")
def ds():
    return build_synth_dataset(WorldConfig(mode="linear", world_seed=7), 5, seed=0)


@pytest.fixture(scope="module")
def model(ds):
    cfg = ModelConfig(
        ego_in_dim=16,
        exo_in_dim=16,
        d=8,
        enc_blocks=1,
        enc_heads=2,
        lm_blocks=1,
        lm_heads=2,
        map_blocks=1,
        max_text_len=12,
    )
    return build_model(cfg, build_vocab(ds), seed=0)


# ---------------------------------------------------------------------------
# Item construction
# ---------------------------------------------------------------------------


def brute_force_rank(gold, pool):
    def cos(a, b):
        ca, cb = Counter(a.lower().split()), Counter(b.lower().split())
        dot = sum(v * cb[k] for k, v in ca.items())
        na = math.sqrt(sum(v * v for v in ca.values()))
        nb = math.sqrt(sum(v * v for v in cb.values()))
        return dot / (na * nb) if na and nb else 0.0

    seen = set()
    scored = []
    for i, t in enumerate(pool):
        if t == gold or t in seen:
            continue
        seen.add(t)
        scored.append((-cos(gold, t), t, i))
    scored.sort()
    return [t for _, t, _ in scored]


def test_build_mcq_picks_most_similar_distractors():
    gold = POOL[0]
    item = build_mcq(gold, POOL, 4, bow_cosine(), seed=0, item_id="q1")
    assert sorted(item.candidates) == sorted([gold] + brute_force_rank(gold, POOL)[:4])
    assert item.gold == gold
    assert item.candidates[item.gold_index] == gold
    assert len(item.candidates) == 5


def test_build_mcq_shuffle_is_seeded_per_item():
    a = build_mcq(POOL[0], POOL, 4, bow_cosine(), seed=0, item_id="q1")
    b = build_mcq(POOL[0], POOL, 4, bow_cosine(), seed=0, item_id="q1")
    c = build_mcq(POOL[0], POOL, 4, bow_cosine(), seed=1, item_id="q1")
    assert a.candidates == b.candidates and a.gold_index == b.gold_index
    assert set(a.candidates) == set(c.candidates)


def test_build_mcq_brute_force_on_random_pools():
    rng = np.random.default_rng(0)
    words = ["lift", "drop", "cup", "pan", "jar", "red", "blue", "slowly", "twice"]
    for trial in range(50):
        pool = [
            " ".join(rng.choice(words, size=rng.integers(2, 5), replace=False))
            for _ in range(rng.integers(6, 12))
        ]
        gold = pool[int(rng.integers(len(pool)))]
        distinct_others = len(set(pool) - {gold})
        if distinct_others < 4:
            continue
        item = build_mcq(gold, pool, 4, bow_cosine(), seed=trial, item_id=f"t{trial}")
        want = set([gold] + brute_force_rank(gold, pool)[:4])
        assert set(item.candidates) == want


def test_build_mcq_errors():
    sim = bow_cosine()
    with pytest.raises(ValueError):
        build_mcq(POOL[0], POOL, 0, sim, 0)
    with pytest.raises(ValueError):
        build_mcq("not in pool", POOL, 4, sim, 0)
    with pytest.raises(ValueError):
        build_mcq(POOL[0], POOL[:3], 4, sim, 0)


def test_expand_candidates_to_ten():
    big_pool = POOL + [
        "tap the plate twice",
        "pour water slowly",
        "place the bowl down",
        "push the pan aside",
        "open the drawer wide",
    ]
    item = build_mcq(POOL[0], POOL, 4, bow_cosine(), seed=0, item_id="q1")
    grown = expand_candidates(item, big_pool, bow_cosine())
    assert len(grown.candidates) == 10
    assert grown.candidates[:5] == item.candidates
    assert grown.gold_index == item.gold_index
    assert len(set(grown.candidates)) == 10
    with pytest.raises(ValueError):
        expand_candidates(grown, big_pool, bow_cosine())  # already 10
    with pytest.raises(ValueError):
        expand_candidates(item, POOL, bow_cosine())  # nothing new to add


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def test_score_mcq_exact_fraction():
    items = [
        EvalItem(f"i{k}", "", ["a", "b", "c", "d"], gold_index=1) for k in range(4)
    ]
    preds = {"i0": 1, "i1": 1, "i2": 0, "i3": 3}
    assert score_mcq(preds, items) == 0.5
    with pytest.raises(ValueError):
        score_mcq({"i0": 1}, items)
    with pytest.raises(ValueError):
        score_mcq({}, [])


def test_normalize_answer():
    assert normalize_answer("The red, cup!") == ["red", "cup"]
    assert normalize_answer("a an the") == []
    assert normalize_answer("Pick-up") == ["pick", "up"]


def test_score_open_hand_values():
    assert score_open("pick up the cup", "pick up the cup") == (1, 5.0)
    acc, score = score_open("the drawer", "in the drawer")
    assert acc == 0
    assert math.isclose(score, 10.0 / 3.0, abs_tol=1e-12)
    assert score_open("", "") == (1, 5.0)
    assert score_open("cup", "") == (0, 0.0)
    assert score_open("pan", "cup") == (0, 0.0)
    # articles do not count against the match
    assert score_open("drawer", "the drawer") == (1, 5.0)


def test_mean_ap_hand_values():
    assert math.isclose(mean_ap([[1, 0, 1]]), 5.0 / 6.0, abs_tol=1e-12)
    assert math.isclose(mean_ap([[0, 1], [1]]), 0.75, abs_tol=1e-12)
    assert mean_ap([[1]]) == 1.0
    with pytest.raises(ValueError):
        mean_ap([])
    with pytest.raises(ValueError):
        mean_ap([[0, 0]])


def test_ndcg_hand_values():
    # (2/log2(3) + 3/log2(4)) / (3 + 2/log2(3))
    assert math.isclose(
        ndcg([0.0, 2.0, 3.0], [3.0, 2.0, 0.0]), 0.6480409554829326, abs_tol=1e-12
    )
    assert ndcg([3.0, 2.0, 0.0], [3.0, 2.0, 0.0]) == 1.0
    with pytest.raises(ValueError):
        ndcg([-1.0], [1.0])
    with pytest.raises(ValueError):
        ndcg([1.0, 0.0], [0.0, 1.0])  # ideal not descending
    with pytest.raises(ValueError):
        ndcg([0.0], [0.0])


def test_bow_cosine_behaviour():
    sim = bow_cosine()
    v = sim.embed("Pick the cup")
    assert math.isclose(sim.score(v, sim.embed("pick the cup")), 1.0, abs_tol=1e-12)
    assert sim.score(v, sim.embed("close jar")) == 0.0
    assert sim.score(sim.embed(""), v) == 0.0


# ---------------------------------------------------------------------------
# Item validation and persistence
# ---------------------------------------------------------------------------


def test_item_validation_branches():
    ok = EvalItem("i", "", ["a", "b", "c", "d"], 0)
    ok.validate()
    with pytest.raises(ValueError):
        EvalItem("i", "", ["a", "b", "c", "d"], 4).validate()
    with pytest.raises(ValueError):
        EvalItem("i", "", ["a", "a", "b", "c"], 0).validate()
    with pytest.raises(ValueError):
        EvalItem("i", "", ["a", "b", "c"], 0).validate()  # 3 candidates
    with pytest.raises(ValueError):
        EvalItem("i", "", ["a", "b", "c", "d"], 0, task_type="ranking").validate()
    EvalItem("i", "", ["just the gold"], 0, task_type="open").validate()


def test_items_round_trip_ndjson(tmp_path):
    items = [
        build_mcq(POOL[0], POOL, 4, bow_cosine(), seed=0, item_id="q1"),
        EvalItem("q2", "describe", ["open the drawer"], 0, task_type="open"),
    ]
    path = tmp_path / "items.jsonl"
    save_items(path, items)
    back = load_items(path)
    assert [i.to_json() for i in back] == [i.to_json() for i in items]


def test_load_items_reports_file_and_line(tmp_path):
    path = tmp_path / "items.jsonl"
    path.write_text('{"item_id": "q1"}\n', encoding="utf-8")
    with pytest.raises(ValueError) as exc:
        load_items(path)
    assert "items.jsonl:1" in str(exc.value)


# ---------------------------------------------------------------------------
# Model-in-the-loop scoring
# ---------------------------------------------------------------------------


def test_candidate_losses_basic(ds, model):
    pair = ds.pairs("train")[0]
    losses = candidate_losses(model, pair.ego.flat, "describe", POOL[:4])
    again = candidate_losses(model, pair.ego.flat, "describe", POOL[:4])
    assert losses == again
    assert len(losses) == 4
    assert all(l > 0 for l in losses)
    assert len(set(losses)) > 1  # different candidates, different losses


def test_greedy_decode_is_deterministic(ds, model):
    pair = ds.pairs("train")[0]
    a = greedy_decode(model, pair.ego.flat, "what happens")
    b = greedy_decode(model, pair.ego.flat, "what happens")
    assert a == b
    assert isinstance(a, str)
    assert len(a.split()) <= 16


def test_run_eval_all_task_types(ds, model):
    universe = ds.all_pairs()
    mcq, frames = mcq_items(ds.pairs("val"), n_items=4, universe=universe, seed=0)
    opn, f2 = open_items(ds.pairs("val"), n_items=3, seed=0)
    ret, f3 = mcq_items(
        ds.pairs("val"), n_items=3, universe=universe, task_type="retrieval", seed=1
    )
    mlt, f4 = mcq_items(
        ds.pairs("val"), n_items=3, universe=universe, task_type="multilabel", seed=2
    )
    frames.update(f2)
    frames.update(f3)
    frames.update(f4)
    items = mcq + opn + ret + mlt
    report = run_eval(model, items, frames, lineage=("init", "s1"))
    assert report["n_items"] == 13
    assert set(report["per_task"]) == {"mcq", "open", "retrieval", "multilabel"}
    assert report["per_task"]["mcq"]["n"] == 4
    assert 0.0 <= report["per_task"]["mcq"]["accuracy"] <= 1.0
    assert 0.0 <= report["per_task"]["open"]["score"] <= 5.0
    assert 0.0 < report["per_task"]["retrieval"]["map"] <= 1.0
    assert 0.0 < report["per_task"]["multilabel"]["ndcg"] <= 1.0
    primaries = [
        report["per_task"]["mcq"]["accuracy"],
        report["per_task"]["open"]["accuracy"],
        report["per_task"]["retrieval"]["map"],
        report["per_task"]["multilabel"]["ndcg"],
    ]
    assert math.isclose(report["aggregate"], float(np.mean(primaries)), abs_tol=1e-12)
    for item in mcq:
        assert report["predictions"][item.item_id] in range(5)
    for item in opn:
        assert isinstance(report["predictions"][item.item_id], str)


def test_run_eval_validates_inputs(ds, model):
    items, frames = mcq_items(ds.pairs("val"), n_items=2, universe=ds.all_pairs())
    with pytest.raises(ValueError):
        run_eval(model, items, frames, lineage=("s1",))  # no init
    with pytest.raises(ValueError):
        run_eval(model, [], frames)
    with pytest.raises(ValueError):
        run_eval(model, items, {})  # frames missing


# ---------------------------------------------------------------------------
# Feature-space diagnostics
# ---------------------------------------------------------------------------


def test_pair_features_shapes(ds, model):
    pairs = ds.pairs("train")[:5]
    x, y = pair_features(model, pairs)
    assert x.shape == (5, 16, 8)
    assert y.shape == (5, 16, 8)
    with pytest.raises(ValueError):
        pair_features(model, [])


def test_mapping_metrics_keys(ds, model):
    m = mapping_metrics(model, ds.pairs("train")[:5])
    assert set(m) == {"cycle_forward", "cycle_backward", "cycle", "kl"}
    assert m["cycle"] == m["cycle_forward"] + m["cycle_backward"]
    assert all(v >= 0 for v in m.values())


def test_retrieval_top1_directions(ds, model):
    pairs = ds.pairs("train")[:6]
    for direction in ("ego2exo", "exo2ego"):
        v = retrieval_top1(model, pairs, direction=direction)
        assert 0.0 <= v <= 1.0
        assert v == retrieval_top1(model, pairs, direction=direction)
    with pytest.raises(ValueError):
        retrieval_top1(model, pairs, direction="sideways")
