"""Dataset assembly, persistence round-trips, and evaluation item builders."""

import numpy as np
import pytest

from exoego.datasets import (
    DATASET_SCHEMA,
    build_synth_dataset,
    build_vocab,
    caption_samples,
    dataset_digest,
    frames_for_items,
    instruction_samples,
    load_dataset,
    mcq_items,
    open_items,
    pair_samples,
    save_dataset,
)
from exoego.jsonio import load
from exoego.synthworld import WorldConfig


@pytest.fixture(scope="module")
def ds():
    return build_synth_dataset(WorldConfig(mode="linear", world_seed=7), 10, seed=0)


@pytest.fixture(scope="module")
def vocab(ds):
    return build_vocab(ds)


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------


def test_build_is_deterministic(ds):
    again = build_synth_dataset(WorldConfig(mode="linear", world_seed=7), 10, seed=0)
    assert [p.pair_id for p in ds.all_pairs()] == [p.pair_id for p in again.all_pairs()]
    for a, b in zip(ds.all_pairs(), again.all_pairs()):
        np.testing.assert_array_equal(a.ego.frames, b.ego.frames)
        np.testing.assert_array_equal(a.exo[0].frames, b.exo[0].frames)


def test_build_populates_each_split(ds):
    assert {k for k, v in ds.splits.items() if v} == {"train", "val", "test"}
    episodes = {s: {p.episode_id for p in ps} for s, ps in ds.splits.items()}
    assert len(episodes["train"]) == 8
    assert len(episodes["val"]) == 1
    assert len(episodes["test"]) == 1
    assert not (episodes["train"] & episodes["val"] & episodes["test"])


def test_build_needs_three_episodes():
    with pytest.raises(ValueError):
        build_synth_dataset(WorldConfig(mode="linear"), 2)


def test_alpha_comes_from_the_narration_gaps(ds):
    assert ds.alpha_s > 0
    assert len(ds.tracks) == 10
    assert set(ds.banks) == {"captioning", "qa", "recognition"}


def test_split_accessor_validates(ds):
    assert ds.pairs("val") == ds.splits["val"]
    with pytest.raises(KeyError):
        ds.pairs("holdout")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def test_save_load_round_trip(ds, tmp_path):
    out = tmp_path / "d"
    manifest = save_dataset(ds, out, config_hash="abc123")
    assert manifest["schema"] == DATASET_SCHEMA
    assert manifest["config_hash"] == "abc123"
    assert manifest["true_map_digest"] is not None  # linear mode records the oracle
    back = load_dataset(out)
    # manifests carry floats at nine fractional digits
    assert abs(back.alpha_s - ds.alpha_s) < 1e-9
    assert back.n_episodes == ds.n_episodes
    assert back.banks == ds.banks
    assert [t.video_id for t in back.tracks] == [t.video_id for t in ds.tracks]
    for split in ("train", "val", "test"):
        orig, loaded = ds.pairs(split), back.pairs(split)
        assert [p.pair_id for p in orig] == [p.pair_id for p in loaded]
        for a, b in zip(orig, loaded):
            assert a.text == b.text
            assert abs(a.interval.start_s - b.interval.start_s) < 1e-9
            # frames persist at 32-bit precision
            np.testing.assert_array_equal(
                b.ego.flat, a.ego.flat.astype(np.float32).astype(np.float64)
            )
            np.testing.assert_array_equal(b.ego.times_s, a.ego.times_s)


def test_save_refuses_nonempty_dir_without_force(ds, tmp_path):
    out = tmp_path / "d"
    save_dataset(ds, out)
    with pytest.raises(FileExistsError):
        save_dataset(ds, out)


def test_forced_rewrite_is_byte_identical(ds, tmp_path):
    out = tmp_path / "d"
    save_dataset(ds, out)
    digest = dataset_digest(out)
    save_dataset(ds, out, force=True)
    assert dataset_digest(out) == digest


def test_corpus_manifest_sits_next_to_the_dataset(ds, tmp_path):
    out = tmp_path / "d"
    save_dataset(ds, out)
    corpus_manifest = load(out / "corpus.json")
    assert corpus_manifest["schema"] == "exo2ego-corpus/1"
    assert corpus_manifest["clip_count"] == len(ds.all_pairs())


def test_load_error_branches(ds, tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
    out = tmp_path / "d"
    save_dataset(ds, out)
    bad = load(out / "dataset.json")
    bad["schema"] = "exo2ego-dataset/999"
    import exoego.jsonio as jsonio

    jsonio.dump(bad, out / "dataset.json")
    with pytest.raises(ValueError):
        load_dataset(out)


def test_gridworld_dataset_round_trip(tmp_path):
    grid = build_synth_dataset(WorldConfig(world_seed=3, duration_s=12.0, n_actions=4), 3, seed=1)
    out = tmp_path / "g"
    manifest = save_dataset(grid, out)
    assert manifest["true_map_digest"] is None
    back = load_dataset(out)
    a, b = grid.all_pairs()[0], back.all_pairs()[0]
    np.testing.assert_array_equal(b.ego.flat, a.ego.flat.astype(np.float32).astype(np.float64))


# ---------------------------------------------------------------------------
# Vocabulary and stage samples
# ---------------------------------------------------------------------------


def test_vocab_covers_narrations_and_instructions(ds, vocab):
    unk = 3
    for text in ds.texts():
        assert unk not in vocab.encode(text)
    for bank in ds.banks.values():
        for instr in bank.instructions:
            assert unk not in vocab.encode(instr)


def test_caption_samples_cover_requested_views(ds, vocab):
    pairs = ds.pairs("train")[:4]
    both = caption_samples(pairs, vocab)
    assert len(both) == 4 * (1 + len(pairs[0].exo))
    ego_only = caption_samples(pairs, vocab, views=("ego",))
    assert len(ego_only) == 4
    assert all(s.view == "ego" for s in ego_only)
    assert all(s.token_ids[-1] == 2 for s in ego_only)  # EOS-terminated
    with pytest.raises(ValueError):
        caption_samples(pairs, vocab, views=("overhead",))


def test_pair_samples_are_synchronized(ds, vocab):
    pairs = ds.pairs("train")[:3]
    samples = pair_samples(pairs, vocab)
    for s, p in zip(samples, pairs):
        np.testing.assert_array_equal(s.ego_frames, p.ego.flat)
        np.testing.assert_array_equal(s.exo_frames, p.exo[0].flat)


def test_instruction_samples_single_bank(ds, vocab):
    pairs = ds.pairs("train")[:6]
    bank = ds.banks["captioning"]
    samples = instruction_samples(pairs, vocab, bank, seed=1)
    again = instruction_samples(pairs, vocab, bank, seed=1)
    assert [s.prompt_ids for s in samples] == [s.prompt_ids for s in again]
    allowed = {tuple(vocab.encode(i)) for i in bank.instructions}
    assert all(tuple(s.prompt_ids) in allowed for s in samples)
    assert all(s.answer_ids[-1] == 2 for s in samples)


def test_instruction_samples_mapping_mixes_banks(ds, vocab):
    samples = instruction_samples(ds.all_pairs(), vocab, ds.banks, seed=0)
    used_by_bank = {name: 0 for name in ds.banks}
    prompts = {tuple(s.prompt_ids) for s in samples}
    for name, bank in ds.banks.items():
        ids = {tuple(vocab.encode(i)) for i in bank.instructions}
        used_by_bank[name] = len(prompts & ids)
    assert all(n > 0 for n in used_by_bank.values()), used_by_bank
    with pytest.raises(ValueError):
        instruction_samples(ds.all_pairs()[:2], vocab, {}, seed=0)


# ---------------------------------------------------------------------------
# Evaluation items
# ---------------------------------------------------------------------------


def test_mcq_items_shape_and_gold(ds):
    items, frames = mcq_items(ds.pairs("test"), n_items=7, n_choices=4, universe=ds.all_pairs())
    assert len(items) == 7
    assert set(frames) == {it.item_id for it in items}
    for it in items:
        assert len(it.candidates) == 4
        assert len(set(it.candidates)) == 4
        gold = it.candidates[it.gold_index]
        src = next(p for p in ds.all_pairs() if p.pair_id == it.provenance[0])
        assert gold == src.text
        assert it.provenance[1] == "inter"


def test_mcq_items_cycle_when_asked_for_more(ds):
    pairs = ds.pairs("test")
    items, _ = mcq_items(pairs, n_items=2 * len(pairs), universe=ds.all_pairs())
    rounds = {it.item_id.rsplit("-r", 1)[1] for it in items}
    assert rounds == {"0", "1"}
    assert len({it.item_id for it in items}) == len(items)


def test_mcq_items_deterministic(ds):
    a, _ = mcq_items(ds.pairs("val"), n_items=5, seed=9, universe=ds.all_pairs())
    b, _ = mcq_items(ds.pairs("val"), n_items=5, seed=9, universe=ds.all_pairs())
    assert [(it.item_id, it.candidates, it.gold_index) for it in a] == [
        (it.item_id, it.candidates, it.gold_index) for it in b
    ]


def test_mcq_inter_scope_needs_other_episodes(ds):
    one_episode = [
        p for p in ds.all_pairs() if p.episode_id == ds.all_pairs()[0].episode_id
    ]
    with pytest.raises(ValueError):
        mcq_items(one_episode, n_items=3)  # universe defaults to the same episode
    items, _ = mcq_items(one_episode, n_items=3, universe=ds.all_pairs())
    assert len(items) == 3


def test_mcq_intra_scope_stays_in_the_episode(ds):
    items, _ = mcq_items(
        ds.pairs("train"), n_items=4, scope="intra", n_choices=4, universe=ds.all_pairs()
    )
    by_id = {p.pair_id: p for p in ds.all_pairs()}
    texts_by_episode = {}
    for p in ds.all_pairs():
        texts_by_episode.setdefault(p.episode_id, set()).add(p.text)
    for it in items:
        ep = by_id[it.provenance[0]].episode_id
        assert set(it.candidates) <= texts_by_episode[ep]
        assert it.provenance[1] == "intra"


def test_mcq_unknown_scope(ds):
    with pytest.raises(ValueError):
        mcq_items(ds.pairs("val"), n_items=1, scope="global")


def test_mcq_bank_supplies_the_question(ds):
    bank = ds.banks["recognition"]
    items, _ = mcq_items(
        ds.pairs("val"), n_items=3, bank=bank, universe=ds.all_pairs()
    )
    assert all(it.question in bank.instructions for it in items)


def test_open_items_and_frames(ds):
    pairs = ds.pairs("test")
    items, frames = open_items(pairs, n_items=len(pairs) + 2, bank=ds.banks["qa"])
    assert len(items) == len(pairs) + 2
    assert all(it.task_type == "open" for it in items)
    assert all(it.candidates == [pairs[j % len(pairs)].text] for j, it in enumerate(items))
    assert set(frames) == {it.item_id for it in items}
    assert all(it.question in ds.banks["qa"].instructions for it in items)


def test_frames_for_items_rebuilds_the_map(ds):
    items, frames = mcq_items(ds.pairs("val"), n_items=4, universe=ds.all_pairs())
    rebuilt = frames_for_items(items, ds.all_pairs())
    assert set(rebuilt) == set(frames)
    for k in frames:
        np.testing.assert_array_equal(rebuilt[k], frames[k])
    with pytest.raises(ValueError):
        frames_for_items(items, ds.pairs("train"))  # val clips absent


def test_empty_pairs_are_an_error(ds):
    with pytest.raises(ValueError):
        mcq_items([], n_items=1)
    with pytest.raises(ValueError):
        open_items([], n_items=1)
