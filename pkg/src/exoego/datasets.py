"""
Dataset assembly: synthetic episodes -> persisted clip pairs -> stage batches.

A dataset is a pure function of (world config, episode count, seed, split
seed): episodes are generated, narrated, expanded into synchronized two-view
clips, and partitioned by episode into train/val/test.  ``save_dataset``
persists the clips as flat binary frame arrays (32-bit float, little-endian,
one JSON header each) next to the corpus manifest and a dataset manifest, and
``load_dataset`` reads the same directory back; both directions are
deterministic, so rebuilding with the same seed reproduces every byte.

The second half turns clip pairs into the three training-sample shapes and
into evaluation items: multiple-choice questions with similarity-ranked
distractors drawn either from other episodes ("inter") or from the same
episode ("intra"), plus open-answer items for greedy-decoding checks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import corpus, jsonio, synthworld
from .arrays import array_digest, load_array, save_array
from .evalharness import EvalItem, SimilarityFn, bow_cosine, build_mcq
from .jsonio import derive_seed
from .models.lm import Vocab
from .synthworld import ClipPair, FrameSeq, WorldConfig
from .trainer import CaptionSample, InstructionSample, PairSample

__all__ = [
    "DATASET_SCHEMA",
    "SynthDataset",
    "build_synth_dataset",
    "save_dataset",
    "load_dataset",
    "dataset_digest",
    "build_vocab",
    "caption_samples",
    "pair_samples",
    "instruction_samples",
    "mcq_items",
    "open_items",
    "frames_for_items",
]

DATASET_SCHEMA = "exo2ego-dataset/1"

SPLIT_NAMES = ("train", "val", "test")


# ---------------------------------------------------------------------------
# Building and persisting
# ---------------------------------------------------------------------------


@dataclass
class SynthDataset:
    config: WorldConfig
    n_episodes: int
    seed: int
    split_seed: int
    ratios: tuple[float, float, float]
    alpha_s: float
    splits: dict[str, list[ClipPair]]
    tracks: list[corpus.NarrationTrack] = field(default_factory=list)
    banks: dict[str, corpus.InstructionBank] = field(default_factory=dict)

    def pairs(self, split: str) -> list[ClipPair]:
        if split not in self.splits:
            raise KeyError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return self.splits[split]

    def all_pairs(self) -> list[ClipPair]:
        return [p for name in SPLIT_NAMES for p in self.splits.get(name, [])]

    def texts(self) -> list[str]:
        return [p.text for p in self.all_pairs()]


def _episode_seeds(seed: int, n_episodes: int) -> list[int]:
    # Distinct per-dataset-seed ranges keep episode ids unique across seeds.
    return [seed * 1_000_000 + i for i in range(n_episodes)]


def build_synth_dataset(
    config: WorldConfig,
    n_episodes: int,
    seed: int = 0,
    *,
    split_seed: int = 0,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    bank_seed: int = 0,
) -> SynthDataset:
    """Generate, narrate, clip, and split a full synthetic dataset in memory."""
    if n_episodes < 3:
        raise ValueError("need at least 3 episodes to populate all three splits")
    config.validate()
    params = synthworld.world_params(config)
    episodes = [
        synthworld.gen_episode(s, config, params)
        for s in _episode_seeds(seed, n_episodes)
    ]
    tracks = [synthworld.narrate(ep) for ep in episodes]
    alpha = corpus.compute_alpha(tracks)
    pairs: list[ClipPair] = []
    for ep in episodes:
        pairs.extend(synthworld.make_clip_pairs(ep, alpha, params))
    splits = synthworld.split_dataset(pairs, ratios, split_seed)
    banks = {
        name: corpus.render_instructions(spec, bank_seed)
        for name, spec in corpus.default_bank_specs().items()
    }
    return SynthDataset(
        config=config,
        n_episodes=n_episodes,
        seed=seed,
        split_seed=split_seed,
        ratios=tuple(ratios),
        alpha_s=alpha,
        splits=splits,
        tracks=tracks,
        banks=banks,
    )


def _pair_entry(pair: ClipPair, split: str) -> dict:
    iv = pair.interval
    return {
        "pair_id": pair.pair_id,
        "episode_id": pair.episode_id,
        "split": split,
        "n_exo_views": len(pair.exo),
        "interval": {
            "index": iv.index,
            "start_s": iv.start_s,
            "end_s": iv.end_s,
            "text": iv.text,
            "beta_s": iv.beta_s,
        },
    }


def save_dataset(
    ds: SynthDataset, out_dir: str | Path, *, force: bool = False, config_hash: str = ""
) -> dict:
    """
    Persist a dataset directory; returns the manifest dict.

    Layout: ``dataset.json`` (manifest), ``corpus.json`` (expanded narration
    corpus), and ``pairs/<pair_id>.<view>.bin/.json`` frame arrays stored as
    little-endian 32-bit floats.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(
                f"output directory {out} is not empty; pass force to overwrite"
            )
        for p in sorted(out.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    (out / "pairs").mkdir(parents=True, exist_ok=True)

    entries = []
    for split in SPLIT_NAMES:
        for pair in ds.splits.get(split, []):
            base = out / "pairs" / pair.pair_id
            save_array(
                Path(f"{base}.ego"),
                pair.ego.frames.reshape(pair.ego.frames.shape[0], -1).astype(np.float32),
                view="ego",
                fps=pair.ego.fps,
                times_s=[float(t) for t in pair.ego.times_s],
            )
            for v, exo in enumerate(pair.exo):
                save_array(
                    Path(f"{base}.exo{v}"),
                    exo.frames.reshape(exo.frames.shape[0], -1).astype(np.float32),
                    view="exo",
                    fps=exo.fps,
                    times_s=[float(t) for t in exo.times_s],
                )
            entries.append(_pair_entry(pair, split))

    params = synthworld.world_params(ds.config)
    manifest = {
        "schema": DATASET_SCHEMA,
        "config": {
            "mode": ds.config.mode,
            "grid_n": ds.config.grid_n,
            "ego_radius": ds.config.ego_radius,
            "n_objects": ds.config.n_objects,
            "n_actions": ds.config.n_actions,
            "duration_s": ds.config.duration_s,
            "fps": ds.config.fps,
            "latent_dim": ds.config.latent_dim,
            "n_exo_views": ds.config.n_exo_views,
            "world_seed": ds.config.world_seed,
        },
        "n_episodes": ds.n_episodes,
        "seed": ds.seed,
        "split_seed": ds.split_seed,
        "ratios": [float(r) for r in ds.ratios],
        "alpha_s": ds.alpha_s,
        "config_hash": config_hash,
        "frame_dims": list(synthworld.frame_dims(ds.config)),
        "true_map_digest": (
            array_digest(params.t_star[0]) if ds.config.mode == "linear" else None
        ),
        "banks": {
            name: {
                "dataset_name": b.dataset_name,
                "task_type": b.task_type,
                "instructions": list(b.instructions),
                "template_seed": b.template_seed,
            }
            for name, b in sorted(ds.banks.items())
        },
        "pairs": entries,
    }
    jsonio.dump(manifest, out / "dataset.json")
    jsonio.dump(
        corpus.build_corpus_manifest(ds.tracks, ds.alpha_s), out / "corpus.json"
    )
    jsonio.dump([corpus.track_to_json(t) for t in ds.tracks], out / "narrations.json")
    return manifest


def load_dataset(in_dir: str | Path) -> SynthDataset:
    """Read a dataset directory written by :func:`save_dataset`."""
    root = Path(in_dir)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = jsonio.load(manifest_path)
    if manifest.get("schema") != DATASET_SCHEMA:
        raise ValueError(
            f"not a dataset manifest (schema={manifest.get('schema')!r})"
        )
    config = WorldConfig(**manifest["config"])
    config.validate()

    splits: dict[str, list[ClipPair]] = {name: [] for name in SPLIT_NAMES}
    for entry in manifest["pairs"]:
        base = root / "pairs" / entry["pair_id"]
        ego_arr, ego_hdr = load_array(Path(f"{base}.ego"))
        times = np.array(ego_hdr["times_s"], dtype=np.float64)
        ego = FrameSeq(
            frames=ego_arr.astype(np.float64),
            fps=float(ego_hdr["fps"]),
            view="ego",
            times_s=times,
        )
        exo = []
        for v in range(int(entry["n_exo_views"])):
            arr, hdr = load_array(Path(f"{base}.exo{v}"))
            exo.append(
                FrameSeq(
                    frames=arr.astype(np.float64),
                    fps=float(hdr["fps"]),
                    view="exo",
                    times_s=np.array(hdr["times_s"], dtype=np.float64),
                )
            )
        iv = entry["interval"]
        pair = ClipPair(
            pair_id=entry["pair_id"],
            episode_id=entry["episode_id"],
            interval=corpus.ClipInterval(
                index=int(iv["index"]),
                start_s=float(iv["start_s"]),
                end_s=float(iv["end_s"]),
                text=str(iv["text"]),
                beta_s=float(iv["beta_s"]),
            ),
            ego=ego,
            exo=exo,
            text=str(iv["text"]),
        )
        pair.validate()
        splits[entry["split"]].append(pair)

    narr_path = root / "narrations.json"
    tracks = (
        [corpus.track_from_json(t) for t in jsonio.load(narr_path)]
        if narr_path.exists()
        else []
    )

    banks = {
        name: corpus.InstructionBank(
            dataset_name=b["dataset_name"],
            task_type=b["task_type"],
            instructions=tuple(b["instructions"]),
            template_seed=int(b["template_seed"]),
        )
        for name, b in manifest.get("banks", {}).items()
    }
    return SynthDataset(
        config=config,
        n_episodes=int(manifest["n_episodes"]),
        seed=int(manifest["seed"]),
        split_seed=int(manifest["split_seed"]),
        ratios=tuple(float(r) for r in manifest["ratios"]),
        alpha_s=float(manifest["alpha_s"]),
        splits=splits,
        tracks=tracks,
        banks=banks,
    )


def dataset_digest(in_dir: str | Path) -> str:
    """sha256 over every file's (relative path, content hash), sorted."""
    root = Path(in_dir)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(hashlib.sha256(p.read_bytes()).hexdigest().encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Vocabulary and stage samples
# ---------------------------------------------------------------------------


def build_vocab(ds: SynthDataset) -> Vocab:
    """Word vocabulary covering narrations and every instruction bank."""
    texts = ds.texts()
    for bank in ds.banks.values():
        texts.extend(bank.instructions)
    return Vocab.build(texts)


def caption_samples(
    pairs: Sequence[ClipPair], vocab: Vocab, views: Sequence[str] = ("ego", "exo")
) -> list[CaptionSample]:
    """One captioning sample per requested view of each clip."""
    out: list[CaptionSample] = []
    for p in pairs:
        ids = vocab.encode(p.text, add_eos=True)
        if "ego" in views:
            out.append(CaptionSample(view="ego", frames=p.ego.flat, token_ids=ids))
        if "exo" in views:
            for exo in p.exo:
                out.append(CaptionSample(view="exo", frames=exo.flat, token_ids=ids))
    if not out:
        raise ValueError("no caption samples produced; check views argument")
    return out


def pair_samples(pairs: Sequence[ClipPair], vocab: Vocab) -> list[PairSample]:
    """Synchronized two-view samples (first third-person view)."""
    return [
        PairSample(
            ego_frames=p.ego.flat,
            exo_frames=p.exo[0].flat,
            token_ids=vocab.encode(p.text, add_eos=True),
        )
        for p in pairs
    ]


def _pick_instruction(bank: corpus.InstructionBank, key: str, seed: int) -> str:
    idx = derive_seed("instruction-pick", key, seed) % len(bank.instructions)
    return bank.instructions[idx]


def instruction_samples(
    pairs: Sequence[ClipPair],
    vocab: Vocab,
    bank: corpus.InstructionBank | Mapping[str, corpus.InstructionBank],
    seed: int = 0,
) -> list[InstructionSample]:
    """First-person instruction-following samples: prompt from the bank, answer = narration.

    ``bank`` may be a single bank or a mapping of banks; with a mapping,
    each clip is assigned one bank deterministically so the tuning data
    covers every instruction family.
    """
    banks: list[corpus.InstructionBank]
    if isinstance(bank, Mapping):
        banks = [bank[name] for name in sorted(bank)]
        if not banks:
            raise ValueError("empty instruction bank mapping")
    else:
        banks = [bank]
    out = []
    for p in pairs:
        chosen = banks[derive_seed("instruction-bank", p.pair_id, seed) % len(banks)]
        prompt = _pick_instruction(chosen, p.pair_id, seed)
        out.append(
            InstructionSample(
                ego_frames=p.ego.flat,
                prompt_ids=vocab.encode(prompt),
                answer_ids=vocab.encode(p.text, add_eos=True),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Evaluation items
# ---------------------------------------------------------------------------


def _distractor_pool(
    pair: ClipPair, universe: Sequence[ClipPair], scope: str
) -> list[str]:
    """Candidate answer pool for one clip. Always contains the gold text."""
    if scope == "inter":
        pool = [q.text for q in universe if q.episode_id != pair.episode_id]
    elif scope == "intra":
        pool = [q.text for q in universe if q.episode_id == pair.episode_id and q.pair_id != pair.pair_id]
    else:
        raise ValueError(f"unknown distractor scope {scope!r} (want inter|intra)")
    return [pair.text] + pool


def mcq_items(
    pairs: Sequence[ClipPair],
    *,
    n_items: int,
    n_choices: int = 5,
    scope: str = "inter",
    sim: SimilarityFn | None = None,
    seed: int = 0,
    bank: corpus.InstructionBank | None = None,
    task_type: str = "mcq",
    universe: Sequence[ClipPair] | None = None,
) -> tuple[list[EvalItem], dict[str, np.ndarray]]:
    """
    Build ``n_items`` choice items by cycling over ``pairs``.

    Returns (items, frames map for the scorer).  Wrong answers come from
    ``universe`` (default: ``pairs`` itself; pass the full dataset when the
    evaluation split is small).  Clips whose distractor pool is too small for
    ``n_choices - 1`` wrong answers are skipped; it is an error if no clip
    has a sufficient pool.
    """
    if not pairs:
        raise ValueError("no clips to build evaluation items from")
    if sim is None:
        sim = bow_cosine()
    if universe is None:
        universe = pairs
    items: list[EvalItem] = []
    frames: dict[str, np.ndarray] = {}
    round_no = 0
    skipped = 0
    while len(items) < n_items:
        progressed = False
        for pair in pairs:
            if len(items) >= n_items:
                break
            pool = _distractor_pool(pair, universe, scope)
            if len(set(pool) - {pair.text}) < n_choices - 1:
                skipped += 1
                continue
            item_id = f"{pair.pair_id}-{task_type}-{scope}-r{round_no}"
            question = (
                _pick_instruction(bank, item_id, seed) if bank is not None else ""
            )
            item = build_mcq(
                pair.text,
                pool,
                n_choices - 1,
                sim,
                seed,
                item_id=item_id,
                question=question,
                task_type=task_type,
                provenance=[pair.pair_id, scope],
            )
            items.append(item)
            frames[item_id] = pair.ego.flat
            progressed = True
        if not progressed:
            raise ValueError(
                f"no clip has {n_choices - 1} distinct {scope}-scope distractors"
            )
        round_no += 1
    return items, frames


def open_items(
    pairs: Sequence[ClipPair],
    *,
    n_items: int,
    seed: int = 0,
    bank: corpus.InstructionBank | None = None,
) -> tuple[list[EvalItem], dict[str, np.ndarray]]:
    """Open-answer items: the gold string is the clip narration."""
    if not pairs:
        raise ValueError("no clips to build evaluation items from")
    items = []
    frames = {}
    for j in range(n_items):
        pair = pairs[j % len(pairs)]
        item_id = f"{pair.pair_id}-open-r{j // len(pairs)}"
        question = _pick_instruction(bank, item_id, seed) if bank is not None else ""
        items.append(
            EvalItem(
                item_id=item_id,
                question=question,
                candidates=[pair.text],
                gold_index=0,
                task_type="open",
                provenance=[pair.pair_id],
            )
        )
        frames[item_id] = pair.ego.flat
    return items, frames


def frames_for_items(
    items: Sequence[EvalItem], pairs: Sequence[ClipPair]
) -> dict[str, np.ndarray]:
    """Recover the scorer's frames map for items loaded from disk."""
    by_id = {p.pair_id: p for p in pairs}
    frames = {}
    for item in items:
        if not item.provenance or item.provenance[0] not in by_id:
            raise ValueError(
                f"item {item.item_id!r} does not reference a known clip"
            )
        frames[item.item_id] = by_id[item.provenance[0]].ego.flat
    return frames
