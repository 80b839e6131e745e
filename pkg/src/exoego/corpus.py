"""
Clip-corpus construction from timestamped narrations.

A narration track is a list of (timestamp, sentence) annotations over one
video.  Each narration is expanded into a short clip interval centered on its
timestamp: the half-width is the track's mean consecutive-narration gap scaled
by twice the corpus-level mean gap, and each interval is clamped so it never
crosses the neighbouring narration timestamps (track ends clamp to 0 and the
video duration).  Degenerate zero-length intervals are dropped.

The module also carries group filtering (which recordings enter the corpus),
descriptive statistics over the expanded clips, deterministic instruction-bank
rendering, and the JSON manifest formats for all of the above.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import jsonio

__all__ = [
    "NarrationEntry",
    "NarrationTrack",
    "ClipInterval",
    "GroupManifest",
    "FilterRules",
    "InstructionBank",
    "BankSpec",
    "StatsReport",
    "PAPER_ALPHA_S",
    "MCQ_ANSWER_CLAUSE",
    "compute_beta",
    "compute_alpha",
    "expand_narrations",
    "filter_groups",
    "corpus_stats",
    "render_instructions",
    "default_bank_specs",
    "track_to_json",
    "track_from_json",
    "group_from_json",
    "build_corpus_manifest",
    "parse_corpus_manifest",
]

# Reference corpus-level mean narration gap, in seconds, for the real-world
# corpus this pipeline was designed around.  Synthetic corpora compute their
# own value; this constant is the documented default for `build-clips --alpha`.
PAPER_ALPHA_S = 1.92

# Every recognition-task instruction must carry this clause so downstream
# multiple-choice scoring can rely on a uniform answer format.
MCQ_ANSWER_CLAUSE = "Answer with the number of the correct option."

VALID_SPLITS = ("train", "val", "test")

# Filter rejection reasons, checked in this order; the first failure wins.
REASON_NO_NARRATION = "no-narration"
REASON_NO_UID_MAPPING = "no-uid-mapping"
REASON_HELD_OUT_SPLIT = "held-out-split"


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NarrationEntry:
    """One timestamped narration sentence."""

    t_s: float
    text: str


@dataclass
class NarrationTrack:
    """All narrations of one annotator over one video."""

    video_id: str
    duration_s: float
    entries: list[NarrationEntry]
    annotator_id: str = "anno-0"

    def validate(self) -> None:
        if not np.isfinite(self.duration_s) or self.duration_s <= 0:
            raise ValueError(f"track {self.video_id}: duration must be positive/finite")
        prev = None
        for e in self.entries:
            if not np.isfinite(e.t_s):
                raise ValueError(f"track {self.video_id}: non-finite timestamp")
            if e.t_s < 0 or e.t_s > self.duration_s:
                raise ValueError(
                    f"track {self.video_id}: timestamp {e.t_s} outside [0, {self.duration_s}]"
                )
            if prev is not None and e.t_s < prev:
                raise ValueError(f"track {self.video_id}: timestamps must be sorted ascending")
            if not e.text:
                raise ValueError(f"track {self.video_id}: empty narration text")
            prev = e.t_s

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([e.t_s for e in self.entries], dtype=np.float64)


@dataclass(frozen=True)
class ClipInterval:
    """One expanded clip around a narration timestamp."""

    index: int
    start_s: float
    end_s: float
    text: str
    beta_s: float  # the track-level mean gap this interval was derived from

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass
class GroupManifest:
    """One synchronized recording group: an ego video plus its exo views."""

    group_id: str
    ego_ref: str
    exo_refs: list[str]
    scenario: str
    split: str
    tracks: list[NarrationTrack] = field(default_factory=list)

    def validate(self, strict: bool = True) -> None:
        if self.split not in VALID_SPLITS:
            raise ValueError(f"group {self.group_id}: unknown split {self.split!r}")
        if not 4 <= len(self.exo_refs) <= 5:
            raise ValueError(
                f"group {self.group_id}: expected 4-5 exo refs, got {len(self.exo_refs)}"
            )
        if strict and not 1 <= len(self.tracks) <= 2:
            raise ValueError(
                f"group {self.group_id}: expected 1-2 narration tracks, got {len(self.tracks)}"
            )
        for t in self.tracks:
            t.validate()


@dataclass
class FilterRules:
    """Which groups survive into the training corpus."""

    require_narration: bool = True
    known_refs: frozenset[str] | None = None  # None disables the uid check
    held_out_splits: frozenset[str] = frozenset({"val", "test"})


@dataclass(frozen=True)
class InstructionBank:
    """Ten distinct task instructions rendered from templates for one dataset."""

    dataset_name: str
    task_type: str
    instructions: tuple[str, ...]
    template_seed: int


@dataclass(frozen=True)
class BankSpec:
    """Template + slot values an instruction bank is rendered from."""

    dataset_name: str
    task_type: str  # recognition | captioning | qa
    templates: tuple[str, ...]
    slots: dict[str, tuple[str, ...]] = field(default_factory=dict)


@dataclass
class StatsReport:
    """Descriptive statistics over a clip corpus."""

    clip_count: int
    duration_mean_s: float
    duration_std_s: float  # population standard deviation
    pct_under_1s: float
    max_duration_s: float
    word_mean: float
    word_std: float  # population standard deviation
    histogram_bin_edges: list[float]
    histogram_counts: list[int]
    std_kind: str = "population"


# ---------------------------------------------------------------------------
# Gap statistics and interval expansion
# ---------------------------------------------------------------------------


def compute_beta(track: NarrationTrack, fallback: float | None = None) -> float:
    """
    Mean gap between consecutive narration timestamps of one track, in seconds.

    A track with a single narration has no gaps; it takes ``fallback`` (the
    corpus-level mean gap) when provided, otherwise this is an error.
    """
    n = len(track.entries)
    if n == 0:
        raise ValueError(f"empty narration track {track.video_id!r}")
    if n == 1:
        if fallback is None:
            raise ValueError(
                f"track {track.video_id!r} has a single narration and no fallback gap"
            )
        return float(fallback)
    ts = track.timestamps
    gaps = np.diff(ts)
    return float(gaps.sum() / gaps.size)


def compute_alpha(tracks: Sequence[NarrationTrack]) -> float:
    """
    Corpus-level mean gap: the average of per-track mean gaps.

    Tracks with fewer than two narrations cannot contribute a gap and are
    skipped; an input with no multi-narration track at all is an error.
    """
    betas = [compute_beta(t) for t in tracks if len(t.entries) >= 2]
    if not betas:
        raise ValueError("cannot compute corpus mean gap: no track has two narrations")
    return float(np.mean(betas))


def expand_narrations(track: NarrationTrack, alpha: float) -> list[ClipInterval]:
    """
    Expand each narration of ``track`` into a clip interval.

    Interval i is ``[t_i - h, t_i + h]`` with half-width ``h = beta / (2 * alpha)``,
    clamped on the left by the previous narration timestamp (0 for the first
    entry) and on the right by the next one (the video duration for the last).
    Zero-length intervals are dropped.  When the track's own mean gap is not a
    positive number (single narration, or duplicated timestamps), the
    corpus-level gap ``alpha`` stands in, giving a half-width of exactly 0.5 s.
    """
    track.validate()
    if not np.isfinite(alpha) or alpha <= 0:
        raise ValueError("alpha must be a positive, finite number of seconds")
    if not track.entries:
        raise ValueError(f"empty narration track {track.video_id!r}")

    beta = compute_beta(track, fallback=alpha)
    if beta <= 0:
        beta = float(alpha)
    half = beta / (2.0 * alpha)

    ts = track.timestamps
    n = ts.size
    clips: list[ClipInterval] = []
    for i in range(n):
        lo = ts[i - 1] if i > 0 else 0.0
        hi = ts[i + 1] if i < n - 1 else track.duration_s
        start = max(ts[i] - half, lo)
        end = min(ts[i] + half, hi)
        if end - start <= 0:
            continue  # degenerate clip: drop
        clips.append(
            ClipInterval(
                index=i,
                start_s=float(start),
                end_s=float(end),
                text=track.entries[i].text,
                beta_s=float(beta),
            )
        )
    return clips


# ---------------------------------------------------------------------------
# Group filtering
# ---------------------------------------------------------------------------


def filter_groups(
    groups: Sequence[GroupManifest], rules: FilterRules
) -> tuple[list[GroupManifest], list[tuple[GroupManifest, str]]]:
    """
    Split ``groups`` into (kept, rejected-with-reason).

    Checks run in a fixed order per group and the first failure is recorded:
    missing narrations, then unresolvable media references, then membership in
    a held-out split.
    """
    kept: list[GroupManifest] = []
    rejected: list[tuple[GroupManifest, str]] = []
    for g in groups:
        g.validate(strict=False)
        if rules.require_narration and sum(len(t.entries) for t in g.tracks) == 0:
            rejected.append((g, REASON_NO_NARRATION))
            continue
        if rules.known_refs is not None:
            refs = [g.ego_ref, *g.exo_refs]
            if any(r not in rules.known_refs for r in refs):
                rejected.append((g, REASON_NO_UID_MAPPING))
                continue
        if g.split in rules.held_out_splits:
            rejected.append((g, REASON_HELD_OUT_SPLIT))
            continue
        kept.append(g)
    return kept, rejected


# ---------------------------------------------------------------------------
# Corpus statistics
# ---------------------------------------------------------------------------


def corpus_stats(
    clips: Sequence[ClipInterval],
    texts: Sequence[str] | None = None,
    n_bins: int = 20,
) -> StatsReport:
    """
    Duration and narration-length statistics over expanded clips.

    Standard deviations are population (divide by N).  ``pct_under_1s`` counts
    clips strictly shorter than one second.  The duration histogram uses
    ``n_bins`` equal-width bins over [0, max duration]; counts always sum to
    the clip count.
    """
    if not clips:
        raise ValueError("cannot compute statistics over an empty clip list")
    durations = np.array([c.duration_s for c in clips], dtype=np.float64)
    if texts is None:
        texts = [c.text for c in clips]
    if len(texts) != len(clips):
        raise ValueError("texts and clips must be the same length")
    words = np.array([len(t.split()) for t in texts], dtype=np.float64)

    max_d = float(durations.max())
    hist_range_hi = max_d if max_d > 0 else 1.0
    counts, edges = np.histogram(durations, bins=n_bins, range=(0.0, hist_range_hi))

    return StatsReport(
        clip_count=len(clips),
        duration_mean_s=float(durations.mean()),
        duration_std_s=float(durations.std()),
        pct_under_1s=float(100.0 * np.mean(durations < 1.0)),
        max_duration_s=max_d,
        word_mean=float(words.mean()),
        word_std=float(words.std()),
        histogram_bin_edges=[float(e) for e in edges],
        histogram_counts=[int(c) for c in counts],
    )


# ---------------------------------------------------------------------------
# Instruction banks
# ---------------------------------------------------------------------------


def _render_all_combinations(spec: BankSpec) -> list[str]:
    slot_names = sorted(spec.slots)
    rendered: list[str] = []
    for template in spec.templates:
        combos: list[dict[str, str]] = [{}]
        for name in slot_names:
            if "{" + name + "}" not in template:
                continue
            combos = [{**c, name: v} for c in combos for v in spec.slots[name]]
        for c in combos:
            rendered.append(template.format(**{**c, "answer_clause": MCQ_ANSWER_CLAUSE}))
    # dedupe preserving order
    seen: set[str] = set()
    unique = []
    for r in rendered:
        if r not in seen:
            seen.add(r)
            unique.append(r)
    return unique


def render_instructions(spec: BankSpec, seed: int) -> InstructionBank:
    """
    Deterministically render ten distinct instructions from a bank spec.

    All template/slot combinations are enumerated, deduplicated, and ten are
    drawn without replacement by a generator seeded from ``seed`` and the
    dataset name.  Recognition banks must carry the shared answer-format
    clause in every instruction.
    """
    pool = _render_all_combinations(spec)
    if len(pool) < 10:
        raise ValueError(
            f"bank {spec.dataset_name!r}: only {len(pool)} distinct instructions "
            "can be rendered; need at least 10"
        )
    rng = np.random.default_rng(jsonio.derive_seed("instruction-bank", spec.dataset_name, seed))
    picked = [pool[i] for i in rng.choice(len(pool), size=10, replace=False)]
    if spec.task_type == "recognition":
        missing = [p for p in picked if MCQ_ANSWER_CLAUSE not in p]
        if missing:
            raise ValueError(
                f"bank {spec.dataset_name!r}: recognition instructions must include "
                f"the answer-format clause; offending: {missing[0]!r}"
            )
    return InstructionBank(
        dataset_name=spec.dataset_name,
        task_type=spec.task_type,
        instructions=tuple(picked),
        template_seed=seed,
    )


def default_bank_specs() -> dict[str, BankSpec]:
    """Built-in instruction banks used by the synthetic pipeline."""
    recognition = BankSpec(
        dataset_name="synth-recognition",
        task_type="recognition",
        templates=(
            "Watch the video and identify the {noun} being performed. {answer_clause}",
            "Select the option that best describes the {noun} in the clip. {answer_clause}",
            "Choose the correct description of the {noun} you observe. {answer_clause}",
            "Decide which candidate matches the {noun} in this recording. {answer_clause}",
            "Pick the statement that matches the demonstrated {noun}. {answer_clause}",
        ),
        slots={"noun": ("action", "activity", "behavior", "task")},
    )
    captioning = BankSpec(
        dataset_name="synth-captioning",
        task_type="captioning",
        templates=(
            "Describe the {noun} shown in the video in one sentence.",
            "Write a short caption for the {noun} in the clip.",
            "Summarize the {noun} you observe in a single line.",
            "Provide a one-sentence description of the {noun}.",
            "State plainly what the {noun} in the recording involves.",
        ),
        slots={"noun": ("action", "activity", "scene", "behavior")},
    )
    qa = BankSpec(
        dataset_name="synth-qa",
        task_type="qa",
        templates=(
            "{lead} the question about the {noun} in the video with a short phrase.",
            "{lead} the following question about the {noun} you observe.",
        ),
        slots={
            "lead": ("Answer", "Respond to", "Address"),
            "noun": ("action", "activity", "objects"),
        },
    )
    return {"recognition": recognition, "captioning": captioning, "qa": qa}


# ---------------------------------------------------------------------------
# JSON forms
# ---------------------------------------------------------------------------


def track_to_json(track: NarrationTrack) -> dict:
    return {
        "schema": "exo2ego-narration/1",
        "video_id": track.video_id,
        "annotator_id": track.annotator_id,
        "duration_s": float(track.duration_s),
        "entries": [{"t_s": float(e.t_s), "text": e.text} for e in track.entries],
    }


def track_from_json(obj: dict) -> NarrationTrack:
    try:
        track = NarrationTrack(
            video_id=str(obj["video_id"]),
            duration_s=float(obj["duration_s"]),
            annotator_id=str(obj.get("annotator_id", "anno-0")),
            entries=[
                NarrationEntry(t_s=float(e["t_s"]), text=str(e["text"]))
                for e in obj["entries"]
            ],
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed narration track JSON: {exc}") from exc
    track.validate()
    return track


def group_from_json(obj: dict) -> GroupManifest:
    try:
        g = GroupManifest(
            group_id=str(obj["group_id"]),
            ego_ref=str(obj["ego_ref"]),
            exo_refs=[str(r) for r in obj["exo_refs"]],
            scenario=str(obj.get("scenario", "")),
            split=str(obj["split"]),
            tracks=[track_from_json(t) for t in obj.get("tracks", [])],
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed group manifest JSON: {exc}") from exc
    g.validate(strict=False)
    return g


def build_corpus_manifest(
    tracks: Sequence[NarrationTrack],
    alpha: float,
    rejected: Sequence[tuple[GroupManifest, str]] = (),
) -> dict:
    """Expand every track and assemble the corpus manifest dict."""
    videos = []
    total_clips = 0
    for t in tracks:
        clips = expand_narrations(t, alpha)
        total_clips += len(clips)
        videos.append(
            {
                "video_id": t.video_id,
                "annotator_id": t.annotator_id,
                "duration_s": float(t.duration_s),
                "beta_s": clips[0].beta_s if clips else None,
                "narration_count": len(t.entries),
                "dropped_zero_length": len(t.entries) - len(clips),
                "clips": [
                    {
                        "index": c.index,
                        "start_s": c.start_s,
                        "end_s": c.end_s,
                        "text": c.text,
                        "beta_s": c.beta_s,
                    }
                    for c in clips
                ],
            }
        )
    return {
        "schema": "exo2ego-corpus/1",
        "alpha_s": float(alpha),
        "track_count": len(tracks),
        "clip_count": total_clips,
        "videos": videos,
        "rejected_groups": [{"group_id": g.group_id, "reason": r} for g, r in rejected],
    }


def parse_corpus_manifest(obj: dict) -> tuple[float, list[ClipInterval], list[str]]:
    """Return (alpha, all clips, all texts) from a corpus manifest dict."""
    if obj.get("schema") != "exo2ego-corpus/1":
        raise ValueError(f"not a corpus manifest (schema={obj.get('schema')!r})")
    clips: list[ClipInterval] = []
    for v in obj["videos"]:
        for c in v["clips"]:
            clips.append(
                ClipInterval(
                    index=int(c["index"]),
                    start_s=float(c["start_s"]),
                    end_s=float(c["end_s"]),
                    text=str(c["text"]),
                    beta_s=float(c["beta_s"]),
                )
            )
    return float(obj["alpha_s"]), clips, [c.text for c in clips]


def stats_to_json(stats: StatsReport) -> dict:
    return {
        "schema": "exo2ego-stats/1",
        "clip_count": stats.clip_count,
        "duration_mean_s": stats.duration_mean_s,
        "duration_std_s": stats.duration_std_s,
        "pct_under_1s": stats.pct_under_1s,
        "max_duration_s": stats.max_duration_s,
        "word_mean": stats.word_mean,
        "word_std": stats.word_std,
        "std_kind": stats.std_kind,
        "histogram": {
            "bin_edges": stats.histogram_bin_edges,
            "counts": stats.histogram_counts,
        },
    }
