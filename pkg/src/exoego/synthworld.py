"""
Deterministic synthetic paired-view world.

An episode is a scripted actor ("C") moving over a small grid and performing
timed actions on placed objects.  Every episode is a pure function of
(episode seed, world config): the action program, the actor's path, the
per-frame latent state, and both rendered views derive from it with no global
RNG involved.

Two render modes share the same latent state sequence:

* ``gridworld`` — the exo view is the full occupancy grid (agent plane, one
  plane per object type, one plane per verb), the ego view is a zero-padded
  square crop centered on the actor.
* ``linear``    — both views are fixed invertible linear images of the latent
  vector, drawn once per world seed.  The ground-truth ego-to-exo frame map
  ``T* = M_exo @ inv(M_ego)`` is therefore exact and is exposed for oracle
  tests.

Narrations are template sentences ("C picks up the cup") at the program's
action timestamps; clip intervals come from the corpus expansion rule, and
each clip is subsampled to exactly 16 frames at synchronized timepoints in
both views.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import corpus
from .jsonio import derive_seed

__all__ = [
    "VERBS",
    "OBJECTS",
    "FRAMES_PER_CLIP",
    "WorldConfig",
    "WorldParams",
    "ActionEvent",
    "Episode",
    "FrameSeq",
    "ClipPair",
    "world_params",
    "gen_episode",
    "render_exo",
    "render_ego",
    "narrate",
    "make_clip_pairs",
    "sample_frame_indices",
    "split_dataset",
    "episode_digest",
    "frame_dims",
]

FRAMES_PER_CLIP = 16

# Fixed catalogs: channel layout and vocabulary depend on these, so they are
# module constants rather than config.
VERBS = ("pick", "place", "push", "open", "close", "shake", "wipe", "tap")
OBJECTS = ("cup", "bowl", "pan", "egg", "knife", "jar", "plate", "towel")

NARRATION_TEMPLATES = {
    "pick": "C picks up the {obj}",
    "place": "C places the {obj} on the table",
    "push": "C pushes the {obj} across the counter",
    "open": "C opens the {obj}",
    "close": "C closes the {obj}",
    "shake": "C shakes the {obj}",
    "wipe": "C wipes the {obj} with a cloth",
    "tap": "C taps the {obj} twice",
}

# Seconds an action stays visibly "active" after its program timestamp.
ACTION_WINDOW_S = 1.0


# ---------------------------------------------------------------------------
# Config and derived per-world parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldConfig:
    mode: str = "gridworld"  # "gridworld" | "linear"
    grid_n: int = 5
    ego_radius: int = 2
    n_objects: int = 4
    n_actions: int = 8
    duration_s: float = 24.0
    fps: float = 4.0
    latent_dim: int = 16
    n_exo_views: int = 1
    world_seed: int = 7

    def validate(self) -> None:
        if self.mode not in ("gridworld", "linear"):
            raise ValueError(f"unknown world mode {self.mode!r}")
        if self.grid_n < 1 or self.ego_radius < 0:
            raise ValueError("grid_n must be >= 1 and ego_radius >= 0")
        if self.n_objects + 1 > self.grid_n**2:
            raise ValueError(
                f"cannot place {self.n_objects} objects plus the actor on a "
                f"{self.grid_n}x{self.grid_n} grid"
            )
        if self.n_objects < 1 or self.n_objects > len(OBJECTS):
            raise ValueError(f"n_objects must be in [1, {len(OBJECTS)}]")
        if not 1 <= self.n_exo_views <= 5:
            raise ValueError("n_exo_views must be in [1, 5]")
        if self.duration_s <= 0 or self.fps <= 0 or self.n_actions < 1:
            raise ValueError("duration_s, fps and n_actions must be positive")

    @property
    def n_raw_frames(self) -> int:
        return int(round(self.duration_s * self.fps))


@dataclass
class WorldParams:
    """Quantities drawn once per world seed and shared by every episode."""

    cell_emb: np.ndarray  # (grid_n^2, latent_dim)
    verb_emb: np.ndarray  # (len(VERBS)+1, latent_dim); last row = idle
    obj_emb: np.ndarray  # (len(OBJECTS)+1, latent_dim); last row = idle
    m_ego: np.ndarray | None  # (latent_dim, latent_dim), linear mode only
    m_exo: list[np.ndarray] | None  # per exo view, linear mode only
    t_star: list[np.ndarray] | None  # ground-truth ego->exo frame maps


def _well_conditioned_matrix(rng: np.random.Generator, d: int) -> np.ndarray:
    """Random invertible matrix with singular values in [0.5, 2.0]."""
    q1, _ = np.linalg.qr(rng.normal(size=(d, d)))
    q2, _ = np.linalg.qr(rng.normal(size=(d, d)))
    s = rng.uniform(0.5, 2.0, size=d)
    return (q1 * s) @ q2


def world_params(config: WorldConfig) -> WorldParams:
    config.validate()
    rng = np.random.default_rng(derive_seed("world-params", config.world_seed))
    d = config.latent_dim
    cell_emb = rng.normal(scale=1.0, size=(config.grid_n**2, d))
    verb_emb = rng.normal(scale=1.0, size=(len(VERBS) + 1, d))
    obj_emb = rng.normal(scale=1.0, size=(len(OBJECTS) + 1, d))
    m_ego = m_exo = t_star = None
    if config.mode == "linear":
        m_ego = _well_conditioned_matrix(rng, d)
        m_exo = [_well_conditioned_matrix(rng, d) for _ in range(config.n_exo_views)]
        inv_ego = np.linalg.inv(m_ego)
        t_star = [m @ inv_ego for m in m_exo]
    return WorldParams(cell_emb, verb_emb, obj_emb, m_ego, m_exo, t_star)


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ActionEvent:
    t_s: float
    verb: str
    obj: str


@dataclass
class Episode:
    episode_id: str
    seed: int
    config: WorldConfig
    program: list[ActionEvent]
    object_cells: dict[str, tuple[int, int]]
    agent_path: np.ndarray  # (n_raw_frames, 2) int cells
    active_event: np.ndarray  # (n_raw_frames,) int, -1 when idle
    latent_states: np.ndarray  # (n_raw_frames, latent_dim) float64

    @property
    def duration_s(self) -> float:
        return self.config.duration_s


def gen_episode(seed: int, config: WorldConfig, params: WorldParams | None = None) -> Episode:
    """Generate one deterministic episode from (seed, config)."""
    config.validate()
    if params is None:
        params = world_params(config)
    rng = np.random.default_rng(derive_seed("episode", config.world_seed, seed))
    n = config.grid_n
    n_frames = config.n_raw_frames

    # Placement: actor plus n_objects distinct object types on distinct cells.
    cells = rng.choice(n * n, size=config.n_objects + 1, replace=False)
    agent_start = (int(cells[0] // n), int(cells[0] % n))
    obj_names = [OBJECTS[i] for i in sorted(rng.choice(len(OBJECTS), size=config.n_objects, replace=False))]
    object_cells = {
        name: (int(c // n), int(c % n)) for name, c in zip(obj_names, cells[1:])
    }

    # Program: strictly ascending action times on a 0.25 s lattice, away from
    # the extreme ends so clips have room.
    lo, hi = 1.0, config.duration_s - 1.0
    lattice = np.arange(lo, hi + 1e-9, 0.25)
    if lattice.size < config.n_actions:
        raise ValueError(
            f"duration {config.duration_s}s too short for {config.n_actions} actions"
        )
    times = np.sort(rng.choice(lattice, size=config.n_actions, replace=False))
    program = [
        ActionEvent(
            t_s=float(t),
            verb=VERBS[int(rng.integers(len(VERBS)))],
            obj=obj_names[int(rng.integers(len(obj_names)))],
        )
        for t in times
    ]

    # Actor path: one 4-neighbourhood step per frame toward the next action's
    # object (x first, then y); realizability is automatic — steps never
    # leave the grid because targets are grid cells.
    path = np.zeros((n_frames, 2), dtype=np.int64)
    pos = list(agent_start)
    event_times = np.array([e.t_s for e in program])
    for k in range(n_frames):
        t = k / config.fps
        nxt = int(np.searchsorted(event_times, t, side="left"))
        if nxt < len(program):
            target = object_cells[program[nxt].obj]
            if pos[0] != target[0]:
                pos[0] += 1 if target[0] > pos[0] else -1
            elif pos[1] != target[1]:
                pos[1] += 1 if target[1] > pos[1] else -1
        path[k] = pos

    # Active action per frame: the most recent event within its action window.
    active = np.full(n_frames, -1, dtype=np.int64)
    for k in range(n_frames):
        t = k / config.fps
        i = int(np.searchsorted(event_times, t, side="right")) - 1
        if i >= 0:
            gap_to_next = (
                event_times[i + 1] - event_times[i] if i + 1 < len(program) else np.inf
            )
            if t - event_times[i] < min(ACTION_WINDOW_S, gap_to_next):
                active[k] = i

    # Latent state: sum of embeddings for actor cell, active verb, active
    # object, plus a constant episode-layout term.
    d = config.latent_dim
    z = np.zeros((n_frames, d), dtype=np.float64)
    idle_v, idle_o = len(VERBS), len(OBJECTS)
    layout = np.zeros(d)
    for name, (cx, cy) in object_cells.items():
        layout += params.obj_emb[OBJECTS.index(name)] + params.cell_emb[cx * n + cy]
    layout *= 0.25 / max(1, len(object_cells))
    for k in range(n_frames):
        cx, cy = path[k]
        vi = idle_v if active[k] < 0 else VERBS.index(program[active[k]].verb)
        oi = idle_o if active[k] < 0 else OBJECTS.index(program[active[k]].obj)
        z[k] = (
            params.cell_emb[cx * n + cy]
            + params.verb_emb[vi]
            + params.obj_emb[oi]
            + layout
        )

    return Episode(
        episode_id=f"ep{seed:06d}",
        seed=seed,
        config=config,
        program=program,
        object_cells=object_cells,
        agent_path=path,
        active_event=active,
        latent_states=z,
    )


def episode_digest(ep: Episode) -> str:
    """Stable content hash of an episode (used by determinism checks)."""
    import hashlib

    h = hashlib.sha256()
    h.update(repr([(e.t_s, e.verb, e.obj) for e in ep.program]).encode())
    h.update(repr(sorted(ep.object_cells.items())).encode())
    h.update(ep.agent_path.tobytes())
    h.update(ep.latent_states.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass
class FrameSeq:
    """A sequence of frames from one view, with per-frame sample times."""

    frames: np.ndarray  # (T, ...) float
    fps: float
    view: str  # "ego" | "exo"
    times_s: np.ndarray  # (T,) seconds

    def validate(self) -> None:
        if self.view not in ("ego", "exo"):
            raise ValueError(f"unknown view {self.view!r}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("frames contain non-finite values")
        if self.frames.shape[0] != self.times_s.shape[0]:
            raise ValueError("frame count and times_s length differ")

    @property
    def flat(self) -> np.ndarray:
        """Frames flattened to (T, features)."""
        return self.frames.reshape(self.frames.shape[0], -1)


def frame_dims(config: WorldConfig) -> tuple[int, int]:
    """(ego, exo) flattened per-frame feature sizes for a world config."""
    if config.mode == "linear":
        return config.latent_dim, config.latent_dim
    c = 1 + len(OBJECTS) + len(VERBS)
    side = 2 * config.ego_radius + 1
    return c * side * side, c * config.grid_n * config.grid_n


def _grid_frames(ep: Episode) -> np.ndarray:
    """Full-grid occupancy frames (T, C, N, N)."""
    cfg = ep.config
    n = cfg.grid_n
    c = 1 + len(OBJECTS) + len(VERBS)
    frames = np.zeros((cfg.n_raw_frames, c, n, n), dtype=np.float64)
    for name, (cx, cy) in ep.object_cells.items():
        frames[:, 1 + OBJECTS.index(name), cx, cy] = 1.0
    for k in range(cfg.n_raw_frames):
        ax, ay = ep.agent_path[k]
        frames[k, 0, ax, ay] = 1.0
        i = ep.active_event[k]
        if i >= 0:
            ev = ep.program[i]
            frames[k, 1 + OBJECTS.index(ev.obj), ax, ay] = 2.0
            frames[k, 1 + len(OBJECTS) + VERBS.index(ev.verb), ax, ay] = 1.0
    return frames


def render_exo(
    ep: Episode, params: WorldParams | None = None, view_index: int = 0
) -> FrameSeq:
    """Render the full third-person view of an episode."""
    cfg = ep.config
    times = np.arange(cfg.n_raw_frames, dtype=np.float64) / cfg.fps
    if cfg.mode == "linear":
        if params is None:
            params = world_params(cfg)
        if not 0 <= view_index < cfg.n_exo_views:
            raise ValueError(f"exo view index {view_index} out of range")
        frames = ep.latent_states @ params.m_exo[view_index].T
    else:
        frames = _grid_frames(ep)
    return FrameSeq(frames=frames, fps=cfg.fps, view="exo", times_s=times)


def render_ego(ep: Episode, params: WorldParams | None = None) -> FrameSeq:
    """Render the first-person view: a padded square crop around the actor."""
    cfg = ep.config
    times = np.arange(cfg.n_raw_frames, dtype=np.float64) / cfg.fps
    if cfg.mode == "linear":
        if params is None:
            params = world_params(cfg)
        frames = ep.latent_states @ params.m_ego.T
        return FrameSeq(frames=frames, fps=cfg.fps, view="ego", times_s=times)

    full = _grid_frames(ep)
    n, r = cfg.grid_n, cfg.ego_radius
    side = 2 * r + 1
    c = full.shape[1]
    crops = np.zeros((cfg.n_raw_frames, c, side, side), dtype=np.float64)
    for k in range(cfg.n_raw_frames):
        ax, ay = ep.agent_path[k]
        x0, x1 = ax - r, ax + r + 1
        y0, y1 = ay - r, ay + r + 1
        sx0, sy0 = max(0, x0), max(0, y0)
        sx1, sy1 = min(n, x1), min(n, y1)
        crops[k, :, sx0 - x0 : sx1 - x0, sy0 - y0 : sy1 - y0] = full[
            k, :, sx0:sx1, sy0:sy1
        ]
    return FrameSeq(frames=crops, fps=cfg.fps, view="ego", times_s=times)


# ---------------------------------------------------------------------------
# Narration and clip pairs
# ---------------------------------------------------------------------------


def narrate(ep: Episode) -> corpus.NarrationTrack:
    """Template narration sentences at the episode's action timestamps."""
    if not ep.program:
        raise ValueError(f"episode {ep.episode_id}: empty action program")
    entries = [
        corpus.NarrationEntry(
            t_s=e.t_s, text=NARRATION_TEMPLATES[e.verb].format(obj=e.obj)
        )
        for e in ep.program
    ]
    return corpus.NarrationTrack(
        video_id=ep.episode_id,
        duration_s=ep.config.duration_s,
        entries=entries,
        annotator_id="synth-narrator",
    )


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def sample_frame_indices(
    start_s: float, end_s: float, fps: float, n_raw: int, n_out: int = FRAMES_PER_CLIP
) -> np.ndarray:
    """
    Pick ``n_out`` raw-frame indices uniformly over [start_s, end_s].

    With L raw frames inside the interval, index j maps to position
    ``j * L / n_out`` rounded half-up.  An interval holding exactly ``n_out``
    frames is sampled as the identity; one holding ``2 * n_out`` takes every
    other frame; shorter intervals repeat frames as needed.  An interval that
    contains no frame timestamp at all repeats its nearest frame.
    """
    if end_s <= start_s:
        raise ValueError("interval must have positive length")
    i0 = max(0, int(np.ceil(start_s * fps - 1e-9)))
    i1 = min(n_raw - 1, int(np.floor(end_s * fps + 1e-9)))
    if i1 < i0:
        center = np.clip(_round_half_up(0.5 * (start_s + end_s) * fps), 0, n_raw - 1)
        return np.full(n_out, int(center), dtype=np.int64)
    length = i1 - i0 + 1
    idx = np.array(
        [min(i0 + _round_half_up(j * length / n_out), i1) for j in range(n_out)],
        dtype=np.int64,
    )
    return idx


@dataclass
class ClipPair:
    """One expanded clip in both views, subsampled to FRAMES_PER_CLIP frames."""

    pair_id: str
    episode_id: str
    interval: corpus.ClipInterval
    ego: FrameSeq
    exo: list[FrameSeq]  # 1-5 synchronized third-person views
    text: str

    def validate(self) -> None:
        if not 1 <= len(self.exo) <= 5:
            raise ValueError(f"pair {self.pair_id}: expected 1-5 exo views")
        self.ego.validate()
        for x in self.exo:
            x.validate()
            if x.times_s.shape != self.ego.times_s.shape or not np.array_equal(
                x.times_s, self.ego.times_s
            ):
                raise ValueError(f"pair {self.pair_id}: view sample times differ")


def make_clip_pairs(
    ep: Episode, alpha: float, params: WorldParams | None = None
) -> list[ClipPair]:
    """Expand the episode's narrations and cut synchronized 16-frame clips."""
    cfg = ep.config
    if params is None:
        params = world_params(cfg)
    track = narrate(ep)
    intervals = corpus.expand_narrations(track, alpha)
    ego_raw = render_ego(ep, params)
    exo_raw = [render_exo(ep, params, v) for v in range(cfg.n_exo_views)]
    pairs: list[ClipPair] = []
    for iv in intervals:
        idx = sample_frame_indices(iv.start_s, iv.end_s, cfg.fps, cfg.n_raw_frames)
        times = idx.astype(np.float64) / cfg.fps
        ego = FrameSeq(ego_raw.frames[idx], cfg.fps, "ego", times)
        exo = [FrameSeq(x.frames[idx], cfg.fps, "exo", times.copy()) for x in exo_raw]
        pair = ClipPair(
            pair_id=f"{ep.episode_id}-c{iv.index:02d}",
            episode_id=ep.episode_id,
            interval=iv,
            ego=ego,
            exo=exo,
            text=iv.text,
        )
        pair.validate()
        pairs.append(pair)
    return pairs


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split_dataset(
    pairs: Sequence[ClipPair],
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> dict[str, list[ClipPair]]:
    """
    Partition pairs into train/val/test by episode.

    All clips of one episode land in the same split.  Episode counts follow
    the ratios via largest-remainder rounding, and the assignment is a pure
    function of (episode ids, ratios, seed).
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negatives summing to 1, got {ratios}")
    episodes: list[str] = []
    seen: set[str] = set()
    for p in pairs:
        if p.episode_id not in seen:
            seen.add(p.episode_id)
            episodes.append(p.episode_id)
    rng = np.random.default_rng(derive_seed("split", seed))
    order = [episodes[i] for i in rng.permutation(len(episodes))]

    n = len(order)
    raw = [r * n for r in ratios]
    counts = [int(np.floor(x)) for x in raw]
    remainders = [x - c for x, c in zip(raw, counts)]
    while sum(counts) < n:
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0

    names = ("train", "val", "test")
    assignment: dict[str, str] = {}
    cursor = 0
    for name, cnt in zip(names, counts):
        for ep_id in order[cursor : cursor + cnt]:
            assignment[ep_id] = name
        cursor += cnt

    out: dict[str, list[ClipPair]] = {name: [] for name in names}
    for p in pairs:
        out[assignment[p.episode_id]].append(p)
    return out
