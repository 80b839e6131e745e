"""
Command-line entry point.

Subcommands: ``build-clips`` (narrations -> clip corpus + stats), ``stats``
(recompute statistics from a corpus manifest), ``synth`` (generate the paired
synthetic dataset), ``train`` (one or more pipeline stages), ``eval`` (score a
checkpoint on generated items), and ``report`` (tables + optional plots).

Every invocation works inside exactly one run directory (``--run``, resolved
under ``$EXOEGO_OUT`` or ``./runs``); nothing is written outside it.  A lock
file serializes writers, outputs already present require ``--force``, and
rewriting with ``--force`` over identical inputs reproduces identical bytes.
Exit codes: 0 success, 1 user error, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import corpus, jsonio
from .config import RunConfig
from .datasets import (
    build_synth_dataset,
    build_vocab,
    caption_samples,
    dataset_digest,
    instruction_samples,
    load_dataset,
    mcq_items,
    open_items,
    pair_samples,
    save_dataset,
)
from .evalharness import run_eval, save_items
from .models.pipeline import PipelineModel, attach_adapters
from .report import build_report, metrics_markdown
from .trainer import (
    STAGES,
    CheckpointError,
    DivergenceError,
    LineageError,
    checkpoint_load,
    run_stage,
    stage_plan,
)

__all__ = ["main", "UserError", "OUTPUT_ROOT_ENV"]

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
OUTPUT_ROOT_ENV = "EXOEGO_OUT"
LOCK_NAME = ".lock"


class UserError(Exception):
    """Bad input or usage; reported without a traceback, exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; here 2 means an internal
    # invariant violation, so route usage problems through UserError instead.
    def error(self, message: str):  # noqa: D102 - argparse override
        raise UserError(message)


# ---------------------------------------------------------------------------
# Plumbing
# ---------------------------------------------------------------------------


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _resolve_run_dir(name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() or os.sep in name else _output_root() / name


class _RunLock:
    """Exclusive advisory lock: a file that exists while a command runs."""

    def __init__(self, run_dir: Path) -> None:
        self.path = run_dir / LOCK_NAME
        self.fd: int | None = None

    def __enter__(self) -> "_RunLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UserError(
                f"run directory {self.path.parent} is locked by another command "
                f"({self.path} exists); delete the lock file if no other "
                "process is writing"
            ) from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc) -> None:
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)


def _require_force(paths: list[Path], force: bool) -> None:
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        raise UserError(
            f"output already exists: {existing[0]}; pass --force to overwrite"
        )


def _run_config(args: argparse.Namespace, run_dir: Path) -> RunConfig:
    """Assemble the run configuration: optional JSON file, then flags on top."""
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        try:
            rc = RunConfig.from_json(jsonio.load(path))
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            raise UserError(f"{path}: bad run config: {exc}") from exc
    else:
        rc = RunConfig()
    for flag, attr in (
        ("profile", "profile"),
        ("seed", "seed"),
        ("mode", "mode"),
        ("ablation", "ablation"),
        ("episodes", "n_episodes"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(rc, attr, value)
    rc.output_dir = str(run_dir)
    try:
        rc.validate()
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    return rc


def _snapshot_config(rc: RunConfig, run_dir: Path, force: bool) -> str:
    """Write config.json (or verify it matches); returns the config hash."""
    digest = rc.config_hash()
    payload = rc.to_json()
    payload["config_hash"] = digest
    path = run_dir / "config.json"
    if path.exists():
        old = jsonio.load(path)
        if old.get("config_hash") != digest and not force:
            raise UserError(
                f"run config does not match the snapshot at {path} "
                "(different profile/seed/flags?); pass --force to replace it"
            )
    jsonio.dump(payload, path)
    return digest


# ---------------------------------------------------------------------------
# build-clips / stats
# ---------------------------------------------------------------------------


def _collect_track_files(inputs: list[str]) -> list[Path]:
    files: list[Path] = []
    for raw in inputs:
        p = Path(raw)
        if p.is_dir():
            files.extend(sorted(p.rglob("*.json")))
        elif p.exists():
            files.append(p)
        else:
            raise UserError(f"narration path not found: {p}")
    return files


def _parse_track_file(path: Path) -> list[corpus.NarrationTrack]:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    docs = obj if isinstance(obj, list) else [obj]
    tracks = []
    for i, doc in enumerate(docs):
        try:
            tracks.append(corpus.track_from_json(doc))
        except ValueError as exc:
            raise UserError(f"{path}: entry {i}: {exc}") from exc
    return tracks


def cmd_build_clips(args: argparse.Namespace, run_dir: Path) -> int:
    files = _collect_track_files(args.narrations)
    tracks = [t for f in files for t in _parse_track_file(f)]
    if not tracks:
        raise UserError(f"no tracks found under: {', '.join(args.narrations)}")

    if args.alpha == "auto":
        try:
            alpha = corpus.compute_alpha(tracks)
        except ValueError as exc:
            raise UserError(str(exc)) from exc
    else:
        try:
            alpha = float(args.alpha)
        except ValueError:
            raise UserError(f"--alpha must be a number or 'auto', got {args.alpha!r}") from None
    if not alpha > 0:
        raise UserError("--alpha must be positive")

    rc = _run_config(args, run_dir)
    out_dir = run_dir / "corpus"
    manifest_path = out_dir / "corpus.json"
    stats_path = out_dir / "stats.json"
    _require_force([manifest_path, stats_path], args.force)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = _snapshot_config(rc, run_dir, args.force)

    try:
        manifest = corpus.build_corpus_manifest(tracks, alpha)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    manifest["config_hash"] = digest
    jsonio.dump(manifest, manifest_path)

    _, clips, texts = corpus.parse_corpus_manifest(manifest)
    stats = corpus.stats_to_json(corpus.corpus_stats(clips, texts))
    stats["config_hash"] = digest
    jsonio.dump(stats, stats_path)

    print(
        f"built corpus: {manifest['track_count']} tracks, "
        f"{manifest['clip_count']} clips (alpha={alpha:.6f}s) -> {manifest_path}"
    )
    return EXIT_OK


def cmd_stats(args: argparse.Namespace, run_dir: Path) -> int:
    manifest_path = Path(args.manifest) if args.manifest else run_dir / "corpus" / "corpus.json"
    if not manifest_path.exists():
        raise UserError(
            f"no corpus manifest at {manifest_path}; run `exoego build-clips` first"
        )
    try:
        obj = jsonio.load(manifest_path)
        _, clips, texts = corpus.parse_corpus_manifest(obj)
        stats = corpus.corpus_stats(clips, texts, n_bins=args.bins)
    except (ValueError, json.JSONDecodeError) as exc:
        raise UserError(f"{manifest_path}: {exc}") from exc

    rc = _run_config(args, run_dir)
    stats_path = run_dir / "corpus" / "stats.json"
    _require_force([stats_path], args.force)
    stats_path.parent.mkdir(parents=True, exist_ok=True)
    payload = corpus.stats_to_json(stats)
    payload["config_hash"] = _snapshot_config(rc, run_dir, args.force)
    jsonio.dump(payload, stats_path)
    print(
        f"{stats.clip_count} clips: mean {stats.duration_mean_s:.3f}s "
        f"(std {stats.duration_std_s:.3f}), {stats.pct_under_1s:.1f}% under 1s, "
        f"max {stats.max_duration_s:.3f}s -> {stats_path}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth / train / eval / report
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, run_dir: Path) -> int:
    rc = _run_config(args, run_dir)
    out = run_dir / "dataset"
    digest = _snapshot_config(rc, run_dir, args.force)
    try:
        ds = build_synth_dataset(
            rc.world_config(),
            rc.episodes(),
            rc.seed,
            split_seed=rc.split_seed,
            ratios=rc.ratios,
            bank_seed=rc.seed,
        )
        save_dataset(ds, out, force=args.force, config_hash=digest)
    except FileExistsError as exc:
        raise UserError(str(exc)) from exc
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    sizes = {name: len(ps) for name, ps in ds.splits.items()}
    print(
        f"dataset written to {out}: {ds.n_episodes} episodes, "
        f"splits {sizes}, digest {dataset_digest(out)[:16]}"
    )
    return EXIT_OK


def _stage_data(stage_id: str, ds, vocab, seed: int) -> list:
    train = ds.pairs("train")
    if not train:
        raise UserError("dataset has an empty train split")
    if stage_id == "init":
        return caption_samples(train, vocab, views=("ego", "exo"))
    if stage_id == "s1":
        return caption_samples(train, vocab, views=("exo",))
    if stage_id == "s2":
        return pair_samples(train, vocab)
    return instruction_samples(train, vocab, ds.banks, seed=seed)


def _parse_stages(raw: str) -> list[str]:
    stages = [s.strip() for s in raw.split(",") if s.strip()]
    if not stages:
        raise UserError("--stage must name at least one stage")
    for s in stages:
        if s not in STAGES:
            raise UserError(f"unknown stage {s!r}; choose from {', '.join(STAGES)}")
    order = [STAGES.index(s) for s in stages]
    if order != sorted(set(order)):
        raise UserError("stages must be unique and in pipeline order (init,s1,s2,s3)")
    return stages


def cmd_train(args: argparse.Namespace, run_dir: Path) -> int:
    stages = _parse_stages(args.stage)
    rc = _run_config(args, run_dir)
    dataset_dir = run_dir / "dataset"
    if not (dataset_dir / "dataset.json").exists():
        raise UserError(f"no dataset at {dataset_dir}; run `exoego synth` first")
    try:
        ds = load_dataset(dataset_dir)
    except (ValueError, FileNotFoundError) as exc:
        raise UserError(f"{dataset_dir}: {exc}") from exc

    outputs = []
    for stage_id in stages:
        outputs.append(run_dir / "logs" / f"{stage_id}.ndjson")
        outputs.append(run_dir / "checkpoints" / stage_id / "manifest.json")
        outputs.append(run_dir / "reports" / f"train_{stage_id}.json")
    _require_force(outputs, args.force)
    digest = _snapshot_config(rc, run_dir, args.force)

    vocab = build_vocab(ds)
    first = stages[0]
    if first == "init":
        model = PipelineModel(rc.model_config(), vocab, seed=rc.seed)
        lora = rc.lora_config()
        if lora is not None:
            attach_adapters(model, lora, seed=rc.seed)
        lineage: tuple[str, ...] = ()
    else:
        prev = STAGES[STAGES.index(first) - 1]
        ckpt = run_dir / "checkpoints" / prev
        if (ckpt / "manifest.json").exists():
            model, manifest, _ = checkpoint_load(ckpt)
            lineage = tuple(manifest["lineage"])
        elif args.allow_skip:
            model = PipelineModel(rc.model_config(), vocab, seed=rc.seed)
            lora = rc.lora_config()
            if lora is not None:
                attach_adapters(model, lora, seed=rc.seed)
            lineage = ()
        else:
            raise UserError(
                f"stage {first!r} needs the {prev!r} checkpoint at {ckpt}; "
                "train earlier stages first or pass --allow-skip"
            )

    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    (run_dir / "reports").mkdir(parents=True, exist_ok=True)
    for stage_id in stages:
        cfg = stage_plan(
            stage_id,
            profile=rc.trainer_profile(),
            ablation=rc.ablation,
            seed=rc.seed,
            dataset_ref=str(dataset_dir),
            overrides=rc.stage_overrides.get(stage_id),
        )
        data = _stage_data(stage_id, ds, vocab, rc.seed)
        report = run_stage(
            model,
            cfg,
            data,
            log_path=run_dir / "logs" / f"{stage_id}.ndjson",
            ckpt_dir=run_dir / "checkpoints" / stage_id,
            lineage=lineage,
            allow_skip=args.allow_skip,
            config_hash=digest,
        )
        lineage = tuple(lineage) + (stage_id,)
        payload = report.to_json()
        payload.pop("wall_time_s")  # keep report files byte-identical across reruns
        payload["config_hash"] = digest
        payload["ablation"] = rc.ablation
        jsonio.dump(payload, run_dir / "reports" / f"train_{stage_id}.json")
        snap = report.final_snapshot
        print(
            f"[{stage_id}] steps={report.steps} "
            f"loss {snap['leading_decile_total']:.4f} -> {snap['trailing_decile_total']:.4f} "
            f"(final {snap['final_total']:.4f}) lineage={'+'.join(lineage)}"
        )
    return EXIT_OK


def _latest_checkpoint(run_dir: Path) -> Path:
    for stage_id in reversed(STAGES):
        candidate = run_dir / "checkpoints" / stage_id
        if (candidate / "manifest.json").exists():
            return candidate
    raise UserError(f"no checkpoints under {run_dir / 'checkpoints'}; train first")


def cmd_eval(args: argparse.Namespace, run_dir: Path) -> int:
    rc = _run_config(args, run_dir)
    dataset_dir = run_dir / "dataset"
    if not (dataset_dir / "dataset.json").exists():
        raise UserError(f"no dataset at {dataset_dir}; run `exoego synth` first")
    ds = load_dataset(dataset_dir)

    ckpt = Path(args.checkpoint) if args.checkpoint else _latest_checkpoint(run_dir)
    try:
        model, manifest, _ = checkpoint_load(ckpt)
    except CheckpointError as exc:
        raise UserError(f"{ckpt}: {exc}") from exc

    settings = rc.eval_settings()
    if args.split:
        settings["split"] = args.split
    if args.items:
        settings["n_items"] = args.items
    if args.choices:
        settings["n_choices"] = args.choices
    if args.scope:
        settings["scope"] = args.scope
    if args.tasks:
        settings["tasks"] = [t.strip() for t in args.tasks.split(",") if t.strip()]

    split = settings["split"]
    try:
        pool = ds.pairs(split)
    except KeyError as exc:
        raise UserError(str(exc)) from exc
    if not pool:
        raise UserError(f"split {split!r} holds no clips")

    items = []
    frames: dict = {}
    try:
        for task in settings["tasks"]:
            if task in ("mcq", "retrieval", "multilabel"):
                built, fr = mcq_items(
                    pool,
                    n_items=settings["n_items"],
                    n_choices=settings["n_choices"],
                    scope=settings["scope"],
                    seed=rc.seed,
                    bank=ds.banks.get("recognition"),
                    task_type=task,
                    universe=ds.all_pairs(),
                )
            elif task == "open":
                built, fr = open_items(
                    pool,
                    n_items=settings["n_items"],
                    seed=rc.seed,
                    bank=ds.banks.get("qa"),
                )
            else:
                raise UserError(f"unsupported eval task {task!r}")
            items.extend(built)
            frames.update(fr)
        metrics = run_eval(
            model, items, frames, lineage=tuple(manifest["lineage"])
        )
    except ValueError as exc:
        raise UserError(str(exc)) from exc

    tag = f"eval_{split}"
    reports = run_dir / "reports"
    json_path = reports / f"{tag}.json"
    md_path = reports / f"{tag}.md"
    items_path = reports / f"items_{split}.jsonl"
    _require_force([json_path, md_path, items_path], args.force)
    reports.mkdir(parents=True, exist_ok=True)

    payload = dict(metrics)
    payload["config_hash"] = _snapshot_config(rc, run_dir, args.force)
    payload["checkpoint"] = str(ckpt)
    payload["lineage"] = list(manifest["lineage"])
    payload["protocol"] = {k: settings[k] for k in sorted(settings)}
    jsonio.dump(payload, json_path)
    md_path.write_text(
        f"# Evaluation: {split}\n\n" + metrics_markdown(metrics), encoding="utf-8"
    )
    save_items(items_path, items)

    per_task = ", ".join(
        f"{task} {next(v for k, v in entry.items() if k != 'n'):.4f}"
        for task, entry in sorted(metrics["per_task"].items())
    )
    print(
        f"evaluated {metrics['n_items']} items from {split!r} with {ckpt.name}: "
        f"{per_task} -> {json_path}"
    )
    return EXIT_OK


def cmd_report(args: argparse.Namespace, run_dir: Path) -> int:
    run_dirs = [Path(d) for d in args.run_dirs] if args.run_dirs else [run_dir]
    for d in run_dirs:
        if not d.is_dir():
            raise UserError(f"run directory not found: {d}")
    out_dir = run_dir / "reports"
    _require_force([out_dir / "report.json", out_dir / "report.md"], args.force)
    try:
        build_report(run_dirs, out_dir, plots=args.plots)
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    print(f"report over {len(run_dirs)} run(s) -> {out_dir / 'report.md'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, *, config_flags: bool = True) -> None:
    p.add_argument(
        "--run",
        default="default",
        help="run directory name (under $EXOEGO_OUT or ./runs) or explicit path",
    )
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if config_flags:
        p.add_argument("--config", help="run-config JSON file")
        p.add_argument("--profile", choices=("paper-default", "toy"))
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=("gridworld", "linear"), help="world render mode")
        p.add_argument("--ablation", help="ablation preset name (default: full)")
        p.add_argument("--episodes", type=int, help="number of synthetic episodes")


def build_parser() -> _Parser:
    parser = _Parser(prog="exoego", description=__doc__.splitlines()[1])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("build-clips", help="expand narration tracks into a clip corpus")
    _add_common(p)
    p.add_argument(
        "--narrations", nargs="+", required=True,
        help="narration-track JSON files or directories of them",
    )
    p.add_argument(
        "--alpha", default="auto",
        help=f"corpus-level mean gap in seconds, or 'auto' to compute "
        f"(reference value {corpus.PAPER_ALPHA_S})",
    )
    p.set_defaults(func=cmd_build_clips)

    p = sub.add_parser("stats", help="descriptive statistics over a clip corpus")
    _add_common(p)
    p.add_argument("--manifest", help="corpus manifest path (default: <run>/corpus/corpus.json)")
    p.add_argument("--bins", type=int, default=20, help="duration histogram bins")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="generate the synthetic paired-view dataset")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one or more training stages")
    _add_common(p)
    p.add_argument(
        "--stage", required=True,
        help="stage id or comma list in order: init,s1,s2,s3",
    )
    p.add_argument(
        "--allow-skip", action="store_true",
        help="run despite missing prerequisite stages (recorded in the checkpoint)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on generated items")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint directory (default: newest stage)")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--items", type=int, help="number of items to build")
    p.add_argument("--choices", type=int, help="candidates per choice item")
    p.add_argument("--scope", choices=("inter", "intra"), help="distractor pool scope")
    p.add_argument("--tasks", help="comma list from: mcq,open,retrieval,multilabel")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tables and plots over one or more runs")
    _add_common(p, config_flags=False)
    p.add_argument("run_dirs", nargs="*", help="run directories (default: --run)")
    p.add_argument("--plots", action="store_true", help="also write PNG plots")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    run_dir = _resolve_run_dir(args.run)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        with _RunLock(run_dir):
            return args.func(args, run_dir)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (LineageError, CheckpointError, FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (DivergenceError, RuntimeError, AssertionError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # anything unclassified is an internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
