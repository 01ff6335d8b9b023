"""Command line: gen-data, train, track, eval, count-params.

Every successful command prints a single ``OK key=value ...`` line. Exit codes:
0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint
from .adapter import count_instances, count_trainable_params
from .config import load_config
from .evaluation import attribute_report, report_for
from .report import write_report
from .synthdata import (ATTRIBUTES, dataset_checksum, format_boxes, generate_dataset, read_boxes, read_dataset,
                        sequence_dirs, write_dataset)

RESULTS_META = "meta.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ok(**fields) -> None:
    print("OK " + " ".join(f"{k}={v}" for k, v in fields.items()), flush=True)


def _positive(name):
    def conv(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {v}")
        return v
    return conv


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="battrack", description="Bi-directional adapter tracker on synthetic RGB-T sequences.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="write a synthetic modality-switching dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--sequences", type=_positive("--sequences"), default=20)
    g.add_argument("--frames", type=_positive("--frames"), default=60)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--switch-period", type=_positive("--switch-period"), default=10)
    g.add_argument("--noise", type=float, default=0.3)
    g.add_argument("--distractor", type=float, default=0.0,
                   help="strength of a target-like decoy in the auxiliary modality, in [0, 1]")

    t = sub.add_parser("train", help="train adapters and head, write a BATCKPT1 checkpoint")
    t.add_argument("--config", required=True, help="preset name (toy, full-shape) or JSON file")
    t.add_argument("--data", required=True)
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--steps", type=int, help="override the config's step count")
    t.add_argument("--seed", type=int, help="override the config's seed")
    t.add_argument("--foundation-steps", type=int, help="override the config's foundation step count")

    k = sub.add_parser("track", help="track every sequence, one result file per sequence")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--out-results", required=True)
    k.add_argument("--jobs", type=_positive("--jobs"), default=1)

    e = sub.add_parser("eval", help="score results, write metrics.csv, curves.csv and curves.png")
    e.add_argument("--results", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True, help="output directory")
    e.add_argument("--attributes", help="comma-separated attribute filter, e.g. LI,TC")
    e.add_argument("--method", help="method label (default: results meta or directory name)")
    e.add_argument("--no-plots", action="store_true")

    c = sub.add_parser("count-params", help="closed-form trainable adapter parameter count")
    c.add_argument("--config", required=True, help="preset name or JSON file")
    return p


def _existing_dir(path: str, flag: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"{flag}: directory not found: {p}")
    return p


def cmd_gen_data(a) -> None:
    if not 0.0 <= a.noise <= 1.0:
        raise UsageError(f"--noise must lie in [0, 1], got {a.noise}")
    if not 0.0 <= a.distractor <= 1.0:
        raise UsageError(f"--distractor must lie in [0, 1], got {a.distractor}")
    out = Path(a.out)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"--out: directory is not empty: {out}")
    records = generate_dataset(a.sequences, a.seed, frames=a.frames, switch_period=a.switch_period, noise=a.noise,
                               distractor=a.distractor)
    write_dataset(records, out)
    _ok(sequences=len(records), frames=a.frames, seed=a.seed, out=out, sha256=dataset_checksum(out))


def cmd_train(a) -> None:
    from .tracker import BATModel, train

    cfg = load_config(a.config)
    changes = {k: v for k, v in (("steps", a.steps), ("seed", a.seed),
                                            ("foundation_steps", a.foundation_steps)) if v is not None}
    cfg = cfg.with_(**changes) if changes else cfg
    data = _existing_dir(a.data, "--data")
    out = Path(a.out_ckpt)
    if not out.parent.is_dir():
        raise FileNotFoundError(f"--out-ckpt: parent directory not found: {out.parent}")
    records = read_dataset(data)
    if not records:
        raise FileNotFoundError(f"--data: no sequences under {data}")
    model = BATModel(cfg)
    losses = train(model, records, cfg, log_every=100 if a.verbose else 0)
    checkpoint.save_model(out, model)
    tail = float(np.mean(losses[-50:])) if losses else float("nan")
    _ok(variant=cfg.variant, steps=cfg.steps, foundation_steps=cfg.foundation_steps, seed=cfg.seed, trainable=sum(t.data.size for t in model.trainable()),
        final_loss=f"{tail:.6f}", ckpt=out)


def _track_chunk(ckpt: str, seq_paths: list[str]) -> list[tuple[str, str]]:
    from .synthdata import read_sequence
    from .tracker import track_sequences

    model = checkpoint.load_model(ckpt)
    records = [read_sequence(p) for p in seq_paths]
    return [(r.name, format_boxes(b, decimals=4)) for r, b in zip(records, track_sequences(model, records))]


def cmd_track(a) -> None:
    from .tracker import TRACK_GROUP

    ckpt = Path(a.ckpt)
    if not ckpt.is_file():
        raise FileNotFoundError(f"--ckpt: checkpoint not found: {ckpt}")
    _, meta = checkpoint.load(ckpt)
    dirs = [str(d) for d in sequence_dirs(_existing_dir(a.data, "--data"))]
    if not dirs:
        raise FileNotFoundError(f"--data: no sequences under {a.data}")
    out = Path(a.out_results)
    out.mkdir(parents=True, exist_ok=True)
    # chunks fall on group boundaries so any --jobs value gives the same bytes
    chunks = [dirs[i:i + TRACK_GROUP] for i in range(0, len(dirs), TRACK_GROUP)]
    if a.jobs > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=a.jobs) as pool:
            parts = list(pool.map(_track_chunk, [str(ckpt)] * len(chunks), chunks))
    else:
        parts = [_track_chunk(str(ckpt), c) for c in chunks]
    frames = 0
    for name, text in (item for part in parts for item in part):
        (out / f"{name}.txt").write_text(text)
        frames += text.count("\n")
    variant = meta["config"]["variant"]
    (out / RESULTS_META).write_text(json.dumps({"variant": variant, "method": variant}, sort_keys=True) + "\n")
    _ok(variant=variant, sequences=len(dirs), frames=frames, out=out)


def _load_ground_truth(data: Path):
    gts, tags = {}, {}
    for d in sequence_dirs(data):
        gts[d.name] = (read_boxes(d / "visible.txt"), read_boxes(d / "infrared.txt"))
        attr = d / "attributes.txt"
        tags[d.name] = [s.strip() for s in attr.read_text().splitlines() if s.strip()] if attr.is_file() else []
    return gts, tags


def cmd_eval(a) -> None:
    results = _existing_dir(a.results, "--results")
    data = _existing_dir(a.data, "--data")
    gts, tags = _load_ground_truth(data)
    if not gts:
        raise FileNotFoundError(f"--data: no sequences under {data}")
    preds = {}
    for name in gts:
        path = results / f"{name}.txt"
        if not path.is_file():
            raise FileNotFoundError(f"--results: missing result file {path}")
        preds[name] = read_boxes(path)
    meta_path = results / RESULTS_META
    meta = json.loads(meta_path.read_text()) if meta_path.is_file() else {}
    variant = meta.get("variant", "unknown")
    method = a.method or meta.get("method", results.name)
    wanted = None
    if a.attributes:
        wanted = [s.strip() for s in a.attributes.split(",") if s.strip()]
        bad = [s for s in wanted if s not in ATTRIBUTES]
        if bad:
            raise UsageError(f"--attributes: unknown attribute(s) {', '.join(bad)}; expected {', '.join(ATTRIBUTES)}")
    reports = {None: report_for(preds, gts)}
    reports.update(attribute_report(preds, gts, tags, wanted, known=ATTRIBUTES))
    write_report(a.report, method, variant, reports, plots=not a.no_plots)
    h = reports[None].headlines()
    _ok(method=method, variant=variant, frames=reports[None].frames,
        **{k: f"{v:.4f}" for k, v in h.items()}, report=Path(a.report))


def cmd_count_params(a) -> None:
    cfg = load_config(a.config)
    desc = cfg.plan_descriptor()
    n = count_trainable_params(desc, cfg.adapter_config())
    _ok(variant=cfg.variant, d_t=cfg.d_t, num_layers=cfg.num_layers, d_e=cfg.d_e,
        instances=count_instances(desc["variant"], desc["layers"], desc["stages"], desc["num_layers"]),
        trainable=n, millions=f"{n / 1e6:.2f}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "track": cmd_track, "eval": cmd_eval,
            "count-params": cmd_count_params}


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        # ConfigError, EvalError, CheckpointError and PnmError are ValueErrors
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())

