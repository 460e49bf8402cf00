"""Command-line entry points: gen-data, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 usage or config error, 2 numeric abort (NaN loss or
failed gradient check), 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import config as C
from . import tensor as T
from .data_io import PGMFormatError, PhantomError, load_dataset, load_image, save_image, save_labels, write_dataset
from .metrics import LabelMap, MetricsReport, evaluate_case
from .trainer import (
    LOG_HEADER,
    STAGE_ALIASES,
    STAGES,
    CheckpointError,
    Dataset,
    LogRow,
    TrainingDiverged,
    load_checkpoint,
    new_state,
    predict_labels,
    predict_probabilities,
    run_stage,
    save_checkpoint,
    write_log,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
LOG_NAME = "train_log.csv"
LATEST = "ckpt_latest.arpm"

log = logging.getLogger("arpmnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads(n: int | None):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_config(path) -> C.RunConfig:
    cfg = C.RunConfig() if path is None else C.load(path)
    return cfg.resolved()


def _stage_list(text: str) -> list[str]:
    out = []
    for name in text.split(","):
        name = STAGE_ALIASES.get(name.strip(), name.strip())
        if name not in STAGES:
            raise UsageError(f"unknown stage {name!r}; expected a subset of coarse,fine,adv")
        out.append(name)
    if out != sorted(out, key=STAGES.index) or len(set(out)) != len(out):
        raise UsageError("stages must be distinct and in order coarse, fine, adversarial")
    return out


def _split(images, labels, spacing, frac: float) -> tuple[Dataset, Dataset | None]:
    n = len(images)
    if n == 0:
        raise UsageError("dataset is empty")
    n_val = int(round(n * frac))
    if n_val == 0 or n_val == n:
        return Dataset(images, labels, spacing), None
    k = n - n_val
    return Dataset(images[:k], labels[:k], spacing), Dataset(images[k:], labels[k:], spacing)


def _read_log(path: Path) -> list[LogRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != LOG_HEADER:
            raise UsageError(f"{path}: unexpected log header")
        for it, stage, lr, ls, ld in reader:
            rows.append(LogRow(int(it), stage, float(lr), float(ls), float(ld) if ld else None))
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    count = cfg.count if args.count is None else args.count
    if count < 0:
        raise UsageError("--count must be non-negative")
    out = Path(args.out)
    cfg = dataclasses.replace(cfg, count=count)
    cfg.echo(out)
    write_dataset(cfg.phantom, out, count)
    print(f"wrote {count} phantoms to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    tcfg = cfg.train
    T.set_precision(tcfg.precision)
    out = Path(args.out)
    cfg.echo(out)

    if tcfg.joint_from_scratch:
        selected = ["adversarial"]
    else:
        selected = _stage_list(args.stages) if args.stages else [p.stage for p in tcfg.stages]
    plans = []
    for s in selected:
        try:
            plans.append(tcfg.plan(s))
        except KeyError:
            raise UsageError(f"stage {s!r} has no plan in the config") from None

    images, labels, spacing = load_dataset(args.data, cfg.snet.num_classes)
    train, val = _split(images, labels, spacing, tcfg.val_fraction)

    rows: list[LogRow] = []
    if args.resume:
        state = load_checkpoint(args.resume)
        if state.scfg != cfg.snet or state.dcfg != cfg.dnet:
            raise UsageError("checkpoint network shape differs from the config")
        done = STAGES.index(state.stage) if state.stage else -1
        log_path = out / LOG_NAME
        if log_path.exists():
            for r in _read_log(log_path):
                si = STAGES.index(r.stage)
                if si < done or (si == done and r.iteration < state.iteration):
                    rows.append(r)
    else:
        state = new_state(cfg.snet, cfg.dnet, cfg.seeds.init, cfg.seeds.batch)

    for plan in plans:
        if state.stage and STAGES.index(plan.stage) < STAGES.index(state.stage):
            continue
        if state.stage == plan.stage and state.iteration >= plan.iterations:
            continue
        stop_after = None
        if args.stop_after is not None and plan.stage == plans[-1].stage:
            stop_after = args.stop_after
        run_stage(plan, train, val, state, rows, stop_after=stop_after)
        write_log(out / LOG_NAME, rows)
        if state.iteration >= plan.iterations:
            save_checkpoint(out / f"ckpt_{plan.stage}.arpm", state)
        save_checkpoint(out / LATEST, state)
        print(f"{plan.stage}: {state.iteration}/{plan.iterations} iterations, val dsc {np.round(state.val_dsc, 4).tolist()}")
    write_log(out / LOG_NAME, rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = dataclasses.replace(_load_config(args.config), snet=state.scfg, dnet=state.dcfg)
    out = Path(args.out)
    cfg.echo(out)
    C_ = state.scfg.num_classes
    images, labels, spacing = load_dataset(args.data, C_)
    with T.precision(state.snet["head.weight"].dtype.name):
        preds = predict_labels(state.snet, state.scfg, images)
    rep = MetricsReport()
    for i, (p, t) in enumerate(zip(preds, labels)):
        rep.add_case(str(i), evaluate_case(LabelMap(p, spacing), LabelMap(t, spacing), range(C_)))
    rep.write_csv(out / "metrics.csv")
    mean = rep.aggregate()["MEAN"]
    for c in sorted(mean):
        print(f"class {c}: dsc {mean[c].dsc:.4f} ahd {mean[c].ahd_mm:.3f} mm ashd {mean[c].ashd_mm:.3f} mm")
    return EXIT_OK


def cmd_predict(args) -> int:
    state = load_checkpoint(args.ckpt)
    cfg = dataclasses.replace(_load_config(args.config), snet=state.scfg, dnet=state.dcfg)
    out = Path(args.out)
    cfg.echo(out)
    image, spacing = load_image(args.image)
    div = 2 ** (state.scfg.levels - 1)
    h, w = image.shape[1:]
    if h % div or w % div:
        raise UsageError(f"image {h}x{w} is not divisible by {div}, which this network requires")
    with T.precision(state.snet["head.weight"].dtype.name):
        prob = predict_probabilities(state.snet, state.scfg, image[None])[0]
    labels = prob.argmax(axis=0)
    save_labels(out / "labels.pgm", LabelMap(labels, spacing))
    for c in range(prob.shape[0]):
        save_image(out / f"prob_{c}.pgm", np.clip(prob[c].astype(np.float64), 0.0, 1.0), spacing)
    print(f"wrote {out / 'labels.pgm'} and {prob.shape[0]} probability maps")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCE, run_scope

    if args.out:
        cfg = _load_config(args.config)
        cfg.echo(args.out)
    results = run_scope(args.scope, seeds=range(args.seeds))
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        failed += not r.passed
        print(f"{r.name:<{width}}  {r.error:.3e}  redraws {r.redraws:<2d}  {'PASS' if r.passed else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} passed (tolerance {TOLERANCE:g})")
    return EXIT_OK if failed == 0 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="arpmnet", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="BLAS thread limit (1 = reproducible mode)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write seeded phantoms and a manifest")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the training stages")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="dataset directory or manifest.csv")
    t.add_argument("--out", required=True)
    t.add_argument("--stages", help="comma list from coarse,fine,adv")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-after", type=int, help="stop the last selected stage after this many iterations")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-case metrics CSV for a checkpoint")
    e.add_argument("--config")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="label and probability maps for one image")
    r.add_argument("--config")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--scope", choices=("op", "block", "net"), default="op")
    c.add_argument("--seeds", type=int, default=1)
    c.add_argument("--config")
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _threads(args.threads):
            return args.func(args)
    except (UsageError, C.ConfigError, PhantomError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, T.NumericalError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, PGMFormatError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        T.set_precision("float64")


if __name__ == "__main__":
    sys.exit(main())
