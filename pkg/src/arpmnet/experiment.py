"""The seeded desk-scale run: generate phantoms, train coarse+fine, then adversarial.

Goes through the command-line entry points so the run exercises the same
code paths (files on disk, checkpoints, log) an operator would use.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as C
from . import tensor as T
from .cli import EXIT_OK, main
from .data_io import CLASS_NAMES, load_dataset
from .trainer import Dataset, load_checkpoint, validate

# class ids of the organ analogues
PROSTATE, BLADDER, FEMURS = 1, 2, (4, 5)


@dataclass
class StageScores:
    mean_dsc: np.ndarray  # per-case mean, per class
    sd_dsc: np.ndarray
    pooled_dsc: np.ndarray


@dataclass
class DeskResult:
    out_dir: Path
    supervised: StageScores
    adversarial: StageScores
    seconds: dict[str, float] = field(default_factory=dict)

    def criterion(self, high: float = 0.90, low: float = 0.70, max_drop: float = 0.02) -> tuple[bool, list[str]]:
        """Checks on the per-case mean validation DSC; returns (passed, failure notes)."""
        notes = []
        sup, adv = self.supervised.mean_dsc, self.adversarial.mean_dsc
        for c in (BLADDER, *FEMURS):
            if sup[c] < high:
                notes.append(f"{CLASS_NAMES[c]} {sup[c]:.4f} < {high}")
        if sup[PROSTATE] < low:
            notes.append(f"prostate {sup[PROSTATE]:.4f} < {low}")
        for c in range(len(sup)):
            if sup[c] - adv[c] > max_drop:
                notes.append(f"{CLASS_NAMES[c]} drops {sup[c] - adv[c]:.4f} after the adversarial stage")
        return not notes, notes

    def table(self) -> str:
        lines = [f"{'class':<12} {'coarse+fine':>18} {'+adversarial':>18} {'pooled c+f':>11} {'pooled adv':>11}"]
        for c, name in enumerate(CLASS_NAMES):
            s, a = self.supervised, self.adversarial
            lines.append(
                f"{name:<12} {s.mean_dsc[c]:>8.4f} ± {s.sd_dsc[c]:<7.4f} {a.mean_dsc[c]:>8.4f} ± {a.sd_dsc[c]:<7.4f}"
                f" {s.pooled_dsc[c]:>11.4f} {a.pooled_dsc[c]:>11.4f}"
            )
        return "\n".join(lines)


def desk_config(seed: int = 0, count: int = 200) -> C.RunConfig:
    return C.RunConfig(seeds=C.SeedConfig(root=seed), count=count)


def _scores(ckpt: Path, val: Dataset) -> StageScores:
    state = load_checkpoint(ckpt)
    with T.precision(state.snet["head.weight"].dtype.name):
        pooled, rep = validate(state.snet, state.scfg, val, report=True)
    agg = rep.aggregate()
    classes = range(state.scfg.num_classes)
    return StageScores(
        np.array([agg["MEAN"][c].dsc for c in classes]),
        np.array([agg["SD"][c].dsc for c in classes]),
        pooled,
    )


def run_desk(out_dir, cfg: C.RunConfig | None = None, threads: int = 1) -> DeskResult:
    cfg = desk_config() if cfg is None else cfg
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "run_config.json"
    cfg_path.write_text(cfg.dumps())
    seconds = {}

    def step(name, argv):
        t0 = time.perf_counter()
        code = main(["--threads", str(threads), *argv])
        seconds[name] = time.perf_counter() - t0
        if code != EXIT_OK:
            raise RuntimeError(f"{name} exited with code {code}")

    data = out / "data"
    train_dir = out / "train"
    step("gen-data", ["gen-data", "--config", str(cfg_path), "--out", str(data)])
    step("train", ["train", "--config", str(cfg_path), "--data", str(data), "--out", str(train_dir)])

    resolved = C.load(train_dir / "config.json")
    images, labels, spacing = load_dataset(data, resolved.snet.num_classes)
    n_val = int(round(len(images) * resolved.train.val_fraction))
    val = Dataset(images[-n_val:], labels[-n_val:], spacing)
    return DeskResult(
        out,
        _scores(train_dir / "ckpt_fine.arpm", val),
        _scores(train_dir / "ckpt_adversarial.arpm", val),
        seconds,
    )


__all__ = ["DeskResult", "StageScores", "desk_config", "run_desk"]
