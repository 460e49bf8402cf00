"""Three-stage training (coarse, fine, adversarial), validation and checkpoints."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .blocks import DNetConfig, MRFConfig, NetParams, SNetConfig, bn_momentum, init_params, snet_forward
from .data_io import one_hot
from .losses import adaptive_mce, adaptive_weights, disc_loss, seg_loss
from .metrics import LabelMap, MetricsReport, dice_per_class, evaluate_case
from .optim import LrSchedule, OptimState, adam_step, poly_lr

log = logging.getLogger(__name__)

STAGES = ("coarse", "fine", "adversarial")
STAGE_ALIASES = {"adv": "adversarial"}


class TrainingDiverged(FloatingPointError):
    """A loss or activation became NaN/Inf."""


@dataclass(frozen=True)
class StagePlan:
    stage: str
    base_lr: float
    iterations: int
    lam: float = 0.0
    batch_size: int = 4
    power: float = 0.9
    val_interval: int = 100
    d_lr: float | None = None
    # training images used to re-estimate batch-norm statistics (0 = keep the moving averages)
    bn_recal_images: int = 64

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1 or self.val_interval < 1:
            raise ValueError("batch_size and val_interval must be positive")
        if self.stage == "adversarial":
            if self.lam <= 0:
                raise ValueError("adversarial stage needs lambda > 0")
        elif self.lam != 0:
            raise ValueError("lambda is only used in the adversarial stage")


def default_plans(coarse: int = 1000, fine: int = 1000, adversarial: int = 1000, lam: float = 0.1) -> list[StagePlan]:
    return [
        StagePlan("coarse", 1e-2, coarse),
        StagePlan("fine", 1e-4, fine),
        StagePlan("adversarial", 1e-4, adversarial, lam=lam),
    ]


@dataclass
class TrainState:
    snet: NetParams
    dnet: NetParams
    scfg: SNetConfig
    dcfg: DNetConfig
    opt_s: OptimState = field(default_factory=OptimState)
    opt_d: OptimState = field(default_factory=OptimState)
    val_dsc: np.ndarray | None = None
    stage: str = ""
    iteration: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __post_init__(self):
        if self.val_dsc is None:
            self.val_dsc = np.ones(self.scfg.num_classes)


def new_state(scfg: SNetConfig, dcfg: DNetConfig, init_seed: int, batch_seed: int) -> TrainState:
    return TrainState(
        snet=init_params(scfg, init_seed),
        dnet=init_params(dcfg, init_seed + 1),
        scfg=scfg,
        dcfg=dcfg,
        rng=np.random.default_rng(batch_seed),
    )


@dataclass
class Dataset:
    images: np.ndarray  # [N, 1, H, W]
    labels: np.ndarray  # [N, H, W]
    spacing: float = 1.0

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("dataset is empty")
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in count")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class LogRow:
    iteration: int
    stage: str
    lr: float
    loss_s: float
    loss_d: float | None = None

    def csv_fields(self) -> list[str]:
        return [str(self.iteration), self.stage, repr(self.lr), repr(self.loss_s), "" if self.loss_d is None else repr(self.loss_d)]


LOG_HEADER = ["iter", "stage", "lr", "loss_s", "loss_d"]


def _batch(data: Dataset, idx: np.ndarray, num_classes: int) -> tuple[T.Tensor, T.Tensor, np.ndarray]:
    x = T.Tensor(data.images[idx])
    labels = data.labels[idx]
    y = T.Tensor(one_hot(labels, num_classes))
    return x, y, labels


def _finite(value: float, what: str, stage: str, it: int) -> float:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what} is {value} at {stage} iteration {it}")
    return value


def supervised_iteration(state: TrainState, x: T.Tensor, y: T.Tensor, labels: np.ndarray, lr: float) -> float:
    weights = adaptive_weights(state.val_dsc, labels, state.scfg.num_classes)
    state.snet.zero_grad()
    prob = T.softmax_channels(snet_forward(x, state.snet, state.scfg, training=True))
    loss = adaptive_mce(prob, y, weights)
    T.backward(loss)
    adam_step(state.snet, state.opt_s, lr)
    return loss.item()


def adversarial_iteration(
    state: TrainState, x: T.Tensor, y: T.Tensor, labels: np.ndarray, lam: float, lr_s: float, lr_d: float
) -> tuple[float, float]:
    """One update of each network.

    (a) S-net forward and weighted cross-entropy; (b) discriminator loss on
    ``x*y`` (real) and ``x*p`` (fake, p held constant); (c) segmentation loss
    with the discriminator frozen; (d) backpropagate each loss into its own
    network and take one Adam step per network.
    """
    if lam <= 0:
        raise ValueError("adversarial iteration needs lambda > 0")
    weights = adaptive_weights(state.val_dsc, labels, state.scfg.num_classes)
    state.snet.zero_grad()
    state.dnet.zero_grad()
    prob = T.softmax_channels(snet_forward(x, state.snet, state.scfg, training=True))
    loss_d = disc_loss(x, y, prob, state.dnet, state.dcfg)
    loss_s, _, _ = seg_loss(x, y, prob, state.dnet, state.dcfg, weights, lam)
    ls, ld = loss_s.item(), loss_d.item()
    if not (math.isfinite(ls) and math.isfinite(ld)):
        raise TrainingDiverged(f"non-finite adversarial losses L_S={ls} L_D={ld}")
    T.backward(loss_d)
    T.backward(loss_s)
    adam_step(state.dnet, state.opt_d, lr_d)
    adam_step(state.snet, state.opt_s, lr_s)
    return ls, ld


def predict_labels(params: NetParams, cfg: SNetConfig, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Arg-max label maps ``[N, H, W]`` with batch norm in inference mode."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            logits = snet_forward(T.Tensor(images[i : i + batch_size]), params, cfg, training=False)
            out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)


def predict_probabilities(params: NetParams, cfg: SNetConfig, images: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return T.softmax_channels(snet_forward(T.Tensor(images), params, cfg, training=False)).data


def recalibrate_bn(params: NetParams, cfg: SNetConfig, images: np.ndarray, batch_size: int = 8) -> None:
    """Replace the running batch-norm statistics by their average over ``images``.

    The moving averages lag behind weights that change quickly under a large
    learning rate; inference then sees stale statistics. Batch ``k`` enters
    with momentum ``1/k``, so the result is the plain mean of the per-batch
    statistics.
    """
    with T.no_grad():
        for k, i in enumerate(range(0, len(images), batch_size), start=1):
            with bn_momentum(1.0 / k):
                snet_forward(T.Tensor(images[i : i + batch_size]), params, cfg, training=True)


def validate(params: NetParams, cfg: SNetConfig, val: Dataset, report: bool = False):
    """Per-class Dice over the pooled validation voxels, clamped to [0, 1].

    With ``report=True`` also returns a per-case :class:`MetricsReport`.
    """
    preds = predict_labels(params, cfg, val.images)
    dsc = np.clip(dice_per_class(preds, val.labels, cfg.num_classes), 0.0, 1.0)
    if not report:
        return dsc
    rep = MetricsReport()
    classes = range(cfg.num_classes)
    for i, (p, t) in enumerate(zip(preds, val.labels)):
        rep.add_case(str(i), evaluate_case(LabelMap(p, val.spacing), LabelMap(t, val.spacing), classes))
    return dsc, rep


def run_stage(
    plan: StagePlan,
    train: Dataset,
    val: Dataset | None,
    state: TrainState,
    rows: list[LogRow] | None = None,
    stop_after: int | None = None,
    on_validate: Callable[[int, np.ndarray], None] | None = None,
) -> list[LogRow]:
    """Run (or resume) one stage.

    A fresh stage resets both optimiser states and starts the learning-rate
    schedule at zero; if ``state`` already records progress inside this
    stage, training resumes from ``state.iteration``. ``stop_after`` halts
    once that many iterations of the stage are complete (used to simulate an
    interruption).
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    rows = [] if rows is None else rows
    if state.stage != plan.stage:
        state.stage = plan.stage
        state.iteration = 0
        state.opt_s.reset()
        state.opt_d.reset()
    if plan.iterations == 0:
        return rows
    sched = LrSchedule(plan.base_lr, plan.iterations, plan.power)
    d_sched = LrSchedule(plan.d_lr or plan.base_lr, plan.iterations, plan.power)
    end = plan.iterations if stop_after is None else min(plan.iterations, stop_after)
    C = state.scfg.num_classes
    bs = min(plan.batch_size, len(train))
    while state.iteration < end:
        it = state.iteration
        idx = np.sort(state.rng.choice(len(train), size=bs, replace=False))
        x, y, labels = _batch(train, idx, C)
        lr = poly_lr(sched, it)
        try:
            if plan.stage == "adversarial":
                ls, ld = adversarial_iteration(state, x, y, labels, plan.lam, lr, poly_lr(d_sched, it))
                _finite(ld, "L_D", plan.stage, it)
            else:
                ls, ld = supervised_iteration(state, x, y, labels, lr), None
        except T.NumericalError as exc:
            raise TrainingDiverged(f"{plan.stage} iteration {it}: {exc}") from exc
        _finite(ls, "L_S", plan.stage, it)
        rows.append(LogRow(it, plan.stage, lr, ls, ld))
        state.iteration = it + 1
        at_val = val is not None and state.iteration % plan.val_interval == 0
        if plan.bn_recal_images and (at_val or state.iteration == plan.iterations):
            recalibrate_bn(state.snet, state.scfg, train.images[: plan.bn_recal_images])
        if at_val:
            state.val_dsc = validate(state.snet, state.scfg, val)
            log.info("%s %d: val dsc %s", plan.stage, state.iteration, np.round(state.val_dsc, 3))
            if on_validate is not None:
                on_validate(state.iteration, state.val_dsc)
    return rows


def write_log(path, rows: list[LogRow]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        w.writerows(r.csv_fields() for r in rows)


# ---------------------------------------------------------------------------
# checkpoint files
#
# "ARPM" | u16 version | tensor block | metadata block, all little-endian.
# A block is: u32 count, then per entry u16 key length, UTF-8 key, u8 rank,
# rank x u32 dims, u8 dtype tag (1 = f32, 2 = f64), raw values.

MAGIC = b"ARPM"
VERSION = 1
_DTYPE_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def _write_block(fh, entries: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(entries)))
    for key, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            arr = arr.astype(np.float64)
        kb = key.encode("utf-8")
        fh.write(struct.pack("<H", len(kb)))
        fh.write(kb)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
        fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint file is truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def block(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (klen,) = self.unpack("<H")
            key = self.take(klen).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}I") if rank else ()
            (tag,) = self.unpack("<B")
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"unknown dtype tag {tag} for {key!r}")
            dt = _TAG_DTYPES[tag]
            n = int(np.prod(dims)) if dims else 1
            out[key] = np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        return out


def _u128_words(v: int) -> list[int]:
    return [(v >> (32 * i)) & 0xFFFFFFFF for i in range(4)]


def _from_words(words) -> int:
    return sum(int(w) << (32 * i) for i, w in enumerate(words))


def rng_to_array(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError("only PCG64 generators can be checkpointed")
    words = _u128_words(st["state"]["state"]) + _u128_words(st["state"]["inc"])
    words += [st["has_uint32"], st["uinteger"]]
    return np.array(words, dtype=np.float64)


def rng_from_array(arr: np.ndarray) -> np.random.Generator:
    words = [int(v) for v in arr]
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": _from_words(words[:4]), "inc": _from_words(words[4:8])},
        "has_uint32": words[8],
        "uinteger": words[9],
    }
    return np.random.Generator(bg)


def _cfg_vectors(scfg: SNetConfig, dcfg: DNetConfig) -> dict[str, np.ndarray]:
    m = scfg.mrf
    return {
        "cfg/snet": np.array(
            [scfg.levels, scfg.base_channels, scfg.num_classes, m.local_kernel, *m.local_dilations, *m.pool_window],
            dtype=np.float64,
        ),
        "cfg/snet_input": np.array([scfg.input_mean, scfg.input_std], dtype=np.float64),
        "cfg/dnet": np.array([dcfg.in_channels, *dcfg.channels, dcfg.kernel, dcfg.stride, dcfg.leaky_slope]),
    }


def _cfg_from_vectors(meta: dict[str, np.ndarray]) -> tuple[SNetConfig, DNetConfig]:
    s = [int(v) for v in meta["cfg/snet"]]
    d = meta["cfg/dnet"]
    mean, std = (float(v) for v in meta["cfg/snet_input"])
    scfg = SNetConfig(s[0], s[1], s[2], mrf=MRFConfig(s[3], (s[4], s[5]), (s[6], s[7], s[8])), input_mean=mean, input_std=std)
    dcfg = DNetConfig(int(d[0]), tuple(int(v) for v in d[1:5]), int(d[5]), int(d[6]), float(d[7]))
    return scfg, dcfg


def save_checkpoint(path, state: TrainState) -> None:
    tensors: dict[str, np.ndarray] = {}
    for prefix, params in (("s", state.snet), ("d", state.dnet)):
        for k, arr in params.arrays().items():
            tensors[f"{prefix}/{k}"] = arr
    for prefix, opt in (("opt_s", state.opt_s), ("opt_d", state.opt_d)):
        for k in opt.m:
            tensors[f"{prefix}/m/{k}"] = opt.m[k]
            tensors[f"{prefix}/v/{k}"] = opt.v[k]
    meta = {
        "stage": np.array(float(STAGES.index(state.stage)) if state.stage else -1.0),
        "iteration": np.array(float(state.iteration)),
        "opt_s/t": np.array(float(state.opt_s.t)),
        "opt_d/t": np.array(float(state.opt_d.t)),
        "opt/hyper": np.array([state.opt_s.beta1, state.opt_s.beta2, state.opt_s.eps]),
        "rng": rng_to_array(state.rng),
        "val_dsc": np.asarray(state.val_dsc, dtype=np.float64),
        **_cfg_vectors(state.scfg, state.dcfg),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        _write_block(fh, tensors)
        _write_block(fh, meta)
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an ARPM checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors = r.block()
    meta = r.block()
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: trailing bytes after metadata")
    try:
        scfg, dcfg = _cfg_from_vectors(meta)
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing metadata {exc}") from None

    with T.precision(np.dtype(next(iter(tensors.values())).dtype).name if tensors else "float64"):
        state = new_state(scfg, dcfg, 0, 0)
    groups: dict[str, dict[str, np.ndarray]] = {"s": {}, "d": {}, "opt_s/m": {}, "opt_s/v": {}, "opt_d/m": {}, "opt_d/v": {}}
    for key, arr in tensors.items():
        for g in ("opt_s/m", "opt_s/v", "opt_d/m", "opt_d/v", "s", "d"):
            if key.startswith(g + "/"):
                groups[g][key[len(g) + 1 :]] = arr
                break
        else:
            raise CheckpointError(f"{path}: unknown tensor key {key!r}")
    try:
        state.snet.load_arrays(groups["s"])
        state.dnet.load_arrays(groups["d"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: {exc.args[0]}") from None
    for net, pre, opt in ((state.snet, "opt_s", state.opt_s), (state.dnet, "opt_d", state.opt_d)):
        m, v = groups[f"{pre}/m"], groups[f"{pre}/v"]
        if set(m) != set(v) or not set(m) <= set(net.keys()):
            raise CheckpointError(f"{path}: inconsistent optimiser state {pre}")
        opt.m = {k: m[k].copy() for k in m}
        opt.v = {k: v[k].copy() for k in v}
        opt.t = int(meta[f"{pre}/t"])
        opt.beta1, opt.beta2, opt.eps = (float(h) for h in meta["opt/hyper"])
    stage = int(meta["stage"])
    state.stage = STAGES[stage] if stage >= 0 else ""
    state.iteration = int(meta["iteration"])
    state.rng = rng_from_array(meta["rng"])
    state.val_dsc = meta["val_dsc"].copy()
    return state


__all__ = [
    "STAGES",
    "StagePlan",
    "TrainState",
    "Dataset",
    "LogRow",
    "TrainingDiverged",
    "CheckpointError",
    "default_plans",
    "new_state",
    "run_stage",
    "supervised_iteration",
    "adversarial_iteration",
    "validate",
    "recalibrate_bn",
    "predict_labels",
    "predict_probabilities",
    "save_checkpoint",
    "load_checkpoint",
    "write_log",
]
