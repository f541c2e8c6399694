"""Optimizer, staged schedule, evaluation metrics and checkpoints."""

from __future__ import annotations

import copy
import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import regions
from . import tensor as T
from .errors import ContractError, DivergenceError, FormatError
from .model import DRAG, MODES, check_mode, cls_loss
from .tensor import Tensor

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
WEIGHT_DECAY = 1e-7
BATCH_SIZE = 32
LOSS_TERMS = ("pretrain", "cgl", "cls", "region")
LOG_HEADER = ["stage", "epoch", "loss_cls", "loss_dis", "loss_div", "loss_cgl", "val_accuracy"]


# -- Adam ----------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = WEIGHT_DECAY
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def _decays(name):
    # biases are left out of weight decay
    return not name.endswith("bias")


def adam_step(params: dict, grads: dict, state: OptimizerState):
    """One bias-corrected Adam update with decoupled weight decay, in place.

    ``params`` maps names to tensors, ``grads`` maps the same names to arrays;
    a missing or ``None`` gradient counts as zero.
    """
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if state.weight_decay and _decays(name):
            p.data -= state.lr * state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        m_hat = m / (1.0 - BETA1**t)
        v_hat = v / (1.0 - BETA2**t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# -- schedule ------------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    """One block of epochs: which groups move, at what rate, under which losses.

    ``losses`` holds terms from ``pretrain`` (backbone head), ``cgl`` (fit to
    the K-means assignment), ``cls`` and ``region`` (Dis + Div). When both
    ``cls`` and ``region`` are active, odd mini-batches step the first and
    even ones the second. ``enabled=False`` keeps an optional stage in the
    schedule without running it.
    """

    name: str
    lrs: tuple  # (group, learning rate) pairs
    losses: tuple
    epochs: int
    enabled: bool = True

    def __post_init__(self):
        bad = [t for t in self.losses if t not in LOSS_TERMS]
        if bad:
            raise ContractError(f"stage {self.name!r}: unknown loss terms {bad}")
        if self.epochs < 0:
            raise ContractError(f"stage {self.name!r}: negative epoch count")

    @property
    def groups(self):
        return tuple(g for g, _ in self.lrs)

    def trains_cgl(self):
        return "cgl" in self.groups

    def alternates(self):
        return "cls" in self.losses and "region" in self.losses


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple
    batch_size: int = BATCH_SIZE
    weight_decay: float = WEIGHT_DECAY

    def __iter__(self):
        return iter(self.stages)

    def __len__(self):
        return len(self.stages)

    def index(self, name):
        for i, s in enumerate(self.stages):
            if s.name == name:
                return i
        raise ContractError(f"no stage named {name!r}")


STAGE_EPOCH_KEYS = ("backbone", "cgl_pretrain", "cgl", "gcn", "gcn_backbone", "cgl_again", "finetune")


def default_schedule(epochs=None, lr_cgl=1e-3, lr_gcn=1e-3, lr_backbone=1e-5, lr_pretrain=1e-3,
                     cgl_again=False) -> StageSchedule:
    """The seven-stage order: backbone, CGL pretrain, CGL, GCN, GCN+backbone,
    optional second CGL pass, final fine-tune."""
    ep = {"backbone": 10, "cgl_pretrain": 10, "cgl": 1, "gcn": 10, "gcn_backbone": 10, "cgl_again": 1, "finetune": 10}
    ep.update(epochs or {})
    unknown = set(ep) - set(STAGE_EPOCH_KEYS)
    if unknown:
        raise ContractError(f"unknown stages {sorted(unknown)}")
    joint = ("cls", "region")
    return StageSchedule((
        Stage("backbone", (("backbone", lr_pretrain), ("head", lr_pretrain)), ("pretrain",), ep["backbone"]),
        Stage("cgl_pretrain", (("cgl", lr_cgl),), ("cgl",), ep["cgl_pretrain"]),
        Stage("cgl", (("cgl", lr_cgl),), joint, ep["cgl"]),
        Stage("gcn", (("gcn", lr_gcn),), ("cls",), ep["gcn"]),
        Stage("gcn_backbone", (("gcn", lr_gcn), ("backbone", lr_backbone)), joint, ep["gcn_backbone"]),
        Stage("cgl_again", (("cgl", lr_cgl),), joint, ep["cgl_again"], enabled=cgl_again),
        Stage("finetune", (("backbone", lr_backbone), ("gcn", lr_gcn)), joint, ep["finetune"]),
    ))


# -- metrics -------------------------------------------------------------------


def _ratio(a, b):
    return a / b if b else 0.0


def _f1(p, r):
    return 2.0 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    private_precision: float
    private_recall: float
    private_f1: float
    public_precision: float
    public_recall: float
    public_f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    COLUMNS = ("accuracy", "private_precision", "private_recall", "private_f1",
               "public_precision", "public_recall", "public_f1")

    def row(self):
        return [getattr(self, c) for c in self.COLUMNS]

    def table(self, label="DRAG") -> str:
        """Fixed-width table laid out like the usual privacy-detection comparison."""
        head1 = f"{'Model':<20}{'Accuracy':>10}  {'Private':^30}  {'Public':^30}"
        head2 = f"{'':<20}{'':>10}  " + ("{:>10}{:>10}{:>10}  ".format("Precision", "Recall", "F-1")) * 2
        body = (
            f"{label:<20}{100 * self.accuracy:>9.2f}%  "
            f"{self.private_precision:>10.3f}{self.private_recall:>10.3f}{self.private_f1:>10.3f}  "
            f"{self.public_precision:>10.3f}{self.public_recall:>10.3f}{self.public_f1:>10.3f}"
        )
        return "\n".join([head1, head2.rstrip(), body])


def metrics_from_counts(tp, fp, fn, tn) -> MetricsReport:
    """Table metrics from a confusion matrix with ``private`` as the positive class."""
    total = tp + fp + fn + tn
    if total == 0:
        raise ContractError("cannot score an empty split")
    pp, pr = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    qp, qr = _ratio(tn, tn + fn), _ratio(tn, tn + fp)
    return MetricsReport(_ratio(tp + tn, total), pp, pr, _f1(pp, pr), qp, qr, _f1(qp, qr),
                         int(tp), int(fp), int(fn), int(tn))


def confusion_counts(predicted, labels):
    pred = np.asarray(predicted).astype(bool)
    y = np.asarray(labels).astype(bool)
    return (int(np.sum(pred & y)), int(np.sum(pred & ~y)), int(np.sum(~pred & y)), int(np.sum(~pred & ~y)))


def metrics_from_predictions(predicted, labels) -> MetricsReport:
    return metrics_from_counts(*confusion_counts(predicted, labels))


def predict(private_probs):
    """Threshold at 0.5: a sample is called private only when ``p > 0.5``."""
    return np.asarray(private_probs) > 0.5


def evaluate(model: DRAG, images, labels, mode=None) -> MetricsReport:
    if len(labels) == 0:
        raise ContractError("evaluate needs a nonempty split")
    return metrics_from_predictions(predict(model.predict_proba(images, mode=mode)), labels)


def pretrain_accuracy(model: DRAG, images, labels, batch_size=256) -> float:
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model.pretrain_probs(images[i : i + batch_size]).data[:, 1])
    return float(np.mean(predict(np.concatenate(out)) == np.asarray(labels, dtype=bool)))


# -- training loop -------------------------------------------------------------


@dataclass
class CglReport:
    """Fit of the soft assignment to the K-means one, before and after pretraining."""

    loss_before: float
    loss_after: float
    agreement: float

    @property
    def reduction(self):
        return 1.0 - self.loss_after / self.loss_before if self.loss_before > 0 else 0.0


@dataclass
class TrainResult:
    log: list = field(default_factory=list)  # dict rows keyed by LOG_HEADER
    best_state: dict | None = None
    best_val: float = -1.0
    best_at: tuple | None = None  # (stage, epoch)
    cr: np.ndarray | None = None
    kmeans_wcss: float | None = None
    cgl: CglReport | None = None
    stage_reached: str = ""

    def fork(self) -> "TrainResult":
        return copy.deepcopy(self)


def train_signatures(model: DRAG, images, batch_size=256):
    """``C×2Ω`` peak signatures of the current backbone over ``images``."""
    with T.no_grad():
        maps = (model.features(images[i : i + batch_size]).data for i in range(0, len(images), batch_size))
        return regions.build_channel_signatures(maps)


def cgl_fit(model: DRAG, images, cr, batch_size=256):
    """Mean binary cross-entropy against ``cr`` and the mean entrywise agreement of ``cr′ > 0.5``."""
    losses, agree, n = 0.0, 0.0, 0
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            F_b = model.features(images[i : i + batch_size])
            cr_prime = regions.cgl_forward(F_b, model.params)
            b = cr_prime.shape[0]
            losses += regions.cgl_pretrain_loss(cr_prime, cr).item() * b
            agree += np.mean((cr_prime.data > 0.5) == (np.asarray(cr) > 0.5), axis=(1, 2)).sum()
            n += b
    return losses / n, agree / n


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _set_trainable(model: DRAG, groups):
    live = {}
    for name, p in model.params.items():
        p.requires_grad = name.split(".", 1)[0] in groups
        p.grad = None
        if p.requires_grad:
            live[name] = p
    return live


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def run_schedule(schedule: StageSchedule, model: DRAG, train, val, seed=0, mode="full",
                 start=0, result: TrainResult | None = None, log_path=None, progress=None) -> TrainResult:
    """Execute ``schedule.stages[start:]`` on ``model`` in place.

    ``train`` and ``val`` are ``(images, labels)`` pairs. Batch order depends
    only on ``(seed, stage index, epoch)``, so a run resumed at ``start`` from
    a saved prefix matches an uninterrupted one. Under ``frozen_cgl`` stages
    that move the CGL are skipped. The best-validation parameters among
    epochs of the full model are kept in ``result.best_state``.
    """
    check_mode(mode)
    result = result if result is not None else TrainResult()
    x_tr, y_tr = np.asarray(train[0]), np.asarray(train[1])
    x_va, y_va = np.asarray(val[0]), np.asarray(val[1])
    for s_idx in range(start, len(schedule)):
        stage = schedule.stages[s_idx]
        if not stage.enabled or stage.epochs == 0:
            continue
        if mode == "frozen_cgl" and stage.trains_cgl() and "cgl" not in stage.losses:
            continue
        live = _set_trainable(model, stage.groups)
        lrs = dict(stage.lrs)
        # one moment buffer per (group, loss family) so the alternating terms
        # do not share second-moment scales
        opts = {}

        def optimizer(group, family):
            key = (group, family)
            if key not in opts:
                opts[key] = OptimizerState(lrs[group], schedule.weight_decay)
            return opts[key]

        by_group = {g: {k: p for k, p in live.items() if k.startswith(g + ".")} for g in stage.groups}

        if "cgl" in stage.losses:
            sig = train_signatures(model, x_tr)
            km = regions.kmeans_cluster(sig, model.config.n_regions, seed=seed)
            result.cr, result.kmeans_wcss = km.assignment(), km.wcss
            before, _ = cgl_fit(model, x_tr, result.cr)

        for epoch in range(1, stage.epochs + 1):
            rng = np.random.default_rng([seed, s_idx, epoch])
            sums = {"cls": [], "dis": [], "div": [], "cgl": []}
            for b_idx, idx in enumerate(_batches(len(y_tr), schedule.batch_size, rng), start=1):
                xb, yb = x_tr[idx], y_tr[idx]
                if "pretrain" in stage.losses:
                    loss = cls_loss(model.pretrain_probs(xb), yb)
                    sums["cls"].append(_step_groups(loss, by_group, optimizer, "cls", stage, epoch, "cls"))
                    continue
                if "cgl" in stage.losses:
                    cr_prime = regions.cgl_forward(model.features(xb), model.params)
                    loss = regions.cgl_pretrain_loss(cr_prime, result.cr)
                    sums["cgl"].append(_step_groups(loss, by_group, optimizer, "cgl", stage, epoch, "cgl"))
                    continue
                use_cls = "cls" in stage.losses and (not stage.alternates() or b_idx % 2 == 1)
                out = model.forward(xb, mode)
                if use_cls:
                    loss = cls_loss(out.probs, yb)
                    sums["cls"].append(_step_groups(loss, by_group, optimizer, "cls", stage, epoch, "cls"))
                else:
                    dis, div = regions.dis_loss(out.F_w), regions.div_loss(out.F_w)
                    for term, v in (("dis", dis), ("div", div)):
                        if not np.isfinite(v.item()):
                            raise DivergenceError(stage.name, epoch, term)
                    sums["dis"].append(dis.item())
                    sums["div"].append(div.item())
                    _step_groups(dis + div, by_group, optimizer, "region", stage, epoch, "region")
            if "pretrain" in stage.losses:
                val_acc = pretrain_accuracy(model, x_va, y_va)
            else:
                val_acc = evaluate(model, x_va, y_va, mode).accuracy
            row = {
                "stage": stage.name,
                "epoch": epoch,
                "loss_cls": _mean(sums["cls"]),
                "loss_dis": _mean(sums["dis"]),
                "loss_div": _mean(sums["div"]),
                "loss_cgl": _mean(sums["cgl"]),
                "val_accuracy": val_acc,
            }
            result.log.append(row)
            if progress:
                progress(row)
            if "cls" in stage.losses and val_acc > result.best_val:
                result.best_val, result.best_at = val_acc, (stage.name, epoch)
                result.best_state = model.state_dict()
        if "cgl" in stage.losses:
            after, agreement = cgl_fit(model, x_tr, result.cr)
            result.cgl = CglReport(before, after, agreement)
        result.stage_reached = stage.name
    for p in model.params.values():
        p.requires_grad = True
        p.grad = None
    if log_path is not None:
        write_log(log_path, result.log)
    return result


def _step_groups(loss, by_group, optimizer, family, stage, epoch, term):
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(stage.name, epoch, term)
    live = {k: p for g in by_group.values() for k, p in g.items()}
    for p in live.values():
        p.grad = None
    if loss.requires_grad:
        loss.backward()
    for group, params in by_group.items():
        if any(p.grad is not None for p in params.values()):
            adam_step(params, {k: p.grad for k, p in params.items()}, optimizer(group, family))
    return value


def shared_prefix(schedule: StageSchedule) -> int:
    """Number of leading stages that every ablation mode runs identically."""
    return schedule.index("cgl_pretrain") + 1


def train_modes(schedule: StageSchedule, config, train, val, seed=0, modes=MODES, progress=None):
    """Train one model per mode, sharing the pretraining prefix.

    Returns ``{mode: (model, result)}`` with each model restored to its best
    validation epoch. Equivalent to separate runs because batch order is keyed
    by stage index and epoch, and optimizer state never crosses stages.
    """
    k = shared_prefix(schedule)
    base = DRAG(config, seed=seed)
    head = StageSchedule(schedule.stages[:k], schedule.batch_size, schedule.weight_decay)
    prefix = run_schedule(head, base, train, val, seed, progress=progress)
    state = base.state_dict()
    out = {}
    for mode in modes:
        model = DRAG(config, seed=seed, mode=mode)
        model.load_state_dict(state)
        res = run_schedule(schedule, model, train, val, seed, mode, start=k, result=prefix.fork(), progress=progress)
        restore_best(model, res)
        out[mode] = (model, res)
    return out


def restore_best(model: DRAG, result: TrainResult):
    if result.best_state is not None:
        model.load_state_dict(result.best_state)


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow(["" if r[k] is None else (f"{r[k]:.9g}" if isinstance(r[k], float) else r[k]) for k in LOG_HEADER])


def read_log(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LOG_HEADER:
            raise FormatError(f"{path}: expected header {','.join(LOG_HEADER)}")
        for r in reader:
            rows.append({k: (r[k] if k == "stage" else int(r[k]) if k == "epoch" else (float(r[k]) if r[k] else None))
                         for k in LOG_HEADER})
    return rows


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"DRAG"
VERSION = 1


def save_checkpoint(params: dict, meta: dict, path):
    """Binary checkpoint: magic, version, tensor table, then ``key=value`` metadata."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", VERSION, len(params))
    for name, value in params.items():
        arr = np.array(value.data if isinstance(value, Tensor) else value, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    buf += struct.pack("<I", len(text)) + text
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta)`` as arrays and strings."""
    if not Path(path).is_file():
        raise FormatError(f"{path}: checkpoint file not found")
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if r.take(4, "magic") != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    params = {}
    for _ in range(r.u32("tensor count")):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"extents of {name}"))
        count = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(r.take(8 * count, f"values of {name}"), dtype="<f8").reshape(shape).astype(np.float64)
    text = r.take(r.u32("metadata length"), "metadata").decode("utf-8")
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes")
    meta = {}
    for line in text.splitlines():
        k, sep, v = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: bad metadata line {line!r}")
        meta[k] = v
    return params, meta


__all__ = [
    "MODES",
    "MetricsReport",
    "OptimizerState",
    "Stage",
    "StageSchedule",
    "TrainResult",
    "adam_step",
    "default_schedule",
    "evaluate",
    "load_checkpoint",
    "metrics_from_counts",
    "run_schedule",
    "save_checkpoint",
]
