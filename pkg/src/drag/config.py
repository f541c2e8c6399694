"""Run configuration: every tunable in one flat ``key=value`` record."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .data import DatasetConfig
from .errors import FormatError
from .model import ModelConfig, check_mode
from .training import STAGE_EPOCH_KEYS, StageSchedule, default_schedule


@dataclass(frozen=True)
class RunConfig:
    seed: int = 7
    # model
    image_side: int = 32
    stage_channels: tuple = (16, 32, 32)
    downsample: tuple = (True, True, False)
    kernel_size: int = 3
    n_regions: int = 8
    cgl_hidden: int = 64
    d_k: int = 16
    mode: str = "full"
    # optimisation
    lr_pretrain: float = 1e-2
    lr_cgl: float = 1e-3
    lr_gcn: float = 1e-3
    lr_backbone: float = 1e-5
    weight_decay: float = 1e-7
    batch_size: int = 32
    epochs_backbone: int = 10
    epochs_cgl_pretrain: int = 10
    epochs_cgl: int = 1
    epochs_gcn: int = 10
    epochs_gcn_backbone: int = 10
    epochs_cgl_again: int = 1
    epochs_finetune: int = 10
    cgl_again: bool = False
    # data
    n_train: int = 1500
    n_val: int = 700
    n_test: int = 1000
    class_ratio: float = 3.0
    noise_std: float = 0.05
    pattern_size: int = 8
    # diagnostics
    gradcheck_batch: int = 2
    gradcheck_max_entries: int = 0  # 0 probes every entry
    # paths
    data: str = ""
    out: str = ""
    checkpoint: str = ""

    def __post_init__(self):
        check_mode(self.mode)

    # -- derived configs ---------------------------------------------------

    def model_config(self) -> ModelConfig:
        bb = BackboneConfig(
            input_size=self.image_side,
            stage_channels=tuple(self.stage_channels),
            kernel_size=self.kernel_size,
            downsample=tuple(self.downsample),
        )
        return ModelConfig(bb, self.n_regions, self.cgl_hidden, self.d_k)

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(
            image_side=self.image_side,
            n_train=self.n_train,
            n_val=self.n_val,
            n_test=self.n_test,
            class_ratio=self.class_ratio,
            noise_std=self.noise_std,
            seed=self.seed,
            pattern_size=self.pattern_size,
        )

    def schedule(self) -> StageSchedule:
        sched = default_schedule(
            {k: getattr(self, f"epochs_{k}") for k in STAGE_EPOCH_KEYS},
            lr_cgl=self.lr_cgl,
            lr_gcn=self.lr_gcn,
            lr_backbone=self.lr_backbone,
            lr_pretrain=self.lr_pretrain,
            cgl_again=self.cgl_again,
        )
        return StageSchedule(sched.stages, self.batch_size, self.weight_decay)

    # -- text form -----------------------------------------------------------

    def to_lines(self):
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(str(x).lower() if isinstance(x, bool) else str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            out.append(f"{k}={v}")
        return out

    def with_overrides(self, pairs: dict, where="override") -> "RunConfig":
        proto = {f.name: getattr(self, f.name) for f in fields(self)}
        changes = {}
        for key, raw in pairs.items():
            if key not in proto:
                raise FormatError(f"{where}: unknown key {key!r}")
            changes[key] = _parse(raw, proto[key], f"{where}: {key}")
        try:
            return replace(self, **changes)
        except ValueError as e:
            raise FormatError(f"{where}: {e}") from None


GRADCHECK = RunConfig(
    image_side=16,
    stage_channels=(4, 8),
    downsample=(True, True),
    n_regions=4,
    cgl_hidden=16,
    d_k=4,
)


def _parse_bool(text, what):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise FormatError(f"{what}: expected a boolean, got {text!r}")


def _parse(raw, proto, what):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(proto, bool):
            return _parse_bool(raw, what)
        if isinstance(proto, tuple):
            items = [s for s in raw.split(",") if s.strip()]
            if proto and isinstance(proto[0], bool):
                return tuple(_parse_bool(s, what) for s in items)
            return tuple(int(s) for s in items)
        return type(proto)(raw.strip())
    except ValueError:
        raise FormatError(f"{what}: cannot parse {raw!r} as {type(proto).__name__}") from None


def parse_lines(lines, where="config"):
    pairs = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{where}:{lineno}: expected key=value, got {line!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def load_run_config(path, base: RunConfig | None = None) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FormatError(f"{p}: config file not found")
    return (base or RunConfig()).with_overrides(parse_lines(p.read_text().splitlines(), str(p)), str(p))


def from_meta(meta: dict) -> RunConfig:
    """Rebuild the run configuration stored in checkpoint metadata (``cfg.*`` keys)."""
    pairs = {k[4:]: v for k, v in meta.items() if k.startswith("cfg.")}
    if not pairs:
        raise FormatError("checkpoint metadata carries no run configuration")
    return RunConfig().with_overrides(pairs, "checkpoint metadata")
