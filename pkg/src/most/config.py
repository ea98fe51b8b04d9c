"""Flat ``key=value`` experiment configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected. Every
key, its type and default are listed in :data:`KEY_DOCS`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .phantoms import TaskKind, parse_kind

STRATEGIES = ("naive", "most", "ewc", "lwf", "er", "der")
REPLAY_STRATEGIES = ("most", "er", "der")
MAX_FINETUNE_EPOCHS = 5

# downstream tasks in learning order, after reconstruction pretraining
ORDER_PRESETS = {
    "order1": ("seg_A", "seg_B", "cls_A", "cls_B"),
    "order2": ("seg_B", "cls_B", "seg_A", "cls_A"),
    "order3": ("cls_A", "cls_B", "seg_B", "seg_A"),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "main"
    order: str = "order1"
    strategy: str = "most"
    buffer_size: int = 10
    replay_period: int = 3
    seeds: tuple[int, ...] = (0, 1, 2)
    image_size: int = 64
    acceleration: int = 4
    center_columns: int = 8
    n_recon: int = 200
    n_downstream: int = 120
    n_downstream_pretrain: int = 120
    cascades: int = 3
    batch_size: int = 4
    pretrain_epochs: int = 8
    downstream_epochs: int = 30
    finetune_epochs: int = 5
    lr_pretrain: float = 1e-3
    lr_downstream: float = 1e-3
    lr_finetune: float = 1e-4
    lambda_ig: float = 1.0
    lambda_ewc: float = 100.0
    lambda_lwf: float = 1.0
    tau_lwf: float = 1.0
    alpha_der: float = 1.0
    replay: bool = True
    ig: bool = True
    replay_task_loss: bool = False
    replay_ig_classification: bool = True
    replay_substitutes: bool = True
    buffer_include_recon: bool = True
    fm_include_pretrain: bool = False
    fisher_samples: int = 60
    precision: str = "float32"

    def __post_init__(self):
        self.validate()

    @property
    def task_order(self) -> tuple[str, ...]:
        if self.order in ORDER_PRESETS:
            return ORDER_PRESETS[self.order]
        return tuple(parse_kind(t.strip()).short for t in self.order.split(","))

    @property
    def task_kinds(self) -> tuple[TaskKind, ...]:
        return tuple(parse_kind(t) for t in self.task_order)

    @property
    def order_name(self) -> str:
        return self.order if self.order in ORDER_PRESETS else "custom"

    @property
    def uses_replay(self) -> bool:
        if self.strategy == "most":
            return self.replay
        return self.strategy in ("er", "der")

    @property
    def uses_ig(self) -> bool:
        return self.strategy == "most" and self.ig

    def validate(self) -> None:
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}")

        if self.strategy not in STRATEGIES:
            bad("strategy", f"must be one of {', '.join(STRATEGIES)}, got {self.strategy!r}")
        if self.buffer_size < 0:
            bad("buffer_size", f"must be >= 0, got {self.buffer_size}")
        if self.replay_period < 1:
            bad("replay_period", f"must be >= 1, got {self.replay_period}")
        if self.uses_replay and self.buffer_size == 0:
            bad("buffer_size", f"must be positive for replay strategy {self.strategy!r}")
        try:
            order = self.task_order
        except ValueError as exc:
            bad("order", str(exc))
        downstream = {k.short for k in TaskKind if k is not TaskKind.RECONSTRUCTION}
        if sorted(order) != sorted(downstream):
            bad("order", f"must be a permutation of {sorted(downstream)}, got {list(order)}")
        if not self.seeds:
            bad("seeds", "at least one seed required")
        if not 1 <= self.finetune_epochs <= MAX_FINETUNE_EPOCHS:
            bad("finetune_epochs", f"must be in 1..{MAX_FINETUNE_EPOCHS}, got {self.finetune_epochs}")
        for key in ("pretrain_epochs", "downstream_epochs"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        size = self.image_size
        if size < 8 or size & (size - 1):
            bad("image_size", f"must be a power of two >= 8, got {size}")
        if self.acceleration < 1:
            bad("acceleration", "must be >= 1")
        if self.center_columns > size // self.acceleration:
            bad("center_columns", f"exceeds sampling budget {size // self.acceleration}")
        for key in ("n_recon", "n_downstream", "n_downstream_pretrain"):
            if getattr(self, key) < 12:
                bad(key, "must be >= 12")
        for key in ("cascades", "batch_size", "fisher_samples"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        for key in ("lr_pretrain", "lr_downstream", "lr_finetune", "tau_lwf"):
            if getattr(self, key) <= 0:
                bad(key, "must be positive")
        for key in ("lambda_ig", "lambda_ewc", "lambda_lwf", "alpha_der"):
            if getattr(self, key) < 0:
                bad(key, "must be >= 0")
        if self.precision not in ("float64", "float32"):
            bad("precision", f"must be float64 or float32, got {self.precision!r}")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


KEY_DOCS = {
    "experiment": "experiment id written to the report",
    "order": "order1|order2|order3 or a comma list of seg_A,seg_B,cls_A,cls_B",
    "strategy": "naive|most|ewc|lwf|er|der",
    "buffer_size": "replay buffer capacity in samples (subjects)",
    "replay_period": "replay fires every K-th iteration of a stage",
    "seeds": "comma-separated list of integer seeds",
    "image_size": "square image side, power of two",
    "acceleration": "undersampling factor R",
    "center_columns": "fully sampled low-frequency columns",
    "n_recon": "reconstruction dataset size",
    "n_downstream": "per-task finetuning dataset size",
    "n_downstream_pretrain": "per-task dataset size for downstream-net training",
    "cascades": "unrolled cascades in the reconstruction net",
    "batch_size": "mini-batch size for all training",
    "pretrain_epochs": "reconstruction pretraining epochs",
    "downstream_epochs": "downstream-net training epochs",
    "finetune_epochs": "max finetuning epochs per task (<= 5)",
    "lr_pretrain": "Adam learning rate, reconstruction pretraining",
    "lr_downstream": "Adam learning rate, downstream-net training",
    "lr_finetune": "Adam learning rate, task-oriented finetuning",
    "lambda_ig": "weight of the image-guided loss (current task and MOST replay)",
    "lambda_ewc": "EWC penalty weight",
    "lambda_lwf": "LWF distillation weight",
    "tau_lwf": "LWF distillation temperature",
    "alpha_der": "weight of stored-reconstruction replay in DER",
    "replay": "on|off: buffer replay for strategy=most",
    "ig": "on|off: image-guided loss for strategy=most",
    "replay_task_loss": "on|off: add the downstream task loss on replayed samples (most)",
    "replay_ig_classification": "on|off: stored-reconstruction replay also for classification entries",
    "replay_substitutes": "on|off: replay replaces (on) or adds to (off) the current-task step",
    "buffer_include_recon": "on|off: store reconstruction-task samples after pretraining",
    "fm_include_pretrain": "on|off: include the pre-finetuning value in the reconstruction FM",
    "fisher_samples": "max samples per stage for the EWC Fisher estimate",
    "precision": "float64|float32",
}

_BOOL = {"on": True, "true": True, "1": True, "yes": True, "off": False, "false": False, "0": False, "no": False}


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in _BOOL:
                raise ValueError(f"expected on/off, got {raw!r}")
            return _BOOL[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _defaults() -> dict:
    base = ExperimentConfig()
    return {f.name: getattr(base, f.name) for f in fields(ExperimentConfig)}


def parse_config_text(text: str, overrides: dict | None = None) -> ExperimentConfig:
    defaults = _defaults()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{key}: unknown key (line {lineno})")
        values[key] = _coerce(key, raw, defaults[key])
    values.update(overrides or {})
    return ExperimentConfig(**values)


def parse_config(path, overrides: dict | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return parse_config_text(p.read_text(), overrides)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            s = "on" if v else "off"
        elif isinstance(v, tuple):
            s = ",".join(str(i) for i in v)
        else:
            s = repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{f.name}={s}")
    return "\n".join(lines) + "\n"
