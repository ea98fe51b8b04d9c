"""Persistence: MOSTCKPT binary checkpoints, CSV reports and PGM image export.

Checkpoint layout (all integers little-endian)::

    b"MOSTCKPT"  uint32 version  uint32 n_arrays
    n_arrays × ( uint16 name_len, name (utf-8), uint8 dtype_code,
                 uint8 rank, rank × uint64 dims, raw values )
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, parse_config_text, serialize_config
from .engine import (
    RECON_TASK,
    BufferEntry,
    ReplayBuffer,
    RunState,
    Setup,
    StrategyState,
    TrainState,
    initial_state,
)
from .metrics import MetricTrace
from .phantoms import parse_kind

MAGIC = b"MOSTCKPT"
FORMAT_VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
}


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# named-array container
# --------------------------------------------------------------------------


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    for code, ref in _DTYPES.items():
        if dt == ref:
            return code
    raise CheckpointError(f"unsupported dtype {arr.dtype} for checkpointing")


def encode_arrays(arrays: dict[str, np.ndarray], version: int = FORMAT_VERSION) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", version, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw_name = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return out.getvalue()


def decode_arrays(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {pos}, file has {len(view)}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("bad magic: not a MOSTCKPT file")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, reader supports {FORMAT_VERSION}")
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for array {name!r}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arrays[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
    if pos != len(view):
        raise CheckpointError(f"trailing bytes after {count} arrays")
    return arrays


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_arrays(arrays))


def load_arrays(path) -> dict[str, np.ndarray]:
    return decode_arrays(Path(path).read_bytes())


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def _untext(a: np.ndarray) -> str:
    return a.astype(np.uint8).tobytes().decode("utf-8")


# --------------------------------------------------------------------------
# training state
# --------------------------------------------------------------------------


def pack_train_state(state: TrainState) -> dict[str, np.ndarray]:
    """θ, Adam moments, stage, seed and the frozen downstream parameters."""
    out = {
        "state.stage": np.array([state.stage], dtype=np.int64),
        "state.seed": np.array([state.seed], dtype=np.int64),
        "opt.lr": np.array([state.optimizer.lr], dtype=np.float64),
    }
    for k, v in state.recon.state().items():
        out[f"theta.{k}"] = v
    for k, v in state.optimizer.state().items():
        out[f"opt.{k}"] = v
    for name, net in state.downstream.items():
        for k, v in net.state().items():
            out[f"down.{name}.{k}"] = v
    return out


def unpack_train_state(arrays: dict[str, np.ndarray], state: TrainState) -> TrainState:
    """Load arrays written by :func:`pack_train_state` into a compatible ``state``."""
    state.recon.load_state({k[len("theta."):]: v for k, v in arrays.items() if k.startswith("theta.")})
    state.optimizer.load_state({k[len("opt."):]: v for k, v in arrays.items() if k.startswith("opt.") and k != "opt.lr"})
    state.optimizer.lr = float(arrays["opt.lr"][0])
    state.stage = int(arrays["state.stage"][0])
    state.seed = int(arrays["state.seed"][0])
    for name, net in state.downstream.items():
        prefix = f"down.{name}."
        stored = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        if stored:
            net.load_state(stored)
            state.downstream_hashes[name] = net.param_hash()
    return state


def checkpoint_io(state: TrainState, path, mode: str = "save") -> TrainState | None:
    """Save ``state`` to ``path`` or load ``path`` into ``state`` (``mode`` is save|load)."""
    if mode == "save":
        save_arrays(path, pack_train_state(state))
        return None
    if mode == "load":
        return unpack_train_state(load_arrays(path), state)
    raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")


# --------------------------------------------------------------------------
# full run state (resume)
# --------------------------------------------------------------------------


def pack_run(run: RunState, cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    out = pack_train_state(run.state)
    out["meta.config"] = _text(serialize_config(cfg))
    buf = run.buffer
    if buf is not None:
        out["buffer.capacity"] = np.array([buf.capacity], dtype=np.int64)
        out["buffer.cursor"] = np.array([buf.cursor], dtype=np.int64)
        out["buffer.task_order"] = _text("\n".join(buf.task_order))
        out["buffer.tasks"] = _text("\n".join(e.task for e in buf.entries))
        for i, e in enumerate(buf.entries):
            # labels differ in shape across tasks (mask vs scalar), so entries are stored one by one
            for key in ("x", "k_re", "k_im", "z", "recon"):
                out[f"buffer.{i}.{key}"] = getattr(e, key)
            if e.y is not None:
                out[f"buffer.{i}.y"] = e.y
            out[f"buffer.{i}.subject_id"] = np.array([e.subject_id], dtype=np.int64)
    strat = run.strategy
    out["strategy.learned"] = _text("\n".join(strat.learned))
    if strat.fisher is not None:
        for i, (f, a) in enumerate(zip(strat.fisher, strat.anchor)):
            out[f"strategy.fisher.{i}"] = f
            out[f"strategy.anchor.{i}"] = a
    out["traces.names"] = _text("\n".join(run.traces))
    for name, tr in run.traces.items():
        out[f"trace.{name}.metric"] = _text(tr.metric)
        out[f"trace.{name}.stages"] = np.array([s for s, _ in tr.entries], dtype=np.int64)
        out[f"trace.{name}.values"] = np.array([v for _, v in tr.entries], dtype=np.float64)
    out["baseline.names"] = _text("\n".join(run.baseline))
    out["baseline.values"] = np.array(list(run.baseline.values()), dtype=np.float64)
    return out


def _lines(a: np.ndarray) -> list[str]:
    s = _untext(a)
    return s.split("\n") if s else []


def config_from_checkpoint(path) -> ExperimentConfig:
    return parse_config_text(_untext(load_arrays(path)["meta.config"]))


def unpack_run(arrays: dict[str, np.ndarray], cfg: ExperimentConfig, setup: Setup) -> RunState:
    state = unpack_train_state(arrays, initial_state(setup, cfg))
    buf = None
    if "buffer.capacity" in arrays:
        buf = ReplayBuffer(int(arrays["buffer.capacity"][0]))
        buf.cursor = int(arrays["buffer.cursor"][0])
        buf.task_order = _lines(arrays["buffer.task_order"])
        for i, task in enumerate(_lines(arrays["buffer.tasks"])):
            buf.entries.append(
                BufferEntry(
                    task=task,
                    kind=parse_kind(task),
                    x=arrays[f"buffer.{i}.x"],
                    k_re=arrays[f"buffer.{i}.k_re"],
                    k_im=arrays[f"buffer.{i}.k_im"],
                    z=arrays[f"buffer.{i}.z"],
                    y=arrays.get(f"buffer.{i}.y"),
                    recon=arrays[f"buffer.{i}.recon"],
                    subject_id=int(arrays[f"buffer.{i}.subject_id"][0]),
                )
            )
    strat = StrategyState(cfg.strategy, learned=_lines(arrays["strategy.learned"]))
    n_fisher = sum(1 for k in arrays if k.startswith("strategy.fisher."))
    if n_fisher:
        strat.fisher = [arrays[f"strategy.fisher.{i}"] for i in range(n_fisher)]
        strat.anchor = [arrays[f"strategy.anchor.{i}"] for i in range(n_fisher)]
    traces = {}
    for name in _lines(arrays["traces.names"]):
        tr = MetricTrace(name, _untext(arrays[f"trace.{name}.metric"]))
        for s, v in zip(arrays[f"trace.{name}.stages"], arrays[f"trace.{name}.values"]):
            tr.append(int(s), float(v))
        traces[name] = tr
    baseline = dict(zip(_lines(arrays["baseline.names"]), arrays["baseline.values"].tolist()))
    if RECON_TASK not in traces:
        raise CheckpointError("checkpoint has no reconstruction trace")
    return RunState(state, buf, strat, traces, baseline)


def save_run(path, run: RunState, cfg: ExperimentConfig) -> None:
    save_arrays(path, pack_run(run, cfg))


def load_run(path, cfg: ExperimentConfig, setup: Setup) -> RunState:
    return unpack_run(load_arrays(path), cfg, setup)


# --------------------------------------------------------------------------
# report CSV
# --------------------------------------------------------------------------

REPORT_HEADER = ("experiment", "strategy", "order", "seed", "stage", "task", "metric", "value", "is_last", "fm")


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{float(v):.6g}"


def report_text(rows) -> str:
    rows = sorted(rows, key=lambda r: (r.experiment, r.seed, r.stage, r.task, r.strategy, r.order, r.metric))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow([r.experiment, r.strategy, r.order, r.seed, r.stage, r.task, r.metric, _fmt(r.value), int(r.is_last), _fmt(r.fm)])
    return buf.getvalue()


def write_report(rows, path) -> None:
    rows = list(rows)
    if not rows:
        raise ValueError("write_report: no rows")
    p = Path(path)
    if p.parent and not p.parent.is_dir():
        raise OSError(f"report directory does not exist: {p.parent}")
    p.write_text(report_text(rows))


def read_report(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


def to_pgm(img: np.ndarray) -> bytes:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite values")
    lo, hi = a.min(), a.max()
    scaled = np.zeros(a.shape) if hi == lo else (a - lo) / (hi - lo)
    pix = np.round(scaled * 255.0).astype(np.uint8)
    h, w = a.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def export_images(samples, out_dir) -> list[Path]:
    """Write each ``(image, name)`` pair as ``out_dir/name.pgm``."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for img, name in samples:
        p = d / f"{name}.pgm"
        p.write_bytes(to_pgm(img))
        written.append(p)
    return written
