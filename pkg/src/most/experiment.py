"""Experiment orchestration: per-seed runs, report rows and the standard grids."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from . import engine as E
from .config import STRATEGIES, ExperimentConfig
from .io import save_run
from .metrics import forgetting_measure

log = logging.getLogger(__name__)

ERROR_TASK = "!error"


@dataclass(frozen=True)
class ReportRow:
    experiment: str
    strategy: str
    order: str
    seed: int
    stage: int
    task: str
    metric: str
    value: float | None
    is_last: bool
    fm: float | None = None


def rows_from_run(cfg: ExperimentConfig, seed: int, run: E.RunState, final_stage: int | None = None) -> list[ReportRow]:
    """One row per (task, stage) trace entry; FM only on final-stage rows."""
    final = len(cfg.task_order) if final_stage is None else final_stage
    result = E.result_from_run(cfg, seed, run)
    rows = []
    for task, tr in run.traces.items():
        fm = forgetting_measure(result.fm_trace(task))
        for stage, value in tr.entries:
            last = stage == final
            rows.append(
                ReportRow(cfg.experiment, cfg.strategy, cfg.order_name, seed, stage, task, tr.metric, value, last, fm if last else None)
            )
    return rows


def run_seed(
    cfg: ExperimentConfig, seed: int, checkpoint_dir=None, setup: E.Setup | None = None
) -> tuple[list[ReportRow], E.SequenceResult | None]:
    """Run one seed; on failure return the partial rows plus an error marker row."""
    run = None
    try:
        setup = setup or E.prepare(cfg, seed)
        run = E.start_run(cfg, setup)
        while run.state.stage < len(cfg.task_order):
            E.run_stage(run, setup, cfg)
            if checkpoint_dir is not None:
                p = Path(checkpoint_dir)
                p.mkdir(parents=True, exist_ok=True)
                save_run(p / f"{cfg.experiment}_{cfg.strategy}_seed{seed}_stage{run.state.stage}.ckpt", run, cfg)
    except Exception as exc:  # noqa: BLE001 - flushed as a marker row, then re-raised by callers that want it
        log.error("seed %d failed: %s", seed, exc)
        rows = rows_from_run(cfg, seed, run) if run is not None else []
        stage = run.state.stage if run is not None else 0
        rows.append(ReportRow(cfg.experiment, cfg.strategy, cfg.order_name, seed, stage, ERROR_TASK, "ERROR", None, False))
        return rows, None
    return rows_from_run(cfg, seed, run), E.result_from_run(cfg, seed, run)


def run_experiment(cfg: ExperimentConfig, checkpoint_dir=None) -> list[ReportRow]:
    """All seeds of ``cfg``: data, downstream nets, pretraining, the sequence, rows."""
    rows = []
    for seed in cfg.seeds:
        seed_rows, _ = run_seed(cfg, seed, checkpoint_dir)
        rows.extend(seed_rows)
    return rows


def strategy_grid(cfg: ExperimentConfig, strategies=STRATEGIES) -> list[ExperimentConfig]:
    return [cfg.replace(strategy=s) for s in strategies]


def buffer_grid(cfg: ExperimentConfig, sizes=(4, 10, 50)) -> list[ExperimentConfig]:
    return [cfg.replace(buffer_size=b, experiment=f"buffer_B{b}") for b in sizes]


def ablation_grid(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    out = []
    for replay in (True, False):
        for ig in (True, False):
            tag = f"ablation_replay-{'on' if replay else 'off'}_ig-{'on' if ig else 'off'}"
            out.append(cfg.replace(strategy="most", replay=replay, ig=ig, experiment=tag))
    return out


def has_errors(rows) -> bool:
    return any(r.task == ERROR_TASK for r in rows)
