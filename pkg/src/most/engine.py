"""Sequential task-oriented finetuning of the reconstruction network.

Stage 0 pretrains ``f_R`` with the SSIM fidelity loss. Every later stage
finetunes ``f_R`` through one frozen downstream network. Forgetting of earlier
stages is countered per strategy:

* ``most``  - replay of stored reconstructions every K-th iteration (round
  robin over past tasks) plus the image-guided SSIM loss on the current task
* ``er``    - replay of raw stored (input, label) pairs with the task loss
* ``der``   - replay matching the stored reconstructions
* ``ewc``   - diagonal-Fisher quadratic anchoring of θ
* ``lwf``   - distillation through every earlier frozen downstream net
* ``naive`` - none of the above
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .kspace import ComplexImage, SamplingMask, make_cartesian_mask
from .metrics import (
    MetricTrace,
    auc,
    cross_entropy,
    dice_from_logits,
    forgetting_measure,
    last_metric,
    soft_cross_entropy,
    ssim,
    ssim_loss,
)
from .nets import ClassificationNet, Module, ReconNet, SegmentationNet, init_model
from .optim import Adam
from .phantoms import Sample, TaskDataset, TaskKind, gen_task_dataset, parse_kind, undersample_dataset
from .tensor import Tensor, NonFiniteError

log = logging.getLogger(__name__)

RECON_TASK = "recon"

# rng stream tags
_SHUFFLE, _BUFFER, _REPLAY, _FISHER = 1, 2, 3, 4


class TrainingError(RuntimeError):
    pass


class FreezeViolation(TrainingError):
    pass


def stream(seed: int, stage: int, purpose: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, purpose, *extra])


# --------------------------------------------------------------------------
# batched arrays
# --------------------------------------------------------------------------


@dataclass
class Arrays:
    x: np.ndarray
    y: np.ndarray
    k_re: np.ndarray
    k_im: np.ndarray
    z: np.ndarray
    subject_ids: np.ndarray

    def __len__(self):
        return self.x.shape[0]

    @classmethod
    def from_samples(cls, samples: list[Sample], dtype) -> "Arrays":
        x = np.stack([s.x for s in samples])[:, None].astype(dtype)
        y = np.stack([s.y for s in samples])[:, None].astype(dtype)
        k = np.stack([s.k for s in samples])[:, None]
        if np.ndim(samples[0].z) == 2:
            z = np.stack([s.z for s in samples])[:, None].astype(dtype)
        else:
            z = np.array([[float(s.z)] for s in samples], dtype=dtype)
        ids = np.array([s.subject_id for s in samples], dtype=np.int64)
        return cls(x, y, k.real.astype(dtype), k.imag.astype(dtype), z, ids)

    def take(self, idx) -> "Arrays":
        idx = np.asarray(idx)
        return Arrays(self.x[idx], self.y[idx], self.k_re[idx], self.k_im[idx], self.z[idx], self.subject_ids[idx])

    @property
    def k(self) -> ComplexImage:
        return ComplexImage(Tensor(self.k_re), Tensor(self.k_im))


@dataclass
class TaskData:
    name: str
    kind: TaskKind
    train: Arrays
    val: Arrays
    test: Arrays

    @classmethod
    def from_dataset(cls, name: str, ds: TaskDataset, dtype) -> "TaskData":
        return cls(
            name,
            ds.kind,
            Arrays.from_samples(ds.train, dtype),
            Arrays.from_samples(ds.val, dtype),
            Arrays.from_samples(ds.test, dtype),
        )


def batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------


@dataclass
class TrainState:
    recon: ReconNet
    optimizer: Adam
    mask: SamplingMask
    downstream: dict[str, Module] = field(default_factory=dict)
    downstream_hashes: dict[str, str] = field(default_factory=dict)
    stage: int = 0
    seed: int = 0

    def params(self) -> list[Tensor]:
        return self.recon.parameters()

    def check_frozen(self) -> None:
        for name, net in self.downstream.items():
            if net.param_hash() != self.downstream_hashes[name]:
                raise FreezeViolation(f"downstream net {name!r} changed while frozen")

    def clone(self) -> "TrainState":
        recon = copy.deepcopy(self.recon)
        opt = Adam(recon.parameters(), lr=self.optimizer.lr)
        opt.load_state(self.optimizer.state())
        return TrainState(recon, opt, self.mask, dict(self.downstream), dict(self.downstream_hashes), self.stage, self.seed)


def reconstruct(net: ReconNet, arr: Arrays, mask: SamplingMask) -> Tensor:
    return net.forward(Tensor(arr.x), arr.k, mask)


def reconstruct_np(net: ReconNet, arr: Arrays, mask: SamplingMask, chunk: int = 32) -> np.ndarray:
    outs = [reconstruct(net, arr.take(np.arange(i, min(i + chunk, len(arr)))), mask).data for i in range(0, len(arr), chunk)]
    return np.concatenate(outs)


def _apply_updates(state: TrainState, loss: Tensor) -> None:
    if loss.node is None:
        return
    grads = T.gradients(loss, state.params())
    state.optimizer.step(grads)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def image_guided_loss(recon: Tensor, target) -> Tensor:
    """``1 - SSIM(recon, target)``; target is ground truth or a stored reconstruction."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=recon.dtype))
    if recon.shape != target.shape:
        raise T.ShapeError(f"image_guided_loss: {recon.shape} vs {target.shape}")
    return ssim_loss(recon, target)


def task_loss(kind: TaskKind, net: Module | None, recon: Tensor, arr: Arrays) -> Tensor:
    """Downstream loss of a batch given its reconstruction (SSIM loss for the recon task)."""
    if kind is TaskKind.RECONSTRUCTION:
        return ssim_loss(recon, Tensor(arr.y))
    return cross_entropy(net.forward(recon), arr.z)


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


# --------------------------------------------------------------------------
# replay buffer
# --------------------------------------------------------------------------


@dataclass
class BufferEntry:
    task: str
    kind: TaskKind
    x: np.ndarray
    k_re: np.ndarray
    k_im: np.ndarray
    z: np.ndarray
    y: np.ndarray | None
    recon: np.ndarray
    subject_id: int


class ReplayBuffer:
    """Fixed-capacity store of past-task samples with round-robin task replay."""

    def __init__(self, capacity: int):
        if capacity < 0:
            raise ValueError("buffer capacity must be >= 0")
        self.capacity = capacity
        self.entries: list[BufferEntry] = []
        self.task_order: list[str] = []
        self.cursor = 0

    def __len__(self):
        return len(self.entries)

    def counts(self) -> dict[str, int]:
        out = {t: 0 for t in self.task_order}
        for e in self.entries:
            out[e.task] += 1
        return {t: c for t, c in out.items() if c}

    def tasks(self) -> list[str]:
        counts = self.counts()
        return [t for t in self.task_order if t in counts]

    def quotas(self, tasks: list[str]) -> dict[str, int]:
        base, extra = divmod(self.capacity, len(tasks))
        return {t: base + (i < extra) for i, t in enumerate(tasks)}

    def next_task(self) -> str:
        tasks = self.tasks()
        if not tasks:
            raise TrainingError("replay requested from an empty buffer")
        task = tasks[self.cursor % len(tasks)]
        self.cursor += 1
        return task

    def draw(self, task: str, n: int, rng: np.random.Generator) -> list[BufferEntry]:
        pool = [e for e in self.entries if e.task == task]
        pick = rng.choice(len(pool), size=min(n, len(pool)), replace=False)
        return [pool[i] for i in sorted(pick)]


def group_arrays(entries: list[BufferEntry]) -> tuple[Arrays, np.ndarray]:
    arr = Arrays(
        np.stack([e.x for e in entries]),
        np.stack([e.y if e.y is not None else np.zeros_like(e.x) for e in entries]),
        np.stack([e.k_re for e in entries]),
        np.stack([e.k_im for e in entries]),
        np.stack([e.z for e in entries]),
        np.array([e.subject_id for e in entries], dtype=np.int64),
    )
    return arr, np.stack([e.recon for e in entries])


def buffer_update(
    buf: ReplayBuffer,
    task: TaskData,
    net: ReconNet,
    mask: SamplingMask,
    rng: np.random.Generator,
) -> ReplayBuffer:
    """Add randomly chosen training pairs of ``task`` and equalize per-task counts.

    Older tasks are trimmed uniformly at random to their quota; quotas differ
    by at most one, with the remainder going to the earliest tasks.
    """
    if buf.capacity == 0:
        raise TrainingError("buffer capacity is 0 but a replay strategy needs it")
    if task.name in buf.task_order:
        raise TrainingError(f"task {task.name!r} already stored in the buffer")
    tasks = buf.tasks() + [task.name]
    quota = buf.quotas(tasks)
    kept = []
    for t in tasks[:-1]:
        pool = [e for e in buf.entries if e.task == t]
        if len(pool) > quota[t]:
            keep = np.sort(rng.choice(len(pool), size=quota[t], replace=False))
            pool = [pool[i] for i in keep]
        kept.extend(pool)
    n_new = min(quota[task.name], len(task.train))
    picks = np.sort(rng.choice(len(task.train), size=n_new, replace=False))
    new = task.train.take(picks)
    recon = reconstruct_np(net, new, mask) if n_new else np.zeros((0,))
    stores_y = task.kind.produces_image
    for i in range(n_new):
        kept.append(
            BufferEntry(
                task=task.name,
                kind=task.kind,
                x=new.x[i],
                k_re=new.k_re[i],
                k_im=new.k_im[i],
                z=new.z[i],
                y=new.y[i] if stores_y else None,
                recon=recon[i],
                subject_id=int(new.subject_ids[i]),
            )
        )
    buf.entries = kept
    buf.task_order.append(task.name)
    return buf


class ReplaySchedule:
    """Fires on iterations 1-based ``counter % period == 0``."""

    def __init__(self, period: int):
        if period < 1:
            raise ValueError("replay period must be >= 1")
        self.period = period
        self.counter = 0

    def tick(self) -> bool:
        self.counter += 1
        return self.counter % self.period == 0

    def reset(self) -> None:
        self.counter = 0


def replay_step(
    buf: ReplayBuffer,
    state: TrainState,
    task_loss_on: bool,
    ig_loss_on: bool,
    rng: np.random.Generator,
    batch_size: int = 4,
    ig_weight: float = 1.0,
    ig_on_classification: bool = True,
    task: str | None = None,
) -> Tensor:
    """Loss on one stored group of the next past task (round robin).

    ``task_loss_on`` adds the task's own loss on its stored label (SSIM against
    ``y`` for reconstruction entries); ``ig_loss_on`` adds
    ``ig_weight * (1 - SSIM(f_R(x_p), stored_reconstruction))``.
    """
    task = task or buf.next_task()
    group = buf.draw(task, batch_size, rng)
    dtype = state.recon.params["c0.eta"].dtype
    if not (task_loss_on or ig_loss_on):
        return _zero(dtype)
    arr, stored = group_arrays(group)
    kind = group[0].kind
    recon = reconstruct(state.recon, arr, state.mask)
    loss = _zero(dtype)
    if task_loss_on:
        loss = loss + task_loss(kind, state.downstream.get(task), recon, arr)
    if ig_loss_on and (kind.produces_image or ig_on_classification):
        loss = loss + T.scalar_mul(image_guided_loss(recon, stored), ig_weight)
    return loss


# --------------------------------------------------------------------------
# strategies
# --------------------------------------------------------------------------


@dataclass
class StrategyState:
    tag: str
    fisher: list[np.ndarray] | None = None
    anchor: list[np.ndarray] | None = None
    snapshot: ReconNet | None = None
    learned: list[str] = field(default_factory=list)


def ewc_penalty(state: TrainState, strat: StrategyState, lam: float) -> Tensor:
    if strat.fisher is None or strat.anchor is None:
        raise TrainingError("EWC state missing: no Fisher/anchor prepared")
    total = None
    for p, f, a in zip(state.params(), strat.fisher, strat.anchor):
        term = T.reduce_sum(Tensor(f) * T.square(p - Tensor(a)))
        total = term if total is None else total + term
    return T.scalar_mul(total, lam / 2.0)


def lwf_penalty(state: TrainState, strat: StrategyState, arr: Arrays, recon: Tensor, cfg: ExperimentConfig) -> Tensor:
    if strat.snapshot is None:
        raise TrainingError("LWF state missing: no snapshot of θ")
    old = reconstruct(strat.snapshot, arr, state.mask).data
    loss = T.reduce_mean(T.absolute(recon - Tensor(old)))
    for name in strat.learned:
        net = state.downstream.get(name)
        if net is None:
            continue
        old_logits = net.forward(Tensor(old)).data
        loss = loss + soft_cross_entropy(net.forward(recon), old_logits, cfg.tau_lwf)
    return T.scalar_mul(loss, cfg.lambda_lwf)


def strategy_regularizer(
    state: TrainState,
    strat: StrategyState,
    cfg: ExperimentConfig,
    arr: Arrays | None = None,
    recon: Tensor | None = None,
    buf: ReplayBuffer | None = None,
    rng: np.random.Generator | None = None,
    task: str | None = None,
) -> Tensor:
    tag = strat.tag
    dtype = state.recon.params["c0.eta"].dtype
    if tag == "ewc":
        return ewc_penalty(state, strat, cfg.lambda_ewc)
    if tag == "lwf":
        return lwf_penalty(state, strat, arr, recon, cfg)
    if tag == "er":
        return replay_step(buf, state, True, False, rng, cfg.batch_size, task=task)
    if tag == "der":
        return replay_step(
            buf, state, False, True, rng, cfg.batch_size,
            ig_weight=cfg.alpha_der, ig_on_classification=cfg.replay_ig_classification, task=task,
        )
    if tag in ("naive", "most"):
        return _zero(dtype)
    raise TrainingError(f"strategy state missing for tag {tag!r}")


def most_replay_loss(state, buf, cfg, rng, task=None) -> Tensor:
    """MOST replay: stored-reconstruction matching, optionally plus the stored-label task loss."""
    return replay_step(
        buf, state, cfg.replay_task_loss, True, rng, cfg.batch_size,
        ig_weight=cfg.lambda_ig, ig_on_classification=cfg.replay_ig_classification, task=task,
    )


def fisher_diagonal(state: TrainState, task: TaskData, cfg: ExperimentConfig, rng) -> list[np.ndarray]:
    """Empirical Fisher diagonal: mean squared per-sample gradient of the task loss."""
    params = state.params()
    fisher = [np.zeros_like(p.data) for p in params]
    n = min(cfg.fisher_samples, len(task.train))
    idx = np.sort(rng.choice(len(task.train), size=n, replace=False))
    net = state.downstream.get(task.name)
    for i in idx:
        arr = task.train.take([i])
        loss = task_loss(task.kind, net, reconstruct(state.recon, arr, state.mask), arr)
        for f, g in zip(fisher, T.gradients(loss, params)):
            f += g * g / n
    return fisher


# --------------------------------------------------------------------------
# training / evaluation
# --------------------------------------------------------------------------


def evaluate_task(state: TrainState, task: TaskData, split: str = "test") -> float:
    arr = getattr(task, split)
    recon = reconstruct_np(state.recon, arr, state.mask)
    if task.kind is TaskKind.RECONSTRUCTION:
        return ssim(Tensor(recon), Tensor(arr.y)).item()
    logits = state.downstream[task.name].forward(Tensor(recon)).data
    if task.kind.is_segmentation:
        return dice_from_logits(logits, arr.z)
    return auc(logits.ravel(), arr.z.ravel())


def validation_loss(state: TrainState, task: TaskData) -> float:
    arr = task.val
    recon = Tensor(reconstruct_np(state.recon, arr, state.mask))
    return task_loss(task.kind, state.downstream.get(task.name), recon, arr).item()


def pretrain_recon(state: TrainState, data: TaskData, epochs: int, cfg: ExperimentConfig) -> float:
    """Fidelity pretraining (SSIM loss); keeps the epoch with the lowest validation loss.

    Returns the validation SSIM of the selected parameters.
    """
    state.optimizer.lr = cfg.lr_pretrain
    best_loss, best_state = np.inf, None
    for epoch in range(epochs):
        rng = stream(state.seed, 0, _SHUFFLE, epoch)
        for idx in batches(len(data.train), cfg.batch_size, rng):
            arr = data.train.take(idx)
            loss = ssim_loss(reconstruct(state.recon, arr, state.mask), Tensor(arr.y))
            _apply_updates(state, loss)
        val = validation_loss(state, data)
        if not np.isfinite(val):
            raise TrainingError(f"reconstruction pretraining diverged at epoch {epoch}")
        log.debug("pretrain epoch %d val loss %.5f", epoch, val)
        if val < best_loss:
            best_loss, best_state = val, state.recon.state()
    if best_state is not None:
        state.recon.load_state(best_state)
    return evaluate_task(state, data, "val")


def pretrain_downstream(
    net: Module, data: TaskData, epochs: int, lr: float, seed: int, batch_size: int = 4
) -> tuple[Module, float]:
    """Train a downstream net on aliasing-free images with BCE, freeze it.

    Returns the frozen net and its validation DICE or AUC.
    """
    opt = Adam(net.parameters(), lr=lr)
    best_loss, best_state = np.inf, None
    for epoch in range(epochs):
        rng = stream(seed, 999, _SHUFFLE, epoch, list(TaskKind).index(data.kind))
        for idx in batches(len(data.train), batch_size, rng):
            arr = data.train.take(idx)
            loss = cross_entropy(net.forward(Tensor(arr.y)), arr.z)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"downstream training for {data.name} diverged at epoch {epoch}")
            opt.step(T.gradients(loss, net.parameters()))
        val = cross_entropy(net.forward(Tensor(data.val.y)), data.val.z).item()
        if val < best_loss:
            best_loss, best_state = val, net.state()
    if best_state is not None:
        net.load_state(best_state)
    net.freeze()
    logits = net.forward(Tensor(data.val.y)).data
    if data.kind.is_segmentation:
        metric = dice_from_logits(logits, data.val.z)
    else:
        metric = auc(logits.ravel(), data.val.z.ravel())
    return net, metric


@dataclass
class StageLog:
    iterations: int = 0
    replay_iterations: list[int] = field(default_factory=list)
    firing_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1


def finetune_task(
    state: TrainState,
    task: TaskData,
    buf: ReplayBuffer | None,
    strat: StrategyState,
    sched: ReplaySchedule,
    cfg: ExperimentConfig,
    on_firing=None,
) -> StageLog:
    """Finetune θ through the frozen downstream net of ``task``.

    At iterations where the schedule fires (replay strategies only), the step
    uses the replay loss instead of (or, with ``replay_substitutes=off``, in
    addition to) the current-task loss. The epoch with the lowest validation
    task loss is kept.
    """
    state.optimizer.lr = cfg.lr_finetune
    down = state.downstream[task.name]
    uses_replay = cfg.uses_replay and buf is not None
    use_ig = cfg.uses_ig and task.kind.produces_image
    sched.reset()
    info = StageLog()
    best_loss, best_state = np.inf, None
    for epoch in range(cfg.finetune_epochs):
        rng = stream(state.seed, state.stage, _SHUFFLE, epoch)
        replay_rng = stream(state.seed, state.stage, _REPLAY, epoch)
        for idx in batches(len(task.train), cfg.batch_size, rng):
            info.iterations += 1
            fires = uses_replay and sched.tick() and len(buf) > 0
            replay = None
            if fires:
                info.replay_iterations.append(info.iterations)
                if on_firing is not None:
                    on_firing(state, buf, replay_rng)
                if strat.tag == "most":
                    replay = most_replay_loss(state, buf, cfg, replay_rng)
                else:
                    replay = strategy_regularizer(state, strat, cfg, buf=buf, rng=replay_rng)
                info.firing_losses.append(replay.item())
            if replay is not None and cfg.replay_substitutes:
                loss = replay
            else:
                arr = task.train.take(idx)
                recon = reconstruct(state.recon, arr, state.mask)
                loss = cross_entropy(down.forward(recon), arr.z)
                if use_ig:
                    loss = loss + T.scalar_mul(image_guided_loss(recon, arr.y), cfg.lambda_ig)
                if strat.tag in ("ewc", "lwf"):
                    loss = loss + strategy_regularizer(state, strat, cfg, arr=arr, recon=recon)
                if replay is not None:
                    loss = loss + replay
            if not np.isfinite(loss.item()):
                raise TrainingError(f"finetuning {task.name} diverged at iteration {info.iterations}")
            _apply_updates(state, loss)
        val = validation_loss(state, task)
        if val < best_loss:
            best_loss, best_state, info.best_epoch = val, state.recon.state(), epoch
    if best_state is not None:
        state.recon.load_state(best_state)
    state.check_frozen()
    return info


# --------------------------------------------------------------------------
# full sequence
# --------------------------------------------------------------------------


@dataclass
class Setup:
    """Everything that precedes finetuning and is shared by all strategies."""

    mask: SamplingMask
    recon_data: TaskData
    tasks: dict[str, TaskData]
    downstream: dict[str, Module]
    downstream_val: dict[str, float]
    recon_state: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray]
    pretrain_val_ssim: float
    seed: int


_SETUP_KEYS = (
    "image_size", "acceleration", "center_columns", "n_recon", "n_downstream",
    "n_downstream_pretrain", "cascades", "batch_size", "pretrain_epochs",
    "downstream_epochs", "lr_pretrain", "lr_downstream", "precision",
)
_SETUP_CACHE: dict[tuple, Setup] = {}

RECON_FRACTIONS = (0.6, 0.2, 0.2)


def _dtype(cfg: ExperimentConfig):
    return np.float32 if cfg.precision == "float32" else np.float64


def build_data(cfg: ExperimentConfig, seed: int):
    """Masked datasets: reconstruction, per-task finetuning, per-task downstream training."""
    dtype = _dtype(cfg)
    mask = make_cartesian_mask(cfg.image_size, cfg.acceleration, cfg.center_columns)
    recon_ds = gen_task_dataset(TaskKind.RECONSTRUCTION, cfg.n_recon, cfg.image_size, seed, RECON_FRACTIONS)
    recon = TaskData.from_dataset(RECON_TASK, undersample_dataset(recon_ds, mask), dtype)
    tasks, pre = {}, {}
    for name in cfg.task_order:
        kind = parse_kind(name)
        ft = gen_task_dataset(kind, cfg.n_downstream, cfg.image_size, seed)
        tasks[name] = TaskData.from_dataset(name, undersample_dataset(ft, mask), dtype)
        dn = gen_task_dataset(kind, cfg.n_downstream_pretrain, cfg.image_size, seed + 1000, (0.75, 0.125, 0.125))
        pre[name] = TaskData.from_dataset(name, undersample_dataset(dn, mask), dtype)
    return mask, recon, tasks, pre


def prepare(cfg: ExperimentConfig, seed: int, use_cache: bool = True) -> Setup:
    """Generate data, train and freeze downstream nets, pretrain ``f_R`` (stage 0)."""
    key = (seed,) + tuple(getattr(cfg, k) for k in _SETUP_KEYS)
    if use_cache and key in _SETUP_CACHE:
        return _SETUP_CACHE[key]
    dtype = _dtype(cfg)
    mask, recon_data, tasks, pre = build_data(cfg, seed)
    downstream, down_val = {}, {}
    for i, name in enumerate(sorted(tasks)):
        kind = parse_kind(name)
        net = init_model("segmentation" if kind.is_segmentation else "classification", seed * 10 + i, dtype=dtype)
        net, metric = pretrain_downstream(net, pre[name], cfg.downstream_epochs, cfg.lr_downstream, seed, cfg.batch_size)
        downstream[name], down_val[name] = net, metric
        log.info("seed %d: downstream %s val %s = %.4f", seed, name, kind.metric, metric)
    recon = init_model("recon", seed, cascades=cfg.cascades, dtype=dtype)
    state = TrainState(recon, Adam(recon.parameters(), lr=cfg.lr_pretrain), mask, seed=seed)
    val_ssim = pretrain_recon(state, recon_data, cfg.pretrain_epochs, cfg)
    log.info("seed %d: pretrained recon val SSIM %.4f", seed, val_ssim)
    setup = Setup(mask, recon_data, tasks, downstream, down_val, recon.state(), state.optimizer.state(), val_ssim, seed)
    if use_cache:
        _SETUP_CACHE[key] = setup
    return setup


def clear_setup_cache() -> None:
    _SETUP_CACHE.clear()


def initial_state(setup: Setup, cfg: ExperimentConfig) -> TrainState:
    recon = init_model("recon", setup.seed, cascades=cfg.cascades, dtype=_dtype(cfg))
    recon.load_state(setup.recon_state)
    opt = Adam(recon.parameters(), lr=cfg.lr_pretrain)
    opt.load_state(setup.optimizer_state)
    hashes = {k: n.param_hash() for k, n in setup.downstream.items()}
    return TrainState(recon, opt, setup.mask, dict(setup.downstream), hashes, stage=0, seed=setup.seed)


@dataclass
class RunState:
    """Mutable state of one sequential run; everything a resume needs."""

    state: TrainState
    buffer: ReplayBuffer | None
    strategy: StrategyState
    traces: dict[str, MetricTrace]
    baseline: dict[str, float]
    stage_logs: list[StageLog] = field(default_factory=list)


@dataclass
class SequenceResult:
    cfg: ExperimentConfig
    seed: int
    traces: dict[str, MetricTrace]
    baseline: dict[str, float]
    state: TrainState
    buffer: ReplayBuffer | None
    stage_logs: list[StageLog]

    def fm_trace(self, task: str) -> MetricTrace:
        tr = self.traces[task]
        if task == RECON_TASK and not self.cfg.fm_include_pretrain:
            return tr.since(1)
        return tr

    def last(self, task: str) -> float:
        return last_metric(self.traces[task])

    def forgetting(self, task: str) -> float | None:
        return forgetting_measure(self.fm_trace(task))

    def theta_hash(self) -> str:
        return self.state.recon.param_hash()


def _task(setup: Setup, name: str) -> TaskData:
    return setup.recon_data if name == RECON_TASK else setup.tasks[name]


def _end_of_stage(run: RunState, setup: Setup, cfg: ExperimentConfig, name: str) -> None:
    """Buffer insertion and EWC consolidation after a completed stage."""
    state, stage = run.state, run.state.stage
    data = _task(setup, name)
    if run.buffer is not None and (name != RECON_TASK or cfg.buffer_include_recon):
        buffer_update(run.buffer, data, state.recon, state.mask, stream(state.seed, stage, _BUFFER))
    if cfg.strategy == "ewc":
        f = fisher_diagonal(state, data, cfg, stream(state.seed, stage, _FISHER))
        strat = run.strategy
        strat.fisher = f if strat.fisher is None else [a + b for a, b in zip(strat.fisher, f)]
        strat.anchor = [p.data.copy() for p in state.params()]


def start_run(cfg: ExperimentConfig, setup: Setup) -> RunState:
    state = initial_state(setup, cfg)
    buf = ReplayBuffer(cfg.buffer_size) if cfg.uses_replay else None
    run = RunState(state, buf, StrategyState(cfg.strategy), {}, {})
    run.traces[RECON_TASK] = MetricTrace(RECON_TASK, "SSIM")
    run.traces[RECON_TASK].append(0, evaluate_task(state, setup.recon_data))
    run.baseline[RECON_TASK] = run.traces[RECON_TASK].values[0]
    for name in cfg.task_order:
        run.baseline[name] = evaluate_task(state, setup.tasks[name])
    _end_of_stage(run, setup, cfg, RECON_TASK)
    return run


def run_stage(run: RunState, setup: Setup, cfg: ExperimentConfig, on_firing=None) -> None:
    state = run.state
    order = cfg.task_order
    s = state.stage + 1
    name = order[s - 1]
    state.stage = s
    strat = run.strategy
    if strat.tag == "lwf":
        strat.snapshot = copy.deepcopy(state.recon)
    try:
        info = finetune_task(state, setup.tasks[name], run.buffer, strat, ReplaySchedule(cfg.replay_period), cfg, on_firing)
    except (TrainingError, NonFiniteError) as exc:
        raise TrainingError(f"stage {s} ({name}): {exc}") from exc
    run.stage_logs.append(info)
    strat.learned.append(name)
    run.traces[name] = MetricTrace(name, parse_kind(name).metric)
    for t in (RECON_TASK,) + order[:s]:
        run.traces[t].append(s, evaluate_task(state, _task(setup, t)))
    if s < len(order):
        _end_of_stage(run, setup, cfg, name)


def run_sequence(
    cfg: ExperimentConfig,
    seed: int,
    setup: Setup | None = None,
    run: RunState | None = None,
    stop_after: int | None = None,
    on_firing=None,
) -> SequenceResult:
    """Pretrained ``f_R`` → finetune per task in order, evaluating every learned task after each stage.

    Pass ``run`` to continue a resumed run; ``stop_after`` ends after that stage.
    """
    setup = setup or prepare(cfg, seed)
    run = run or start_run(cfg, setup)
    last = len(cfg.task_order) if stop_after is None else min(stop_after, len(cfg.task_order))
    while run.state.stage < last:
        run_stage(run, setup, cfg, on_firing)
    return SequenceResult(cfg, seed, run.traces, run.baseline, run.state, run.buffer, run.stage_logs)


def result_from_run(cfg, seed, run: RunState) -> SequenceResult:
    return SequenceResult(cfg, seed, run.traces, run.baseline, run.state, run.buffer, run.stage_logs)
