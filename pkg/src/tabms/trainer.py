"""Three-stage curriculum pretraining.

Every batch is a pure function of (seed, stage, step), so a run resumed from a
checkpoint replays exactly the losses the uninterrupted run would have seen.
A background thread prefetches upcoming batches through a bounded queue.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np
import torch

from .config import ModelConfig
from .icl_predictor import icl_loss_from_logits
from .model import TabularICLModel, collate
from .scm_datagen import DegenerateTarget, ScmConfig, generate_episode
from .tasks import TabularTask

log = logging.getLogger(__name__)

CKPT_FORMAT = "tabms-checkpoint"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedules and clipping


def lr_schedule(
    stage: int,
    step: int,
    total_steps: int,
    base_lr: float,
    warmup_frac: float = 0.05,
    poly_power: float = 1.0,
    poly_end: float = 0.1,
) -> float:
    """Stage 1: linear warmup then cosine to 0. Stage 2: polynomial decay to poly_end * base. Stage 3: constant."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if stage == 1:
        warmup = max(1, math.ceil(warmup_frac * total_steps))
        if step < warmup:
            return base_lr * step / warmup
        span = max(total_steps - warmup, 1)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))
    if stage == 2:
        frac = step / max(total_steps, 1)
        return base_lr * (poly_end + (1.0 - poly_end) * (1.0 - frac) ** poly_power)
    if stage == 3:
        return base_lr
    raise ValueError(f"unknown stage {stage}")


def clip_gradients(params: Iterable[torch.nn.Parameter], max_norm: float = 1.0) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm; returns the norm before clipping."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


# ---------------------------------------------------------------------------
# stage configuration


@dataclass
class SizeSampler:
    kind: str = "fixed"  # fixed | log_uniform | uniform
    lo: int = 1024
    hi: int = 1024

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return int(self.lo)
        if self.kind == "log_uniform":
            return int(round(math.exp(rng.uniform(math.log(self.lo), math.log(self.hi)))))
        if self.kind == "uniform":
            return int(rng.integers(self.lo, self.hi + 1))
        raise ValueError(f"unknown size sampler {self.kind!r}")


@dataclass
class StageConfig:
    stage: int
    steps: int
    datasets_per_step: int
    micro_batches: int
    sizes: SizeSampler
    base_lr: float
    frozen: tuple = ()
    train_fraction: tuple = (0.5, 0.8)
    max_norm: float = 1.0

    def __post_init__(self):
        if isinstance(self.sizes, dict):
            self.sizes = SizeSampler(**self.sizes)
        self.frozen = tuple(self.frozen)
        if self.datasets_per_step % self.micro_batches:
            raise ValueError("datasets_per_step must split evenly into micro-batches")

    @property
    def per_micro(self) -> int:
        return self.datasets_per_step // self.micro_batches

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        d["train_fraction"] = list(self.train_fraction)
        return d


FROZEN_STAGE3 = ("col", "row", "memory")


def full_curriculum() -> list[StageConfig]:
    return [
        StageConfig(1, 25_000, 2048, 8, SizeSampler("fixed", 1024, 1024), 1e-4),
        StageConfig(2, 2_000, 512, 1, SizeSampler("log_uniform", 1024, 40_000), 1e-5),
        StageConfig(3, 50, 512, 1, SizeSampler("uniform", 40_000, 60_000), 1e-5, frozen=FROZEN_STAGE3),
    ]


def desk_curriculum() -> list[StageConfig]:
    return [
        StageConfig(1, 6000, 4, 1, SizeSampler("fixed", 128, 128), 3e-4),
        StageConfig(2, 40, 4, 1, SizeSampler("log_uniform", 128, 512), 1e-4),
        StageConfig(3, 10, 2, 1, SizeSampler("uniform", 512, 768), 1e-4, frozen=FROZEN_STAGE3),
    ]


CURRICULA = {"full": full_curriculum, "desk": desk_curriculum}


# ---------------------------------------------------------------------------
# data sources


class DataSource(Protocol):
    def sample(self, n_datasets: int, n: int, n_train: int, rng: np.random.Generator) -> list[TabularTask]: ...


def _resplit(task: TabularTask, n: int, n_train: int, rng: np.random.Generator, tries: int = 20) -> Optional[TabularTask]:
    """Random n-row view of a task with every remaining class present among the first n_train rows."""
    n = min(n, task.n)
    n_train = min(n_train, n - 1)
    for _ in range(tries):
        rows = rng.choice(task.n, size=n, replace=False)
        y = task.y[rows]
        present = np.unique(y[:n_train])
        if len(present) < 2 or not np.isin(y, present).all():
            continue
        sub = task.subset(rows, n_train)
        sub.y = np.searchsorted(present, y).astype(np.int64)
        sub.meta["K"] = len(present)
        return sub
    return None


class EpisodePool:
    """Draws row-subsampled, re-split views of a fixed set of episodes."""

    def __init__(self, episodes: Sequence[TabularTask]):
        if not episodes:
            raise ValueError("empty episode pool")
        self.episodes = list(episodes)

    def sample(self, n_datasets, n, n_train, rng):
        out = []
        n = min(n, min(t.n for t in self.episodes))
        n_train = min(n_train, n - 1)
        while len(out) < n_datasets:
            task = _resplit(self.episodes[int(rng.integers(len(self.episodes)))], n, n_train, rng)
            if task is not None:
                out.append(task)
        return out


class SyntheticSource:
    """Fresh prior draws for every dataset."""

    def __init__(self, cfg: Optional[ScmConfig] = None, prior: str = "mix"):
        self.cfg = cfg or ScmConfig()
        self.prior = prior

    def sample(self, n_datasets, n, n_train, rng):
        from dataclasses import replace

        cfg = replace(self.cfg, n_samples=n)
        out = []
        while len(out) < n_datasets:
            try:
                task = generate_episode(cfg, int(rng.integers(2**32)), self.prior)
            except DegenerateTarget:
                continue
            task = _resplit(task, n, n_train, rng)
            if task is not None:
                out.append(task)
        return out


def step_batches(source: DataSource, stage: StageConfig, step: int, seed: int) -> list[list[TabularTask]]:
    """Micro-batches for one optimizer step; each shares one (n, n_train)."""
    rng = np.random.default_rng([seed, stage.stage, step])
    batches = []
    for _ in range(stage.micro_batches):
        n = stage.sizes.sample(rng)
        n_train = int(round(rng.uniform(*stage.train_fraction) * n))
        batches.append(source.sample(stage.per_micro, n, max(n_train, 2), rng))
    return batches


class Prefetcher:
    """Bounded producer/consumer queue over step_batches for steps [start, stop)."""

    def __init__(self, source, stage, seed, start, stop, depth: int = 2):
        self.q: queue.Queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(
            target=self._run, args=(source, stage, seed, start, stop), daemon=True
        )
        self._thread.start()

    def _run(self, source, stage, seed, start, stop):
        for step in range(start, stop):
            if self._stop.is_set():
                return
            try:
                item = (step, step_batches(source, stage, step, seed))
            except Exception as exc:  # surfaced in the consumer
                item = (step, exc)
            while not self._stop.is_set():
                try:
                    self.q.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue

    def get(self):
        step, item = self.q.get()
        if isinstance(item, Exception):
            raise item
        return step, item

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, model: TabularICLModel, trainer_state: Optional[dict] = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = {"format": CKPT_FORMAT, "version": CKPT_VERSION, "tensors": model.state_dict()}
    tmp = path / "model.pt.tmp"
    torch.save(blob, tmp)
    tmp.replace(path / "model.pt")
    (path / "config.json").write_text(json.dumps(model.cfg.to_dict(), sort_keys=True, indent=2))
    if trainer_state is not None:
        torch.save(trainer_state, path / "trainer.pt")


def load_checkpoint(path: Path) -> TabularICLModel:
    path = Path(path)
    try:
        cfg = ModelConfig.from_dict(json.loads((path / "config.json").read_text()))
        blob = torch.load(path / "model.pt", map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path} is not a {CKPT_FORMAT} file")
    if blob.get("version") != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('version')}")
    model = TabularICLModel(cfg)
    try:
        model.load_state_dict(blob["tensors"])
    except RuntimeError as exc:
        raise CheckpointError(str(exc)) from exc
    return model


# ---------------------------------------------------------------------------
# training


def batch_loss(model: TabularICLModel, tasks: Sequence[TabularTask], step: int = 0) -> torch.Tensor:
    X, y_train, y_test, d_valid, K = collate(tasks)
    logits = model(X, y_train, d_valid=d_valid, step=step)
    return icl_loss_from_logits(logits, y_test, K, model.cfg.temperature)


def accumulate_gradients(model: TabularICLModel, micro_batches: Sequence[Sequence[TabularTask]], step: int = 0) -> float:
    """Backprop every micro-batch, weighted so the sum equals the gradient of the
    mean loss over all test positions of the whole step. Returns that mean loss."""
    counts = [sum(t.n - t.n_train for t in mb) for mb in micro_batches]
    total = sum(counts)
    loss_sum = 0.0
    for mb, c in zip(micro_batches, counts):
        loss = batch_loss(model, mb, step) * (c / total)
        loss.backward()
        loss_sum += float(loss.detach())
    return loss_sum


def set_frozen(model: TabularICLModel, frozen: Sequence[str]) -> list[torch.nn.Parameter]:
    """Disable gradients for the named top-level submodules; return the trainable parameters."""
    for name, module in model.named_children():
        for p in module.parameters():
            p.requires_grad_(name not in frozen)
    return [p for p in model.parameters() if p.requires_grad]


@dataclass
class TrainLog:
    path: Optional[Path] = None
    records: list = field(default_factory=list)

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _diagnostic_dump(model, stage, step, loss, out_dir):
    info = {
        "stage": stage.stage, "step": step, "loss": loss,
        "param_norms": {n: float(p.detach().norm()) for n, p in model.named_parameters()},
    }
    if out_dir is not None:
        (Path(out_dir) / "divergence.json").write_text(json.dumps(info, indent=2))
    return info


def train_stage(
    model: TabularICLModel,
    stage: StageConfig,
    source: DataSource,
    seed: int = 0,
    log_sink: Optional[TrainLog] = None,
    out_dir: Optional[Path] = None,
    start_step: int = 0,
    optimizer_state: Optional[dict] = None,
    ckpt_every: int = 0,
    stop_after: Optional[int] = None,
) -> dict:
    """Run optimizer steps [start_step, stage.steps) and return the trainer state."""
    log_sink = log_sink or TrainLog()
    params = set_frozen(model, stage.frozen)
    opt = torch.optim.Adam(params, lr=stage.base_lr)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)
    model.train()
    stop = stage.steps if stop_after is None else min(stage.steps, stop_after)
    fetch = Prefetcher(source, stage, seed, start_step, stop)
    state = {"stage": stage.stage, "step": start_step}
    try:
        for _ in range(start_step, stop):
            step, micro = fetch.get()
            t0 = time.perf_counter()
            lr = lr_schedule(stage.stage, step, stage.steps, stage.base_lr)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad(set_to_none=True)
            loss = accumulate_gradients(model, micro, step=_mask_step(stage, step))
            if not math.isfinite(loss):
                info = _diagnostic_dump(model, stage, step, loss, out_dir)
                raise TrainingDiverged(f"non-finite loss at stage {stage.stage} step {step}: {info['loss']}")
            grad_norm = clip_gradients(params, stage.max_norm)
            opt.step()
            log_sink.write(dict(stage=stage.stage, step=step, lr=lr, loss=loss, grad_norm=grad_norm,
                                n=micro[0][0].n, seconds=round(time.perf_counter() - t0, 4)))
            state = {"stage": stage.stage, "step": step + 1, "optimizer": opt.state_dict()}
            if ckpt_every and out_dir is not None and (step + 1) % ckpt_every == 0 and step + 1 < stage.steps:
                save_checkpoint(Path(out_dir) / "latest", model, _resume_state(state, seed))
    finally:
        fetch.close()
        set_frozen(model, ())
    return state


def _mask_step(stage: StageConfig, step: int) -> int:
    # distinct random-link draws per (stage, step); step 0 of stage 0 is reserved for inference
    return stage.stage * 1_000_000 + step + 1


def _resume_state(state: dict, seed: int) -> dict:
    return dict(state, seed=seed, rng=torch.get_rng_state())


def pretrain(
    model: TabularICLModel,
    curriculum: Sequence[StageConfig],
    source: DataSource,
    out_dir: Path,
    seed: int = 0,
    ckpt_every: int = 0,
    resume: bool = True,
    stop_after: Optional[tuple] = None,
) -> TabularICLModel:
    """Run every stage in order, persisting ``stage{k}/`` after each.

    With ``resume`` the run continues from ``latest/`` (mid-stage) or the last
    finished stage. ``stop_after=(stage, step)`` halts early, for testing resumption.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "curriculum.json").write_text(json.dumps([s.to_dict() for s in curriculum], indent=2))
    log_sink = TrainLog(out_dir / "train_log.jsonl")
    start_stage, start_step, opt_state = _resume_point(model, curriculum, out_dir) if resume else (0, 0, None)
    for k, stage in enumerate(curriculum):
        if k < start_stage:
            continue
        first = start_step if k == start_stage else 0
        halt = stop_after[1] if stop_after and stop_after[0] == stage.stage else None
        state = train_stage(
            model, stage, source, seed, log_sink, out_dir, first, opt_state if k == start_stage else None,
            ckpt_every, halt,
        )
        if halt is not None and state["step"] < stage.steps:
            save_checkpoint(out_dir / "latest", model, _resume_state(state, seed))
            return model
        save_checkpoint(out_dir / f"stage{stage.stage}", model, {"stage": stage.stage, "step": stage.steps, "done": True})
        latest = out_dir / "latest"
        if latest.exists():
            for f in latest.iterdir():
                f.unlink()
            latest.rmdir()
    save_checkpoint(out_dir / "final", model)
    return model


def _resume_point(model, curriculum, out_dir: Path):
    latest = out_dir / "latest"
    if (latest / "trainer.pt").exists():
        loaded = load_checkpoint(latest)
        model.load_state_dict(loaded.state_dict())
        st = torch.load(latest / "trainer.pt", weights_only=False)
        idx = [s.stage for s in curriculum].index(st["stage"])
        log.info("resuming stage %d at step %d", st["stage"], st["step"])
        return idx, st["step"], st.get("optimizer")
    for k in reversed(range(len(curriculum))):
        done = out_dir / f"stage{curriculum[k].stage}"
        if (done / "model.pt").exists():
            model.load_state_dict(load_checkpoint(done).state_dict())
            return k + 1, 0, None
    return 0, 0, None
