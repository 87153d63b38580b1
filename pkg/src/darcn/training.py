"""Adam, the validation-driven learning-rate schedule, padded utterance
batches and the epoch loop with checkpoint/resume.

Resuming from ``last.ckpt`` is bit-identical to an uninterrupted run:
the checkpoint holds parameters, batch-norm statistics, Adam moments and
the schedule, and the shuffle of epoch ``e`` is seeded by ``(seed, e)``.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import Manifest, Record, mix_record
from .dsp import StftConfig, magnitude, stft
from .errors import ConfigError, ContractError, DataError, NumericalError
from .model import ArchConfig, DarcnModel, accumulated_loss, preset
from .tensor import Tensor

log = logging.getLogger(__name__)

MAX_EPOCHS = 50
TARGET_RMS = 1.0


class Adam:
    """Bias-corrected Adam over a fixed list of named parameters."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr, self.betas, self.eps = float(lr), tuple(betas), float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        missing = [n for n, p in zip(self.names, self.params) if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for {len(missing)} parameter(s), e.g. {missing[0]}")
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for n, m, v in zip(self.names, self.m, self.v):
            out[f"adam.m.{n}"] = m
            out[f"adam.v.{n}"] = v
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step: int, lr: float) -> None:
        for i, n in enumerate(self.names):
            try:
                m, v = arrays[f"adam.m.{n}"], arrays[f"adam.v.{n}"]
            except KeyError:
                raise DataError(f"checkpoint lacks optimizer moments for {n}") from None
            if m.shape != self.m[i].shape or v.shape != self.v[i].shape:
                raise DataError(f"optimizer moment shape mismatch for {n}")
            self.m[i] = m.astype(self.m[i].dtype)
            self.v[i] = v.astype(self.v[i].dtype)
        self.step_count, self.lr = int(step), float(lr)


def adam_step(opt: Adam) -> None:
    opt.step()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Action(enum.Enum):
    CONTINUE = "continue"
    HALVE_LR = "halve_lr"
    STOP = "stop"


@dataclass
class ScheduleState:
    best_val: float = math.inf
    epochs_since_best: int = 0
    halvings_done: int = 0
    epochs_done: int = 0
    halve_after: int = 3
    stop_after: int = 10
    max_epochs: int = MAX_EPOCHS


def epoch_end(sched: ScheduleState, val_loss: float) -> Action:
    """Update the schedule with one epoch's validation loss.

    An increment is an epoch whose loss exceeds the best so far; a new
    best resets the count. Every ``halve_after`` increments halve the
    rate; ``stop_after`` increments, or the epoch cap, stop training.
    """
    if not math.isfinite(val_loss):
        raise NumericalError(f"validation loss is {val_loss} after epoch {sched.epochs_done + 1}")
    sched.epochs_done += 1
    if val_loss < sched.best_val:
        sched.best_val = float(val_loss)
        sched.epochs_since_best = 0
    elif val_loss > sched.best_val:
        sched.epochs_since_best += 1
    if sched.epochs_since_best >= sched.stop_after or sched.epochs_done >= sched.max_epochs:
        return Action.STOP
    if sched.epochs_since_best and sched.epochs_since_best % sched.halve_after == 0:
        sched.halvings_done += 1
        return Action.HALVE_LR
    return Action.CONTINUE


@dataclass
class Utterance:
    noisy: np.ndarray  # (T, F) magnitude
    clean: np.ndarray  # (T, F) magnitude
    name: str = ""

    @property
    def frames(self) -> int:
        return self.noisy.shape[0]


@dataclass
class Batch:
    noisy: np.ndarray  # (B, T_max, F)
    clean: np.ndarray
    lengths: np.ndarray  # (B,)
    mask: np.ndarray  # (B, T_max), 1 on valid frames

    @property
    def size(self) -> int:
        return len(self.lengths)


def level_gain(mag_noisy: np.ndarray, target: float = TARGET_RMS) -> float:
    """Gain that brings the RMS of the noisy magnitude to ``target``."""
    rms = float(np.sqrt(np.mean(np.square(mag_noisy))))
    return target / rms if rms > 0 else 1.0


def features(noisy: np.ndarray, clean: np.ndarray, cfg: StftConfig, name: str = "") -> Utterance:
    """Noisy/clean magnitudes, both scaled by the noisy level gain."""
    mx, ms = magnitude(stft(noisy, cfg)), magnitude(stft(clean, cfg))
    g = level_gain(mx)
    return Utterance(mx * g, ms * g, name)


def load_features(records: Sequence[Record], cfg: StftConfig, strict: bool = True) -> list[Utterance]:
    """Mix and analyse every record; unreadable records abort or are skipped with a warning."""
    out = []
    for rec in records:
        try:
            noisy, clean = mix_record(rec)
        except DataError as exc:
            if strict:
                raise
            log.warning("skipping %s: %s", rec.clean, exc)
            continue
        out.append(features(noisy, clean, cfg, rec.clean))
    if not out:
        raise DataError("no usable utterances")
    return out


def pad_batch(items: Sequence[Utterance], dtype=np.float32) -> Batch:
    if not items:
        raise ContractError("cannot batch zero utterances")
    lengths = np.array([u.frames for u in items])
    f = items[0].noisy.shape[1]
    t = int(lengths.max())
    noisy = np.zeros((len(items), t, f), dtype=dtype)
    clean = np.zeros_like(noisy)
    mask = np.zeros((len(items), t), dtype=dtype)
    for i, u in enumerate(items):
        noisy[i, :u.frames] = u.noisy
        clean[i, :u.frames] = u.clean
        mask[i, :u.frames] = 1.0
    return Batch(noisy, clean, lengths, mask)


def make_batches(items: Sequence[Utterance], batch_size: int = 4, seed: int | None = 0,
                 dtype=np.float32) -> Iterator[Batch]:
    """Shuffle under ``seed`` (no shuffle for ``None``) and pad each batch to its own longest item."""
    if not items:
        raise DataError("cannot batch an empty set")
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    order = np.arange(len(items)) if seed is None else np.random.default_rng(seed).permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield pad_batch([items[i] for i in order[start:start + batch_size]], dtype)


@dataclass
class TrainConfig:
    """Training run settings; serialized as a flat JSON object."""

    preset: str = "tiny"
    stages: int | None = None
    lr: float = 1e-3
    batch_size: int = 4
    seed: int = 0
    max_epochs: int = MAX_EPOCHS
    halve_after: int = 3
    stop_after: int = 10
    lambdas: list[float] | None = None
    clip_norm: float | None = None
    strict: bool = True
    dtype: str = "float32"
    time_budget_s: float | None = None
    train_manifest: str | None = None
    val_manifest: str | None = None
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.max_epochs < 1 or self.max_epochs > MAX_EPOCHS:
            raise ConfigError(f"max_epochs must lie in [1, {MAX_EPOCHS}], got {self.max_epochs}")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    def arch(self) -> ArchConfig:
        cfg = preset(self.preset)
        return cfg if self.stages is None else replace(cfg, stages=int(self.stages))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


def model_arrays(model: DarcnModel) -> dict[str, np.ndarray]:
    out = {f"param.{n}": p.data for n, p in model.named_parameters()}
    for n, s in model.named_stats():
        out[f"bn.{n}.mean"] = s.mean
        out[f"bn.{n}.var"] = s.var
        out[f"bn.{n}.updates"] = np.array([s.updates], dtype=np.float32)
    return out


def load_model_arrays(model: DarcnModel, arrays: dict[str, np.ndarray]) -> None:
    for n, p in model.named_parameters():
        key = f"param.{n}"
        if key not in arrays:
            raise DataError(f"checkpoint lacks {key}")
        if arrays[key].shape != p.data.shape:
            raise ContractError(f"{key}: checkpoint shape {arrays[key].shape} != model shape {p.data.shape}")
        p.data = arrays[key].astype(p.data.dtype)
    for n, s in model.named_stats():
        try:
            s.mean = arrays[f"bn.{n}.mean"].astype(s.mean.dtype)
            s.var = arrays[f"bn.{n}.var"].astype(s.var.dtype)
            s.updates = int(arrays[f"bn.{n}.updates"][0])
        except KeyError:
            raise DataError(f"checkpoint lacks batch-norm statistics for {n}") from None


def save_checkpoint(path, model: DarcnModel, opt: Adam | None = None, sched: ScheduleState | None = None,
                    extra: dict | None = None) -> Path:
    arrays = model_arrays(model)
    meta = {"arch": model.cfg.to_dict(), "dtype": np.dtype(model.dtype).name}
    if opt is not None:
        arrays.update(opt.state())
        meta["adam"] = {"step": opt.step_count, "lr": opt.lr, "betas": list(opt.betas), "eps": opt.eps}
    if sched is not None:
        meta["schedule"] = asdict(sched)
    if extra:
        meta.update(extra)
    return checkpoint.save(path, arrays, meta)


def load_model(path, expect_freq: int | None = None) -> tuple[DarcnModel, dict[str, np.ndarray], dict]:
    arrays, meta = checkpoint.load(path)
    if not meta or "arch" not in meta:
        raise DataError(f"{path}: checkpoint has no architecture record")
    cfg = ArchConfig.from_dict(meta["arch"])
    if expect_freq is not None and cfg.n_freq != expect_freq:
        raise ContractError(f"checkpoint model has F={cfg.n_freq}, features have F={expect_freq}")
    model = DarcnModel(cfg, seed=0, dtype=meta.get("dtype", "float32"))
    load_model_arrays(model, arrays)
    return model, arrays, meta


@dataclass
class EpochResult:
    epoch: int
    lr: float
    train_loss: float
    train_stage: list[float]
    val_loss: float
    val_stage: list[float]
    action: str = ""

    def line(self) -> str:
        cols = [str(self.epoch), f"{self.lr:.6g}", f"{self.train_loss:.8f}"]
        cols += [f"{d:.8f}" for d in self.train_stage]
        cols.append(f"{self.val_loss:.8f}")
        cols += [f"{d:.8f}" for d in self.val_stage]
        return "\t".join(cols)


def _finite(x: float, what: str) -> float:
    if not math.isfinite(x):
        raise NumericalError(f"{what} is {x}")
    return x


def train_step(model: DarcnModel, opt: Adam, batch: Batch, stages: int, lambdas=None,
               clip_norm: float | None = None) -> tuple[float, list[float]]:
    model.train()
    model.zero_grad()
    traces = model(batch.noisy, stages, mask=batch.mask)
    loss = accumulated_loss(traces, batch.clean, lambdas, batch.mask)
    value = _finite(loss.item(), "training loss")
    T.backward(loss)
    if clip_norm:
        clip_grad_norm(opt.params, clip_norm)
    opt.step()
    return value, [tr.stage_loss.item() for tr in traces]


def validate(model: DarcnModel, items: Sequence[Utterance], stages: int, batch_size: int = 4,
             lambdas=None) -> tuple[float, list[float]]:
    """Accumulated loss and per-stage D over all valid entries, BN in eval mode."""
    model.eval()
    lambdas = [1.0] * stages if lambdas is None else list(lambdas)
    sums = np.zeros(stages)
    count = 0.0
    with T.no_grad():
        for batch in make_batches(items, batch_size, seed=None, dtype=model.dtype):
            traces = model(batch.noisy, stages, mask=batch.mask)
            m = batch.mask[:, :, None]
            for i, tr in enumerate(traces):
                sums[i] += float(np.sum((tr.estimate.data - batch.clean) ** 2 * m, dtype=np.float64))
            count += float(batch.mask.sum()) * batch.noisy.shape[2]
    model.train()
    stage = list(sums / count)
    return _finite(float(np.dot(lambdas, stage)), "validation loss"), stage


def _items(manifest, cfg: StftConfig, strict: bool) -> list[Utterance]:
    records = manifest if isinstance(manifest, (list, Manifest)) else Manifest.load(manifest)
    if items_are_features(records):
        return list(records)
    return load_features(records, cfg, strict)


def items_are_features(seq) -> bool:
    return bool(seq) and isinstance(seq[0], Utterance)


@dataclass
class TrainResult:
    best: Path
    last: Path
    log: Path
    history: list[EpochResult] = field(default_factory=list)
    stopped: str = ""


def train(config: TrainConfig, train_set=None, val_set=None, resume: bool = False,
          model: DarcnModel | None = None) -> TrainResult:
    """Run the epoch loop; returns checkpoint/log paths and the history.

    ``train_set``/``val_set`` may be manifests, manifest paths or
    precomputed :class:`Utterance` lists; they default to the paths in the
    config. With ``resume`` the run continues from ``out_dir/last.ckpt``.
    """
    arch = config.arch()
    stft_cfg = arch.stft_config()
    train_set = train_set if train_set is not None else config.train_manifest
    val_set = val_set if val_set is not None else config.val_manifest
    if train_set is None or val_set is None:
        raise ConfigError("training needs both a train and a validation manifest")
    train_items = _items(train_set, stft_cfg, config.strict)
    val_items = _items(val_set, stft_cfg, config.strict)
    for u in train_items[:1] + val_items[:1]:
        if u.noisy.shape[1] != arch.n_freq:
            raise ContractError(f"features have F={u.noisy.shape[1]}, preset {arch.name} expects {arch.n_freq}")

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last, best, log_path = out / "last.ckpt", out / "best.ckpt", out / "train.log"
    model = model if model is not None else DarcnModel(arch, seed=config.seed, dtype=config.dtype)
    opt = Adam(list(model.named_parameters()), lr=config.lr)
    sched = ScheduleState(halve_after=config.halve_after, stop_after=config.stop_after,
                          max_epochs=config.max_epochs)
    history: list[EpochResult] = []
    if resume and last.exists():
        arrays, meta = checkpoint.load(last)
        load_model_arrays(model, arrays)
        opt.load_state(arrays, meta["adam"]["step"], meta["adam"]["lr"])
        # limits come from the current config, progress from the checkpoint
        sched = replace(ScheduleState(**meta["schedule"]), halve_after=config.halve_after,
                        stop_after=config.stop_after, max_epochs=config.max_epochs)
        history = [EpochResult(**h) for h in meta.get("history", [])]
        log_path.write_text("".join(h.line() + "\n" for h in history), encoding="utf-8")
        if sched.epochs_since_best >= sched.stop_after or sched.epochs_done >= sched.max_epochs:
            return TrainResult(best, last, log_path, history, "schedule")
    else:
        log_path.write_text("", encoding="utf-8")

    stages = arch.stages
    extra = {"train_config": config.to_dict()}
    started = time.monotonic()
    stopped = ""
    while not stopped:
        epoch = sched.epochs_done + 1
        lr = opt.lr
        tot, per, n = 0.0, np.zeros(stages), 0
        for batch in make_batches(train_items, config.batch_size, seed=_epoch_seed(config.seed, epoch),
                                  dtype=model.dtype):
            value, stage_vals = train_step(model, opt, batch, stages, config.lambdas, config.clip_norm)
            tot += value
            per += stage_vals
            n += 1
        val_loss, val_stage = validate(model, val_items, stages, config.batch_size, config.lambdas)
        improved = val_loss < sched.best_val
        action = epoch_end(sched, val_loss)
        if action is Action.HALVE_LR:
            opt.lr *= 0.5
        result = EpochResult(epoch, lr, tot / n, list(per / n), val_loss, val_stage, action.value)
        history.append(result)
        with log_path.open("a", encoding="utf-8") as fh:
            fh.write(result.line() + "\n")
        log.info("epoch %d  lr %.3g  train %.6f  val %.6f  %s", epoch, lr, result.train_loss, val_loss,
                 action.value)
        if action is Action.STOP:
            stopped = "schedule"
        elif config.time_budget_s is not None and time.monotonic() - started >= config.time_budget_s:
            stopped = "time budget"
        meta = dict(extra, history=[asdict(h) for h in history], stopped=stopped)
        if improved:
            save_checkpoint(best, model, opt, sched, meta)
        save_checkpoint(last, model, opt, sched, meta)
    return TrainResult(best, last, log_path, history, stopped)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def configure_threads(n: int | None):
    """Cap BLAS/OpenMP pools at ``n`` threads; returns the limiter (keep a reference)."""
    if n is None:
        return None
    from threadpoolctl import threadpool_limits

    os.environ["OMP_NUM_THREADS"] = str(n)
    return threadpool_limits(limits=n)
