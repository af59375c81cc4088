"""Training loop: Lp reconstruction loss, Adam, cosine-annealed learning rate
and a self-describing binary checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import struct
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SyntheticDataset, derive_seed, sample_patch_batch
from .model import ModelConfig, MSANet, ParamStore
from .tensor import ContractError, ShapeError, Tensor, backward, make_result

logger = logging.getLogger(__name__)

MAGIC = b"MSAN"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# loss and schedule
# ---------------------------------------------------------------------------


def loss_lp(y: Tensor, yhat: Tensor, p: int = 2) -> Tensor:
    """Mean of ``|y - yhat|**p`` over all elements, for ``p`` in {1, 2}.

    The subgradient of the L1 loss at a zero residual is 0.
    """
    if y.shape != yhat.shape:
        raise ShapeError(f"loss operands differ in shape: {y.shape} vs {yhat.shape}")
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    r = y.data.astype(np.float64) - yhat.data.astype(np.float64)
    n = r.size
    value = np.abs(r).mean() if p == 1 else (r * r).mean()
    dt = yhat.data.dtype

    def bw(g):
        gs = float(g.reshape(-1)[0]) / n
        d = (np.sign(r) if p == 1 else 2.0 * r) * gs
        return d.astype(dt), (-d).astype(dt)

    return make_result(np.full((1, 1, 1, 1), value, dtype=dt), [y, yhat], bw, f"loss_l{p}")


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """Single-cycle cosine annealing from ``lr0`` at step 0 to 0 at ``total``."""
    if total <= 0:
        raise ValueError("total must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total)) / 2.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m1: "OrderedDict[str, np.ndarray]"
    m2: "OrderedDict[str, np.ndarray]"
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, **hyper) -> "OptimState":
        m1 = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())
        m2 = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())
        return cls(m1, m2, **hyper)


def adam_step(params: ParamStore, opt: OptimState, lr: float) -> None:
    """One bias-corrected Adam update. Gradients are left in place."""
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {name} has no gradient")
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.t
    c2 = 1.0 - b2**opt.t
    step = np.float32(lr / c1)
    for name, t in params.items():
        g = t.grad
        m1 = opt.m1[name]
        m2 = opt.m2[name]
        m1 *= np.float32(b1)
        m1 += np.float32(1.0 - b1) * g
        m2 *= np.float32(b2)
        m2 += np.float32(1.0 - b2) * (g * g)
        denom = np.sqrt(m2 / np.float32(c2)) + np.float32(opt.eps)
        t.data = t.data - step * m1 / denom


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    total = math.sqrt(sum(float((t.grad.astype(np.float64) ** 2).sum()) for _, t in params.items()))
    if total > max_norm > 0:
        f = np.float32(max_norm / (total + 1e-12))
        for _, t in params.items():
            t.grad = t.grad * f
    return total


# ---------------------------------------------------------------------------
# schedule / report
# ---------------------------------------------------------------------------


@dataclass
class TrainSchedule:
    epochs: int = 30
    steps_per_epoch: int = 20
    lr0: float = 1e-4
    loss_p: int = 2
    batch: int = 8
    patch: int = 64
    seed: int = 0
    clip_norm: float | None = None
    keep_last: int = 3

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def validate(self) -> "TrainSchedule":
        from .blocks import ConfigError

        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.lr0 < 0:
            raise ConfigError("lr0 must be non-negative")
        if self.loss_p not in (1, 2):
            raise ConfigError("loss_p must be 1 or 2")
        if self.batch < 1 or self.patch < 1:
            raise ConfigError("batch and patch must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        from .blocks import ConfigError

        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainingReport:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["epoch,mean_loss,lr,seconds"]
        lines += [f"{e},{loss:.9g},{lr:.9g},{s:.3f}" for e, loss, lr, s in self.rows]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointFormatError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    def __init__(self, field_name: str, stored, expected):
        super().__init__(f"checkpoint config differs in field {field_name!r}: stored {stored!r}, expected {expected!r}")
        self.field = field_name


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    m1: "OrderedDict[str, np.ndarray]"
    m2: "OrderedDict[str, np.ndarray]"
    state: dict

    def build_model(self) -> MSANet:
        model = MSANet(self.config, seed=0)
        model.params.load_state_dict(self.params)
        return model

    def optim_state(self) -> OptimState:
        s = self.state
        if not self.m1:
            raise CheckpointFormatError("checkpoint holds no optimizer moments")
        return OptimState(OrderedDict(self.m1), OrderedDict(self.m2), s.get("adam_t", 0),
                          s.get("beta1", 0.9), s.get("beta2", 0.999), s.get("eps", 1e-8))


def _pack_str(s: str, width: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<" + width, len(b)) + b


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    out = [_pack_str(name, "H"), struct.pack("<B", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape)]
    out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(model: MSANet, opt: OptimState | None, progress: dict, path) -> None:
    """Write parameters, optimizer moments and progress atomically to ``path``."""
    entries = [(k, t.data) for k, t in model.params.items()]
    if opt is not None:
        entries += [(f"{k}.m1", v) for k, v in opt.m1.items()]
        entries += [(f"{k}.m2", v) for k, v in opt.m2.items()]
    state = dict(progress)
    if opt is not None:
        state.update(adam_t=opt.t, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps)
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION), _pack_str(model.config.to_json(), "I")]
    parts.append(struct.pack("<I", len(entries)))
    parts += [_pack_tensor(k, v) for k, v in entries]
    parts.append(struct.pack("<I", len(state)))
    for key in sorted(state):
        parts.append(_pack_str(key, "H"))
        parts.append(_pack_str(json.dumps(state[key]), "I"))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint: need {n} bytes at offset {self.off}, file has {len(self.buf)}")
        b = self.buf[self.off:self.off + n]
        self.off += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def string(self, width: str) -> str:
        (n,) = self.unpack(width)
        at = self.off
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"invalid UTF-8 at offset {at}") from e


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Checkpoint:
    """Parse a checkpoint fully before returning anything.

    If ``expect_config`` is given, a differing stored config raises
    :class:`ConfigMismatchError` naming the first differing field.
    """
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r} at offset 0")
    (version,) = r.unpack("H")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version} at offset 4")
    at = r.off
    try:
        config = ModelConfig.from_dict(json.loads(r.string("I")))
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"invalid config blob at offset {at}: {e}") from e
    (count,) = r.unpack("I")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        name = r.string("H")
        (rank,) = r.unpack("B")
        dims = r.unpack(f"{rank}I") if rank else ()
        nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        tensors[name] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(dims).astype(np.float32)
    (nkv,) = r.unpack("I")
    state = {}
    for _ in range(nkv):
        key = r.string("H")
        at = r.off
        try:
            state[key] = json.loads(r.string("I"))
        except json.JSONDecodeError as e:
            raise CheckpointFormatError(f"invalid state value for {key!r} at offset {at}") from e
    if r.off != len(r.buf):
        raise CheckpointFormatError(f"{len(r.buf) - r.off} trailing bytes at offset {r.off}")
    if expect_config is not None:
        diff = config.first_difference(expect_config)
        if diff is not None:
            raise ConfigMismatchError(diff, getattr(config, diff), getattr(expect_config, diff))
    params = OrderedDict((k, v) for k, v in tensors.items() if not k.endswith((".m1", ".m2")))
    m1 = OrderedDict((k[:-3], v) for k, v in tensors.items() if k.endswith(".m1"))
    m2 = OrderedDict((k[:-3], v) for k, v in tensors.items() if k.endswith(".m2"))
    return Checkpoint(config, params, m1, m2, state)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


class Trainer:
    """Owns a model during training; resumable from its own checkpoints.

    The batch for global step ``t`` depends only on ``(seed, t)`` and the noise
    realization for epoch ``e`` only on ``(dataset seed, e)``, so a resumed run
    replays exactly the batches of an uninterrupted one.
    """

    def __init__(self, model: MSANet, dataset: SyntheticDataset, schedule: TrainSchedule,
                 out_dir=None, validation: SyntheticDataset | None = None):
        self.model = model
        self.dataset = dataset
        self.schedule = schedule.validate()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.validation = validation
        self.opt = OptimState.for_params(model.params)
        self.step = 0
        self.report = TrainingReport()
        self.best_psnr = -math.inf
        self._epoch_seconds = 0.0
        self._pairs_epoch = None
        self._pairs = None

    @property
    def done(self) -> bool:
        return self.step >= self.schedule.total_steps

    def _pairs_for(self, epoch):
        if self._pairs_epoch != epoch:
            self._pairs = self.dataset.pairs(epoch=epoch)
            self._pairs_epoch = epoch
        return self._pairs

    def train_step(self) -> float:
        s = self.schedule
        t = self.step
        epoch = t // s.steps_per_epoch
        batch = sample_patch_batch(self._pairs_for(epoch), s.patch, s.batch, derive_seed(s.seed, t))
        lr = cosine_lr(t, s.total_steps, s.lr0)
        yhat = self.model(Tensor(batch.noisy))
        loss = loss_lp(Tensor(batch.clean), yhat, s.loss_p)
        backward(loss)
        if s.clip_norm:
            clip_grad_norm(self.model.params, s.clip_norm)
        adam_step(self.model.params, self.opt, lr)
        self.model.params.zero_grads()
        self.step += 1
        value = loss.item()
        self.report.step_losses.append(value)
        return value

    def run(self, max_steps: int | None = None) -> TrainingReport:
        """Train until the schedule completes or ``max_steps`` more steps ran."""
        s = self.schedule
        stop = s.total_steps if max_steps is None else min(s.total_steps, self.step + max_steps)
        while self.step < stop:
            t0 = time.perf_counter()
            try:
                self.train_step()
            except (ShapeError, ValueError) as e:
                raise type(e)(f"step {self.step} (epoch {self.step // s.steps_per_epoch}): {e}") from e
            self._epoch_seconds += time.perf_counter() - t0
            if self.step % s.steps_per_epoch == 0:
                self._end_epoch()
        return self.report

    def _end_epoch(self):
        s = self.schedule
        epoch = self.step // s.steps_per_epoch - 1
        losses = self.report.step_losses[-s.steps_per_epoch:]
        lr = cosine_lr(self.step, s.total_steps, s.lr0)
        row = (epoch, float(np.mean(losses)), lr, self._epoch_seconds)
        self.report.rows.append(row)
        self._epoch_seconds = 0.0
        logger.info("epoch %d loss %.6g lr %.3g (%.1fs)", *row)
        if self.out_dir is not None:
            self.save(self.out_dir / f"epoch{epoch:04d}.msan")
            self._prune()
            if self.validation is not None:
                from .metrics import evaluate

                score = evaluate(self.model, self.validation).mean_psnr
                if score > self.best_psnr:
                    self.best_psnr = score
                    self.save(self.out_dir / "best.msan")
            (self.out_dir / "report.csv").write_text(self.report.to_csv())

    def _prune(self):
        ckpts = sorted(self.out_dir.glob("epoch*.msan"))
        for old in ckpts[: max(0, len(ckpts) - self.schedule.keep_last)]:
            old.unlink()

    def progress(self) -> dict:
        return {
            "step": self.step,
            "schedule": self.schedule.to_dict(),
            "data_seed": self.dataset.seed,
            "step_losses": self.report.step_losses,
            "report_rows": [list(r) for r in self.report.rows],
            "best_psnr": self.best_psnr if math.isfinite(self.best_psnr) else None,
        }

    def save(self, path) -> None:
        save_checkpoint(self.model, self.opt, self.progress(), path)

    @classmethod
    def resume(cls, path, dataset: SyntheticDataset, out_dir=None, validation=None,
               schedule: TrainSchedule | None = None) -> "Trainer":
        ckpt = load_checkpoint(path)
        model = ckpt.build_model()
        sched = schedule or TrainSchedule.from_dict(ckpt.state["schedule"])
        tr = cls(model, dataset, sched, out_dir, validation)
        tr.opt = ckpt.optim_state()
        st = ckpt.state
        tr.step = int(st["step"])
        tr.report = TrainingReport([tuple(r) for r in st.get("report_rows", [])], list(st.get("step_losses", [])))
        if st.get("best_psnr") is not None:
            tr.best_psnr = st["best_psnr"]
        return tr


def fit(model: MSANet, dataset: SyntheticDataset, schedule: TrainSchedule, out_dir=None,
        validation: SyntheticDataset | None = None) -> TrainingReport:
    """Train ``model`` in place for the full schedule and return the report."""
    return Trainer(model, dataset, schedule, out_dir, validation).run()
