"""Training loop: stochastic bound, decoupled-weight-decay Adam, checkpoints, metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .denoiser import Denoiser
from .errors import ConfigError, DatasetError, NumericError
from .layout import TokenSequence, modality_of
from .objective import vlb_estimate
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "t_sampled", "l0", "lt", "lT", "total")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 9e-4
    batch_size: int = 16
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.96
    eps: float = 1e-8
    weight_decay: float = 4.5e-2
    grad_clip: float | None = None
    checkpoint_every: int = 500
    seed: int = 0
    preset: str = "toy"

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.steps < 0 or self.checkpoint_every < 1:
            raise ConfigError("train config needs lr >= 0, batch_size >= 1, steps >= 0, checkpoint_every >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("betas must lie in [0, 1), eps > 0, weight_decay >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Adam with weight decay applied to the parameters directly, outside the moments."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.assign(p.data * (1.0 - c.lr * c.weight_decay) - c.lr * update)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load(self, tensors: dict[str, np.ndarray], t: int):
        self.t = t
        self.m = {k[7:]: v.copy() for k, v in tensors.items() if k.startswith("adam_m/")}
        self.v = {k[7:]: v.copy() for k, v in tensors.items() if k.startswith("adam_v/")}


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def model_signature(denoiser: Denoiser, schedule: NoiseSchedule) -> dict:
    """Everything a checkpoint's parameters depend on structurally."""
    return {"layout": denoiser.layout.to_dict(), "sequence": denoiser.seq.to_dict(),
            "denoiser": denoiser.cfg.to_dict(), "T": denoiser.T, "schedule": schedule.summary()}


def signature_hash(denoiser: Denoiser, schedule: NoiseSchedule) -> str:
    return config_hash(model_signature(denoiser, schedule))


def check_dataset(data: np.ndarray, denoiser: Denoiser):
    data = np.asarray(data)
    pm = denoiser.position_modality
    if data.ndim != 2 or data.shape[1] != pm.size:
        raise DatasetError(f"dataset rows must hold {pm.size} tokens, got shape {data.shape}")
    if np.any(modality_of(data, denoiser.layout) != pm[None, :]):
        raise DatasetError("dataset token outside its position's modality segment")


@dataclass
class TrainState:
    step: int
    optimizer: AdamW
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)


def save_state(path, denoiser: Denoiser, schedule: NoiseSchedule, state: TrainState, cfg: TrainConfig):
    tensors = {f"param/{k}": v.data for k, v in denoiser.params.items()}
    tensors.update(state.optimizer.state())
    meta = {"config_hash": signature_hash(denoiser, schedule), "model": model_signature(denoiser, schedule),
            "train": cfg.to_dict(), "step": state.step, "adam_t": state.optimizer.t,
            "rng_state": state.rng.bit_generator.state}
    return save_checkpoint(path, tensors, meta)


def load_params(path, denoiser: Denoiser, schedule: NoiseSchedule) -> dict:
    """Load parameters into ``denoiser`` in place after validating the config hash."""
    tensors, meta = load_checkpoint(path, expect_hash=signature_hash(denoiser, schedule))
    for k, p in denoiser.params.items():
        p.assign(tensors[f"param/{k}"])
    return {"tensors": tensors, "meta": meta}


def _format_metrics(step: int, t: np.ndarray, means: dict) -> str:
    vals = [str(step), ",".join(map(str, t))] + [f"{means[k]:.10g}" for k in METRIC_COLUMNS[2:]]
    return "\t".join(vals)


def train(cfg: TrainConfig, data: np.ndarray, denoiser: Denoiser, schedule: NoiseSchedule,
          out_dir=None, resume=None, lengths=None, order=None, time_budget: float | None = None) -> TrainState:
    """Optimize ``denoiser`` on fused-index rows ``data`` for ``cfg.steps`` total steps.

    Batches are drawn with replacement from a generator seeded by
    ``cfg.seed``; its state travels in every checkpoint, so resuming replays
    the uninterrupted trajectory exactly. With ``out_dir`` set, metrics go to
    ``metrics.tsv`` and checkpoints to ``ckpt-<step>.bin`` plus ``last.bin``.
    A non-finite loss aborts without touching the last good checkpoint.
    ``time_budget`` (seconds) stops early, checkpointing where it stopped;
    runs cut short this way are no longer reproducible step for step.
    """
    data = np.asarray(data, dtype=np.int64)
    check_dataset(data, denoiser)
    lengths = denoiser.seq.lengths if lengths is None else lengths
    order = denoiser.seq.order if order is None else order
    state = TrainState(0, AdamW(cfg), np.random.default_rng(cfg.seed))
    if resume is not None:
        loaded = load_params(resume, denoiser, schedule)
        meta = loaded["meta"]
        state.step = meta["step"]
        state.optimizer.load(loaded["tensors"], meta["adam_t"])
        state.rng.bit_generator.state = meta["rng_state"]
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "metrics.tsv"
        fresh = resume is None or not path.exists()
        if fresh:
            path.write_text("\t".join(METRIC_COLUMNS) + "\n")
        else:
            _truncate_metrics(path, state.step)
        metrics = path.open("a")
    started = time.monotonic()
    try:
        while state.step < cfg.steps:
            if time_budget is not None and time.monotonic() - started > time_budget:
                log.warning("time budget %.0fs spent at step %d of %d", time_budget, state.step, cfg.steps)
                if out is not None:
                    metrics.flush()
                    save_state(out / "last.bin", denoiser, schedule, state, cfg)
                break
            rows = state.rng.integers(0, data.shape[0], size=cfg.batch_size)
            batch = TokenSequence(data[rows], denoiser.layout, lengths, order)
            try:
                est = vlb_estimate(batch, denoiser, schedule, state.rng)
                loss_value = float(est.loss.data)
                if not np.isfinite(loss_value):
                    raise NumericError(f"non-finite loss {loss_value}")
            except NumericError as exc:
                kept = out / "last.bin" if out is not None else None
                raise NumericError(f"step {state.step + 1}: {exc}; last good checkpoint: {kept}") from None
            grads = denoiser.backward(est.loss)
            if cfg.grad_clip is not None:
                clip_gradients(grads, cfg.grad_clip)
            state.optimizer.step(denoiser.params, grads)
            state.step += 1
            means = est.mean()
            state.history.append({"step": state.step, **means})
            if metrics is not None:
                metrics.write(_format_metrics(state.step, est.t_sampled, means) + "\n")
            if out is not None and (state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps):
                metrics.flush()
                save_state(out / f"ckpt-{state.step:06d}.bin", denoiser, schedule, state, cfg)
                save_state(out / "last.bin", denoiser, schedule, state, cfg)
            if state.step % 100 == 0:
                log.info("step %d loss %.4f", state.step, loss_value)
    finally:
        if metrics is not None:
            metrics.close()
    return state


def _truncate_metrics(path: Path, step: int):
    """Drop metric lines past ``step`` so a resumed run continues cleanly."""
    lines = path.read_text().splitlines(keepends=True)
    kept = [ln for ln in lines if not ln[:1].isdigit() or int(ln.split("\t", 1)[0]) <= step]
    path.write_text("".join(kept))


def heldout_vlb(data: np.ndarray, denoiser: Denoiser, schedule: NoiseSchedule, seed: int = 1234,
                repeats: int = 1) -> float:
    """Per-sequence bound estimate ``T * E[term] + L_T`` with fixed randomness.

    The same ``seed`` gives the same (t, x_t) draws for any parameters, so two
    models are compared on common random numbers.
    """
    rng = np.random.default_rng(seed)
    seq = denoiser.seq
    vals = []
    for _ in range(repeats):
        for lo in range(0, len(data), 64):
            batch = TokenSequence(np.asarray(data[lo:lo + 64]), denoiser.layout, seq.lengths, seq.order)
            est = vlb_estimate(batch, denoiser, schedule, rng)
            vals.append(schedule.T * (est.l0 + est.lt) + est.lT)
    return float(np.mean(np.concatenate(vals)))
