"""Training loop: Adam on the denoising objective, optional EMA weights,
a per-step loss CSV and periodic/final checkpoints."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..checkpoint import save_checkpoint
from ..diffusion import NoiseSchedule, dsm_loss
from ..networks import DenoisingNetwork, build_network
from ..tensor import Rng, Tape, backward, default_dtype, no_grad
from ..tensor.core import NumericError
from .config import OptimizerConfig, RunConfig
from .datasets import make_dataset

CSV_HEADER = "step,loss,ema_loss,wall_ms\n"


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite loss or gradient."""

    def __init__(self, step: int, reason: str, checkpoint: Path | None):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step
        self.checkpoint = checkpoint


class Adam:
    def __init__(self, params: list, cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.t = 0

    def step(self, grads: list) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            upd = c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data = (p.data - upd).astype(p.dtype)


class Ema:
    """Shadow weights. The effective decay ramps up as ``(1+n)/(10+n)`` before
    reaching ``decay`` so that short runs still move away from the init."""

    def __init__(self, network: DenoisingNetwork, decay: float):
        self.decay = decay
        self.n = 0
        self.shadow = {k: v.astype(np.float64) for k, v in network.state_dict().items()}

    def update(self, network: DenoisingNetwork) -> None:
        self.n += 1
        d = min(self.decay, (1.0 + self.n) / (10.0 + self.n))
        for k, v in network.state_dict().items():
            s = self.shadow[k]
            s *= d
            s += (1.0 - d) * v

    def state(self) -> dict:
        return {k: v.astype(np.float32) for k, v in self.shadow.items()}


@dataclass
class TrainResult:
    network: DenoisingNetwork
    schedule: NoiseSchedule
    log: list = field(default_factory=list)  # (step, loss, ema_loss, wall_ms)
    ema: dict | None = None
    checkpoint: Path | None = None
    loss_csv: Path | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.log])

    @property
    def smoothed(self) -> np.ndarray:
        return np.array([r[2] for r in self.log])


def _csv_row(step: int, loss: float, ema_loss: float, wall_ms: float) -> str:
    return f"{step},{loss:.9g},{ema_loss:.9g},{wall_ms:.3f}\n"


def _global_clip(grads: list, max_norm: float | None) -> list:
    if max_norm is None:
        return grads
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads]
    return grads


def train_network(network: DenoisingNetwork, data: np.ndarray, labels, schedule: NoiseSchedule,
                  opt: OptimizerConfig, seed: int = 0, out_dir=None, log_wall_time: bool = True,
                  meta: dict | None = None, on_step=None) -> TrainResult:
    """Run ``opt.steps`` Adam steps on minibatches drawn from ``data``.

    Minibatch indices and diffusion noise come from two independent streams
    of ``Rng(seed)``, so a run is fully determined by its inputs. With
    ``out_dir`` set, ``loss.csv`` and checkpoints are written there.
    """
    data = np.asarray(data, dtype=np.float64)
    if labels is not None and not network.num_classes:
        labels = None
    root = Rng(seed)
    batch_rng, noise_rng = root.spawn(0), root.spawn(1)
    params = network.parameters()
    adam = Adam(params, opt)
    ema = Ema(network, opt.ema_decay) if opt.ema else None
    meta = dict(meta or {})
    meta.setdefault("schedule", asdict(schedule))
    out = Path(out_dir) if out_dir is not None else None
    csv = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv = open(out / "loss.csv", "w", newline="")
        csv.write(CSV_HEADER)
    result = TrainResult(network, schedule, loss_csv=out / "loss.csv" if out else None)

    def checkpoint(name: str, step: int) -> Path | None:
        if out is None:
            return None
        return save_checkpoint(out / name, network, step, batch_rng.get_state(),
                               ema.state() if ema else None, meta)

    smooth, t0 = 0.0, time.perf_counter()
    try:
        for step in range(1, opt.steps + 1):
            idx = batch_rng.integers(data.shape[0], opt.batch_size)
            batch_labels = labels[idx] if labels is not None else None
            try:
                with Tape() as tape:
                    loss = dsm_loss(network, data[idx], schedule, noise_rng, batch_labels)
                grads = backward(loss, tape)
            except NumericError as e:
                path = checkpoint("last_good.ckpt", step - 1)
                raise TrainingAborted(step, str(e), path) from None
            g = [grads[p.id].data.astype(np.float64) if p.id in grads else np.zeros(p.shape) for p in params]
            if not all(np.isfinite(x).all() for x in g):
                path = checkpoint("last_good.ckpt", step - 1)
                raise TrainingAborted(step, "non-finite gradient", path)
            with no_grad():
                adam.step(_global_clip(g, opt.grad_clip))
                if ema:
                    ema.update(network)
            value = float(loss.data)
            smooth = opt.loss_smoothing * smooth + (1.0 - opt.loss_smoothing) * value
            ema_loss = smooth / (1.0 - opt.loss_smoothing**step)
            wall = (time.perf_counter() - t0) * 1e3 if log_wall_time else 0.0
            result.log.append((step, value, ema_loss, wall))
            if csv:
                csv.write(_csv_row(step, value, ema_loss, wall))
            if opt.checkpoint_every and step % opt.checkpoint_every == 0 and step < opt.steps:
                checkpoint(f"step_{step:06d}.ckpt", step)
            if on_step:
                on_step(step, value, ema_loss)
    finally:
        if csv:
            csv.close()
    result.ema = ema.state() if ema else None
    result.checkpoint = checkpoint("final.ckpt", opt.steps)
    return result


def train(config: RunConfig, out_dir=None) -> TrainResult:
    """Build dataset and network from ``config`` and train."""
    out_dir = config.output_dir if out_dir is None else out_dir
    res, _, chans = config.image_shape
    ds = make_dataset(config.dataset.kind, config.dataset.size, config.dataset.seed, res, chans)
    dtype = np.float64 if config.precision == "float64" else np.float32
    with default_dtype(dtype):
        network = build_network(config.model, Rng(config.seed).spawn(2))
        result = train_network(network, ds.data, ds.labels, config.schedule, config.optimizer, config.seed,
                               out_dir, config.log_wall_time, meta={"run": config.to_dict()})
    if out_dir is not None:
        config.save(Path(out_dir) / "config.json")
    return result
