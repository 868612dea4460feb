"""Adam training loop for the harmonize / deshadow / joint stages."""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..checkpoint import load_container, save_container
from .model import TrainBatch, loss_and_grad, to_model_range
from .schedule import NoiseSchedule, make_schedule
from .unet import DenoiserParams, UNetConfig, init_params

log = logging.getLogger(__name__)


class Stage(str, enum.Enum):
    HARMONIZE = "harmonize"
    DESHADOW = "deshadow"
    JOINT = "joint"


DEFAULT_LR = {Stage.HARMONIZE: 4e-4, Stage.DESHADOW: 2e-4, Stage.JOINT: 4e-4}


@dataclass
class TrainConfig:
    stage: Stage = Stage.HARMONIZE
    lr: float | None = None  # None -> stage default
    steps: int = 2000
    batch: int = 4
    seed: int = 0
    resolution: int = 64
    ema_decay: float = 0.995
    grad_clip: float = 1.0
    augment: bool = True
    allow_scratch: bool = False  # permit deshadow training without a harmonize init

    def __post_init__(self):
        self.stage = Stage(self.stage)
        if self.lr is None:
            self.lr = DEFAULT_LR[self.stage]
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


class StageMismatchError(ValueError):
    pass


class Adam:
    def __init__(self, params: DenoiserParams, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: DenoiserParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            params.weights[k] -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def _check_dataset(stage: Stage, dataset) -> list:
    """Return the list of per-kind sources feeding a batch."""
    sources = list(dataset) if isinstance(dataset, (tuple, list)) else [dataset]
    kinds = sorted(s.kind for s in sources)
    want = {Stage.HARMONIZE: ["harmonization"], Stage.DESHADOW: ["deshadow"],
            Stage.JOINT: ["deshadow", "harmonization"]}[stage]
    if kinds != want:
        raise StageMismatchError(f"stage {stage.value!r} needs datasets {want}, got {kinds}")
    for s in sources:
        if len(s) == 0:
            raise StageMismatchError(f"{s.kind} dataset is empty")
    return sorted(sources, key=lambda s: s.kind)


def _draw_batch(sources, n: int, rng: np.random.Generator, augment_fn) -> TrainBatch:
    # joint stage: equal share per source, remainder to the first
    per = [n // len(sources)] * len(sources)
    per[0] += n - sum(per)
    xs, cs, ms, ls = [], [], [], []
    for src, k in zip(sources, per):
        for i in rng.integers(0, len(src), size=k):
            inp, tgt, msk, lit = src.inputs[i], src.targets[i], src.masks[i], src.lighting[i]
            if augment_fn is not None:
                inp, tgt, msk, lit = augment_fn(inp, tgt, msk, lit, src.kind,
                                                int(rng.integers(0, 2**63 - 1)))
            xs.append(tgt)
            cs.append(inp)
            ms.append(msk)
            ls.append(lit)
    return TrainBatch(to_model_range(np.stack(xs)), to_model_range(np.stack(cs)),
                      np.stack(ms).astype(np.float32), np.stack(ls).astype(np.float32))


def train_stage(config: TrainConfig, dataset, init: DenoiserParams | None = None,
                sched: NoiseSchedule | None = None, unet: UNetConfig | None = None,
                log_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
                augment_fn: Callable | None = None) -> DenoiserParams:
    """Run one training stage and return the EMA weights.

    ``dataset`` exposes ``kind``, ``inputs``, ``targets``, ``masks`` and
    ``lighting`` arrays; the joint stage takes a ``(harmonization, deshadow)``
    pair and mixes them 50/50 per batch.
    """
    sources = _check_dataset(config.stage, dataset)
    if config.stage == Stage.DESHADOW and not config.allow_scratch:
        if init is None or Stage.HARMONIZE.value not in init.history:
            raise StageMismatchError(
                "deshadow stage must start from a harmonize-trained checkpoint "
                "(set allow_scratch for the ablation)")
    sched = sched or make_schedule()
    params = init.copy() if init is not None else init_params(unet or UNetConfig(), config.seed)
    if config.steps == 0:
        return params
    if augment_fn is None and config.augment:
        from ..dataset import augment_arrays as augment_fn

    rng = np.random.default_rng(config.seed)
    opt = Adam(params, config.lr)
    ema = params.copy()
    d = config.ema_decay
    rows = []
    for step in range(1, config.steps + 1):
        batch = _draw_batch(sources, config.batch, rng, augment_fn if config.augment else None)
        loss, grads = loss_and_grad(params, batch, sched, rng)
        if config.grad_clip:
            norm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if norm > config.grad_clip:
                scale = np.asarray(config.grad_clip / norm, dtype=params.weights["out.w"].dtype)
                for g in grads.values():
                    g *= scale
        opt.step(params, grads)
        for k, w in params.weights.items():
            e = ema.weights[k]
            e *= d
            e += (1.0 - d) * w
        rows.append((step, loss, config.lr, config.stage.value))
        if step % 100 == 0:
            recent = np.mean([r[1] for r in rows[-100:]])
            log.info("%s step %d/%d loss(100) %.5f", config.stage.value, step, config.steps, recent)

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "lr", "stage"])
            for step, loss, lr, stage in rows:
                w.writerow([step, repr(loss), repr(lr), stage])
    ema.history = params.history + (config.stage.value,)
    if checkpoint_path is not None:
        save_denoiser(checkpoint_path, ema, opt=opt, raw=params,
                      meta={"train_config": {**asdict(config), "stage": config.stage.value}})
    return ema


def loss_history(log_path: str | Path) -> np.ndarray:
    with open(log_path) as fh:
        return np.array([float(r["loss"]) for r in csv.DictReader(fh)])


def save_denoiser(path: str | Path, params: DenoiserParams, opt: Adam | None = None,
                  raw: DenoiserParams | None = None, meta: dict | None = None) -> None:
    """Store inference (EMA) weights, plus raw weights and Adam moments if given."""
    sections = {"ema": params.weights}
    if raw is not None:
        sections["weights"] = raw.weights
    if opt is not None:
        sections["adam_m"] = opt.m
        sections["adam_v"] = opt.v
    meta = dict(meta or {})
    meta["history"] = list(params.history)
    if opt is not None:
        meta["adam_step"] = opt.t
    save_container(path, asdict(params.config), params.config.arch_hash(), sections, meta)


def load_denoiser(path: str | Path) -> DenoiserParams:
    arch, arch_hash, sections, meta = load_container(path)
    config = UNetConfig.from_dict(arch)
    if config.arch_hash() != arch_hash:
        raise ValueError(f"{path}: architecture hash does not match its description")
    weights = {k: sections["ema"][k] for k in config.param_shapes()}
    return DenoiserParams(config, weights, tuple(meta.get("history", ())))
