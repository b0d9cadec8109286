"""Optimizers, the polynomial learning-rate schedule and the base-model training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .augment import AugPolicy, RngStream, apply_policy, make_mixers
from .nets import ConvConfig, MiniMiTConfig, SegModel, build_model, forward_logits, reinit_decoder
from .params import Checkpoint, ParamTree
from .synthdata import SegSample
from .tensor import Tensor, UsageError


class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class OptimizerSetup:
    kind: str = "adamw"
    lr: float = 6e-5
    tau_max: int = 2000
    warmup: int = 75
    warmup_ratio: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    weight_decay: float = 0.01
    batch_size: int = 4
    power: float = 0.9
    eps: float = 1e-8
    decoder_lr_mult: float = 1.0

    def __post_init__(self):
        if self.kind not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        for name in ("beta1", "beta2", "momentum"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.tau_max < 0 or not 0 <= self.warmup <= max(self.tau_max, 0):
            raise ValueError("need tau_max >= 0 and 0 <= warmup <= tau_max")
        if self.batch_size < 1 or self.weight_decay < 0 or self.decoder_lr_mult <= 0:
            raise ValueError("invalid batch size or weight decay")


# Full-scale settings; ``desk`` rescales the iteration counts.
PAPER_ADAMW = dict(kind="adamw", lr=6e-5, tau_max=40000, warmup=1500, warmup_ratio=1e-6,
                   beta1=0.9, beta2=0.999, weight_decay=0.01, batch_size=2)
PAPER_SGD = dict(kind="sgd", lr=1e-3, tau_max=60000, warmup=0, momentum=0.9, weight_decay=5e-4,
                 batch_size=2)


def preset(kind: str, tau_max: int = 2000, batch_size: int = 4, **overrides) -> OptimizerSetup:
    """Desk-scale setup keeping the warm-up/τ_max ratio of the full-scale schedule."""
    base = dict(PAPER_ADAMW if kind == "adamw" else PAPER_SGD if kind == "sgd" else {"kind": kind})
    factor = tau_max / base.get("tau_max", tau_max)
    base.update(tau_max=tau_max, batch_size=batch_size, warmup=int(round(base.get("warmup", 0) * factor)))
    base.update(overrides)
    return OptimizerSetup(**base)


def lr_at(tau: float, setup: OptimizerSetup) -> float:
    """Linear warm-up from ``lr*warmup_ratio`` to ``lr``, then polynomial decay to 0."""
    if tau < 0 or tau > setup.tau_max:
        raise UsageError(f"iteration {tau} outside [0, {setup.tau_max}]")
    w = setup.warmup
    if tau < w:
        r = setup.warmup_ratio
        return setup.lr * (r + (1 - r) * tau / w)
    if setup.tau_max == w:
        return setup.lr
    return setup.lr * (1 - (tau - w) / (setup.tau_max - w)) ** setup.power


@dataclass
class OptState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def _check_grads(grads: Mapping[str, np.ndarray], tau: int) -> None:
    for p, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {p}", tau)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptState,
               tau: int, setup: OptimizerSetup, lr: float | None = None,
               lr_scale: Mapping[str, float] | None = None) -> dict[str, np.ndarray]:
    """One AdamW update with decoupled weight decay; ``state`` is updated in place."""
    _check_grads(grads, tau)
    eta = lr_at(tau, setup) if lr is None else lr
    b1, b2 = setup.beta1, setup.beta2
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    out = {}
    for p, theta in params.items():
        g = grads[p]
        eta_p = eta * (lr_scale or {}).get(p, 1.0)
        m = state.m.get(p, np.zeros_like(theta))
        v = state.v.get(p, np.zeros_like(theta))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[p], state.v[p] = m, v
        mhat, vhat = m / c1, v / c2
        out[p] = (theta - eta_p * (mhat / (np.sqrt(vhat) + setup.eps)) - eta_p * setup.weight_decay * theta).astype(theta.dtype)
    return out


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptState,
             tau: int, setup: OptimizerSetup, lr: float | None = None,
             lr_scale: Mapping[str, float] | None = None) -> dict[str, np.ndarray]:
    """Momentum SGD with weight decay folded into the gradient; ``state.m`` holds velocities."""
    _check_grads(grads, tau)
    eta = lr_at(tau, setup) if lr is None else lr
    state.step += 1
    out = {}
    for p, theta in params.items():
        v = setup.momentum * state.m.get(p, np.zeros_like(theta)) + grads[p] + setup.weight_decay * theta
        state.m[p] = v
        out[p] = (theta - eta * (lr_scale or {}).get(p, 1.0) * v).astype(theta.dtype)
    return out


STEPS = {"adamw": adamw_step, "sgd": sgd_step}


@dataclass(frozen=True)
class TrainSeeds:
    encoder: int = 0
    decoder: int = 0
    data: int = 0


def _trainable(tree: ParamTree) -> ParamTree:
    return ParamTree({p: (Tensor(t.data.copy(), requires_grad=True), tree.tags(p)) for p, t in tree.items()})


def train_base_model(policy: AugPolicy, setup: OptimizerSetup, seeds: TrainSeeds,
                     data: Sequence[SegSample], *, kind: str = "mit",
                     config: MiniMiTConfig | ConvConfig | None = None, init: SegModel | None = None,
                     mixers: Sequence[np.ndarray] | None = None, mixer_seed: int = 0,
                     metrics_path: str | Path | None = None, history: list | None = None,
                     extra_meta: Mapping | None = None) -> Checkpoint:
    """Train one segmentation network and return its last-iteration checkpoint.

    With ``init`` the encoder is taken from that model and a fresh decoder is
    drawn from ``seeds.decoder``; otherwise the whole network is initialised
    from ``seeds``.  Batches and augmentations come from ``seeds.data``.
    """
    if not len(data):
        raise UsageError("training data is empty")
    if init is not None:
        model = reinit_decoder(init, seeds.decoder)
        model.seeds["encoder"] = seeds.encoder
    else:
        if config is None:
            config = MiniMiTConfig() if kind == "mit" else ConvConfig()
        model = build_model(kind, config, seeds.encoder, seeds.decoder)
    if "pixmix" in policy.stages and mixers is None:
        mixers = make_mixers(16, policy.crop_size, mixer_seed)

    live = _trainable(model.params)
    model = model.with_params(live)
    step = STEPS[setup.kind]
    state = OptState()
    scale = {p: setup.decoder_lr_mult for p in live if live.tags(p).part == "decoder"}
    stream = RngStream(seeds.data, 1)
    rows = []
    for it in range(setup.tau_max):
        it_rng = stream.child(it)
        idx = [it_rng.integers(0, len(data)) for _ in range(setup.batch_size)]
        augs = [apply_policy(policy, data[i].image, data[i].labels, it_rng.child(b), mixers)
                for b, i in enumerate(idx)]
        x = Tensor(np.stack([a.image for a in augs]))
        y = np.stack([a.labels for a in augs])
        try:
            loss = T.cross_entropy(forward_logits(model, x), y)
            T.backward(loss)
        except FloatingPointError as exc:
            T.get_tape().clear()
            raise TrainingError(f"divergence ({exc})", it) from exc
        lv = loss.item()
        if not math.isfinite(lv):
            raise TrainingError("loss is not finite", it)
        lr = lr_at(it, setup)
        arrays = {p: t.data for p, t in live.items()}
        grads = {p: t.grad if t.grad is not None else np.zeros_like(t.data) for p, t in live.items()}
        new = step(arrays, grads, state, it, setup, lr, scale)
        for p, t in live.items():
            t.data = new[p]
            t.grad = None
        rows.append((it, lr, lv))

    if history is not None:
        history.extend(rows)
    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "lr", "loss"])
            for it, lr, lv in rows:
                w.writerow([it, repr(lr), repr(lv)])

    final = ParamTree({p: (Tensor(t.data.copy()), live.tags(p)) for p, t in live.items()})
    meta = {
        "policy": policy.id,
        "policy_params": _jsonable(asdict(policy)),
        "seeds": asdict(seeds),
        "setup": asdict(setup),
        "model": model.config_dict(),
        "iterations": setup.tau_max,
        "warm_start": init is not None,
    }
    if rows:
        meta["final_loss"] = rows[-1][2]
    meta.update(extra_meta or {})
    return Checkpoint(final, meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def model_from_checkpoint(ckpt: Checkpoint) -> SegModel:
    from .nets import config_from_dict

    kind, config = config_from_dict(ckpt.meta["model"])
    seeds = ckpt.meta.get("seeds", {})
    return SegModel(config, ckpt.tree, kind, dict(seeds))


def with_iterations(setup: OptimizerSetup, tau_max: int) -> OptimizerSetup:
    """Same setup with a different horizon, warm-up rescaled proportionally."""
    warm = int(round(setup.warmup * tau_max / setup.tau_max)) if setup.tau_max else 0
    return replace(setup, tau_max=tau_max, warmup=warm)
