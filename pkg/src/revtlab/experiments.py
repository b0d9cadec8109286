"""Desk-scale experiment drivers shared by the CLI and the acceptance suite.

One *run* generates the benchmark for a master seed, optionally warm-starts a
shared encoder on the source domain, forks M base models (shared encoder, own
decoder seed and batch stream), and evaluates merges and ensembles on the
shifted target domain.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import ensemble as E
from . import evaldiag as D
from .augment import eval_transform, get_policy
from .nets import ConvConfig, MiniMiTConfig, SegModel, count_forwards
from .params import ENCODER, Checkpoint
from .reparam import MergeSpec, assemble_revt, average_params, model_of, part_mode
from .synthdata import DomainData, SegSample, make_benchmark
from .train import TrainSeeds, model_from_checkpoint, preset, train_base_model

# stream ids for seed derivation
_STREAMS = {"data": 0, "encoder": 1, "warm_decoder": 2, "warm_batches": 3, "decoder": 4, "batches": 5}


def derive_seed(master: int, stream: str, index: int = 0) -> int:
    """Independent 31-bit seed for one named stream of a master seed."""
    ss = np.random.SeedSequence([int(master), _STREAMS[stream], int(index)])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


# encoder learning rates at desk scale (short schedules from a warm start)
DESK_LR = {"adamw": 3e-4, "sgd": 1e-3}


@dataclass(frozen=True)
class DeskConfig:
    master_seed: int = 0
    kind: str = "mit"
    optimizer: str = "adamw"
    policies: tuple[str, ...] = ("a1", "a1", "a1")
    n_train: int = 200
    n_dev: int = 50
    n_test: int = 20
    image_size: int = 64
    crop_size: tuple[int, int] = (32, 32)
    source: str = "source"
    target: str = "target_photo"
    # shared warm start on the source (0 disables it)
    warm_iters: int = 1000
    warm_lr: float = 1e-3
    warm_policy: str = "a1"
    warm_batch_size: int = 4
    iters: int = 600
    lr: float | None = None          # None: per-optimizer desk default
    decoder_lr_mult: float = 10.0
    batch_size: int = 2
    # explicit per-model decoder seeds; derived from the master seed when None
    decoder_seeds: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.policies:
            raise ValueError("need at least one base model")
        if self.decoder_seeds is not None and len(self.decoder_seeds) != len(self.policies):
            raise ValueError("need one decoder seed per base model")
        if self.optimizer not in DESK_LR:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.kind not in ("mit", "conv"):
            raise ValueError(f"unknown network kind {self.kind!r}")

    @property
    def m(self) -> int:
        return len(self.policies)

    def with_(self, **changes) -> DeskConfig:
        return replace(self, **changes)

    def network(self) -> MiniMiTConfig | ConvConfig:
        return MiniMiTConfig() if self.kind == "mit" else ConvConfig()

    def setup(self):
        lr = DESK_LR[self.optimizer] if self.lr is None else self.lr
        return preset(self.optimizer, tau_max=self.iters, batch_size=self.batch_size,
                      decoder_lr_mult=self.decoder_lr_mult, lr=lr)

    def warm_setup(self):
        return preset("adamw", tau_max=self.warm_iters, batch_size=self.warm_batch_size, lr=self.warm_lr)

    def policy(self, policy_id: str):
        size = (self.image_size, self.image_size)
        return get_policy(policy_id, resize_to=size, crop_size=tuple(self.crop_size))


def benchmark(cfg: DeskConfig) -> dict[str, DomainData]:
    return make_benchmark(derive_seed(cfg.master_seed, "data"), n_train=cfg.n_train, n_dev=cfg.n_dev,
                          n_test=cfg.n_test, size=cfg.image_size)


def warm_start(cfg: DeskConfig, data: Sequence[SegSample]) -> Checkpoint | None:
    if cfg.warm_iters <= 0:
        return None
    seeds = TrainSeeds(derive_seed(cfg.master_seed, "encoder"), derive_seed(cfg.master_seed, "warm_decoder"),
                       derive_seed(cfg.master_seed, "warm_batches"))
    return train_base_model(cfg.policy(cfg.warm_policy), cfg.warm_setup(), seeds, data, kind=cfg.kind,
                            config=cfg.network(), extra_meta={"role": "warm_start"})


def member_seeds(cfg: DeskConfig, m: int) -> TrainSeeds:
    """Seeds of base model ``m`` (1-based)."""
    dec = cfg.decoder_seeds[m - 1] if cfg.decoder_seeds is not None else derive_seed(cfg.master_seed, "decoder", m)
    return TrainSeeds(derive_seed(cfg.master_seed, "encoder"), int(dec), derive_seed(cfg.master_seed, "batches", m))


def train_member(cfg: DeskConfig, m: int, data: Sequence[SegSample], warm: Checkpoint | None,
                 metrics_path=None) -> Checkpoint:
    init = model_from_checkpoint(warm) if warm is not None else None
    return train_base_model(cfg.policy(cfg.policies[m - 1]), cfg.setup(), member_seeds(cfg, m), data,
                            kind=cfg.kind, config=cfg.network(), init=init, metrics_path=metrics_path,
                            extra_meta={"member": m, "master_seed": cfg.master_seed})


def images_of(samples: Sequence[SegSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([eval_transform(s.image) for s in samples])
    y = np.stack([s.labels for s in samples])
    return x, y


def _batched(predict: Callable[[np.ndarray], np.ndarray], x: np.ndarray, batch: int = 25) -> np.ndarray:
    return np.concatenate([predict(x[i:i + batch]).argmax(1) for i in range(0, len(x), batch)])


def score(predict: Callable[[np.ndarray], np.ndarray], samples: Sequence[SegSample], num_classes: int,
          domain: str = "") -> D.EvalReport:
    x, y = images_of(samples)
    return D.miou(_batched(predict, x), y, num_classes=num_classes, domain=domain)


def checkpoint_hash(ckpt: Checkpoint) -> str:
    return hashlib.sha256(ckpt.to_bytes()).hexdigest()


@dataclass
class DeskRun:
    config: DeskConfig
    bench: dict[str, DomainData]
    warm: Checkpoint | None
    members: list[Checkpoint]
    seconds: float = 0.0

    @property
    def num_classes(self) -> int:
        return self.bench[self.config.source].spec.num_classes

    def models(self) -> list[SegModel]:
        return [model_from_checkpoint(c) for c in self.members]

    def split(self, domain: str | None = None, part: str = "dev") -> list[SegSample]:
        return getattr(self.bench[domain or self.config.target], part)

    def merge(self, mode: str = "encoder_only", donor: int = 1, weights=None) -> SegModel:
        spec = part_mode(MergeSpec(tuple(self.members), weights=weights, donor=donor), mode)
        return model_of(average_params(spec), self.members[0].meta["model"])

    def revt(self, donor: int = 1) -> SegModel:
        return assemble_revt(MergeSpec(tuple(self.members), selector=ENCODER, donor=donor))


def run_members(cfg: DeskConfig) -> DeskRun:
    t0 = time.perf_counter()
    bench = benchmark(cfg)
    data = bench[cfg.source].train
    warm = warm_start(cfg, data)
    members = [train_member(cfg, m, data, warm) for m in range(1, cfg.m + 1)]
    return DeskRun(cfg, bench, warm, members, time.perf_counter() - t0)


# ---------------------------------------------------------------- analyses


@dataclass
class RevtResult:
    master_seed: int
    base: list[float]
    revt: list[float]                     # one per donor decoder
    ensembles: dict[str, float] = field(default_factory=dict)
    forwards: dict[str, dict[str, int]] = field(default_factory=dict)
    cosine: float = float("nan")

    @property
    def revt_score(self) -> float:
        return float(np.mean(self.revt))

    @property
    def base_mean(self) -> float:
        return float(np.mean(self.base))

    @property
    def base_best(self) -> float:
        return float(np.max(self.base))


def revt_vs_base(run: DeskRun, part: str = "dev", ensembles: bool = True) -> RevtResult:
    """Target-domain mIoU of base models, ReVT (every donor) and the ensemble baselines."""
    s = run.num_classes
    samples = run.split(part=part)
    models = run.models()
    base = [score(m.predict, samples, s).miou for m in models]
    revt = [score(run.revt(d).predict, samples, s).miou for d in range(1, run.config.m + 1)]
    res = RevtResult(run.config.master_seed, base, revt,
                     cosine=D.cosine_similarity([c.tree for c in run.members], "encoder_mean"))
    if ensembles:
        res.ensembles = ensemble_scores(models, samples, s)
        res.forwards = forward_counts(run, samples[:1])
    return res


def ensemble_scores(models: Sequence[SegModel], samples: Sequence[SegSample], num_classes: int
                    ) -> dict[str, float]:
    out = {
        "posterior_mean": score(lambda x: E.posterior_mean(models, x), samples, num_classes).miou,
        "posterior_product": score(lambda x: E.posterior_product(models, x), samples, num_classes).miou,
    }
    per_decoder = [score(lambda x, k=k: E.encoder_feature_mean(models, x, k), samples, num_classes).miou
                   for k in range(1, len(models) + 1)]
    # the feature ensemble is scored as the mean over its M decoders
    out["encoder_feature_mean"] = float(np.mean(per_decoder))
    return out


def forward_counts(run: DeskRun, samples: Sequence[SegSample]) -> dict[str, dict[str, int]]:
    """Encoder/decoder invocations needed to label one batch, per method."""
    x, _ = images_of(samples)
    models = run.models()
    methods = {
        "revt": lambda: run.revt(1).predict(x),
        "posterior_mean": lambda: E.posterior_mean(models, x),
        "posterior_product": lambda: E.posterior_product(models, x),
        "encoder_feature_mean": lambda: E.encoder_feature_mean(models, x, 1),
    }
    out = {}
    for name, fn in methods.items():
        with count_forwards() as c:
            fn()
        out[name] = {"encoder": c["encoder"], "decoder": c["decoder"]}
    return out


@dataclass
class MergeResult:
    master_seed: int
    optimizer: str
    base: list[float]
    merged: float
    encoder_only: list[float] = field(default_factory=list)   # one per donor

    @property
    def degraded(self) -> bool:
        return self.merged < float(np.mean(self.base))


def full_merge_vs_base(run: DeskRun, part: str = "dev") -> MergeResult:
    """Full-network average against the base models it was built from."""
    s = run.num_classes
    samples = run.split(part=part)
    base = [score(m.predict, samples, s).miou for m in run.models()]
    # a full merge has no donor-specific parts
    merged = score(run.merge("full").predict, samples, s).miou
    enc = [score(run.merge("encoder_only", d).predict, samples, s).miou for d in range(1, run.config.m + 1)]
    return MergeResult(run.config.master_seed, run.config.optimizer, base, merged, enc)


def config_dict(cfg: DeskConfig) -> dict:
    return asdict(cfg)
