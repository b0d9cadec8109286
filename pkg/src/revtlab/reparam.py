"""Selective weight averaging across checkpoints and ReVT assembly.

ReVT = uniform average of the M encoders + the decoder of one donor model.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .nets import SegModel, config_from_dict
from .params import ALL, DECODER, ENCODER, Checkpoint, Match, ParamTree, Selector, select

PART_MODES = ("encoder_only", "decoder_only", "full", "none")
BLOCK_KINDS = ("patch_embed", "attention", "mixffn", "conv_layers", "fc_layers")


class MergeError(ValueError):
    pass


def _digest(tree: ParamTree) -> str:
    h = hashlib.sha256()
    for path, t in tree.items():
        h.update(path.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class MergeSpec:
    """Checkpoints to merge, convex weights, the selector to average and the donor.

    ``donor`` is 1-based: the model whose unselected parameters (for ReVT: the
    decoder) are copied unchanged.
    """

    checkpoints: tuple[Checkpoint, ...]
    weights: tuple[float, ...] | None = None
    selector: Selector = ENCODER
    donor: int = 1
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "checkpoints", tuple(self.checkpoints))
        m = len(self.checkpoints)
        if m < 1:
            raise MergeError("need at least one checkpoint")
        if self.weights is None:
            object.__setattr__(self, "weights", tuple([1.0 / m] * m))
        else:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != m:
            raise MergeError(f"{len(self.weights)} weights for {m} checkpoints")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise MergeError(f"weights must be non-negative and sum to 1, got {self.weights}")
        if not 1 <= self.donor <= m:
            raise MergeError(f"donor index {self.donor} outside 1..{m}")
        if self.names is not None and len(self.names) != m:
            raise MergeError("one name per checkpoint required")

    @property
    def m(self) -> int:
        return len(self.checkpoints)

    def with_(self, **changes) -> MergeSpec:
        fields = dict(checkpoints=self.checkpoints, weights=self.weights, selector=self.selector,
                      donor=self.donor, names=self.names)
        fields.update(changes)
        return MergeSpec(**fields)


def check_structure(trees: Sequence[ParamTree]) -> None:
    """Raise :class:`MergeError` naming the first path where the trees disagree."""
    ref = trees[0]
    for k, tree in enumerate(trees[1:], start=2):
        for path in sorted(set(ref.paths()) | set(tree.paths())):
            if path not in ref or path not in tree:
                raise MergeError(f"checkpoint {k}: path {path} missing in one of the trees")
            if ref[path].shape != tree[path].shape:
                raise MergeError(f"checkpoint {k}: shape mismatch at {path}: {tree[path].shape} vs {ref[path].shape}")
            if ref.tags(path) != tree.tags(path):
                raise MergeError(f"checkpoint {k}: tag mismatch at {path}")


def average_params(spec: MergeSpec) -> ParamTree:
    """Weighted average on the selected paths, donor copy everywhere else.

    Accumulation is in float64 over the (weight, content-hash) sorted order,
    so permuting the (checkpoint, weight) pairs cannot change a single bit.
    """
    trees = [c.tree for c in spec.checkpoints]
    check_structure(trees)
    donor = trees[spec.donor - 1]
    order = sorted(range(spec.m), key=lambda i: (spec.weights[i], _digest(trees[i])))
    merged = {}
    for path in select(donor, spec.selector):
        acc = np.zeros(donor[path].shape, dtype=np.float64)
        for i in order:
            acc += spec.weights[i] * trees[i].array(path).astype(np.float64)
        merged[path] = acc.astype(np.float32)
    return donor.replace(merged)


def _model_meta(spec: MergeSpec) -> dict:
    meta = spec.checkpoints[spec.donor - 1].meta
    if "model" not in meta:
        raise MergeError("donor checkpoint metadata lacks the model configuration")
    return meta["model"]


def model_of(tree: ParamTree, model_meta: dict, seeds: dict | None = None) -> SegModel:
    kind, config = config_from_dict(model_meta)
    return SegModel(config, tree, kind, dict(seeds or {}))


def assemble_revt(spec: MergeSpec) -> SegModel:
    """Averaged encoder + decoder of checkpoint ``spec.donor``."""
    donor = spec.checkpoints[spec.donor - 1].tree
    if select(donor, spec.selector) != select(donor, ENCODER):
        raise MergeError(f"ReVT assembly needs the encoder selector, got {spec.selector}")
    return model_of(average_params(spec), _model_meta(spec))


def merge_checkpoint(spec: MergeSpec) -> Checkpoint:
    """Merged tree plus metadata recording parents, weights, selector and donor."""
    names = list(spec.names) if spec.names else [f"model{i + 1}" for i in range(spec.m)]
    meta = {
        "parents": names,
        "weights": list(spec.weights),
        "selector": str(spec.selector),
        "donor": spec.donor,
        "model": _model_meta(spec),
    }
    return Checkpoint(average_params(spec), meta)


def part_mode(spec: MergeSpec, mode: str) -> MergeSpec:
    selectors = {"encoder_only": ENCODER, "decoder_only": DECODER, "full": ALL, "none": ~ALL}
    if mode not in selectors:
        raise ValueError(f"unknown part mode {mode!r}; expected one of {PART_MODES}")
    return spec.with_(selector=selectors[mode])


def block_mode(spec: MergeSpec, kind: str) -> MergeSpec:
    selectors = {
        "patch_embed": Match(block="patch_embed"),
        "attention": Match(block="attention"),
        "mixffn": Match(block="mixffn"),
        "conv_layers": Match(layer="conv"),
        "fc_layers": Match(layer="fc"),
    }
    if kind not in selectors:
        raise ValueError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")
    return spec.with_(selector=ENCODER & selectors[kind])


def simplex_grid(grid_step: float) -> list[tuple[float, float, float]]:
    """All (a, b, c) on the 3-simplex with coordinates in multiples of ``grid_step``."""
    n = int(round(1.0 / grid_step))
    if n < 1 or abs(n * grid_step - 1.0) > 1e-9:
        raise ValueError(f"grid step {grid_step} must divide 1")
    return [(i / n, j / n, (n - i - j) / n) for i in range(n, -1, -1) for j in range(n - i, -1, -1)]


def sweep_weights(checkpoints: Sequence[Checkpoint], grid_step: float, selector: Selector,
                  eval_fn: Callable[[SegModel], float], donor: int = 1
                  ) -> list[tuple[tuple[float, float, float], float]]:
    """Score every simplex grid point; returns ``[(weights, score)]`` best first."""
    if len(checkpoints) != 3:
        raise MergeError("weight sweeps are defined for exactly three checkpoints")
    base = MergeSpec(tuple(checkpoints), selector=selector, donor=donor)
    meta = _model_meta(base)
    table = []
    for w in simplex_grid(grid_step):
        model = model_of(average_params(base.with_(weights=w)), meta)
        table.append((w, float(eval_fn(model))))
    table.sort(key=lambda r: (-r[1], r[0]))
    return table
