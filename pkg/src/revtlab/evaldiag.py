"""mIoU evaluation, domain-group aggregation and cosine-similarity diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .params import ALL, ENCODER, ParamTree, Selector, select
from .tensor import UsageError

IGNORE = 255
SCOPES = ("per_layer", "encoder_mean", "full_mean")


class UndefinedSimilarityError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    """Rows are ground-truth classes, columns predictions."""

    counts: np.ndarray
    ignored: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> ConfusionMatrix:
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred: np.ndarray, labels: np.ndarray, ignore: int = IGNORE) -> None:
        pred = np.asarray(pred)
        labels = np.asarray(labels)
        if pred.shape != labels.shape:
            raise UsageError(f"prediction shape {pred.shape} != label shape {labels.shape}")
        s = self.num_classes
        valid = labels != ignore
        lab = labels[valid].astype(np.int64)
        prd = pred[valid].astype(np.int64)
        if lab.size and (lab.min() < 0 or lab.max() >= s):
            raise UsageError(f"label values outside 0..{s - 1} (ignore={ignore})")
        if prd.size and (prd.min() < 0 or prd.max() >= s):
            raise UsageError(f"prediction values outside 0..{s - 1}")
        self.counts += np.bincount(lab * s + prd, minlength=s * s).reshape(s, s)
        self.ignored += int((~valid).sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where the class is absent from labels and predictions."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


@dataclass
class EvalReport:
    per_class_iou: dict[int, float]
    miou: float
    class_subset: tuple[int, ...]
    confusion: ConfusionMatrix
    domain: str = ""


def confusion(predictions, labels, num_classes: int, ignore: int = IGNORE) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(num_classes)
    for p, l in _pairs(predictions, labels):
        cm.update(p, l, ignore)
    return cm


def _pairs(predictions, labels):
    if isinstance(predictions, np.ndarray) and isinstance(labels, np.ndarray):
        if predictions.ndim == 2:
            return [(predictions, labels)]
        return list(zip(predictions, labels))
    preds, labs = list(predictions), list(labels)
    if len(preds) != len(labs):
        raise UsageError("predictions and labels differ in length")
    return list(zip(preds, labs))


def report_from_confusion(cm: ConfusionMatrix, class_subset: Iterable[int] | None = None,
                          domain: str = "") -> EvalReport:
    if cm.total == 0:
        raise UsageError("empty evaluation set (no labelled pixels)")
    subset = tuple(range(cm.num_classes)) if class_subset is None else tuple(sorted(set(class_subset)))
    if any(not 0 <= c < cm.num_classes for c in subset):
        raise UsageError(f"class subset {subset} outside 0..{cm.num_classes - 1}")
    ious = cm.iou()
    per_class = {c: float(ious[c]) for c in subset}
    present = [v for v in per_class.values() if not math.isnan(v)]
    value = float(np.mean(present)) if present else float("nan")
    return EvalReport(per_class, value, subset, cm, domain)


def miou(predictions, labels, class_subset: Iterable[int] | None = None, num_classes: int | None = None,
         ignore: int = IGNORE, domain: str = "") -> EvalReport:
    """Mean IoU over ``class_subset`` (default: all classes) excluding zero-union classes.

    ``predictions`` and ``labels`` are integer maps: a single H x W pair, a
    B x H x W stack, or equal-length sequences of H x W maps.
    """
    pairs = _pairs(predictions, labels)
    if not pairs:
        raise UsageError("empty evaluation set")
    if num_classes is None:
        hi = 0
        for p, l in pairs:
            lv = l[l != ignore]
            hi = max(hi, int(p.max()) + 1, int(lv.max()) + 1 if lv.size else 0)
        if class_subset is not None:
            hi = max([hi] + [c + 1 for c in class_subset])
        num_classes = hi
    cm = ConfusionMatrix.empty(num_classes)
    for p, l in pairs:
        cm.update(p, l, ignore)
    return report_from_confusion(cm, class_subset, domain)


# ---------------------------------------------------------------- aggregation


@dataclass
class GroupScore:
    group: str
    miou: float
    std: float
    per_model: list[float] = field(default_factory=list)


def aggregate(scores: Mapping[str, float | Sequence[float]], grouping: Mapping[str, Sequence[str]]
              ) -> dict[str, GroupScore]:
    """Group means of per-domain mIoUs.

    ``scores`` maps domain -> mIoU, or domain -> list of mIoUs (one per base
    model).  Each model's group value is the mean over the group's domains;
    the reported value is the mean over models with the (population) standard
    deviation across models.
    """
    out = {}
    for group, domains in grouping.items():
        if not domains:
            raise UsageError(f"group {group!r} has no domains")
        rows = [np.atleast_1d(np.asarray(scores[d], dtype=np.float64)) for d in domains]
        if len({r.size for r in rows}) != 1:
            raise UsageError(f"group {group!r}: domains report different model counts")
        per_model = np.mean(np.stack(rows), axis=0)
        out[group] = GroupScore(group, float(np.mean(per_model)), float(np.std(per_model)), per_model.tolist())
    return out


def default_grouping(domains: Sequence[str], source: str) -> dict[str, list[str]]:
    """Source dev, OOD mean (non-source dev splits) and test* mean (non-source test splits)."""
    targets = [d for d in domains if d != source]
    groups = {"source": [f"{source}/dev"]}
    if targets:
        groups["ood_mean"] = [f"{d}/dev" for d in targets]
        groups["test_mean"] = [f"{d}/test" for d in targets]
    return groups


# ----------------------------------------------------------------- cosine


def _layer_of(path: str) -> str:
    return path.rsplit(".", 1)[0]


def _cos(a: np.ndarray, b: np.ndarray, what: str) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError(f"zero-norm parameters in {what}")
    return float(np.dot(a, b) / (na * nb))


def _flat(tree: ParamTree, paths: Sequence[str]) -> np.ndarray:
    return np.concatenate([tree.array(p).astype(np.float64).ravel() for p in paths])


def _mean_pairwise(trees: Sequence[ParamTree], paths: Sequence[str], what: str) -> float:
    vecs = [_flat(t, paths) for t in trees]
    return float(np.mean([_cos(vecs[i], vecs[j], what) for i, j in combinations(range(len(vecs)), 2)]))


def cosine_similarity(trees: Sequence[ParamTree], scope: str = "encoder_mean",
                      selector: Selector | None = None) -> float | dict[str, float]:
    """Mean pairwise cosine similarity of flattened parameters.

    ``per_layer`` returns ``{layer: value}`` over encoder layers (a layer is a
    path without its final ``.weight``/``.bias`` component); the other scopes
    return one number over the encoder or the whole network.
    """
    if len(trees) < 2:
        raise UsageError("cosine similarity needs at least two trees")
    if scope not in SCOPES:
        raise UsageError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    ref = trees[0]
    for t in trees[1:]:
        if t.structure() != ref.structure():
            raise UsageError("trees differ in structure")
    if selector is None:
        selector = ALL if scope == "full_mean" else ENCODER
    paths = select(ref, selector)
    if not paths:
        raise UsageError(f"selector {selector} matches no parameters")
    if scope != "per_layer":
        return _mean_pairwise(trees, paths, scope)
    layers: dict[str, list[str]] = {}
    for p in paths:
        layers.setdefault(_layer_of(p), []).append(p)
    return {name: _mean_pairwise(trees, ps, name) for name, ps in layers.items()}


# -------------------------------------------------------------------- CSV


def write_iou_csv(path: str | Path, reports: Mapping[str, EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "class", "iou"])
        for domain, rep in reports.items():
            for c, v in rep.per_class_iou.items():
                w.writerow([domain, c, "" if math.isnan(v) else f"{v:.6f}"])


def write_group_csv(path: str | Path, groups: Mapping[str, GroupScore]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "miou", "std"])
        for g in groups.values():
            w.writerow([g.group, f"{g.miou:.6f}", f"{g.std:.6f}"])
