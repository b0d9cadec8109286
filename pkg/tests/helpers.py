"""Shared test oracles: central finite differences and small model factories."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from revtlab import tensor as T
from revtlab.nets import MiniMiTConfig
from revtlab.tensor import Tensor


def _loss_value(build, arrays, proj) -> float:
    with T.no_grad():
        out = build(*[Tensor(a) for a in arrays])
    return float(np.sum(out.data * proj))


def grad_rel_error(build: Callable[..., Tensor], arrays: Sequence[np.ndarray], seed: int = 0,
                   eps: float = 1e-6, max_entries: int | None = None) -> float:
    """Largest relative error between tape gradients and central differences.

    The scalar being differentiated is ``sum(build(*inputs) * R)`` for a fixed
    random projection ``R``.  With ``max_entries`` only that many randomly
    chosen entries per input are probed.
    """
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = build(*ts)
        proj = rng.normal(size=out.shape)
        T.backward(T.tsum(T.mul(out, Tensor(proj))))
        worst = 0.0
        for k, a in enumerate(arrays):
            analytic = ts[k].grad if ts[k].grad is not None else np.zeros_like(a)
            flat = np.arange(a.size)
            if max_entries is not None and a.size > max_entries:
                flat = rng.choice(a.size, max_entries, replace=False)
            num = np.empty(len(flat))
            for n, i in enumerate(flat):
                idx = np.unravel_index(i, a.shape)
                old = a[idx]
                a[idx] = old + eps
                fp = _loss_value(build, arrays, proj)
                a[idx] = old - eps
                fm = _loss_value(build, arrays, proj)
                a[idx] = old
                num[n] = (fp - fm) / (2 * eps)
            ana = analytic.ravel()[flat]
            denom = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-8)
            worst = max(worst, float(np.linalg.norm(num - ana) / denom))
    return worst


def tiny_mit_config(num_classes: int = 3) -> MiniMiTConfig:
    """Two-stage MiniMiT small enough for exhaustive-ish gradient probing."""
    return MiniMiTConfig(num_classes=num_classes, dims=(4, 8), depths=(1, 1), heads=(1, 2),
                         sr_ratios=(2, 1), patch_kernels=(3, 3), patch_strides=(2, 2), mlp_ratio=2,
                         decoder_dim=6)


def _pos(rng, shape):
    return rng.uniform(0.5, 1.5, size=shape)


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.1, 0.1 * np.sign(x) + x, x)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    """One (build, inputs) gradient-check case per differentiable op."""
    n = rng.normal
    labels = rng.integers(0, 3, size=(2, 3, 4))
    labels[0, 0, :2] = 255
    return {
        "add": (T.add, [n(size=(3, 4)), n(size=(3, 4))]),
        "add_bias": (T.add, [n(size=(2, 3, 4)), n(size=(4,))]),
        "sub": (T.sub, [n(size=(3, 4)), n(size=(4,))]),
        "mul": (T.mul, [n(size=(2, 3)), n(size=(2, 3))]),
        "mul_bias": (T.mul, [n(size=(2, 3, 4)), n(size=(4,))]),
        "scale": (lambda a: T.scale(a, -1.7), [n(size=(5,))]),
        "relu": (T.relu, [_away_from_zero(rng, (4, 5))]),
        "gelu": (T.gelu, [n(size=(4, 5))]),
        "sum": (T.tsum, [n(size=(3, 4))]),
        "mean": (T.mean, [n(size=(3, 4))]),
        "mean_axis": (lambda a: T.mean(a, axis=1), [n(size=(2, 3, 4))]),
        "reshape": (lambda a: T.reshape(a, (6, 2)), [n(size=(3, 4))]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [n(size=(2, 3, 4))]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [n(size=(2, 3, 2)), n(size=(2, 1, 2))]),
        "matmul": (T.matmul, [n(size=(2, 3, 4)), n(size=(4, 5))]),
        "matmul_batched": (T.matmul, [n(size=(2, 3, 4)), n(size=(2, 4, 2))]),
        "linear": (T.linear, [n(size=(2, 3, 4)), n(size=(4, 5)), n(size=(5,))]),
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
                   [n(size=(2, 3, 5, 5)), n(size=(4, 3, 3, 3)), n(size=(4,))]),
        "conv2d_strided": (lambda x, w: T.conv2d(x, w, stride=2, padding=1),
                           [n(size=(1, 2, 6, 6)), n(size=(3, 2, 3, 3))]),
        "conv2d_grouped": (lambda x, w: T.conv2d(x, w, groups=2, padding=1),
                           [n(size=(1, 4, 4, 4)), n(size=(6, 2, 3, 3))]),
        "conv2d_depthwise": (lambda x, w, b: T.conv2d(x, w, b, padding=1, groups=3),
                             [n(size=(2, 3, 4, 4)), n(size=(3, 1, 3, 3)), n(size=(3,))]),
        "softmax": (lambda a: T.softmax(a, axis=1), [n(size=(2, 4, 3))]),
        "layernorm": (T.layernorm, [n(size=(3, 6)), _pos(rng, (6,)), n(size=(6,))]),
        "cross_entropy": (lambda z: T.cross_entropy(z, labels), [n(size=(2, 3, 3, 4))]),
        "resize_bilinear": (lambda a: T.resize_bilinear(a, (5, 7)), [n(size=(1, 2, 3, 4))]),
        "resize_down": (lambda a: T.resize_bilinear(a, (2, 3)), [n(size=(1, 1, 4, 6))]),
    }


def network_case(seed: int, kind: str = "mit"):
    """(build, inputs) computing the cross-entropy of a tiny network as a function of input and all params."""
    from revtlab.nets import ConvConfig, SegModel, build_model, forward_logits
    from revtlab.params import ParamTree

    rng = np.random.default_rng(seed)
    if kind == "mit":
        config = tiny_mit_config()
        size = 8
    else:
        config = ConvConfig(num_classes=3, channels=(3, 4, 4, 5), skip_dim=3, decoder_dim=4)
        size = 16
    model = build_model(kind, config, encoder_seed=seed, decoder_seed=seed + 1)
    paths = model.params.paths()
    tags = model.params.tag_map()
    labels = rng.integers(0, config.num_classes, size=(1, size, size))
    x = rng.normal(size=(1, 3, size, size))
    # perturb so zero-initialised biases and unit norms are not at special points
    arrays = [model.params.array(p) + 0.05 * rng.normal(size=model.params[p].shape) for p in paths]

    def build(xt, *ps):
        tree = ParamTree({p: (t, tags[p]) for p, t in zip(paths, ps)})
        return T.cross_entropy(forward_logits(SegModel(config, tree, kind), xt), labels)

    return build, [x] + arrays


def random_tree(rng: np.random.Generator, n: int = 6, max_dim: int = 4):
    """Random tagged ParamTree with ``n`` entries (float32 values)."""
    from revtlab.params import BLOCKS, LAYERS, PARTS, ParamTree, Tags

    entries = {}
    for i in range(n):
        shape = tuple(int(s) for s in rng.integers(1, max_dim + 1, size=rng.integers(1, 3)))
        tags = Tags(PARTS[rng.integers(len(PARTS))], BLOCKS[rng.integers(len(BLOCKS))],
                    LAYERS[rng.integers(len(LAYERS))])
        entries[f"p{i:04d}.weight"] = (Tensor(rng.normal(size=shape).astype(np.float32)), tags)
    return ParamTree(entries)


def same_structure_tree(tree, rng: np.random.Generator):
    """A tree with ``tree``'s paths/tags/shapes but fresh random values."""
    return tree.replace({p: rng.normal(size=tree[p].shape) for p in tree})
