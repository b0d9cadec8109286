"""Training-time augmentation pipeline.

Stages compose as resize -> random crop -> [bilateral filter] -> [random flip]
-> [PhotoAug | PixMix*] -> normalize.  Which optional stages run is decided by
the policy id ``a1`` .. ``a6``:

    a1  baseline                 a4  PixMix* instead of PhotoAug
    a2  without PhotoAug         a5  bilateral filter + baseline
    a3  without PhotoAug, flip   a6  bilateral filter + PixMix*

Stage functions work on H x W x 3 arrays with values in [0, 255] and return
float arrays; :func:`apply_policy` re-quantises to integers between stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .tensor import DimensionError, interp_matrix

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class RngStream:
    """Counter-based random stream (Philox) addressed by ``(seed, stream_id)``.

    Streams with different ids never share state; :meth:`child` derives a
    sub-stream deterministically, e.g. one per (iteration, batch slot).
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.random.SeedSequence([self.seed, self.stream_id]).generate_state(2, dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *ids: int) -> RngStream:
        sub = np.random.SeedSequence([self.seed, self.stream_id, *ids]).generate_state(1, dtype=np.uint64)[0]
        return RngStream(self.seed, int(sub))

    @property
    def counter(self) -> int:
        state = self._gen.bit_generator.state["state"]["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(state)))

    def random(self) -> float:
        return float(self._gen.random())

    def uniform(self, low: float, high: float) -> float:
        return float(self._gen.uniform(low, high))

    def integers(self, low: int, high: int) -> int:
        """Integer in ``[low, high)``."""
        return int(self._gen.integers(low, high))

    def beta(self, a: float, b: float) -> float:
        return float(self._gen.beta(a, b))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal(self, size) -> np.ndarray:
        return self._gen.normal(size=size)


# --------------------------------------------------------------- geometric


def resize(x: np.ndarray, target: tuple[int, int], labels: np.ndarray | None = None):
    """Aspect-preserving resize to the largest size fitting inside ``target``.

    Image: half-pixel bilinear. Labels: nearest neighbour. Returns
    ``(image, labels)`` with ``labels`` None when not given.
    """
    h, w = x.shape[:2]
    s = min(target[0] / h, target[1] / w)
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    if (nh, nw) == (h, w):
        return x.astype(np.float64), None if labels is None else labels.copy()
    ah, aw = interp_matrix(nh, h), interp_matrix(nw, w)
    out = np.einsum("oh,hwc,pw->opc", ah, x.astype(np.float64), aw)
    lab = None
    if labels is not None:
        ri = np.minimum(((np.arange(nh) + 0.5) * h / nh).astype(int), h - 1)
        ci = np.minimum(((np.arange(nw) + 0.5) * w / nw).astype(int), w - 1)
        lab = labels[ri][:, ci]
    return out, lab


def _max_class_fraction(labels: np.ndarray, ignore: int = 255) -> float:
    valid = labels[labels != ignore]
    if valid.size == 0:
        return 0.0
    return np.bincount(valid.ravel()).max() / valid.size


def random_crop(x: np.ndarray, labels: np.ndarray, crop_size: tuple[int, int], rho: float,
                rng: RngStream, max_tries: int = 10):
    """Crop where no class covers more than ``rho`` of the (non-ignore) pixels.

    Up to ``max_tries`` crops are drawn; if none qualifies the last one is kept.
    """
    h, w = labels.shape
    ch, cw = crop_size
    if ch > h or cw > w:
        raise DimensionError(f"crop {crop_size} larger than image {(h, w)}")
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    for _ in range(max_tries):
        y0 = rng.integers(0, h - ch + 1)
        x0 = rng.integers(0, w - cw + 1)
        lab = labels[y0:y0 + ch, x0:x0 + cw]
        if _max_class_fraction(lab) <= rho:
            break
    return x[y0:y0 + ch, x0:x0 + cw], lab


def random_flip(x: np.ndarray, labels: np.ndarray | None, rng: RngStream, p: float = 0.5):
    if rng.random() < p:
        return x[:, ::-1], None if labels is None else labels[:, ::-1]
    return x, labels


# -------------------------------------------------------------- photometric


def rgb_to_hsv(x: np.ndarray) -> np.ndarray:
    """RGB in [0,255] -> HSV with hue in degrees [0,360), saturation [0,1], value [0,255]."""
    x = x.astype(np.float64)
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    v = x.max(axis=-1)
    mn = x.min(axis=-1)
    delta = v - mn
    s = np.where(v > 0, delta / np.where(v > 0, v, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    hr = ((g - b) / safe) % 6
    hg = (b - r) / safe + 2
    hb = (r - g) / safe + 4
    h = np.where(v == r, hr, np.where(v == g, hg, hb))
    h = np.where(delta > 0, h * 60.0, 0.0) % 360.0
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(x: np.ndarray) -> np.ndarray:
    h, s, v = x[..., 0] % 360.0, np.clip(x[..., 1], 0, 1), x[..., 2]
    c = v * s
    hp = h / 60.0
    xx = c * (1 - np.abs(hp % 2 - 1))
    m = v - c
    z = np.zeros_like(h)
    sector = np.floor(hp).astype(int) % 6
    r = np.choose(sector, [c, xx, z, z, xx, c])
    g = np.choose(sector, [xx, c, c, xx, z, z])
    b = np.choose(sector, [z, z, xx, c, c, xx])
    return np.stack([r + m, g + m, b + m], axis=-1)


def adjust_brightness(x: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(x.astype(np.float64) + delta, 0, 255)


def adjust_contrast(x: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(x.astype(np.float64) * factor, 0, 255)


def photo_aug(x: np.ndarray, rng: RngStream, brightness: int = 32, contrast=(0.5, 1.5),
              saturation=(0.5, 1.5), hue: float = 18.0, p: float = 0.5) -> np.ndarray:
    """Photometric distortion; every step is gated with probability ``p``.

    Draw order: brightness gate [+delta], contrast mode, (mode 0) contrast
    gate [+factor], saturation gate [+factor], hue gate [+delta],
    (mode 1) contrast gate [+factor], channel-swap gate [+permutation].
    """
    img = x.astype(np.float64)
    if rng.random() < p:
        img = adjust_brightness(img, rng.integers(-brightness, brightness + 1))
    mode = rng.integers(0, 2)
    if mode == 0 and rng.random() < p:
        img = adjust_contrast(img, rng.uniform(*contrast))
    hsv = rgb_to_hsv(img)
    if rng.random() < p:
        hsv[..., 1] = np.clip(hsv[..., 1] * rng.uniform(*saturation), 0, 1)
    if rng.random() < p:
        hsv[..., 0] = (hsv[..., 0] + rng.uniform(-hue, hue)) % 360.0
    img = np.clip(hsv_to_rgb(hsv), 0, 255)
    if mode == 1 and rng.random() < p:
        img = adjust_contrast(img, rng.uniform(*contrast))
    if rng.random() < p:
        img = img[..., rng.permutation(3)]
    return img


# ---------------------------------------------------------------- bilateral


def bilateral_filter(x: np.ndarray, kernel_size: int, sigma_s: float = 75.0,
                     sigma_c: float = 75.0) -> np.ndarray:
    """Edge-preserving smoothing; neighbourhoods are truncated at the border.

    Written as ``x_i + sum_j w_ij (x_j - x_i) / sum_j w_ij`` so constant
    regions come out exactly unchanged.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {kernel_size}")
    img = x.astype(np.float64)
    if kernel_size == 1:
        return img.copy()
    h, w = img.shape[:2]
    r = kernel_size // 2
    pad = np.pad(img, ((r, r), (r, r), (0, 0)))
    inside = np.pad(np.ones((h, w), dtype=bool), r)
    acc = np.zeros_like(img)
    wsum = np.zeros((h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            nb = pad[r + dy:r + dy + h, r + dx:r + dx + w]
            valid = inside[r + dy:r + dy + h, r + dx:r + dx + w]
            diff = nb - img
            color2 = (diff * diff).sum(axis=-1)
            wgt = math.exp(-0.5 * (dy * dy + dx * dx) / sigma_s ** 2) * np.exp(-0.5 * color2 / sigma_c ** 2)
            wgt = np.where(valid, wgt, 0.0)
            acc += wgt[..., None] * diff
            wsum += wgt
    return img + acc / wsum[..., None]


BILATERAL_KERNELS = tuple(range(1, 16, 2))


def random_bilateral_filter(x: np.ndarray, rng: RngStream, p: float = 0.5, sigma_s: float = 75.0,
                            sigma_c: float = 75.0, kernels: Sequence[int] = BILATERAL_KERNELS) -> np.ndarray:
    if rng.random() < p:
        k = kernels[rng.integers(0, len(kernels))]
        return bilateral_filter(x, k, sigma_s, sigma_c)
    return x.astype(np.float64)


# ------------------------------------------------------------------ PixMix*


def make_mixers(n: int, size: tuple[int, int], seed: int) -> list[np.ndarray]:
    """Procedural fBm/plasma images in [0,1], one spectral slope per image."""
    if n < 1:
        raise ValueError("need at least one mixer")
    h, w = size
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    freq = np.sqrt(fy ** 2 + fx ** 2)
    freq[0, 0] = 1.0
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        alpha = rng.uniform(1.0, 2.5)
        chans = []
        for _ in range(3):
            spec = (rng.normal(size=freq.shape) + 1j * rng.normal(size=freq.shape)) / freq ** alpha
            spec[0, 0] = 0
            chans.append(np.fft.irfft2(spec, s=(h, w)))
        img = np.stack(chans, axis=-1)
        img -= img.min()
        img /= max(img.max(), 1e-12)
        out.append(img)
    return out


def mix_add(a: np.ndarray, b: np.ndarray, wa: float, wb: float) -> np.ndarray:
    return np.clip(wa * a + wb * b, 0.0, 1.0)


def mix_multiply(a: np.ndarray, b: np.ndarray, wa: float, wb: float) -> np.ndarray:
    return np.clip((2 * a) ** wa * (2 * b) ** wb / 2, 0.0, 1.0)


MIX_OPS: tuple[Callable, ...] = (mix_add, mix_multiply)


def pixmix_star(x: np.ndarray, mixers: Sequence[np.ndarray], rng: RngStream, k_max: int = 3,
                beta: float = 3.0, labels: np.ndarray | None = None,
                trace: list | None = None):
    """PixMix restricted to the baseline augmentations (random flip + PhotoAug).

    ``x`` has values in [0,255]; mixing happens in [0,1] and the result is
    rescaled to [0,255].  When the starting image is a flipped augmentation
    the ``labels`` are flipped with it.  Returns ``(image, labels)``.

    Draw order: start branch (0 augment, 1 original), rounds k in {0..K};
    per round: source (0 augment, 1 mixer) [+mixer index], op (0 add,
    1 multiply), weight_a, weight_b ~ Beta(beta, beta).
    """
    if not len(mixers):
        raise ValueError("PixMix* needs a non-empty mixer set")
    x01 = x.astype(np.float64) / 255.0

    def augment():
        flipped = rng.random() < 0.5
        img = x[:, ::-1] if flipped else x
        return photo_aug(img, rng) / 255.0, flipped

    if rng.integers(0, 2) == 0:
        cur, flipped = augment()
        if flipped and labels is not None:
            labels = labels[:, ::-1]
        start = "augment"
    else:
        cur, start = x01, "original"
    rounds = rng.integers(0, k_max + 1)
    if trace is not None:
        trace.append(("start", start))
        trace.append(("rounds", rounds))
    for _ in range(rounds):
        if rng.integers(0, 2) == 0:
            mix, _ = augment()
            src = "augment"
        else:
            idx = rng.integers(0, len(mixers))
            mix = mixers[idx]
            if mix.shape != cur.shape:
                mix = resize(mix * 255.0, cur.shape[:2])[0] / 255.0
            src = f"mixer{idx}"
        op = rng.integers(0, 2)
        wa, wb = rng.beta(beta, beta), rng.beta(beta, beta)
        cur = MIX_OPS[op](cur, mix, wa, wb)
        if trace is not None:
            trace.append(("round", src, MIX_OPS[op].__name__, wa, wb))
    return np.clip(cur, 0.0, 1.0) * 255.0, labels


# ---------------------------------------------------------------- normalise


def normalize(x: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """``(x/255 - mean) / std`` per channel; H x W x 3 in, H x W x 3 float32 out."""
    m = np.asarray(mean, dtype=np.float64)
    s = np.asarray(std, dtype=np.float64)
    return ((x.astype(np.float64) / 255.0 - m) / s).astype(np.float32)


# ------------------------------------------------------------------ policies


@dataclass(frozen=True)
class AugPolicy:
    id: str
    stages: tuple[str, ...]
    resize_to: tuple[int, int] = (64, 64)
    crop_size: tuple[int, int] = (32, 32)
    rho: float = 0.75
    sigma_s: float = 75.0
    sigma_c: float = 75.0
    bf_p: float = 0.5
    flip_p: float = 0.5
    k_max: int = 3
    beta: float = 3.0
    mean: tuple[float, ...] = IMAGENET_MEAN
    std: tuple[float, ...] = IMAGENET_STD

    def with_sizes(self, resize_to: tuple[int, int], crop_size: tuple[int, int]) -> AugPolicy:
        return replace(self, resize_to=tuple(resize_to), crop_size=tuple(crop_size))


_POLICY_STAGES = {
    "a1": ("resize", "crop", "flip", "photo_aug", "normalize"),
    "a2": ("resize", "crop", "flip", "normalize"),
    "a3": ("resize", "crop", "normalize"),
    "a4": ("resize", "crop", "flip", "pixmix", "normalize"),
    "a5": ("resize", "crop", "bilateral", "flip", "photo_aug", "normalize"),
    "a6": ("resize", "crop", "bilateral", "flip", "pixmix", "normalize"),
}
POLICY_IDS = tuple(_POLICY_STAGES)


def get_policy(policy_id: str, **params) -> AugPolicy:
    if policy_id not in _POLICY_STAGES:
        raise ValueError(f"unknown augmentation policy {policy_id!r}; expected one of {POLICY_IDS}")
    return AugPolicy(policy_id, _POLICY_STAGES[policy_id], **params)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


@dataclass
class Augmented:
    image: np.ndarray          # 3 x H x W float32, normalised
    labels: np.ndarray         # H x W uint8
    stages: list[str] = field(default_factory=list)
    raw: np.ndarray | None = None  # H x W x 3 uint8 right before normalisation


def apply_policy(policy: AugPolicy, image: np.ndarray, labels: np.ndarray, rng: RngStream,
                 mixers: Sequence[np.ndarray] | None = None) -> Augmented:
    log: list[str] = []
    x, lab = image, labels
    for stage in policy.stages:
        if stage == "resize":
            x, lab = resize(x, policy.resize_to, lab)
            x = _quantize(x)
        elif stage == "crop":
            x, lab = random_crop(x, lab, policy.crop_size, policy.rho, rng)
        elif stage == "bilateral":
            x = _quantize(random_bilateral_filter(x, rng, policy.bf_p, policy.sigma_s, policy.sigma_c))
        elif stage == "flip":
            x, lab = random_flip(x, lab, rng, policy.flip_p)
        elif stage == "photo_aug":
            x = _quantize(photo_aug(x, rng))
        elif stage == "pixmix":
            if not mixers:
                raise ValueError(f"policy {policy.id} needs a mixer set")
            out, lab = pixmix_star(x, mixers, rng, policy.k_max, policy.beta, labels=lab)
            x = _quantize(out)
        elif stage == "normalize":
            raw = np.ascontiguousarray(x)
            x = normalize(x, policy.mean, policy.std)
        else:
            raise ValueError(f"unknown stage {stage!r}")
        log.append(stage)
    return Augmented(np.ascontiguousarray(x.transpose(2, 0, 1)), np.ascontiguousarray(lab), log, raw)


def eval_transform(image: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    """Deterministic evaluation input: normalisation only (3 x H x W)."""
    return np.ascontiguousarray(normalize(image, mean, std).transpose(2, 0, 1))
