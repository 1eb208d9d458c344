"""Feature fields over latent grids.

Latents are ``(H, W, C)`` float arrays indexed ``z[y, x, c]``; points are
``(x, y)`` pairs in grid cells. Everything here is linear in the latent so the
motion-supervision gradient can be written down exactly (no autodiff).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np


class PatchBoundsError(ValueError):
    pass


class FeatureExtractor:
    """Identity or a stack of fixed stride-1, zero-padded convolutions.

    Each kernel has shape ``(k, k, c_in, c_out)`` with odd ``k``; layer output is
    ``out[y, x, o] = sum_{i, j, c} K[i, j, c, o] * z[y + i - k//2, x + j - k//2, c]``.
    """

    def __init__(self, kernels: Sequence[np.ndarray] = ()):
        ks = []
        for K in kernels:
            K = np.asarray(K, dtype=np.float64)
            if K.ndim != 4 or K.shape[0] != K.shape[1] or K.shape[0] % 2 == 0:
                raise ValueError(f"kernel must be (k, k, c_in, c_out) with odd k, got {K.shape}")
            if ks and ks[-1].shape[3] != K.shape[2]:
                raise ValueError("kernel channel counts do not chain")
            ks.append(K)
        self.kernels = tuple(ks)

    @property
    def kind(self) -> str:
        return "conv" if self.kernels else "identity"

    def out_channels(self, c_in: int) -> int:
        if not self.kernels:
            return c_in
        if self.kernels[0].shape[2] != c_in:
            raise ValueError(f"extractor expects {self.kernels[0].shape[2]} channels, got {c_in}")
        return self.kernels[-1].shape[3]

    def __call__(self, z: np.ndarray) -> np.ndarray:
        out = z
        for K in self.kernels:
            out = _correlate(out, K)
        return out

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        out = g
        for K in reversed(self.kernels):
            out = _correlate_adjoint(out, K)
        return out

    def describe(self) -> dict:
        return {"kind": self.kind, "kernels": [K.tolist() for K in self.kernels]}


def box_extractor(channels: int, size: int = 3) -> FeatureExtractor:
    """Per-channel ``size x size`` averaging."""
    K = np.zeros((size, size, channels, channels))
    for c in range(channels):
        K[:, :, c, c] = 1.0 / size**2
    return FeatureExtractor([K])


def random_conv_extractor(channels: int, out_channels: int, size: int = 3,
                          layers: int = 1, seed: int = 0) -> FeatureExtractor:
    rng = np.random.default_rng(seed)
    ks, cin = [], channels
    for _ in range(layers):
        ks.append(rng.normal(scale=1.0 / size, size=(size, size, cin, out_channels)))
        cin = out_channels
    return FeatureExtractor(ks)


def _correlate(z, K):
    k = K.shape[0]
    p = k // 2
    h, w, _ = z.shape
    zp = np.pad(z, ((p, p), (p, p), (0, 0)))
    out = np.zeros((h, w, K.shape[3]))
    for i in range(k):
        for j in range(k):
            out += zp[i:i + h, j:j + w, :] @ K[i, j]
    return out


def _correlate_adjoint(g, K):
    k = K.shape[0]
    p = k // 2
    h, w, _ = g.shape
    gp = np.zeros((h + 2 * p, w + 2 * p, K.shape[2]))
    for i in range(k):
        for j in range(k):
            gp[i:i + h, j:j + w, :] += g @ K[i, j].T
    return gp[p:p + h, p:p + w, :]


# --- bilinear patch sampling -------------------------------------------------

def _patch_axes(center, radius: int, shape):
    h, w = shape
    if h < 2 or w < 2:
        raise PatchBoundsError("grid must be at least 2 x 2")
    cx, cy = float(center[0]), float(center[1])
    if not (np.isfinite(cx) and np.isfinite(cy)):
        raise PatchBoundsError(f"non-finite patch center {center}")
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    xs, ys = cx + offs, cy + offs
    if xs[0] < 0 or ys[0] < 0 or xs[-1] > w - 1 or ys[-1] > h - 1:
        raise PatchBoundsError(
            f"patch at ({cx:g}, {cy:g}) radius {radius} leaves {w}x{h} grid")
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2)
    return x0, xs - x0, y0, ys - y0


def patch_in_bounds(center, radius: int, shape) -> bool:
    try:
        _patch_axes(center, radius, shape)
    except PatchBoundsError:
        return False
    return True


def sample_field(feat: np.ndarray, center, radius: int) -> np.ndarray:
    """Bilinearly sample a ``(2r+1, 2r+1, C)`` block from an already-extracted field."""
    x0, fx, y0, fy = _patch_axes(center, radius, feat.shape[:2])
    fx, fy = fx[None, :, None], fy[:, None, None]
    a = feat[np.ix_(y0, x0)]
    b = feat[np.ix_(y0, x0 + 1)]
    c = feat[np.ix_(y0 + 1, x0)]
    d = feat[np.ix_(y0 + 1, x0 + 1)]
    return a * ((1 - fy) * (1 - fx)) + b * ((1 - fy) * fx) + c * (fy * (1 - fx)) + d * (fy * fx)


def scatter_patch(grad_block: np.ndarray, center, radius: int, out: np.ndarray) -> None:
    """Adjoint of :func:`sample_field`: accumulate ``grad_block`` into ``out`` in place."""
    x0, fx, y0, fy = _patch_axes(center, radius, out.shape[:2])
    Y, X = np.meshgrid(y0, x0, indexing="ij")
    wy0, wy1 = (1 - fy)[:, None, None], fy[:, None, None]
    wx0, wx1 = (1 - fx)[None, :, None], fx[None, :, None]
    np.add.at(out, (Y, X), grad_block * (wy0 * wx0))
    np.add.at(out, (Y, X + 1), grad_block * (wy0 * wx1))
    np.add.at(out, (Y + 1, X), grad_block * (wy1 * wx0))
    np.add.at(out, (Y + 1, X + 1), grad_block * (wy1 * wx1))


def sample_patch(z: np.ndarray, F: FeatureExtractor, center, radius: int) -> np.ndarray:
    block = sample_field(F(z), center, radius)
    if not np.all(np.isfinite(block)):
        raise FloatingPointError("non-finite features in patch")
    return block


def patch_l1(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"patch shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


# --- loss assembly -----------------------------------------------------------

@dataclass
class PatchTerm:
    """``weight * || sample(F(z), center, radius) - target ||_1``; target is constant."""
    center: tuple
    radius: int
    target: np.ndarray
    weight: float = 1.0


@dataclass
class MaskedDifference:
    """``weight * || (T(z) - reference) * keep ||_1`` with reference held constant.

    ``transform``/``adjoint`` default to the identity; ``keep`` is an ``(H, W)`` grid.
    """
    reference: np.ndarray
    keep: np.ndarray
    weight: float = 1.0
    transform: Callable | None = None
    adjoint: Callable | None = None


def loss_gradient(z: np.ndarray, F: FeatureExtractor, terms: Sequence[PatchTerm] = (),
                  masked: MaskedDifference | None = None,
                  grad_mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Loss value and its reverse-mode gradient with respect to ``z``.

    ``grad_mask`` (``(H, W)``) multiplies the final gradient; the loss is unaffected.
    """
    loss = 0.0
    grad = np.zeros_like(z, dtype=np.float64)
    if terms:
        feat = F(z)
        gfeat = np.zeros_like(feat)
        for t in terms:
            diff = sample_field(feat, t.center, t.radius) - t.target
            loss += t.weight * float(np.abs(diff).sum())
            scatter_patch(t.weight * np.sign(diff), t.center, t.radius, gfeat)
        grad += F.adjoint(gfeat)
    if masked is not None and masked.weight != 0:
        zt = masked.transform(z) if masked.transform is not None else z
        keep = np.asarray(masked.keep, dtype=np.float64)[:, :, None]
        diff = (zt - masked.reference) * keep
        loss += masked.weight * float(np.abs(diff).sum())
        g = masked.weight * np.sign(diff) * keep
        grad += masked.adjoint(g) if masked.adjoint is not None else g
    if grad_mask is not None:
        grad *= np.asarray(grad_mask, dtype=np.float64)[:, :, None]
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise FloatingPointError("non-finite loss or gradient")
    return loss, grad


# --- keypoint re-detection ---------------------------------------------------

class Detection(NamedTuple):
    point: tuple[int, int]
    similarity: float
    ties: int


def detect_points(feat_ref: np.ndarray, feat_new: np.ndarray, points,
                  tie_tol: float = 1e-12) -> list[Detection]:
    """Max cosine similarity search over the whole of ``feat_new``.

    The query vector is read at each annotated point rounded to the grid. ``ties``
    counts grid cells within ``tie_tol`` of the winning similarity (1 = unique).
    """
    if feat_ref.shape[2] != feat_new.shape[2]:
        raise ValueError("feature fields have different channel counts")
    h, w, c = feat_new.shape
    flat = feat_new.reshape(-1, c)
    norms = np.linalg.norm(flat, axis=1)
    out = []
    for p in points:
        x, y = int(round(float(p[0]))), int(round(float(p[1])))
        if not (0 <= x < feat_ref.shape[1] and 0 <= y < feat_ref.shape[0]):
            raise PatchBoundsError(f"annotated point {tuple(p)} outside reference field")
        q = feat_ref[y, x]
        qn = np.linalg.norm(q)
        if qn == 0:
            raise ValueError(f"zero-norm feature at annotated point {tuple(p)}")
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = (flat @ q) / (norms * qn)
        sim = np.where(norms > 0, sim, -np.inf)
        best = int(np.argmax(sim))  # first max = row-major tie break
        ties = int(np.count_nonzero(sim >= sim[best] - tie_tol))
        out.append(Detection((best % w, best // w), float(sim[best]), ties))
    return out
