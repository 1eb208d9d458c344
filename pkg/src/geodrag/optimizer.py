"""Drag optimisation over a latent grid with point fixation and copy-and-paste.

One drag timestep runs ``B`` iterations of
motion supervision (``J`` gradient steps) -> point tracking -> fixation update,
then copy-pastes the patches of fixated points onto their targets and applies
one denoiser step. After ``T_drag`` such timesteps, ``N_post`` further timesteps
paste the original patches (taken at the initial handle points) onto the targets
before each denoiser step.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .features import (FeatureExtractor, MaskedDifference, PatchBoundsError, PatchTerm,
                       box_extractor, detect_points, loss_gradient, sample_field)
from .latentio import read_latent, write_latent


@dataclass
class DragConfig:
    r1: int = 4
    r2: int = 12
    r_grad: int = 3
    r_cp: int = 2
    beta_step: float = 2.0
    eta: float = 0.1
    J: int = 1
    B: int = 10
    T_drag: int = 6
    N_post: int = 5
    lam: float = 0.1
    l: float = 1.0
    u: float = 3.0
    alpha: float = 1.0
    beta_blur: float = 0.8
    seed: int = 0
    features: str = "identity"
    denoiser: str = "identity"
    denoiser_sigma: float = 0.5
    denoiser_command: str = ""
    # ablation switches
    fixation: bool = True
    reentry: bool = True
    step_copy_paste: bool = True
    final_copy_paste: bool = True

    # JSON uses "lambda"; the attribute can't.
    _aliases = {"lambda": "lam"}

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("r1", "r2", "r_grad", "r_cp"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 0:
                raise ValueError(f"{name} must be a non-negative integer")
        if self.r2 < self.r1:
            raise ValueError("r2 must be >= r1")
        if not 0 < self.l < self.u:
            raise ValueError("need 0 < l < u")
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.J < 1 or self.B < 1 or self.T_drag < 1 or self.N_post < 0:
            raise ValueError("need J, B, T_drag >= 1 and N_post >= 0")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not 0 <= self.beta_blur < 1:
            raise ValueError("beta_blur must lie in [0, 1)")
        if self.beta_step < 0:
            raise ValueError("beta_step must be >= 0")
        if self.features not in ("identity", "box3"):
            raise ValueError(f"unknown features {self.features!r}")
        if self.denoiser not in ("identity", "gaussian", "external"):
            raise ValueError(f"unknown denoiser {self.denoiser!r}")
        if self.denoiser == "external" and not self.denoiser_command:
            raise ValueError("external denoiser needs denoiser_command")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def keys(cls) -> list[str]:
        return [("lambda" if f.name == "lam" else f.name) for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "DragConfig":
        kw = {}
        names = {f.name: f for f in dataclasses.fields(cls)}
        for k, v in d.items():
            name = cls._aliases.get(k, k)
            if name not in names:
                raise KeyError(f"unknown config key {k!r}")
            kw[name] = _coerce(names[name].type, v, k)
        return cls(**kw)

    def replace(self, **kw) -> "DragConfig":
        kw = {self._aliases.get(k, k): v for k, v in kw.items()}
        return dataclasses.replace(self, **kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _coerce(typ, v, key):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if isinstance(v, str):
                if v.lower() in ("true", "1", "yes"):
                    return True
                if v.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(v)
            return bool(v)
        if typ == "int":
            if isinstance(v, float) and not v.is_integer():
                raise ValueError(v)
            return int(v)
        if typ == "float":
            return float(v)
        return str(v)
    except (TypeError, ValueError):
        raise ValueError(f"config key {key!r}: cannot read {v!r} as {typ}") from None


# --- denoisers ---------------------------------------------------------------

class IdentityDenoiser:
    kind = "identity"

    def __call__(self, z):
        return z.copy()

    def adjoint(self, g):
        return g


class GaussianDenoiser:
    """Separable Gaussian smoothing with reflected borders.

    The 1-D operators are materialised as matrices so the adjoint is exact.
    """
    kind = "gaussian"

    def __init__(self, sigma: float):
        if sigma <= 0:
            raise ValueError("sigma must be > 0")
        self.sigma = float(sigma)
        self._mats = {}

    def _mat(self, n):
        if n not in self._mats:
            self._mats[n] = gaussian_filter1d(np.eye(n), self.sigma, axis=0, mode="reflect")
        return self._mats[n]

    def __call__(self, z):
        A, Bm = self._mat(z.shape[0]), self._mat(z.shape[1])
        return np.einsum("ij,jwc->iwc", A, np.einsum("vw,hwc->hvc", Bm, z))

    def adjoint(self, g):
        A, Bm = self._mat(g.shape[0]), self._mat(g.shape[1])
        return np.einsum("vw,hvc->hwc", Bm, np.einsum("ij,iwc->jwc", A, g))


class ExternalDenoiser:
    """Round-trips the latent through a container file and a user command.

    ``command`` may use ``{input}`` and ``{output}`` placeholders. It is treated as
    a black box: the non-editable loss term falls back to the raw latent.
    """
    kind = "external"
    adjoint = None

    def __init__(self, command: str, workdir=None):
        self.command = command
        self.workdir = workdir

    def __call__(self, z):
        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            src, dst = Path(tmp, "in.latent"), Path(tmp, "out.latent")
            write_latent(src, z)
            args = [a.format(input=src, output=dst) for a in shlex.split(self.command)]
            subprocess.run(args, check=True, capture_output=True)
            out = read_latent(dst)
        if out.shape != z.shape:
            raise ValueError(f"external denoiser changed shape {z.shape} -> {out.shape}")
        return out


def make_denoiser(cfg: DragConfig):
    if cfg.denoiser == "identity":
        return IdentityDenoiser()
    if cfg.denoiser == "gaussian":
        return GaussianDenoiser(cfg.denoiser_sigma)
    return ExternalDenoiser(cfg.denoiser_command)


def make_extractor(cfg: DragConfig, channels: int) -> FeatureExtractor:
    if cfg.features == "box3":
        return box_extractor(channels, 3)
    return FeatureExtractor()


# --- state -------------------------------------------------------------------

@dataclass
class DragState:
    points: np.ndarray
    targets: np.ndarray
    origin: np.ndarray
    fixated: np.ndarray
    k: int = 0
    t: int = 0

    @classmethod
    def start(cls, sources, targets) -> "DragState":
        src = np.array(sources, dtype=np.float64).reshape(-1, 2)
        tgt = np.array(targets, dtype=np.float64).reshape(-1, 2)
        if src.shape != tgt.shape:
            raise ValueError("sources and targets differ in length")
        return cls(points=src.copy(), targets=tgt, origin=src.copy(),
                   fixated=np.zeros(len(src), dtype=bool))

    @property
    def e(self) -> np.ndarray:
        return np.linalg.norm(self.targets - self.points, axis=1)

    def directions(self) -> np.ndarray:
        delta = self.targets - self.points
        e = np.linalg.norm(delta, axis=1, keepdims=True)
        return np.divide(delta, e, out=np.zeros_like(delta), where=e > 0)

    def copy(self) -> "DragState":
        return dataclasses.replace(self, points=self.points.copy(), fixated=self.fixated.copy())


class DragError(RuntimeError):
    """A drag run failed; ``log`` holds the trajectory recorded up to the failure."""

    def __init__(self, msg, log):
        super().__init__(msg)
        self.log = log


# --- operations --------------------------------------------------------------

def gradient_mask(shape, state: DragState, cfg: DragConfig) -> np.ndarray | None:
    if not (cfg.fixation and state.fixated.any()):
        return None
    h, w = shape
    m = np.ones((h, w))
    r = cfg.r_grad
    for i in np.flatnonzero(state.fixated):
        x, y = np.rint(state.points[i]).astype(int)
        m[max(y - r, 0):y + r + 1, max(x - r, 0):x + r + 1] = 0.0
    return m


def motion_supervision_loss(z, z0, z0_prev, state: DragState, mask, F: FeatureExtractor,
                            cfg: DragConfig, denoiser=None, feat0=None):
    """Feature-alignment loss over non-fixated points plus the non-editable term.

    Returns ``(loss, gradient)``; the gradient is zeroed around fixated points.
    ``mask`` is the ``(H, W)`` editable grid (1 = editable) or ``None`` for all-editable.
    """
    if feat0 is None:
        feat0 = F(z0)
    active = ~state.fixated if cfg.fixation else np.ones(len(state.points), dtype=bool)
    e = state.e
    if cfg.fixation and np.any(active & (e == 0)):
        raise ValueError("non-fixated point sits on its target; update fixation first")
    d = state.directions()
    terms = [PatchTerm(tuple(state.points[i] + cfg.beta_step * d[i]), cfg.r1,
                       sample_field(feat0, state.origin[i], cfg.r1))
             for i in np.flatnonzero(active)]
    masked = None
    if cfg.lam > 0 and mask is not None:
        keep = 1.0 - np.asarray(mask, dtype=np.float64)
        if keep.any():
            linear = denoiser is not None and getattr(denoiser, "adjoint", None) is not None
            masked = MaskedDifference(reference=z0_prev, keep=keep, weight=cfg.lam,
                                      transform=denoiser if linear else None,
                                      adjoint=denoiser.adjoint if linear else None)
    return loss_gradient(z, F, terms, masked, gradient_mask(z.shape[:2], state, cfg))


def gradient_step(z, gradient, cfg: DragConfig):
    if z.shape != gradient.shape:
        raise ValueError("gradient shape does not match latent")
    out = z - cfg.eta * gradient
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite latent after gradient step")
    return out


def descend(z, loss_fn, cfg: DragConfig):
    """``J`` gradient steps, re-evaluating ``loss_fn(z) -> (loss, grad)`` before each."""
    losses, grads = [], []
    for _ in range(cfg.J):
        loss, grad = loss_fn(z)
        losses.append(loss)
        grads.append(grad)
        z = gradient_step(z, grad, cfg)
    return z, losses, grads


def track_points(z_new, z0, state: DragState, F: FeatureExtractor, cfg: DragConfig,
                 feat0=None, radius=None) -> np.ndarray:
    """Nearest-feature search for every handle point (fixated ones included).

    Candidates are the integer cells of the square window around the rounded handle
    point. Ties go to the cell closest to ``p + beta_step * d``, then row-major.
    """
    radius = cfg.r2 if radius is None else radius
    feat = F(z_new)
    if feat0 is None:
        feat0 = F(z0)
    h, w = feat.shape[:2]
    offs = np.arange(-radius, radius + 1)
    aim = state.points + cfg.beta_step * state.directions()
    new = state.points.copy()
    for i, p in enumerate(state.points):
        cx, cy = np.rint(p).astype(int)
        if cx - radius < 0 or cy - radius < 0 or cx + radius > w - 1 or cy + radius > h - 1:
            raise PatchBoundsError(f"tracking window around {tuple(p)} leaves {w}x{h} grid")
        f0 = sample_field(feat0, state.origin[i], 0)[0, 0]
        win = feat[cy - radius:cy + radius + 1, cx - radius:cx + radius + 1]
        dist = np.abs(win - f0).sum(axis=2)
        ys, xs = np.nonzero(dist == dist.min())
        cand = np.stack([cx + offs[xs], cy + offs[ys]], axis=1).astype(np.float64)
        gap = np.linalg.norm(cand - aim[i], axis=1)
        j = np.flatnonzero(gap == gap.min())[0]  # nonzero() is row-major already
        new[i] = cand[j]
    return new


def update_fixation(state: DragState, cfg: DragConfig) -> tuple[np.ndarray, list]:
    """Hysteresis on the remaining distance: enter at ``e <= l``, leave at ``e >= u``.

    Returns the new membership array and a list of ``(index, event)`` changes.
    """
    e = state.e
    fix = state.fixated.copy()
    events = []
    for i in range(len(fix)):
        if not fix[i] and e[i] <= cfg.l:
            fix[i] = True
            events.append((i, "enter_I"))
        elif fix[i] and e[i] >= cfg.u and cfg.reentry:
            fix[i] = False
            events.append((i, "exit_I"))
    return fix, events


def _cells(center, r):
    x, y = (int(v) for v in np.rint(center))
    return x, y, {(yy, xx) for yy in range(y - r, y + r + 1) for xx in range(x - r, x + r + 1)}


def copy_paste_refine(z, z_source, sources, targets, indices, cfg: DragConfig, rng,
                      blur: bool = True) -> tuple[np.ndarray, list[int]]:
    """Paste ``alpha * z_source`` patches from rounded sources onto rounded targets.

    With ``blur``, source cells not covered by any target patch are then replaced by
    ``beta_blur * z + sqrt(1 - beta_blur**2) * noise``. Points whose rounded source
    and target coincide are left alone. Returns the new latent and the indices pasted.
    """
    h, w = z.shape[:2]
    r = cfg.r_cp
    out = z.copy()
    snap = z_source.copy()
    pasted, vacated, covered = [], set(), set()
    for i in indices:
        qx, qy, Q = _cells(sources[i], r)
        gx, gy, G = _cells(targets[i], r)
        for cx, cy in ((qx, qy), (gx, gy)):
            if cx - r < 0 or cy - r < 0 or cx + r > w - 1 or cy + r > h - 1:
                raise PatchBoundsError(f"copy-paste patch at ({cx}, {cy}) leaves {w}x{h} grid")
        if (qx, qy) == (gx, gy):
            continue
        out[gy - r:gy + r + 1, gx - r:gx + r + 1] = cfg.alpha * snap[qy - r:qy + r + 1, qx - r:qx + r + 1]
        pasted.append(int(i))
        vacated |= Q - G
        covered |= G
    if blur and pasted:
        cells = sorted(vacated - covered)
        if cells:
            ys, xs = np.array(cells).T
            noise = rng.standard_normal((len(cells), z.shape[2]))
            b = cfg.beta_blur
            out[ys, xs] = b * out[ys, xs] + np.sqrt(1.0 - b * b) * noise
    return out, pasted


# --- schedule ----------------------------------------------------------------

@dataclass
class DragResult:
    latent: np.ndarray
    state: DragState
    log: list
    reference: np.ndarray          # unedited latent advanced through the same denoiser steps
    drag_points: np.ndarray        # handle points when the drag stage ended
    final_points: np.ndarray       # handle points tracked on the final latent
    losses: list = field(default_factory=list)


def _record(log, t, k, state, i, loss=None, event=None):
    log.append({"timestep": t, "iteration": k, "point_id": None if i is None else int(i),
                "x": None if i is None else float(state.points[i, 0]),
                "y": None if i is None else float(state.points[i, 1]),
                "e": None if i is None else float(state.e[i]),
                "fixated": None if i is None else bool(state.fixated[i]),
                "target": None if i is None else [float(v) for v in state.targets[i]],
                "loss": None if loss is None else float(loss), "event": event})


def _apply_fixation(state, cfg, log, t, k):
    state.fixated, events = update_fixation(state, cfg)
    for i, ev in events:
        _record(log, t, k, state, i, event=ev)
    return events


def run_timestep(z, z0, state: DragState, mask, F, denoiser, cfg: DragConfig, rng, log=None,
                 losses=None):
    """One drag timestep; returns ``(z_{t-1}, z0_{t-1})`` and updates ``state`` in place."""
    log = [] if log is None else log
    t = state.t
    feat0 = F(z0)
    z0_prev = denoiser(z0)
    denoise_fn = denoiser if getattr(denoiser, "adjoint", None) is not None else None

    def loss_fn(zz):
        return motion_supervision_loss(zz, z0, z0_prev, state, mask, F, cfg, denoise_fn, feat0)

    for k in range(cfg.B):
        state.k = k
        z, step_losses, _ = descend(z, loss_fn, cfg)
        if losses is not None:
            losses.append(step_losses)
        state.points = track_points(z, z0, state, F, cfg, feat0=feat0)
        for i in range(len(state.points)):
            _record(log, t, k, state, i, loss=step_losses[-1])
        _apply_fixation(state, cfg, log, t, k)

    if cfg.step_copy_paste:
        z, pasted = copy_paste_refine(z, z, state.points, state.targets,
                                      np.flatnonzero(state.fixated), cfg, rng, blur=True)
        for i in pasted:
            _record(log, t, cfg.B, state, i, event="copy_paste")
    z = denoiser(z)
    _record(log, t, cfg.B, state, None, event="denoise")
    state.t += 1
    return z, z0_prev


def run_drag(z_T, sources, targets, mask, F: FeatureExtractor, denoiser, cfg: DragConfig,
             rng=None) -> DragResult:
    """Both stages of the drag schedule, on latent-grid coordinates.

    Raises :class:`DragError` (carrying the partial log) if any step fails.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    log: list = []
    losses: list = []
    z = np.array(z_T, dtype=np.float64)
    z0 = z.copy()
    state = DragState.start(sources, targets)
    try:
        h, w = z.shape[:2]
        for p in np.vstack([state.points, state.targets]):
            if not (0 <= p[0] <= w - 1 and 0 <= p[1] <= h - 1):
                raise PatchBoundsError(f"point {tuple(p)} outside {w}x{h} latent")
        for i in range(len(state.points)):
            _record(log, 0, -1, state, i)
        _apply_fixation(state, cfg, log, 0, -1)
        for _ in range(cfg.T_drag):
            z, z0 = run_timestep(z, z0, state, mask, F, denoiser, cfg, rng, log, losses)
        drag_points = state.points.copy()
        everyone = np.arange(len(state.points))
        for _ in range(cfg.N_post):
            if cfg.final_copy_paste:
                z, pasted = copy_paste_refine(z, z0, state.origin, state.targets, everyone,
                                              cfg, rng, blur=False)
                for i in pasted:
                    _record(log, state.t, 0, state, i, event="copy_paste")
            z = denoiser(z)
            z0 = denoiser(z0)
            _record(log, state.t, 0, state, None, event="denoise")
            state.points = track_points(z, z0, state, F, cfg)
            for i in range(len(state.points)):
                _record(log, state.t, 0, state, i)
            state.t += 1
    except Exception as exc:
        raise DragError(f"{type(exc).__name__}: {exc}", log) from exc
    return DragResult(z, state, log, z0, drag_points, state.points.copy(), losses)


def patch_descriptors(feat: np.ndarray, radius: int) -> np.ndarray:
    """Flattened ``(2r+1)^2 * C`` patch around every cell whose patch fits the grid.

    Output is ``(H - 2r, W - 2r, D)``; cell ``[y, x]`` describes grid cell ``(x + r, y + r)``.
    """
    win = np.lib.stride_tricks.sliding_window_view(feat, (2 * radius + 1, 2 * radius + 1), axis=(0, 1))
    h, w = win.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(h, w, -1)


def relocate_points(z, z0, state: DragState, F: FeatureExtractor, cfg: DragConfig) -> np.ndarray:
    """Where the original handle features ended up in ``z``.

    Cosine similarity between ``r1`` patch descriptors, searched over the whole grid,
    so the result is independent of the tracker and insensitive to the paste gain.
    """
    r = cfg.r1
    ref = patch_descriptors(F(z0), r)
    new = patch_descriptors(F(z), r)
    shifted = np.rint(state.origin) - r
    hits = detect_points(ref, new, shifted)
    return np.array([[d.point[0] + r, d.point[1] + r] for d in hits], dtype=np.float64)
