"""Drag instructions, the mean-distance metric, synthetic blob cases and the benchmark runner."""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import InitVar, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .optimizer import (DragConfig, DragError, make_denoiser, make_extractor, relocate_points,
                        run_drag)

MD_REFERENCE_SIZE = 512

VARIANTS = {
    "full": {},
    "no_final_copy_paste": {"final_copy_paste": False},
    "no_reentry": {"reentry": False},
    "no_fixation": {"fixation": False},
}


class InstructionError(ValueError):
    pass


# --- instructions ------------------------------------------------------------

@dataclass
class DragInstruction:
    image_w: int
    image_h: int
    latent_w: int
    latent_h: int
    sources: list
    targets: list
    mask: np.ndarray | None = None       # (image_h, image_w), 1 = editable
    tags: dict = field(default_factory=dict)
    check_bounds: InitVar[bool] = True

    def __post_init__(self, check_bounds):
        self.validate(check_bounds)

    @property
    def scale(self) -> int:
        return self.image_w // self.latent_w

    def validate(self, check_bounds: bool = True) -> None:
        if min(self.image_w, self.image_h, self.latent_w, self.latent_h) <= 0:
            raise InstructionError("image and latent sizes must be positive")
        if self.image_w % self.latent_w or self.image_h % self.latent_h:
            raise InstructionError("latent size must divide image size")
        if self.image_w // self.latent_w != self.image_h // self.latent_h:
            raise InstructionError("horizontal and vertical scale factors differ")
        if len(self.sources) != len(self.targets) or not self.sources:
            raise InstructionError("need equally many (>= 1) sources and targets")
        for p in list(self.sources) + list(self.targets):
            if len(p) != 2 or not all(math.isfinite(v) for v in p):
                raise InstructionError(f"bad point {p!r}")
            if check_bounds and not (0 <= p[0] <= self.image_w - 1 and 0 <= p[1] <= self.image_h - 1):
                raise InstructionError(f"point {list(p)} outside {self.image_w}x{self.image_h} image")
        if self.mask is not None and np.shape(self.mask) != (self.image_h, self.image_w):
            raise InstructionError("mask size does not match image")

    def latent_points(self):
        s = float(self.scale)
        return np.asarray(self.sources, float) / s, np.asarray(self.targets, float) / s

    def latent_mask(self) -> np.ndarray | None:
        """Editable where any image pixel of the cell is editable."""
        if self.mask is None:
            return None
        s = self.scale
        m = np.asarray(self.mask).reshape(self.latent_h, s, self.latent_w, s)
        return (m.max(axis=(1, 3)) > 0).astype(np.float64)

    def to_json(self, mask_path: str | None = None) -> dict:
        d = {"image": {"w": self.image_w, "h": self.image_h},
             "latent": {"w": self.latent_w, "h": self.latent_h},
             "pairs": [{"source": [float(a) for a in s], "target": [float(b) for b in t]}
                       for s, t in zip(self.sources, self.targets)],
             "tags": self.tags}
        if mask_path is not None:
            d["mask_path"] = mask_path
        return d

    @classmethod
    def from_json(cls, d: dict, base_dir=None, check_bounds: bool = True) -> "DragInstruction":
        try:
            pairs = d["pairs"]
            kw = dict(image_w=int(d["image"]["w"]), image_h=int(d["image"]["h"]),
                      latent_w=int(d["latent"]["w"]), latent_h=int(d["latent"]["h"]),
                      sources=[[float(v) for v in p["source"]] for p in pairs],
                      targets=[[float(v) for v in p["target"]] for p in pairs],
                      tags=dict(d.get("tags", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise InstructionError(f"malformed instruction: {exc!r}") from None
        if d.get("mask_path"):
            mp = Path(d["mask_path"])
            if base_dir is not None and not mp.is_absolute():
                mp = Path(base_dir) / mp
            kw["mask"] = (read_pgm(mp) > 0).astype(np.uint8)
        return cls(**kw, check_bounds=check_bounds)


def save_instruction(path, instr: DragInstruction) -> None:
    path = Path(path)
    mask_name = None
    if instr.mask is not None:
        mask_name = path.stem + ".mask.pgm"
        write_pgm(path.with_name(mask_name), (np.asarray(instr.mask) > 0).astype(np.uint8) * 255)
    path.write_text(json.dumps(instr.to_json(mask_name), indent=2) + "\n")


def load_instruction(path, check_bounds: bool = True) -> DragInstruction:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InstructionError(f"{path}: {exc}") from None
    return DragInstruction.from_json(d, base_dir=path.parent, check_bounds=check_bounds)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.clip(img, 0, 255).astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    data = raw[pos + 1:pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# --- metric ------------------------------------------------------------------

def mean_distance(final_points, targets, scale: float = 1.0) -> float:
    """Mean Euclidean distance between matched points, multiplied by ``scale``."""
    p = np.asarray(final_points, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    if p.shape != g.shape:
        raise ValueError(f"{len(p)} points vs {len(g)} targets")
    if scale <= 0:
        raise ValueError("scale must be > 0")
    if len(p) == 0:
        return 0.0
    return float(np.linalg.norm(p - g, axis=1).mean() * scale)


def normalize_md(md_pixels: float, image_w: int, image_h: int) -> float:
    """Rescale an image-pixel MD to a 512-pixel image of the same aspect."""
    return md_pixels * MD_REFERENCE_SIZE / max(image_w, image_h)


# --- synthetic cases ---------------------------------------------------------

@dataclass
class SyntheticSpec:
    grid: tuple = (64, 64, 4)
    blobs: int = 1
    sigma: float = 3.0
    drags: list | None = None          # [(dx, dy), ...]; sampled when None
    centers: list | None = None        # [(x, y), ...]; sampled when None
    drag_range: tuple = (10.0, 25.0)
    margin: int = 16
    background: float = 0.15
    seed: int = 0
    case_id: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "id" in d:
            d["case_id"] = d.pop("id")
        for k in ("grid", "drag_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class SyntheticCase:
    latent: np.ndarray
    instruction: DragInstruction
    truth: np.ndarray
    background: np.ndarray
    amplitudes: np.ndarray


def _blob_field(shape, centers, amps, sigma):
    h, w, _ = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros(shape)
    for (cx, cy), a in zip(centers, amps):
        g = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
        out += g[:, :, None] * a[None, None, :]
    return out


def generate_synthetic_case(spec: SyntheticSpec) -> SyntheticCase:
    """Gaussian blobs on smooth noise; the instruction drags each blob centre."""
    h, w, c = spec.grid
    rng = np.random.default_rng(spec.seed)
    lo_x, hi_x = spec.margin, w - 1 - spec.margin
    lo_y, hi_y = spec.margin, h - 1 - spec.margin
    if lo_x > hi_x or lo_y > hi_y:
        raise ValueError("margin leaves no room on the grid")

    def inside(p):
        return lo_x <= p[0] <= hi_x and lo_y <= p[1] <= hi_y

    if spec.centers is not None or spec.drags is not None:
        if spec.centers is None or spec.drags is None:
            raise ValueError("give both centers and drags, or neither")
        if len(spec.centers) != spec.blobs or len(spec.drags) != spec.blobs:
            raise ValueError("centers/drags must match the blob count")
        src = np.asarray(spec.centers, float)
        tgt = src + np.asarray(spec.drags, float)
        for p in np.vstack([src, tgt]):
            if not inside(p):
                raise ValueError(f"point {tuple(p)} violates the {spec.margin}-cell margin")
    else:
        src, tgt = _sample_layout(rng, spec, inside)

    noise = gaussian_filter(rng.standard_normal((h, w, c)), sigma=(1.5, 1.5, 0))
    background = spec.background * noise / max(noise.std(), 1e-12)
    amps = rng.uniform(0.8, 1.6, size=(spec.blobs, c)) * rng.choice([-1.0, 1.0], size=(spec.blobs, c))
    amps[:, 0] = np.abs(amps[:, 0])
    latent = background + _blob_field((h, w, c), src, amps, spec.sigma)
    truth = background + _blob_field((h, w, c), tgt, amps, spec.sigma)
    instr = DragInstruction(w, h, w, h, src.tolist(), tgt.tolist(),
                            tags={"case": spec.case_id, "seed": spec.seed, "blobs": spec.blobs})
    return SyntheticCase(latent, instr, truth, background, amps)


def _sample_layout(rng, spec, inside, min_sep=10.0, tries=10000):
    lo, hi = spec.drag_range
    for _ in range(tries):
        src, tgt = [], []
        for _b in range(spec.blobs):
            s = np.rint(rng.uniform([spec.margin] * 2,
                                    [spec.grid[1] - 1 - spec.margin, spec.grid[0] - 1 - spec.margin]))
            ang = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(lo, hi)
            t = np.rint(s + length * np.array([np.cos(ang), np.sin(ang)]))
            if not (inside(t) and lo <= np.linalg.norm(t - s) <= hi):
                break
            pts = src + tgt
            if any(min(np.linalg.norm(s - q), np.linalg.norm(t - q)) < min_sep for q in pts):
                break
            if any(_segment_gap(s, t, a, b) < min_sep / 2 for a, b in zip(src, tgt)):
                break
            src.append(s)
            tgt.append(t)
        else:
            return np.array(src), np.array(tgt)
    raise ValueError("could not place blobs under the margin constraints")


def _segment_gap(a, b, c, d, n=32):
    s = np.linspace(0, 1, n)[:, None]
    p = a + s * (b - a)
    q = c + s * (d - c)
    return float(np.min(np.linalg.norm(p[:, None] - q[None], axis=2)))


def default_suite(count: int = 20, seed: int = 0) -> list[SyntheticSpec]:
    """The shipped blob suite: 64x64x4 grids, 1-3 blobs, drags of 10-25 cells."""
    return [SyntheticSpec(blobs=1 + i % 3, seed=seed * 1000 + i, case_id=f"blob-{i:02d}")
            for i in range(count)]


# --- benchmark ---------------------------------------------------------------

def drag_instruction(latent, instr: DragInstruction, cfg: DragConfig, F=None, denoiser=None):
    """Run the drag on an instruction given in image pixels."""
    if latent.shape[:2] != (instr.latent_h, instr.latent_w):
        raise InstructionError(
            f"latent is {latent.shape[1]}x{latent.shape[0]}, instruction expects "
            f"{instr.latent_w}x{instr.latent_h}")
    F = make_extractor(cfg, latent.shape[2]) if F is None else F
    denoiser = make_denoiser(cfg) if denoiser is None else denoiser
    src, tgt = instr.latent_points()
    return run_drag(latent, src, tgt, instr.latent_mask(), F, denoiser, cfg)


def run_case(spec: SyntheticSpec, cfg: DragConfig, variant: str = "full") -> dict:
    case = generate_synthetic_case(spec)
    vcfg = cfg.replace(**VARIANTS[variant])
    instr = case.instruction
    src, tgt = instr.latent_points()
    md_before = mean_distance(src, tgt, instr.scale)
    row = {"case_id": spec.case_id, "variant": variant, "md_before": md_before,
           "config_hash": vcfg.digest()}
    t0 = time.perf_counter()
    try:
        res = drag_instruction(case.latent, instr, vcfg)
    except DragError as exc:
        row.update(md_drag=md_before, md_after=md_before, md_detect=md_before, fixation_events=_fix_events(exc.log),
                   error=str(exc))
    else:
        row.update(md_drag=mean_distance(res.drag_points, tgt, instr.scale),
                   md_after=mean_distance(res.final_points, tgt, instr.scale),
                   md_detect=mean_distance(relocate_points(res.latent, res.reference, res.state,
                                                           make_extractor(vcfg, res.latent.shape[2]), vcfg),
                                           tgt, instr.scale),
                   fixation_events=_fix_events(res.log), error=None)
    row["md_after_512"] = normalize_md(row["md_after"], instr.image_w, instr.image_h)
    row["wall_time"] = time.perf_counter() - t0
    return row


def _fix_events(log):
    return sum(1 for r in log if r["event"] in ("enter_I", "exit_I"))


def _run_case_args(args):
    return run_case(*args)


def aggregate(rows) -> dict:
    out = {}
    for v in dict.fromkeys(r["variant"] for r in rows):
        sub = [r for r in rows if r["variant"] == v]
        md = [r["md_after"] for r in sub]
        out[v] = {"cases": len(sub),
                  "mean_md": float(np.mean(md)),
                  "median_md": float(np.median(md)),
                  "mean_md_512": float(np.mean([r["md_after_512"] for r in sub])),
                  "mean_time": float(np.mean([r["wall_time"] for r in sub])),
                  "failures": sum(1 for r in sub if r["error"])}
    return out


def check_report(report: dict) -> None:
    """Raise if the stored aggregate differs from one recomputed from the rows."""
    fresh = aggregate(report["cases"])
    if fresh != report["aggregate"]:
        raise ValueError("report aggregate does not match its rows")


def run_benchmark(suite, cfg: DragConfig, variants=("full",), workers: int = 1) -> dict:
    """Every case under every variant; case failures are recorded, not raised."""
    if not suite:
        raise ValueError("empty suite")
    variants = list(variants) or ["full"]
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    ids = [s.case_id for s in suite]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids in suite")
    jobs = [(s, cfg, v) for v in variants for s in suite]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_run_case_args, jobs))
    else:
        rows = [run_case(*j) for j in jobs]
    report = {"config": cfg.to_dict(), "config_hash": cfg.digest(), "variants": variants,
              "cases": rows, "aggregate": aggregate(rows)}
    check_report(report)
    return report


def strip_timing(report: dict) -> dict:
    """Copy of a report without wall-time fields (for determinism comparisons)."""
    rep = json.loads(json.dumps(report))
    for r in rep["cases"]:
        r.pop("wall_time", None)
    for a in rep["aggregate"].values():
        a.pop("mean_time", None)
    return rep
