"""Reference objects, parametric keypoint rules, and the look-at pinhole camera.

World frame is right-handed with +z up. Image pixels have the origin at the top-left
corner with y pointing down; a pixel centre sits at integer coordinates.
"""
from __future__ import annotations

import ast
import json
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np


class SceneError(ValueError):
    pass


class ProjectionError(SceneError):
    pass


# --- reference object --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReferenceObject:
    vertices: np.ndarray            # (V, 3) metres
    faces: np.ndarray               # (F, 3) zero-based vertex indices
    names: tuple                    # keypoint names, in order
    keypoints: np.ndarray           # (n, 3) metres

    def __post_init__(self):
        V = len(self.vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise SceneError(f"face index out of range for {V} vertices")
        if len(self.names) < 1:
            raise SceneError("reference object needs at least one keypoint")
        if len(set(self.names)) != len(self.names):
            raise SceneError("keypoint names must be unique")
        if self.keypoints.shape != (len(self.names), 3) or not np.all(np.isfinite(self.keypoints)):
            raise SceneError("keypoints must be finite 3-D points")

    def keypoint(self, name: str) -> np.ndarray:
        return self.keypoints[self.names.index(name)]

    def edges(self) -> np.ndarray:
        pairs = set()
        for a, b, c in self.faces:
            for u, v in ((a, b), (b, c), (c, a)):
                pairs.add((min(u, v), max(u, v)))
        return np.array(sorted(pairs), dtype=np.intp).reshape(-1, 2)


def parse_obj(text: str, source: str = "<obj>"):
    """Vertices and triangulated faces from OBJ ``v``/``f`` records (1-based or negative)."""
    verts, faces = [], []
    for ln, line in enumerate(text.splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        tag, args = parts[0], parts[1:]
        if tag == "v":
            try:
                xyz = [float(a) for a in args[:3]]
            except ValueError:
                raise SceneError(f"{source}:{ln}: bad vertex {line.strip()!r}") from None
            if len(xyz) != 3:
                raise SceneError(f"{source}:{ln}: vertex needs 3 coordinates")
            verts.append(xyz)
        elif tag == "f":
            if len(args) < 3:
                raise SceneError(f"{source}:{ln}: face needs at least 3 vertices")
            idx = []
            for a in args:
                try:
                    k = int(a.split("/")[0])
                except ValueError:
                    raise SceneError(f"{source}:{ln}: bad face index {a!r}") from None
                if k == 0:
                    raise SceneError(f"{source}:{ln}: face index 0 is invalid in OBJ")
                k = k - 1 if k > 0 else len(verts) + k
                if not 0 <= k < len(verts):
                    raise SceneError(
                        f"{source}:{ln}: face index {a} out of range for {len(verts)} vertices")
                idx.append(k)
            faces.extend([idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1))
    if not verts:
        raise SceneError(f"{source}: mesh has no vertices")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.intp).reshape(-1, 3)


def _keypoint_table(spec: dict, vertices: np.ndarray, source: str):
    if not isinstance(spec, dict) or not spec:
        raise SceneError(f"{source}: keypoints must be a non-empty name -> point map")
    names, pts = [], []
    for name, val in spec.items():
        if isinstance(val, dict) and "vertex" in val:
            k = int(val["vertex"])
            if not 1 <= k <= len(vertices):
                raise SceneError(f"{source}: keypoint {name!r} references missing vertex {k}")
            p = vertices[k - 1]
        else:
            try:
                p = [float(v) for v in val]
            except (TypeError, ValueError):
                raise SceneError(f"{source}: keypoint {name!r} has no usable coordinates") from None
            if len(p) != 3:
                raise SceneError(f"{source}: keypoint {name!r} needs 3 coordinates")
        names.append(str(name))
        pts.append(p)
    return tuple(names), np.array(pts, dtype=np.float64)


def sidecar_path(mesh_path) -> Path:
    p = Path(mesh_path)
    return p.with_name(p.stem + ".keypoints.json")


def load_reference(path, keypoints: dict | None = None) -> ReferenceObject:
    """OBJ mesh plus keypoints, either given or read from ``<stem>.keypoints.json``."""
    path = Path(path)
    if not path.is_file():
        raise SceneError(f"mesh file not found: {path}")
    verts, faces = parse_obj(path.read_text(), str(path))
    if keypoints is None:
        side = sidecar_path(path)
        if not side.is_file():
            raise SceneError(f"no keypoints given and no sidecar {side}")
        try:
            keypoints = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise SceneError(f"{side}: {exc}") from None
    names, kp = _keypoint_table(keypoints, verts, str(path))
    return ReferenceObject(verts, faces, names, kp)


# --- parametric rules --------------------------------------------------------

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}


class Expr:
    """Arithmetic over named parameters and literals: ``+ - * /`` and parentheses."""

    def __init__(self, text):
        self.text = str(text)
        try:
            self.tree = ast.parse(self.text, mode="eval").body
        except SyntaxError:
            raise SceneError(f"cannot parse expression {self.text!r}") from None
        self.names = set()
        self._check(self.tree)

    def _check(self, node):
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            self._check(node.operand)
        elif isinstance(node, ast.Constant) and type(node.value) in (int, float):
            pass
        elif isinstance(node, ast.Name):
            self.names.add(node.id)
        else:
            raise SceneError(f"unsupported construct in expression {self.text!r}")

    def __call__(self, params: dict) -> float:
        return float(self._eval(self.tree, params))

    def _eval(self, node, params):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, params), self._eval(node.right, params))
        if isinstance(node, ast.UnaryOp):
            return _UNOPS[type(node.op)](self._eval(node.operand, params))
        if isinstance(node, ast.Constant):
            return node.value
        try:
            return params[node.id]
        except KeyError:
            raise SceneError(f"missing parameter {node.id!r}") from None


_AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


def _axis(val) -> np.ndarray:
    if isinstance(val, str):
        if val.lstrip("+-") not in _AXES:
            raise SceneError(f"unknown axis {val!r}")
        a = np.array(_AXES[val.lstrip("+-")])
        return -a if val.startswith("-") else a
    a = np.asarray(val, dtype=np.float64)
    n = np.linalg.norm(a)
    if a.shape != (3,) or n == 0:
        raise SceneError(f"axis must be x/y/z or a non-zero 3-vector, got {val!r}")
    return a / n


@dataclass
class Rule:
    op: str
    select: tuple
    amount: Expr | None = None
    axis: np.ndarray | None = None
    anchor: object = None               # 3-vector or keypoint name
    factor: Expr | None = None
    offsets: dict = field(default_factory=dict)   # name -> (Expr, Expr, Expr)

    @classmethod
    def from_dict(cls, d: dict) -> "Rule":
        op = d.get("op")
        if op == "translate":
            return cls(op, tuple(d["select"]), amount=Expr(d["amount"]), axis=_axis(d["axis"]))
        if op == "scale_about":
            anchor = d.get("anchor", [0.0, 0.0, 0.0])
            if not isinstance(anchor, str):
                anchor = np.asarray(anchor, dtype=np.float64)
            return cls(op, tuple(d["select"]), factor=Expr(d["factor"]),
                       axis=None if d.get("axis") is None else _axis(d["axis"]), anchor=anchor)
        if op == "displace":
            offs = {str(k): tuple(Expr(e) for e in v) for k, v in d["offsets"].items()}
            if any(len(v) != 3 for v in offs.values()):
                raise SceneError("displace offsets need 3 expressions per point")
            return cls(op, tuple(offs), offsets=offs)
        raise SceneError(f"unknown rule op {op!r}")

    def parameters(self) -> set:
        exprs = [e for e in (self.amount, self.factor) if e is not None]
        exprs += [e for v in self.offsets.values() for e in v]
        return set().union(*(e.names for e in exprs)) if exprs else set()

    def apply(self, names, pts: np.ndarray, params: dict) -> None:
        rows = [names.index(n) for n in self.select]
        if self.op == "translate":
            pts[rows] += self.amount(params) * self.axis
        elif self.op == "scale_about":
            a = pts[names.index(self.anchor)].copy() if isinstance(self.anchor, str) else self.anchor
            f = self.factor(params)
            rel = pts[rows] - a
            if self.axis is None:
                pts[rows] = a + f * rel
            else:
                pts[rows] += (f - 1.0) * np.outer(rel @ self.axis, self.axis)
        else:
            for n in self.select:
                pts[names.index(n)] += [e(params) for e in self.offsets[n]]


@dataclass
class TranslationRuleSet:
    rules: list
    reference: dict                     # parameter name -> reference value

    @classmethod
    def from_dict(cls, d: dict | None) -> "TranslationRuleSet":
        d = d or {}
        return cls([Rule.from_dict(r) for r in d.get("rules", [])],
                   {str(k): float(v) for k, v in d.get("parameters", {}).items()})

    def validate(self, names, tol: float = 1e-9) -> None:
        """Selectors must exist and reference parameters must give the identity."""
        for r in self.rules:
            for n in r.select:
                if n not in names:
                    raise SceneError(f"rule selects unknown keypoint {n!r}")
            if isinstance(r.anchor, str) and r.anchor not in names:
                raise SceneError(f"rule anchored at unknown keypoint {r.anchor!r}")
            missing = r.parameters() - set(self.reference)
            if missing:
                raise SceneError(f"rule uses undeclared parameters {sorted(missing)}")
            p = self.reference
            if r.op == "translate":
                bad = abs(r.amount(p)) > tol
            elif r.op == "scale_about":
                bad = abs(r.factor(p) - 1.0) > tol
            else:
                bad = any(abs(e(p)) > tol for v in r.offsets.values() for e in v)
            if bad:
                raise SceneError(f"{r.op} rule on {list(r.select)} is not the identity "
                                 f"at the reference parameters")


def translate_points(names, P_ref: np.ndarray, rules: TranslationRuleSet, gamma: dict) -> np.ndarray:
    """Apply ``rules`` in order to a copy of the keypoints for parameter values ``gamma``."""
    names = list(names)
    rules.validate(names)
    missing = set(rules.reference) - set(gamma)
    if missing:
        raise SceneError(f"missing parameter(s) {sorted(missing)}")
    params = {k: float(v) for k, v in gamma.items()}
    G = np.array(P_ref, dtype=np.float64, copy=True)
    for r in rules.rules:
        r.apply(names, G, params)
    return G


# --- camera ------------------------------------------------------------------

@dataclass(frozen=True)
class CameraPose:
    r: float
    theta_deg: float
    phi_deg: float
    focal_px: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.r > 0:
            raise SceneError("camera distance r must be > 0")
        if not -90 <= self.theta_deg <= 90:
            raise SceneError("elevation must lie in [-90, 90] degrees")
        if not 0 <= self.phi_deg < 360:
            raise SceneError("azimuth must lie in [0, 360) degrees")
        if not self.focal_px > 0:
            raise SceneError("focal length must be > 0")
        if self.width < 16 or self.height < 16:
            raise SceneError("image must be at least 16 x 16 pixels")
        if not (0 <= self.cx <= self.width - 1 and 0 <= self.cy <= self.height - 1):
            raise SceneError("principal point outside the image")

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        try:
            w, h = int(d["width"]), int(d["height"])
            return cls(float(d["r"]), float(d["theta_deg"]), float(d["phi_deg"]) % 360.0,
                       float(d["focal_px"]), float(d.get("cx", (w - 1) / 2)),
                       float(d.get("cy", (h - 1) / 2)), w, h)
        except KeyError as exc:
            raise SceneError(f"camera missing field {exc.args[0]!r}") from None


@dataclass(frozen=True, eq=False)
class Camera:
    """``pixel ~ K @ R @ (X - center)``; rows of ``R`` are the camera right/down/forward axes."""
    R: np.ndarray
    center: np.ndarray
    K: np.ndarray
    width: int
    height: int

    @property
    def P(self) -> np.ndarray:
        return self.K @ np.hstack([self.R, (-self.R @ self.center)[:, None]])

    def to_camera(self, X) -> np.ndarray:
        return (np.atleast_2d(np.asarray(X, dtype=np.float64)) - self.center) @ self.R.T

    def project(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates ``(N, 2)`` and depths ``(N,)`` along the optical axis."""
        Xc = self.to_camera(X)
        z = Xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.K[0, 0] * Xc[:, 0] / z + self.K[0, 2]
            v = self.K[1, 1] * Xc[:, 1] / z + self.K[1, 2]
        return np.stack([u, v], axis=1), z

    def ray(self, uv) -> np.ndarray:
        """World-space direction through pixel ``uv``, scaled to unit depth."""
        u, v = float(uv[0]), float(uv[1])
        d_cam = np.array([(u - self.K[0, 2]) / self.K[0, 0], (v - self.K[1, 2]) / self.K[1, 1], 1.0])
        return self.R.T @ d_cam

    def unproject(self, uv, depth: float) -> np.ndarray:
        return self.center + depth * self.ray(uv)

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return ((uv[:, 0] >= 0) & (uv[:, 0] <= self.width - 1)
                & (uv[:, 1] >= 0) & (uv[:, 1] <= self.height - 1))


def camera_center(pose: CameraPose) -> np.ndarray:
    th, ph = math.radians(pose.theta_deg), math.radians(pose.phi_deg)
    return pose.r * np.array([math.cos(th) * math.cos(ph), math.cos(th) * math.sin(ph), math.sin(th)])


def camera_matrix(pose: CameraPose) -> Camera:
    """Look-at camera on the sphere of radius ``r``, aimed at the world origin.

    Straight above or below (elevation +-90) the world up vector is swapped for +x.
    """
    C = camera_center(pose)
    fwd = -C / np.linalg.norm(C)
    up = np.array([1.0, 0.0, 0.0]) if abs(abs(pose.theta_deg) - 90.0) < 1e-9 else np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    K = np.array([[pose.focal_px, 0.0, pose.cx], [0.0, pose.focal_px, pose.cy], [0.0, 0.0, 1.0]])
    return Camera(R, C, K, pose.width, pose.height)


class ProjectedPair(NamedTuple):
    name: str
    source: tuple
    target: tuple


def project_pairs(obj: ReferenceObject, G: np.ndarray, pose: CameraPose) -> list[ProjectedPair]:
    cam = camera_matrix(pose)
    G = np.asarray(G, dtype=np.float64)
    if G.shape != obj.keypoints.shape:
        raise SceneError(f"targets have shape {G.shape}, expected {obj.keypoints.shape}")
    out = []
    src, zs = cam.project(obj.keypoints)
    tgt, zt = cam.project(G)
    for i, name in enumerate(obj.names):
        for label, uv, z in (("source", src[i], zs[i]), ("target", tgt[i], zt[i])):
            if not z > 0:
                raise ProjectionError(f"{label} keypoint {name!r} is at or behind the camera")
            if not (np.all(np.isfinite(uv)) and cam.in_bounds(uv)[0]):
                raise ProjectionError(
                    f"{label} keypoint {name!r} projects to ({uv[0]:.2f}, {uv[1]:.2f}), "
                    f"outside the {pose.width}x{pose.height} image")
        out.append(ProjectedPair(name, (float(src[i, 0]), float(src[i, 1])),
                                 (float(tgt[i, 0]), float(tgt[i, 1]))))
    return out


def render_wireframe(obj: ReferenceObject, pose: CameraPose) -> np.ndarray:
    """``uint8`` image with every mesh edge drawn at 255 (edges behind the camera skipped)."""
    cam = camera_matrix(pose)
    img = np.zeros((pose.height, pose.width), dtype=np.uint8)
    if len(obj.faces) == 0:
        return img
    uv, z = cam.project(obj.vertices)
    used = np.unique(obj.faces)
    if not np.any(z[used] > 0):
        raise ProjectionError("every mesh vertex is behind the camera")
    for a, b in obj.edges():
        if z[a] <= 0 or z[b] <= 0:
            continue
        n = int(math.ceil(np.abs(uv[b] - uv[a]).max())) + 1
        s = np.linspace(0.0, 1.0, n)[:, None]
        px = np.rint(uv[a] + s * (uv[b] - uv[a])).astype(np.int64)
        ok = (px[:, 0] >= 0) & (px[:, 0] < pose.width) & (px[:, 1] >= 0) & (px[:, 1] < pose.height)
        img[px[ok, 1], px[ok, 0]] = 255
    return img


# --- scene files -------------------------------------------------------------

@dataclass
class Scene:
    obj: ReferenceObject
    pose: CameraPose
    rules: TranslationRuleSet
    gamma: dict
    latent_scale: int = 1

    def targets(self) -> np.ndarray:
        return translate_points(self.obj.names, self.obj.keypoints, self.rules, self.gamma)

    def pairs(self) -> list[ProjectedPair]:
        return project_pairs(self.obj, self.targets(), self.pose)


def load_scene(path) -> Scene:
    """Scene JSON: ``mesh_path``, ``keypoints``, ``camera``, ``rules``, ``gamma``.

    ``rules`` is ``{"parameters": {name: reference}, "rules": [...]}``; ``gamma`` defaults
    to the reference values. Relative mesh paths resolve against the scene file.
    """
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise SceneError(f"scene file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: {exc}") from None
    if "mesh_path" not in d:
        raise SceneError("scene missing field 'mesh_path'")
    if "camera" not in d:
        raise SceneError("scene missing field 'camera'")
    mesh = Path(d["mesh_path"])
    if not mesh.is_absolute():
        mesh = path.parent / mesh
    obj = load_reference(mesh, d.get("keypoints"))
    rules = TranslationRuleSet.from_dict(d.get("rules"))
    rules.validate(obj.names)
    gamma = {**rules.reference, **{k: float(v) for k, v in d.get("gamma", {}).items()}}
    unknown = set(gamma) - set(rules.reference)
    if unknown:
        raise SceneError(f"gamma sets undeclared parameters {sorted(unknown)}")
    scale = int(d.get("latent_scale", 1))
    pose = CameraPose.from_dict(d["camera"])
    if scale < 1 or pose.width % scale or pose.height % scale:
        raise SceneError("latent_scale must divide the image size")
    return Scene(obj, pose, rules, gamma, scale)
