import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geodrag.evalharness import SyntheticSpec, generate_synthetic_case
from geodrag.features import FeatureExtractor, PatchBoundsError, box_extractor
from geodrag.latentio import read_latent, write_latent
from geodrag.optimizer import (DragConfig, DragError, DragState, ExternalDenoiser, GaussianDenoiser,
                               IdentityDenoiser, copy_paste_refine, descend, gradient_mask,
                               make_denoiser, motion_supervision_loss, run_drag, track_points)

F_ID = FeatureExtractor()


def _blob_case(seed=0, drags=((12.0, 5.0),), centers=((24.0, 30.0),)):
    return generate_synthetic_case(SyntheticSpec(blobs=len(drags), drags=list(drags),
                                                 centers=list(centers), seed=seed))


# --- config ---------------------------------------------------------------------

def test_config_round_trip_and_alias():
    cfg = DragConfig.from_dict({"lambda": "0.25", "B": "4", "reentry": "false", "features": "box3"})
    assert (cfg.lam, cfg.B, cfg.reentry, cfg.features) == (0.25, 4, False, "box3")
    assert DragConfig.from_dict(cfg.to_dict()) == cfg
    assert "lambda" in DragConfig.keys() and "lam" not in DragConfig.keys()
    assert cfg.replace(**{"lambda": 0.5}).lam == 0.5


def test_config_digest_tracks_values():
    a = DragConfig()
    assert a.digest() == DragConfig().digest()
    assert a.digest() != a.replace(eta=0.2).digest()


@pytest.mark.parametrize("bad", [
    {"nope": 1}, {"B": 2.5}, {"l": 3.0, "u": 1.0}, {"alpha": 0.9}, {"beta_blur": 1.0},
    {"r1": 5, "r2": 3}, {"denoiser": "external"}, {"fixation": "maybe"}, {"eta": 0},
])
def test_config_rejects(bad):
    with pytest.raises((KeyError, ValueError)):
        DragConfig.from_dict(bad)


# --- denoisers ------------------------------------------------------------------

def test_gaussian_denoiser_adjoint_and_smoothing():
    rng = np.random.default_rng(0)
    D = GaussianDenoiser(0.8)
    x, y = rng.standard_normal((9, 7, 3)), rng.standard_normal((9, 7, 3))
    assert np.isclose(np.vdot(D(x), y), np.vdot(x, D.adjoint(y)), rtol=1e-12)
    const = np.full((9, 7, 3), 2.5)
    assert np.allclose(D(const), const)
    assert D(x).var() < x.var()


def test_external_denoiser_round_trip(tmp_path):
    script = tmp_path / "half.py"
    script.write_text("import sys\nfrom geodrag.latentio import read_latent, write_latent\n"
                      "write_latent(sys.argv[2], 0.5 * read_latent(sys.argv[1]))\n")
    D = make_denoiser(DragConfig(denoiser="external",
                                 denoiser_command=f"{sys.executable} {script} {{input}} {{output}}"))
    assert isinstance(D, ExternalDenoiser)
    z = np.arange(12, dtype=float).reshape(2, 3, 2)
    assert np.array_equal(D(z), 0.5 * z)


# --- loss and descent -------------------------------------------------------------

def _state(points, targets, fixated=None):
    p = np.asarray(points, float)
    return DragState(p.copy(), np.asarray(targets, float), p.copy(),
                     np.zeros(len(p), bool) if fixated is None else np.asarray(fixated))


def test_gradient_mask_covers_fixated_points_only():
    cfg = DragConfig(r_grad=1)
    st_ = _state([[5.4, 6.6], [10, 10]], [[5, 7], [2, 2]], fixated=[True, False])
    m = gradient_mask((16, 16), st_, cfg)
    assert m.sum() == 256 - 9 and not m[6:9, 4:7].any()
    assert gradient_mask((16, 16), _state([[5, 5]], [[9, 9]]), cfg) is None
    assert gradient_mask((16, 16), st_, cfg.replace(fixation=False)) is None


def test_fixated_point_contributes_nothing():
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal((20, 20, 2))
    z = z0 + rng.standard_normal(z0.shape)
    cfg = DragConfig(r1=2, r_grad=2)
    both = _state([[6, 6], [13, 13]], [[9, 6], [13.5, 13]], fixated=[False, True])
    only = _state([[6, 6]], [[9, 6]])
    l1, g1 = motion_supervision_loss(z, z0, z0, both, None, F_ID, cfg)
    l2, g2 = motion_supervision_loss(z, z0, z0, only, None, F_ID, cfg)
    assert l1 == l2
    mask = gradient_mask((20, 20), both, cfg)
    assert np.array_equal(g1, g2 * mask[:, :, None])


def test_target_patch_is_frozen_source_features():
    rng = np.random.default_rng(2)
    z0 = rng.standard_normal((20, 20, 2))
    st_ = _state([[8, 8]], [[14, 8]])
    cfg = DragConfig(r1=2, beta_step=1.0, lam=0.0)
    # moving the point's integral copy of the source patch one cell along d zeroes the loss
    z = z0.copy()
    z[6:11, 7:12] = z0[6:11, 6:11]
    loss, _ = motion_supervision_loss(z, z0, z0, st_, None, F_ID, cfg)
    assert loss == 0.0


def test_descend_two_steps_equals_two_single_steps():
    case = _blob_case()
    z0 = case.latent
    st_ = _state(case.instruction.sources, case.instruction.targets)

    def fn(zz):
        return motion_supervision_loss(zz, z0, z0, st_, None, F_ID, DragConfig())

    z2, losses, _ = descend(z0, fn, DragConfig(J=2))
    za, la, _ = descend(z0, fn, DragConfig(J=1))
    zb, lb, _ = descend(za, fn, DragConfig(J=1))
    assert np.array_equal(z2, zb) and losses == la + lb


def test_non_editable_term_protects_outside_mask():
    case = _blob_case()
    mask = np.zeros((64, 64))
    mask[28:34, 20:40] = 1    # thinner than the feature patch, so gradients spill out
    changes = []
    for lam in (0.0, 2.0):
        cfg = DragConfig(lam=lam, T_drag=3, step_copy_paste=False, final_copy_paste=False)
        res = run_drag(case.latent, case.instruction.sources, case.instruction.targets, mask, F_ID,
                       IdentityDenoiser(), cfg)
        changes.append(np.abs(res.latent - case.latent)[mask == 0].sum())
    assert changes[0] > 1.0
    assert changes[1] < 0.5 * changes[0]


# --- tracking -------------------------------------------------------------------

def _track_oracle(feat, f0, p, aim, r):
    cx, cy = int(round(p[0])), int(round(p[1]))
    best = None
    for y in range(cy - r, cy + r + 1):
        for x in range(cx - r, cx + r + 1):
            key = (np.abs(feat[y, x] - f0).sum(), np.hypot(x - aim[0], y - aim[1]), y, x)
            best = key if best is None or key < best else best
    return best[3], best[2]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(4, 11), st.floats(4, 11), st.floats(0, 3))
def test_tracking_matches_brute_force_with_ties(seed, px, py, beta):
    rng = np.random.default_rng(seed)
    z0 = rng.integers(0, 3, size=(16, 16, 1)).astype(float)  # coarse values -> many ties
    z = rng.integers(0, 3, size=(16, 16, 1)).astype(float)
    st_ = DragState(np.array([[px, py]]), np.array([[8.0, 2.0]]), np.array([[7.0, 7.0]]),
                    np.zeros(1, bool))
    cfg = DragConfig(r1=2, r2=3, beta_step=beta)
    aim = st_.points[0] + beta * st_.directions()[0]
    got = track_points(z, z0, st_, F_ID, cfg)[0]
    assert tuple(got) == _track_oracle(z, z0[7, 7], st_.points[0], aim, 3)


def test_tracking_window_out_of_grid():
    with pytest.raises(PatchBoundsError):
        track_points(np.zeros((20, 20, 1)), np.zeros((20, 20, 1)), _state([[2, 10]], [[9, 9]]),
                     F_ID, DragConfig(r2=4))


# --- copy-paste -------------------------------------------------------------------

def test_pastes_read_a_snapshot_and_blur_spares_targets():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((30, 30, 2))
    cfg = DragConfig(r_cp=1, alpha=2.0, beta_blur=0.5)
    # point 0 lands on point 1's source; point 1 must still copy the original values
    src = np.array([[5.0, 5.0], [9.0, 5.0]])
    tgt = np.array([[9.0, 5.0], [20.0, 20.0]])
    out, pasted = copy_paste_refine(z, z, src, tgt, [0, 1], cfg, np.random.default_rng(7))
    assert pasted == [0, 1]
    assert np.array_equal(out[4:7, 8:11], 2.0 * z[4:7, 4:7])
    assert np.array_equal(out[19:22, 19:22], 2.0 * z[4:7, 8:11])
    # blur: source cells of point 0, in sorted (y, x) order; point 1's source is covered by G_0
    noise = np.random.default_rng(7).standard_normal((9, 2))
    ys, xs = np.mgrid[4:7, 4:7]
    want = 0.5 * z[ys.ravel(), xs.ravel()] + np.sqrt(0.75) * noise
    assert np.array_equal(out[ys.ravel(), xs.ravel()], want)
    untouched = np.ones((30, 30), bool)
    untouched[4:7, 4:11] = untouched[19:22, 19:22] = False
    assert np.array_equal(out[untouched], z[untouched])


def test_copy_paste_skips_coincident_and_checks_bounds():
    z = np.random.default_rng(0).standard_normal((12, 12, 1))
    cfg = DragConfig(r_cp=2, alpha=1.5)
    out, pasted = copy_paste_refine(z, z, np.array([[5.2, 5.4]]), np.array([[4.8, 5.0]]), [0],
                                    cfg, np.random.default_rng(0))
    assert pasted == [] and np.array_equal(out, z)
    with pytest.raises(PatchBoundsError):
        copy_paste_refine(z, z, np.array([[5.0, 5.0]]), np.array([[10.0, 5.0]]), [0], cfg,
                          np.random.default_rng(0))


# --- full schedule ------------------------------------------------------------------

def test_zero_drag_leaves_latent_unchanged():
    case = _blob_case()
    src = case.instruction.sources
    res = run_drag(case.latent, src, src, None, F_ID, IdentityDenoiser(), DragConfig())
    assert np.array_equal(res.latent, case.latent)
    assert np.array_equal(res.final_points, np.asarray(src))
    assert [r["event"] for r in res.log if r["event"] == "enter_I"] == ["enter_I"]


def test_single_blob_reaches_target_and_logs():
    case = _blob_case()
    cfg = DragConfig()
    res = run_drag(case.latent, case.instruction.sources, case.instruction.targets, None, F_ID,
                   IdentityDenoiser(), cfg)
    assert np.allclose(res.final_points, case.instruction.targets)
    keys = {"timestep", "iteration", "point_id", "x", "y", "e", "fixated", "target", "loss", "event"}
    assert all(set(r) == keys for r in res.log)
    denoise = [r for r in res.log if r["event"] == "denoise"]
    assert len(denoise) == cfg.T_drag + cfg.N_post
    assert len(res.losses) == cfg.T_drag * cfg.B


@pytest.mark.parametrize("variant", [{}, {"features": "box3"}, {"denoiser": "gaussian"}])
def test_drag_deterministic_per_seed(variant):
    case = _blob_case(drags=((10.0, 0.0), (-8.0, 9.0)), centers=((20.0, 20.0), (40.0, 30.0)))
    cfg = DragConfig(T_drag=3, **variant)
    F = box_extractor(4) if cfg.features == "box3" else F_ID
    runs = [run_drag(case.latent, case.instruction.sources, case.instruction.targets, None, F,
                     make_denoiser(cfg), cfg) for _ in range(2)]
    assert runs[0].latent.tobytes() == runs[1].latent.tobytes()
    assert runs[0].log == runs[1].log
    other = run_drag(case.latent, case.instruction.sources, case.instruction.targets, None, F,
                     make_denoiser(cfg), cfg.replace(seed=1))
    assert other.latent.tobytes() != runs[0].latent.tobytes()   # blur noise depends on the seed


def test_failure_carries_partial_log():
    case = _blob_case()
    with pytest.raises(DragError) as exc:
        run_drag(case.latent, [[3.0, 30.0]], [[20.0, 30.0]], None, F_ID, IdentityDenoiser(), DragConfig())
    assert exc.value.log and exc.value.log[0]["iteration"] == -1
    with pytest.raises(DragError, match="outside"):
        run_drag(case.latent, [[70.0, 30.0]], [[20.0, 30.0]], None, F_ID, IdentityDenoiser(), DragConfig())


def test_latent_container_feeds_drag(tmp_path):
    case = _blob_case()
    write_latent(tmp_path / "z.bin", case.latent)
    z = read_latent(tmp_path / "z.bin")
    assert np.abs(z - case.latent).max() < 1e-6
