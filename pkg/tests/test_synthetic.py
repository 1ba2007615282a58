import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from endorecon.errors import InputError
from endorecon.geometry import PinholeCamera, se3_inverse
from endorecon.io_formats import (
    flow_valid_mask,
    read_flo,
    read_image_gray,
    read_pfm,
    read_scores_csv,
    read_trajectory,
)
from endorecon.synthetic import (
    CameraPathSpec,
    SceneSpec,
    analytic_depth,
    derive_disparity_dataset,
    derive_perturbed_dataset,
    generate_poses,
    ground_truth_flow,
    perturb_depth,
    render_frame,
    render_sequence,
    texture_albedo,
)
from endorecon.temporal import warp_depth

SMALL_CAM = PinholeCamera(fx=90.0, fy=90.0, cx=48.0, cy=36.0, width=96, height=72)


def small_path(**kw):
    args = dict(camera=SMALL_CAM, kind="arc", n_frames=4, arc_degrees=2.0)
    args.update(kw)
    return CameraPathSpec(**args)


def tree_digest(root):
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


class TestAnalyticDepth:
    def test_sphere_principal_pixel(self):
        scene = SceneSpec(surface="sphere", center=(0.0, 0.0, 0.35), radius=0.15)
        depth = analytic_depth(scene, SMALL_CAM, np.eye(4))
        assert abs(depth[36, 48] - 0.2) < 1e-9

    def test_plane_depth_formula(self):
        scene = SceneSpec(surface="plane", normal=(0.0, 0.0, 1.0), offset=0.3)
        depth = analytic_depth(scene, SMALL_CAM, np.eye(4))
        # A fronto-parallel plane has constant z-depth everywhere.
        np.testing.assert_allclose(depth, 0.3, atol=1e-12)

    def test_heightfield_root_accuracy(self):
        scene = SceneSpec(
            surface="heightfield", offset=0.3, amplitude=0.01, frequency=8.0
        )
        depth = analytic_depth(scene, SMALL_CAM, np.eye(4))
        assert (np.abs(depth - 0.3) <= 0.01 + 1e-9).all()
        # Verify the implicit equation holds at the recovered points.
        u2, v2 = SMALL_CAM.pixel_grid()
        pts = SMALL_CAM.backproject(u2.ravel(), v2.ravel(), depth.ravel())
        g = pts[:, 2] - (
            0.3
            + 0.01
            * np.sin(2 * np.pi * 8.0 * pts[:, 0])
            * np.sin(2 * np.pi * 8.0 * pts[:, 1])
        )
        assert np.abs(g).max() < 1e-9

    def test_sphere_miss_is_invalid(self):
        scene = SceneSpec(surface="sphere", center=(0.0, 0.0, 0.35), radius=0.05)
        depth = analytic_depth(scene, SMALL_CAM, np.eye(4))
        assert depth[0, 0] == 0.0
        assert depth[36, 48] > 0.0


class TestTexture:
    def test_deterministic_and_bounded(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-0.3, 0.3, size=(500, 3))
        a1 = texture_albedo(pts, seed=7)
        a2 = texture_albedo(pts, seed=7)
        np.testing.assert_array_equal(a1, a2)
        assert (a1 >= 0.25).all() and (a1 <= 0.95).all()

    def test_seed_changes_pattern(self):
        pts = np.random.default_rng(1).uniform(-0.3, 0.3, size=(200, 3))
        assert not np.allclose(texture_albedo(pts, 1), texture_albedo(pts, 2))

    def test_has_fine_scale_variation(self):
        # Neighboring millimeter-scale samples must differ; alignment needs
        # gradients at the finest level.
        base = np.array([[0.01, 0.02, 0.3]])
        shifted = base + np.array([[0.001, 0.0, 0.0]])
        assert abs(texture_albedo(base, 0)[0] - texture_albedo(shifted, 0)[0]) > 1e-4


class TestGeneratePoses:
    def test_first_pose_is_identity(self):
        for kind in ("static", "arc", "dolly", "jitter"):
            poses = generate_poses(small_path(kind=kind))
            np.testing.assert_array_equal(poses[0], np.eye(4))

    def test_static_all_identity(self):
        poses = generate_poses(small_path(kind="static"))
        for p in poses:
            np.testing.assert_array_equal(p, np.eye(4))

    def test_arc_keeps_standoff(self):
        spec = small_path(kind="arc", n_frames=10, arc_degrees=30.0)
        poses = generate_poses(spec)
        center = np.asarray(spec.arc_center)
        d0 = np.linalg.norm(poses[0][:3, 3] - center)
        for p in poses:
            assert abs(np.linalg.norm(p[:3, 3] - center) - d0) < 1e-12

    def test_dolly_translates_linearly(self):
        poses = generate_poses(small_path(kind="dolly", dolly_step=(0, 0, 0.003)))
        np.testing.assert_allclose(poses[2][:3, 3], [0, 0, 0.006], atol=1e-15)
        np.testing.assert_array_equal(poses[2][:3, :3], np.eye(3))

    def test_jitter_deterministic_per_seed(self):
        a = generate_poses(small_path(kind="jitter", seed=5))
        b = generate_poses(small_path(kind="jitter", seed=5))
        c = generate_poses(small_path(kind="jitter", seed=6))
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    def test_bad_kind_rejected(self):
        with pytest.raises(InputError):
            small_path(kind="spiral")


class TestRenderSequence:
    def test_static_sequence_outputs(self, tmp_path):
        scene = SceneSpec(surface="plane", offset=0.3)
        manifest_path = render_sequence(
            scene, small_path(kind="static", n_frames=3), tmp_path
        )
        manifest = json.loads(Path(manifest_path).read_text())
        assert len(manifest["frames"]) == 3
        g0 = (tmp_path / manifest["frames"][0]["gray"]).read_bytes()
        g1 = (tmp_path / manifest["frames"][1]["gray"]).read_bytes()
        assert g0 == g1
        flow = read_flo(tmp_path / manifest["frames"][1]["flow"])
        ok = flow_valid_mask(flow)
        assert ok.all()
        assert np.abs(flow).max() < 1e-6
        scores = read_scores_csv(tmp_path / manifest["scores"])
        assert scores == {1: 0.0, 2: 0.0}

    def test_ground_truth_files_consistent(self, tmp_path):
        scene = SceneSpec(surface="sphere")
        # Default camera at the default per-step arc angle: the regime the
        # emitted datasets actually use.
        spec = CameraPathSpec(kind="arc", n_frames=4, arc_degrees=1.25)
        manifest_path = render_sequence(scene, spec, tmp_path)
        manifest = json.loads(Path(manifest_path).read_text())
        ts, poses = read_trajectory(tmp_path / manifest["groundtruth"])
        assert len(ts) == 4
        np.testing.assert_allclose(poses[0], np.eye(4), atol=1e-12)
        # Warping the previous gray image by the emitted flow reproduces
        # the current one on valid-flow pixels.
        for i in (1, 2, 3):
            prev = read_image_gray(tmp_path / manifest["frames"][i - 1]["gray"])
            cur = read_image_gray(tmp_path / manifest["frames"][i]["gray"])
            flow = read_flo(tmp_path / manifest["frames"][i]["flow"]).astype(np.float64)
            ok = flow_valid_mask(flow)
            warped = warp_depth(np.where(prev > 0, prev, 1e-9), flow)
            usable = ok & (warped > 0)
            assert usable.mean() > 0.3
            mad = np.abs(warped[usable] - cur[usable]).mean()
            assert mad < 0.01

    def test_depth_files_match_analytic(self, tmp_path):
        scene = SceneSpec(surface="sphere")
        spec = small_path(kind="arc", n_frames=2, arc_degrees=1.0)
        manifest_path = render_sequence(scene, spec, tmp_path)
        manifest = json.loads(Path(manifest_path).read_text())
        _, poses = read_trajectory(tmp_path / manifest["groundtruth"])
        stored = read_pfm(tmp_path / manifest["frames"][1]["depth"])
        exact = analytic_depth(scene, SMALL_CAM, poses[1])
        np.testing.assert_allclose(stored, exact, atol=1e-5)

    def test_byte_identical_across_runs(self, tmp_path):
        scene = SceneSpec(surface="heightfield", texture_seed=3)
        spec = small_path(kind="jitter", n_frames=3, seed=11)
        render_sequence(scene, spec, tmp_path / "a")
        render_sequence(scene, spec, tmp_path / "b")
        da = tree_digest(tmp_path / "a")
        db = tree_digest(tmp_path / "b")
        assert da == db and len(da) > 10

    def test_frustum_violation_raises(self, tmp_path):
        scene = SceneSpec(surface="sphere", center=(0.5, 0.5, 0.35), radius=0.02)
        with pytest.raises(InputError):
            render_sequence(scene, small_path(n_frames=2), tmp_path)

    def test_path_step_violation_raises(self, tmp_path):
        scene = SceneSpec(surface="plane")
        spec = small_path(kind="dolly", dolly_step=(0.0, 0.0, 0.05), n_frames=3)
        with pytest.raises(InputError):
            render_sequence(scene, spec, tmp_path)


class TestDollyFlowSymmetry:
    def test_radial_symmetry_about_principal_point(self):
        scene = SceneSpec(surface="plane", offset=0.3)
        spec = small_path(kind="dolly", dolly_step=(0.0, 0.0, 0.002), n_frames=2)
        poses = generate_poses(spec)
        depth1 = analytic_depth(scene, SMALL_CAM, poses[1])
        flow = ground_truth_flow(scene, SMALL_CAM, poses[0], poses[1], depth1)
        cx, cy, d = 48, 36, 20
        right = flow[cy, cx + d]
        left = flow[cy, cx - d]
        down = flow[cy + d, cx]
        up = flow[cy - d, cx]
        assert abs(right[0] + left[0]) < 1e-6
        assert abs(right[1]) < 1e-6 and abs(left[1]) < 1e-6
        assert abs(down[1] + up[1]) < 1e-6
        assert abs(down[0]) < 1e-6 and abs(up[0]) < 1e-6
        # fx = fy, so the magnitudes match across the two axes too.
        assert abs(abs(right[0]) - abs(down[1])) < 1e-6
        assert abs(flow[cy, cx][0]) < 1e-9 and abs(flow[cy, cx][1]) < 1e-9

    def test_occlusion_marking_out_of_bounds(self):
        scene = SceneSpec(surface="plane", offset=0.3)
        # A sideways shift pushes border pixels' sources out of view.
        spec = small_path(kind="dolly", dolly_step=(0.004, 0.0, 0.0), n_frames=2)
        poses = generate_poses(spec)
        depth1 = analytic_depth(scene, SMALL_CAM, poses[1])
        flow = ground_truth_flow(scene, SMALL_CAM, poses[0], poses[1], depth1)
        ok = flow_valid_mask(flow)
        assert not ok[:, -1].any()
        assert ok[:, 10].all()


class TestPerturbDepth:
    def test_scale_one_is_identity(self):
        d = np.random.default_rng(0).uniform(0.1, 0.5, size=(6, 6))
        np.testing.assert_array_equal(perturb_depth(d, "scale", k=1.0), d)

    def test_scale_multiplies(self):
        d = np.random.default_rng(1).uniform(0.1, 0.5, size=(6, 6))
        np.testing.assert_allclose(perturb_depth(d, "scale", k=2.0), 2.0 * d)

    def test_gaussian_zero_sigma_is_identity(self):
        d = np.random.default_rng(2).uniform(0.1, 0.5, size=(6, 6))
        np.testing.assert_array_equal(perturb_depth(d, "gaussian", sigma=0.0), d)

    def test_gaussian_seeded_and_relative(self):
        d = np.full((50, 50), 0.4)
        a = perturb_depth(d, "gaussian", seed=3, sigma=0.02)
        b = perturb_depth(d, "gaussian", seed=3, sigma=0.02)
        c = perturb_depth(d, "gaussian", seed=4, sigma=0.02)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        rel = (a - d) / d
        assert 0.015 < rel.std() < 0.025

    def test_invalid_pixels_stay_invalid(self):
        d = np.full((5, 5), 0.4)
        d[2, 2] = 0.0
        out = perturb_depth(d, "gaussian", seed=0, sigma=0.5)
        assert out[2, 2] == 0.0

    def test_low_freq_warp_smooth(self):
        d = np.full((40, 40), 0.4)
        out = perturb_depth(d, "low-freq-warp", amplitude=0.1)
        assert out.min() >= 0.4 * 0.9 - 1e-12
        assert out.max() <= 0.4 * 1.1 + 1e-12
        grad = np.abs(np.diff(out, axis=1)).max()
        assert grad < 0.01

    def test_unknown_model_rejected(self):
        with pytest.raises(InputError):
            perturb_depth(np.ones((3, 3)), "salt")


class TestDerivedDatasets:
    @pytest.fixture()
    def base_dataset(self, tmp_path):
        scene = SceneSpec(surface="sphere")
        spec = small_path(kind="arc", n_frames=3, arc_degrees=2.0)
        return render_sequence(scene, spec, tmp_path / "clean")

    def test_perturbed_dataset(self, base_dataset, tmp_path):
        out = derive_perturbed_dataset(
            base_dataset, tmp_path / "noisy", model="gaussian", seed=9, sigma=0.02
        )
        manifest = json.loads(Path(out).read_text())
        root = Path(out).parent
        for frame in manifest["frames"]:
            noisy = read_pfm(root / frame["depth"])
            clean = read_pfm((root / frame["depth_gt"]).resolve())
            assert noisy.shape == clean.shape
            assert not np.array_equal(noisy, clean)
            assert (root / frame["gray"]).resolve().exists()
            if frame["flow"]:
                assert (root / frame["flow"]).resolve().exists()
        assert (root / manifest["groundtruth"]).resolve().exists()

    def test_disparity_dataset(self, base_dataset, tmp_path):
        out = derive_disparity_dataset(
            base_dataset, tmp_path / "disp", baseline=0.05
        )
        manifest = json.loads(Path(out).read_text())
        assert manifest["depth_kind"] == "disparity"
        assert manifest["f_pred"] == pytest.approx(90.0)
        root = Path(out).parent
        frame = manifest["frames"][0]
        assert "depth" not in frame
        disp = read_pfm(root / frame["disparity"]).astype(np.float64)
        ref = read_pfm((root / frame["depth_ref"]).resolve()).astype(np.float64)
        ok = (disp > 0) & (ref > 0)
        assert ok.sum() > 100
        np.testing.assert_allclose(
            disp[ok], 90.0 * 0.05 / ref[ok], rtol=1e-5
        )

    def test_disparity_of_disparity_rejected(self, base_dataset, tmp_path):
        out = derive_disparity_dataset(base_dataset, tmp_path / "d1")
        with pytest.raises(InputError):
            derive_disparity_dataset(out, tmp_path / "d2")


class TestRenderFrame:
    def test_intensities_in_unit_range(self):
        scene = SceneSpec(surface="sphere")
        gray, depth, hit = render_frame(scene, SMALL_CAM, np.eye(4))
        assert (gray >= 0.0).all() and (gray <= 1.0).all()
        assert (depth[hit] > 0.0).all()
        np.testing.assert_array_equal(depth[~hit], 0.0)
        assert gray[~hit].max() == 0.0

    def test_oblique_view_still_renders(self):
        scene = SceneSpec(surface="plane", offset=0.3)
        pose = np.eye(4)
        pose[:3, :3] = np.asarray(
            [[1, 0, 0], [0, np.cos(0.2), -np.sin(0.2)], [0, np.sin(0.2), np.cos(0.2)]]
        )
        gray, depth, hit = render_frame(scene, SMALL_CAM, pose)
        assert hit.mean() > 0.9
        rel_depth = depth[hit]
        assert rel_depth.min() > 0.2 and rel_depth.max() < 0.5
