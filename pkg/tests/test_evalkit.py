import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nocspose.errors import EmptyMesh, LengthMismatch, ShapeMismatch, TooFewPoints, ZeroFirstTranslation
from nocspose.evalkit import (
    ALIGN_SCALES, FSCORE_THRESHOLD, SimilarityTransform, align_meshes, alignment_initializations,
    apply_similarity, eval_viewpoints, eval_views_protocol, fscore, fscore_points, icp, pose_metrics, psnr,
    sample_surface, umeyama, unit_box_normalization,
)
from nocspose.geometry import CameraIntrinsics, PoseSE3, SphericalPose, compose, rotation_error_deg, so3_exp
from nocspose.raster import TriangleMesh
from nocspose.synth import make_primitive_scene

from conftest import random_rotation, rot_y, rot_z

MARKER = {"kind": "composite-marker", "dimensions": [1.0], "subdivisions": 2, "color": "random"}


def random_poses(rng, n):
    return [PoseSE3(random_rotation(rng), rng.normal(size=3) + [0, 0, 3]) for _ in range(n)]


def unit_square():
    return TriangleMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])


class TestPoseMetrics:
    def test_perfect_prediction(self, rng):
        gt = random_poses(rng, 4)
        rep = pose_metrics(gt, gt)
        assert rep.median_rotation_error < 1e-6 and rep.median_translation_error < 1e-9
        assert rep.acc_at_15 == rep.acc_at_30 == 1.0

    @pytest.mark.parametrize("n,pairs", [(2, 1), (3, 3), (5, 10), (6, 15)])
    def test_pair_count(self, rng, n, pairs):
        gt = random_poses(rng, n)
        assert pose_metrics(gt, gt).pair_count == pairs

    def test_brute_force_with_camera_roll(self, rng):
        gt = random_poses(rng, 4)
        pred = [PoseSE3(rot_z(20.0) @ p.rotation, p.translation) for p in gt]
        rep = pose_metrics(pred, gt)
        s = np.linalg.norm(gt[0].translation) / np.linalg.norm(pred[0].translation)
        rot, tra = [], []
        for i, j in itertools.combinations(range(4), 2):
            ti, tj = np.eye(4), np.eye(4)
            ti[:3, :3], ti[:3, 3] = pred[i].rotation, s * pred[i].translation
            tj[:3, :3], tj[:3, 3] = pred[j].rotation, s * pred[j].translation
            mp = ti @ np.linalg.inv(tj)
            mg = gt[i].matrix() @ np.linalg.inv(gt[j].matrix())
            c = (np.trace(mp[:3, :3] @ mg[:3, :3].T) - 1) / 2
            rot.append(math.degrees(math.acos(max(-1.0, min(1.0, c)))))
            tra.append(np.linalg.norm(mp[:3, 3] - mg[:3, 3]))
        assert rep.median_rotation_error == pytest.approx(np.median(rot), abs=1e-6)
        assert rep.median_translation_error == pytest.approx(np.median(tra), abs=1e-9)
        for p, r, t in zip(rep.pairs, rot, tra):
            assert p.rotation_error == pytest.approx(r, abs=1e-6)
            assert p.translation_error == pytest.approx(t, abs=1e-9)

    def test_accuracy_thresholds_strict(self):
        gt = [PoseSE3(np.eye(3), [0, 0, 2.0]), PoseSE3(np.eye(3), [0, 0, 2.0])]
        pred = [PoseSE3(np.eye(3), [0, 0, 2.0]), PoseSE3(rot_y(15.0), [0, 0, 2.0])]
        rep = pose_metrics(pred, gt)
        assert rep.median_rotation_error == pytest.approx(15.0)
        assert rep.acc_at_30 == 1.0
        assert rep.acc_at_15 <= rep.acc_at_30

    def test_errors(self, rng):
        gt = random_poses(rng, 3)
        with pytest.raises(LengthMismatch):
            pose_metrics(gt[:2], gt)
        with pytest.raises(LengthMismatch):
            pose_metrics(gt[:1], gt[:1])
        zero = [PoseSE3(gt[0].rotation, np.zeros(3))] + gt[1:]
        with pytest.raises(ZeroFirstTranslation):
            pose_metrics(zero, gt)

    @given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
    def test_invariant_to_translation_scale(self, seed, scale):
        rng = np.random.default_rng(seed)
        gt = random_poses(rng, 4)
        pred = random_poses(rng, 4)
        a = pose_metrics(pred, gt)
        b = pose_metrics([PoseSE3(p.rotation, scale * p.translation) for p in pred], gt)
        for pa, pb in zip(a.pairs, b.pairs):
            assert abs(pa.rotation_error - pb.rotation_error) < 1e-9
            assert abs(pa.translation_error - pb.translation_error) < 1e-9

    @given(st.integers(0, 2**31))
    def test_rotation_terms_invariant_to_common_frame(self, seed):
        rng = np.random.default_rng(seed)
        gt = random_poses(rng, 4)
        pred = random_poses(rng, 4)
        g = PoseSE3(random_rotation(rng), rng.normal(size=3))
        a = pose_metrics(pred, gt)
        b = pose_metrics([compose(p, g) for p in pred], gt)
        for pa, pb in zip(a.pairs, b.pairs):
            assert abs(pa.rotation_error - pb.rotation_error) < 1e-9
        assert a.acc_at_15 == b.acc_at_15 and a.acc_at_30 == b.acc_at_30

    def test_json_and_csv(self, rng):
        gt = random_poses(rng, 3)
        rep = pose_metrics(random_poses(rng, 3), gt)
        d = rep.to_json()
        assert set(d) >= {"median_rot_err_deg", "acc_at_15", "acc_at_30", "median_trans_err", "pair_count"}
        lines = rep.pairs_csv().strip().splitlines()
        assert len(lines) == 1 + 3


class TestSimilarity:
    def test_compose_and_inverse(self, rng):
        a = SimilarityTransform(1.3, random_rotation(rng), rng.normal(size=3))
        b = SimilarityTransform(0.7, random_rotation(rng), rng.normal(size=3))
        x = rng.normal(size=(5, 3))
        assert np.allclose((a @ b).apply(x), a.apply(b.apply(x)))
        assert np.allclose(a.inverse().apply(a.apply(x)), x)

    def test_rejects_bad_scale(self):
        with pytest.raises(ValueError):
            SimilarityTransform(0.0)

    def test_umeyama_exact(self, rng):
        src = rng.normal(size=(50, 3))
        tf = SimilarityTransform(2.5, random_rotation(rng), rng.normal(size=3))
        est = umeyama(src, tf.apply(src))
        assert est.scale == pytest.approx(2.5)
        assert np.allclose(est.rotation, tf.rotation) and np.allclose(est.translation, tf.translation)

    def test_umeyama_never_reflects(self, rng):
        src = rng.normal(size=(30, 3))
        est = umeyama(src, src * [1, 1, -1])
        assert np.linalg.det(est.rotation) == pytest.approx(1.0)


class TestIcp:
    def setup_method(self):
        self.pts = sample_surface(make_primitive_scene(MARKER, seed=0), 3000, seed=0)

    def test_identical_clouds(self):
        r = icp(self.pts, self.pts)
        assert r.inlier_ratio == 1.0
        assert np.allclose(r.transform.rotation, np.eye(3)) and r.transform.scale == pytest.approx(1.0)

    def test_known_similarity(self):
        tf = SimilarityTransform(1.2, rot_y(25.0), np.array([0.1, 0.0, 0.0]))
        r = icp(self.pts, tf.apply(self.pts), init=SimilarityTransform(1.1, rot_y(20.0)), max_iters=200,
                tolerance=1e-12)
        assert abs(r.transform.scale - 1.2) < 1e-3
        assert rotation_error_deg(r.transform.rotation, tf.rotation) < 1e-1
        assert np.abs(r.transform.translation - tf.translation).max() < 1e-3

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            icp(self.pts[:2], self.pts)


class TestSampleSurface:
    def test_binomial_area_split(self):
        n = 10_000
        _, tri = sample_surface(unit_square(), n, seed=3, return_index=True)
        count = int(np.sum(tri == 0))
        assert abs(count - n / 2) < 3 * math.sqrt(n * 0.25)

    def test_single_point_on_surface(self):
        p = sample_surface(unit_square(), 1, seed=0)
        assert p.shape == (1, 3) and p[0, 2] == 0.0 and 0 <= p[0, 0] <= 1 and 0 <= p[0, 1] <= 1

    def test_deterministic(self):
        m = make_primitive_scene(MARKER)
        assert np.array_equal(sample_surface(m, 100, 5), sample_surface(m, 100, 5))

    def test_points_lie_inside_their_triangle(self):
        m = make_primitive_scene({"kind": "sphere", "dimensions": [1.0], "subdivisions": 1})
        p, tri = sample_surface(m, 500, seed=1, return_index=True)
        a, b, c = (m.vertices[m.triangles[tri, i]] for i in range(3))
        # barycentric coordinates by least squares in the triangle's plane
        for k in range(0, 500, 50):
            mat = np.stack([b[k] - a[k], c[k] - a[k]], axis=1)
            w, *_ = np.linalg.lstsq(mat, p[k] - a[k], rcond=None)
            assert w.min() >= -1e-9 and w.sum() <= 1 + 1e-9

    def test_empty(self):
        with pytest.raises(EmptyMesh):
            sample_surface(TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]]), 10)
        with pytest.raises(ValueError):
            sample_surface(unit_square(), 0)


class TestAlignment:
    def test_grid_size(self):
        inits = alignment_initializations()
        assert len(inits) == 120
        assert len({(round(t.scale, 9), tuple(np.round(t.rotation, 9).ravel())) for t in inits}) == 120
        assert ALIGN_SCALES[0] == pytest.approx(0.6) and ALIGN_SCALES[-1] == pytest.approx(1.4)
        yaws = sorted({round(math.degrees(math.atan2(t.rotation[0, 2], t.rotation[0, 0])) % 360, 6)
                       for t in inits})
        assert yaws == [30.0 * i for i in range(12)]

    def test_unit_box(self):
        m = make_primitive_scene({"kind": "box", "dimensions": [4.0, 2.0, 1.0]})
        v = unit_box_normalization(m).apply(m.vertices)
        assert np.allclose(v.max(axis=0) + v.min(axis=0), 0.0)
        assert (v.max(axis=0) - v.min(axis=0)).max() == pytest.approx(1.0)

    def test_self_alignment(self):
        m = make_primitive_scene(MARKER, seed=1)
        r = align_meshes(m, m, n_points=5000)
        assert r.n_initializations == 120
        assert r.inlier_ratio == 1.0
        assert rotation_error_deg(r.transform.rotation, np.eye(3)) < 0.5

    def test_recovers_quarter_turn_and_scale(self):
        gt = make_primitive_scene(MARKER, seed=2)
        planted = SimilarityTransform(0.8, rot_y(90.0), np.array([0.3, -0.2, 0.1]))
        pred = apply_similarity(gt, planted.inverse())
        r = align_meshes(pred, gt, n_points=8000)
        assert rotation_error_deg(r.transform.rotation, planted.rotation) < 1.0
        assert abs(r.transform.scale / planted.scale - 1) < 0.01


class TestFScore:
    def test_default_threshold(self):
        assert FSCORE_THRESHOLD == 0.05

    def test_self_comparison(self):
        m = make_primitive_scene(MARKER)
        v = unit_box_normalization(m).apply(m.vertices)
        assert fscore(m.with_vertices(v), m.with_vertices(v)) == 100.0

    def test_displaced_thin_plate(self):
        plate = TriangleMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])
        moved = plate.with_vertices(plate.vertices + [0, 0, 2 * FSCORE_THRESHOLD])
        assert fscore(moved, plate, n_points=5000) == 0.0

    @given(st.integers(0, 2**31), st.integers(1, 20), st.integers(1, 20))
    def test_brute_force_oracle(self, seed, n, m):
        rng = np.random.default_rng(seed)
        p = rng.random((n, 3)) * 0.2
        g = rng.random((m, 3)) * 0.2
        d = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))
        prec = float(np.mean(d.min(axis=1) < 0.05))
        rec = float(np.mean(d.min(axis=0) < 0.05))
        f = 0.0 if prec + rec == 0 else 200.0 * (prec * rec) / (prec + rec)
        got = fscore_points(p, g)
        assert got.precision == prec and got.recall == rec and got.fscore == f

    @given(st.integers(0, 2**31))
    def test_swap_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        p, g = rng.random((15, 3)) * 0.3, rng.random((12, 3)) * 0.3
        a, b = fscore_points(p, g), fscore_points(g, p)
        assert a.precision == b.recall and a.recall == b.precision and a.fscore == b.fscore


class TestPsnr:
    def test_identical_capped(self):
        a = np.random.default_rng(0).random((4, 4, 3))
        assert psnr(a, a) == 99.0

    def test_uniform_offset(self):
        a = np.full((8, 8, 3), 0.3)
        assert psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_double_loop_oracle(self, rng):
        a, b = rng.random((7, 5, 3)), rng.random((7, 5, 3))
        total = 0.0
        for i in range(7):
            for j in range(5):
                for c in range(3):
                    total += (a[i, j, c] - b[i, j, c]) ** 2
        assert psnr(a, b) == pytest.approx(10 * math.log10(1 / (total / 105)), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


class TestViewsProtocol:
    def test_viewpoints_ring(self):
        m = make_primitive_scene(MARKER)
        poses = eval_viewpoints(m)
        assert len(poses) == 24
        az = [SphericalPose.from_pose(p, target=tuple((m.vertices.min(0) + m.vertices.max(0)) / 2)).azimuth
              for p in poses]
        assert np.allclose(az, np.arange(24) * 15.0, atol=1e-7)
        assert all(np.array_equal(a.matrix(), b.matrix()) for a, b in zip(poses, eval_viewpoints(m)))

    def test_identical_meshes_are_capped(self):
        m = make_primitive_scene(MARKER)
        rep = eval_views_protocol(m, m, k=CameraIntrinsics.from_fov(40.0, 32, 32))
        assert len(rep.psnrs) == 24 and all(p == 99.0 for p in rep.psnrs)
        assert rep.azimuths == sorted(rep.azimuths)

    def test_empty_mesh(self):
        m = make_primitive_scene(MARKER)
        with pytest.raises(EmptyMesh):
            eval_views_protocol(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)), m)
