import numpy as np
import pytest
from hypothesis import given, strategies as st

from semgrid.core import (
    CameraIntrinsics,
    InvalidDistribution,
    KernelParams,
    Pose,
    neg_log,
    normalize,
)


class TestNormalize:
    def test_symmetric(self):
        np.testing.assert_allclose(normalize([2, 2]), [0.5, 0.5])

    def test_already_normalized(self):
        np.testing.assert_allclose(normalize([1, 0, 0]), [1, 0, 0])

    def test_hand_computed(self):
        # 0.36 / 0.52 and 0.16 / 0.52, computed independently by hand
        out = normalize([0.36, 0.16])
        np.testing.assert_allclose(out, [0.36 / 0.52, 0.16 / 0.52], atol=1e-12)
        assert abs(out.sum() - 1.0) < 1e-6

    def test_all_zero_rejected(self):
        with pytest.raises(InvalidDistribution):
            normalize([0.0, 0.0])

    def test_negative_rejected(self):
        with pytest.raises(InvalidDistribution):
            normalize([0.5, -0.1])

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidDistribution):
            normalize([np.nan, 1.0])

    @given(
        st.lists(st.floats(min_value=1e-3, max_value=1e3), min_size=1, max_size=8),
        st.floats(min_value=1e-6, max_value=1e6),
    )
    def test_idempotent_and_scale_invariant(self, raw, scale):
        v = np.array(raw)
        once = normalize(v)
        np.testing.assert_allclose(normalize(once), once, atol=1e-9)
        np.testing.assert_allclose(normalize(scale * v), once, atol=1e-9)


class TestNegLog:
    def test_single_label(self):
        np.testing.assert_allclose(neg_log(np.array([1.0])), [0.0])

    def test_uniform_two(self):
        np.testing.assert_allclose(neg_log(np.array([0.5, 0.5])), [np.log(2)] * 2)

    def test_zero_clamped(self):
        out = neg_log(np.array([1.0, 0.0]), epsilon=1e-8)
        np.testing.assert_allclose(out, [0.0, -np.log(1e-8)])
        assert out[1] == pytest.approx(18.420680743952367)

    def test_round_trip(self):
        # neg_log . exp . negate is the identity on cost vectors whose induced
        # distribution stays above the clamp
        costs = np.array([0.3, 1.7, 0.9])
        dist = np.exp(-costs)
        np.testing.assert_allclose(neg_log(dist / dist.sum()) - np.log(dist.sum()), costs, atol=1e-6)


class TestPose:
    def test_identity_transform(self):
        p = Pose.identity()
        pts = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(p.transform(pts), pts)

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 1.1, np.zeros(3))

    def test_rejects_reflection(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Pose(r, np.zeros(3))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3), np.array([np.inf, 0, 0]))

    def test_rotation_translation(self):
        # 90 degrees about z, then shift
        r = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        p = Pose(r, np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(p.transform(np.array([[1.0, 0, 0]])), [[1.0, 1.0, 0.0]], atol=1e-12)


class TestCameraIntrinsics:
    def test_round_trip(self):
        cam = CameraIntrinsics(fx=100, fy=110, cx=64, cy=48, baseline=0.5, width=128, height=96)
        pts = cam.back_project([10.0, 70.0], [20.0, 90.0], [2.0, 5.0])
        u, v, z = cam.project(pts)
        np.testing.assert_allclose(u, [10.0, 70.0], atol=1e-9)
        np.testing.assert_allclose(v, [20.0, 90.0], atol=1e-9)
        np.testing.assert_allclose(z, [2.0, 5.0], atol=1e-9)

    def test_invalid(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, baseline=0.5, width=10, height=10)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=20, cy=0, baseline=0.5, width=10, height=10)


class TestKernelParams:
    def test_defaults_valid(self):
        KernelParams()

    def test_rejects_zero_bandwidth(self):
        with pytest.raises(ValueError):
            KernelParams(theta_alpha=0.0)

    def test_rejects_all_zero_weights(self):
        with pytest.raises(ValueError):
            KernelParams(w1=0.0, w2=0.0)
