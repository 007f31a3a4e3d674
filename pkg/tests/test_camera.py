import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitgs.camera import (
    Camera,
    look_at,
    project_batch,
    project_batch_vjp,
    project_covariance,
    project_point,
    projection_jacobian,
)
from splitgs.errors import InvalidDepthError, InvalidParameterError
from splitgs.gaussian import assemble_covariance


def cam64(**kw):
    return Camera(100.0, 100.0, 32.0, 32.0, 64, 64, **kw)


def test_project_point_examples():
    pr = project_point(cam64(), [0, 0, 5])
    assert np.allclose(pr.screen, [32, 32]) and pr.depth == 5 and pr.in_front
    cam = Camera(100.0, 100.0, 0.0, 0.0, 64, 64)
    assert project_point(cam, [1, 0, 2]).screen[0] == pytest.approx(50)
    assert not project_point(cam, [0, 0, cam.near / 2]).in_front


def test_projection_jacobian_examples():
    J = projection_jacobian(cam64(), [0, 0, 2])
    assert np.allclose(J, [[50, 0, 0], [0, 50, 0]])
    J4 = projection_jacobian(cam64(), [0, 0, 4])
    assert np.allclose(np.diag(J4[:, :2]), np.diag(J[:, :2]) / 2)
    with pytest.raises(InvalidDepthError):
        projection_jacobian(cam64(), [0, 0, 0])


def test_projection_jacobian_matches_finite_difference():
    cam = cam64()
    p = np.array([0.3, -0.2, 2.5])
    J = projection_jacobian(cam, p)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (project_point(cam, p + e).screen - project_point(cam, p - e).screen) / (2 * h)
        assert np.allclose(J[:, k], fd, atol=1e-4)


def test_project_covariance_examples():
    cam = cam64()
    d = 4.0
    out = project_covariance(cam, [0, 0, d], np.eye(3), dilation=0.0)
    assert np.allclose(out, np.diag([(100 / d) ** 2] * 2))
    out3 = project_covariance(cam, [0, 0, d], np.eye(3), dilation=0.3)
    assert np.allclose(out3 - out, 0.3 * np.eye(2), atol=1e-12)


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3),
       st.lists(st.floats(0.05, 1.0), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > .1))
def test_project_covariance_symmetric_pd(p, s, q):
    cam = cam64()
    p = np.array(p) + [0, 0, 3]
    cov = assemble_covariance(np.array(q) / np.linalg.norm(q), s)
    out = project_covariance(cam, p, cov)
    assert np.allclose(out, out.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(out) > 0)


def test_in_plane_translation_invariance():
    cov = assemble_covariance([0.9, 0.1, 0.3, 0.2] / np.linalg.norm([0.9, 0.1, 0.3, 0.2]), [.3, .2, .1])
    p = np.array([0.2, 0.1, 3.0])
    shift = np.array([0.5, -0.3, 0.0])
    W = np.eye(4)
    W[:3, 3] = -shift
    a = project_covariance(cam64(), p, cov)
    b = project_covariance(cam64(world_to_camera=W), p + shift, cov)
    assert np.allclose(a, b, atol=1e-9)


def test_camera_validation():
    with pytest.raises(InvalidParameterError):
        Camera(0.0, 1.0, 0, 0, 4, 4)
    with pytest.raises(InvalidParameterError):
        Camera(1.0, 1.0, 0, 0, 4, 4, near=1.0, far=0.5)
    W = np.eye(4)
    W[0, 0] = 2
    with pytest.raises(InvalidParameterError):
        Camera(1.0, 1.0, 0, 0, 4, 4, W)


def test_look_at_points_forward_and_roundtrips():
    W = look_at([0, 0, -3], [0, 0, 0])
    cam = Camera(50, 50, 16, 16, 32, 32, W)
    pr = project_point(cam, [0, 0, 0])
    assert np.allclose(pr.screen, [16, 16]) and pr.depth == pytest.approx(3)
    assert np.allclose(cam.center, [0, 0, -3])
    again = Camera.from_dict(cam.to_dict())
    assert np.array_equal(again.world_to_camera, cam.world_to_camera)


def test_project_batch_vjp_finite_difference():
    rng = np.random.default_rng(0)
    cam = Camera(80, 90, 30, 28, 64, 64, look_at([0.3, -0.2, -3], [0, 0, 0]))
    n = 4
    means = rng.normal(scale=0.3, size=(n, 3))
    covs = np.stack([assemble_covariance(q / np.linalg.norm(q), rng.uniform(.1, .4, 3))
                     for q in rng.normal(size=(n, 4))])
    gs, gc, gd = rng.normal(size=(n, 2)), rng.normal(size=(n, 2, 2)), rng.normal(size=n)

    def f(m, c):
        p = project_batch(cam, m, c)
        return np.sum(gs * p["screen"]) + np.sum(gc * p["cov2d"]) + np.sum(gd * p["depth"])

    proj = project_batch(cam, means, covs)
    g_means, g_cov = project_batch_vjp(cam, proj, covs, gs, gc, gd)
    h = 1e-6
    for i in range(n):
        for k in range(3):
            mp, mm = means.copy(), means.copy()
            mp[i, k] += h
            mm[i, k] -= h
            assert g_means[i, k] == pytest.approx((f(mp, covs) - f(mm, covs)) / (2 * h), rel=1e-5)
        for a in range(3):
            for b in range(3):
                cp, cm = covs.copy(), covs.copy()
                cp[i, a, b] += h
                cm[i, a, b] -= h
                fd = (f(means, cp) - f(means, cm)) / (2 * h)
                assert g_cov[i, a, b] == pytest.approx(fd, rel=1e-5, abs=1e-7)
