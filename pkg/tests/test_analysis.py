import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiresketch.data import generate_feature_cloud
from hiresketch.errors import ContractError
from hiresketch.harness.analysis import (
    class_means,
    distance_ratio,
    distance_report,
    pca_project,
    pos_neg_distances,
)


def eigh_reconstruction_error(x, k):
    xc = x - x.mean(axis=0)
    vals, vecs = np.linalg.eigh(xc.T @ xc)
    top = vecs[:, np.argsort(vals)[::-1][:k]]
    return float(np.sum((xc - xc @ top @ top.T) ** 2))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_pca_reconstruction_matches_eigensolver(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(40, 6)) @ np.diag([5, 3, 1, 0.5, 0.2, 0.1])
    coords = pca_project(x)
    xc = x - x.mean(axis=0)
    # coordinates are projections on orthonormal axes: recover the axes by least squares
    axes, *_ = np.linalg.lstsq(coords, xc, rcond=None)
    err = float(np.sum((xc - coords @ axes) ** 2))
    assert abs(err - eigh_reconstruction_error(x, 2)) <= 1e-8 * max(1.0, err)


def test_pca_on_centred_2d_points_preserves_distances():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(25, 2))
    x -= x.mean(axis=0)
    y = pca_project(x)
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dy = np.linalg.norm(y[:, None] - y[None], axis=-1)
    np.testing.assert_allclose(dx, dy, atol=1e-12)


def test_pca_rank_one_second_axis_vanishes():
    t = np.linspace(-2, 3, 30)
    x = np.outer(t, [1.0, -2.0, 0.5]) + 7.0
    y = pca_project(x)
    assert np.max(np.abs(y[:, 1])) <= 1e-9


def test_pca_sign_convention_is_deterministic():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 4))
    np.testing.assert_array_equal(pca_project(x), pca_project(x.copy()))
    # flipping the data flips nothing: the largest loading stays positive
    np.testing.assert_allclose(np.abs(pca_project(-x)), np.abs(pca_project(x)), atol=1e-12)


def test_pca_needs_three_points():
    with pytest.raises(ContractError):
        pca_project(np.zeros((2, 3)))


def test_centers_at_means_with_zero_spread_give_zero_positive_distance():
    cloud = generate_feature_cloud(5, 4, 0.0, seed=3)
    d_pos, d_neg = pos_neg_distances(cloud.points, cloud.labels, cloud.means)
    np.testing.assert_array_equal(d_pos, 0.0)
    assert np.all(d_neg > 0)


def test_negative_rules():
    x = np.array([[0.0, 0.0]])
    centers = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    assert pos_neg_distances(x, [0], centers, "nearest")[1][0] == 1.0
    assert pos_neg_distances(x, [0], centers, "mean")[1][0] == 5.0
    assert pos_neg_distances(x, [0], centers, [2])[1][0] == 9.0
    with pytest.raises(ContractError):
        pos_neg_distances(x, [0], centers, "farthest")


def test_distance_report_rows_and_summary():
    cloud = generate_feature_cloud(6, 3, 1.0, seed=0, per_class=10)
    centers = class_means(cloud.points, cloud.labels, 6)
    rep = distance_report(cloud.points, cloud.labels, centers, n_show=4)
    assert [r[1] for r in rep.rows] == [0, 1, 2, 3]
    d_pos, d_neg = pos_neg_distances(cloud.points, cloud.labels, centers)
    assert rep.mean_d_pos == pytest.approx(d_pos.mean()) and rep.std_d_neg == pytest.approx(d_neg.std())
    assert rep.ratio == pytest.approx(distance_ratio(cloud.points, cloud.labels, centers))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "sample,label,d_pos,d_neg" and len(lines) == 5


def test_distance_report_clips_n_show(caplog):
    cloud = generate_feature_cloud(3, 2, 1.0, seed=0, per_class=4)
    with caplog.at_level(logging.WARNING):
        rep = distance_report(cloud.points, cloud.labels, cloud.means, n_show=20)
    assert len(rep.rows) == 3 and "clipping" in caplog.text
