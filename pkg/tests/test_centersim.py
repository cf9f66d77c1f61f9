import json

import numpy as np
import pytest

from hiresketch.data import generate_feature_cloud
from hiresketch.errors import ContractError
from hiresketch.harness.analysis import pos_neg_distances
from hiresketch.harness.centersim import (
    CenterSimConfig,
    compression_contrast,
    contrast_cloud,
    embed,
    margin_trend,
    simulate,
)


@pytest.fixture(scope="module")
def cloud():
    return generate_feature_cloud(5, 6, 1.0, seed=2, per_class=20)


@pytest.mark.parametrize("kw", [dict(loss="center"), dict(init="zeros"), dict(steps=0),
                                dict(lr=0.0), dict(head="frozen"), dict(lam=0.0)])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ContractError):
        CenterSimConfig(**kw)


def test_default_margins_follow_loss():
    assert CenterSimConfig(loss="tcl").margin == 5.0
    assert CenterSimConfig().margin == 4.5


def test_same_seed_same_result(cloud):
    cfg = CenterSimConfig(steps=20, batch_size=25)
    a, b = simulate(cloud, cfg), simulate(cloud, cfg)
    assert a.history == b.history
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.centers, b.centers)


def test_history_has_one_record_per_step(cloud, tmp_path):
    res = simulate(cloud, CenterSimConfig(steps=7, batch_size=30))
    assert [h["step"] for h in res.history] == list(range(7))
    res.write_history(tmp_path / "h.jsonl")
    rows = [json.loads(x) for x in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert rows == res.history
    assert res.ratio == pytest.approx(res.mean_d_pos / res.mean_d_neg)
    assert set(res.summary()) == {"loss", "margin", "mean_d_pos", "mean_d_neg", "ratio"}


def test_identity_init_starts_at_raw_points(cloud):
    np.testing.assert_array_equal(embed(cloud, np.eye(cloud.dim)), cloud.points)


@pytest.mark.parametrize("head", ["trained", "fixed", "none"])
@pytest.mark.parametrize("init", ["identity", "random"])
def test_all_modes_finish_with_finite_distances(cloud, head, init):
    res = simulate(cloud, CenterSimConfig(steps=15, batch_size=20, head=head, init=init))
    assert np.isfinite(res.mean_d_pos) and np.isfinite(res.mean_d_neg)
    assert res.weights.shape == (cloud.dim, cloud.dim)
    assert res.centers.shape == (cloud.n_classes, cloud.dim)


def test_metric_only_run_tightens_classes(cloud):
    # about two samples per class per batch keeps eta * m * n_k below one,
    # where the center rule cannot overshoot
    start_pos, start_neg = pos_neg_distances(cloud.points, cloud.labels, cloud.means, "nearest")
    res = simulate(cloud, CenterSimConfig(steps=300, batch_size=10, head="none", lr=0.005))
    assert np.all(np.isfinite(res.weights))
    assert res.ratio < start_pos.mean() / start_neg.mean()


def test_contrast_cloud_shape():
    c = contrast_cloud()
    assert c.n_classes == 20 and c.dim == 32
    np.testing.assert_array_equal(c.means[:, 8:], 0.0)


def test_short_contrast_and_trend_run(cloud):
    base = CenterSimConfig(steps=30, batch_size=25)
    out = compression_contrast(cloud, base)
    assert out["tcl"].config["margin"] == 5.0 and out["ctcl"].config["margin"] == 4.5
    trend = margin_trend(cloud, margins=(5.0, 50.0), base=CenterSimConfig(steps=30, batch_size=25, head="none"))
    assert [r.config["margin"] for r in trend] == [5.0, 50.0]
    assert all(r.config["loss"] == "tcl" for r in trend)
