import csv
import json
import math

import jsonschema
import numpy as np
import pytest

from ftl.data import TripleSet, make_labeled_glyphs, make_triples
from ftl.errors import DomainError, ParameterError
from ftl.evaluation import (CURVE_COLUMNS, EvalReport, check_grid, config_hash, cosine_similarity, emit_report,
                            evaluate_classifier, load_report_schema, plain_reconstruction_error,
                            stability_sweep, transformed_reconstruction_error)
from ftl.losses import l1_loss
from ftl.network import ClassifierHead, EncoderDecoder, HeadConfig, preset_config
from ftl.tensor import as_tensor
from ftl.transform import (apply, build_batch_transform, build_block_transform, planar_family, random_params,
                           rotation_family)


@pytest.fixture(scope="module")
def desk():
    return EncoderDecoder(preset_config("desk-mlp"), seed=1)


@pytest.fixture(scope="module")
def glyphs():
    return make_labeled_glyphs(3, 40)


class LinearToy:
    """Encoder and decoder are reshapes, so the feature transform is the warp."""

    def __init__(self, family):
        self.family = family

    def forward_transformed(self, x, params):
        x = as_tensor(x)
        return apply(build_batch_transform(self.family, list(params)), x.reshape(x.shape[0], -1)).reshape(*x.shape)


# -- stability sweeps -----------------------------------------------------------

@pytest.mark.parametrize("metric,expected", [("cosine", 1.0), ("l2", 0.0)])
def test_identity_grid_point_is_self_similar(desk, glyphs, metric, expected):
    imgs = glyphs[0][:5]
    curve = stability_sweep(desk, desk.family, imgs, "rotation", [0.0, 1.0, 2.0], metric,
                            frames=np.linspace(0, 3, 5))
    assert curve.same_mean[0] == expected
    assert curve.same_std[0] == 0.0
    assert curve.same_count == 5 and curve.diff_count == 20
    assert curve.train_range == (0.0, 2 * math.pi)


def test_scale_sweep_identity_point(desk, glyphs):
    curve = stability_sweep(desk, desk.family, glyphs[0][:3], "scale_x", [0.8, 1.0, 1.2])
    assert curve.same_mean[1] == 1.0
    assert curve.train_range == (0.7, 1.3)


def test_sweep_argument_errors(desk, glyphs):
    imgs = glyphs[0][:3]
    with pytest.raises(ParameterError):
        stability_sweep(desk, desk.family, imgs[:1], "rotation", [0.0])
    with pytest.raises(ParameterError):
        stability_sweep(desk, desk.family, imgs, "rotation", [0.0, 0.0])
    with pytest.raises(ParameterError):
        stability_sweep(desk, desk.family, imgs, "rotation", [0.0], metric="dot")


def test_check_grid():
    fam = planar_family(1)
    check_grid(fam, "rotation", [-10.0, 0.0, 20.0])
    check_grid(fam, "scale_x", [0.7, 1.3])
    with pytest.raises(DomainError, match="1.5"):
        check_grid(fam, "scale_x", [1.0, 1.5])
    with pytest.raises(DomainError):
        check_grid(fam, "rotation", [math.nan])


def test_cosine_self_pair_is_exact():
    rng = np.random.default_rng(0)
    for _ in range(100):
        v = rng.normal(size=17) * rng.uniform(0.01, 100)
        assert cosine_similarity(v, v) == 1.0


# -- reconstruction error ------------------------------------------------------------

def test_perfect_linear_toy_has_zero_error():
    fam = rotation_family(1)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 1, 2))
    params = [random_params(fam, rng) for _ in range(6)]
    x_t = np.stack([apply(build_block_transform(fam, p), xi.reshape(1, 2)).data.reshape(1, 2)
                    for p, xi in zip(params, x)])
    ts = TripleSet(x, x_t, params, np.zeros(6), -np.ones(6, dtype=np.int64))
    result = transformed_reconstruction_error(LinearToy(fam), ts, batch=4)
    assert result["mean"] == 0.0
    assert len(result["rows"]) == 6


def test_identity_baseline_column(desk):
    ts = make_triples(5, 12, desk.family)
    result = transformed_reconstruction_error(desk, ts, batch=5)
    for row, x, x_t in zip(result["rows"], ts.x, ts.x_t):
        assert abs(row["baseline"] - np.abs(x - x_t).mean()) <= 1e-12
    manual = np.mean([l1_loss(desk.forward_transformed(ts.x[i : i + 1], [ts.params[i]]), ts.x_t[i : i + 1]).item()
                      for i in range(12)])
    assert abs(result["mean"] - manual) <= 1e-12


def test_plain_error_matches_identity_transform(desk):
    ts = make_triples(6, 8, desk.family)
    ident = TripleSet(ts.x, ts.x, [desk.family.identity_params()] * 8, ts.frame, ts.label)
    assert transformed_reconstruction_error(desk, ident)["mean"] == plain_reconstruction_error(desk, ts.x)


# -- classifier --------------------------------------------------------------------

def test_always_zero_head(desk, glyphs):
    imgs, labels = glyphs
    head = ClassifierHead(HeadConfig(in_dim=desk.family.signature_dim, hidden=4), zero=True)
    head.params["fc2.bias"].data[0] = 1.0
    m = evaluate_classifier(desk, head, imgs, labels, classes=10)
    assert m["accuracy"] == np.mean(labels == 0)
    assert m["accuracy"] + m["error"] == 1.0
    conf = np.array(m["confusion"])
    np.testing.assert_array_equal(conf.sum(axis=1), np.bincount(labels, minlength=10))
    assert conf[:, 1:].sum() == 0


def test_code_features_head(desk, glyphs):
    imgs, labels = glyphs
    head = ClassifierHead(HeadConfig(in_dim=desk.family.feature_dim, features="code"), seed=2)
    m = evaluate_classifier(desk, head, imgs, labels, classes=10, features="code")
    assert m["total"] == len(labels) and 0 <= m["correct"] <= m["total"]
    assert np.array(m["confusion"]).sum() == len(labels)


# -- reports --------------------------------------------------------------------------

def make_report(desk, glyphs, grid=(0.0, 0.5, 1.0, 2.0)):
    report = EvalReport(run_id="eval-x-0", seed=0, preset="desk-mlp", config_hash=config_hash({"a": 1}))
    report.add_metric("loss", 0.25)
    report.curves.append(stability_sweep(desk, desk.family, glyphs[0][:4], "rotation", list(grid)))
    return report


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 16


def test_empty_report_is_valid(tmp_path):
    report = EvalReport(run_id="r", seed=1, preset="p", config_hash=config_hash({}))
    emit_report(report, tmp_path)
    doc = json.loads((tmp_path / "report.json").read_text())
    jsonschema.validate(doc, load_report_schema())
    assert doc["metrics"] == {} and doc["curves"] == []


def test_report_round_trip_and_schema(tmp_path, desk, glyphs):
    report = make_report(desk, glyphs)
    emit_report(report, tmp_path)
    doc = json.loads((tmp_path / "report.json").read_text())
    jsonschema.validate(doc, load_report_schema())
    again = EvalReport.from_json(doc)
    assert again.to_json() == report.to_json()
    assert all(m["config_hash"] == report.config_hash for m in doc["metrics"].values())


def test_schema_rejects_untagged_metric():
    doc = EvalReport(run_id="r", seed=1, preset="p", config_hash=config_hash({})).to_json()
    doc["metrics"]["loss"] = {"value": 1.0}
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(doc, load_report_schema())


def test_curve_csv_layout(tmp_path, desk, glyphs):
    report = make_report(desk, glyphs, grid=np.linspace(0, 6, 7))
    emit_report(report, tmp_path)
    with open(tmp_path / "curve_rotation_cosine.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CURVE_COLUMNS
    assert len(rows) - 1 == 7
    assert [float(r[0]) for r in rows[1:]] == list(np.linspace(0, 6, 7))
    assert "curve_rotation_cosine.csv" in report.artifacts


def test_reports_are_reproducible(tmp_path, desk, glyphs):
    emit_report(make_report(desk, glyphs), tmp_path / "a")
    emit_report(make_report(desk, glyphs), tmp_path / "b")
    for name in ("report.json", "curve_rotation_cosine.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
