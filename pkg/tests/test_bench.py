import hashlib
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from ldrsplit import codec, nn
from ldrsplit.augment import AugmentSpec
from ldrsplit.bench import (SWEEP_COLUMNS, ChannelSpec, RateAccuracyPoint, emit_plot, eval_distortion_robustness,
                            fit_model_profile, latent_std_report, local_predictions, matched_accuracy_gap,
                            parse_grid, points_csv, read_points, scale_for_entropy, split_inference,
                            svg_lines, sweep_rate_accuracy, write_points, write_std_report)
from ldrsplit.data import DatasetHandle, make_gaussian_mixture
from ldrsplit.errors import ConfigError
from ldrsplit.nn import LayerSpec, Model
from ldrsplit.numerics import make_rng
from ldrsplit.trainer import TrainConfig, pretrain_ce

SVG = "{http://www.w3.org/2000/svg}"


@pytest.fixture(scope="module")
def setup():
    ds = make_gaussian_mixture(3, 32, 200, 3.0, 0, n_test_per_class=100)
    model, _ = pretrain_ce(nn.build_model(32, 8, 3, seed=0), ds.train, ds.test, TrainConfig(ce_epochs=10))
    return ds, model


def test_unlimited_budget_never_drops(setup):
    ds, model = setup
    res = split_inference(model, fit_model_profile(model, ds, 0.2), ChannelSpec(), ds.x_test)
    assert res.drops == 0 and np.all(res.predictions >= 0)
    assert np.all(res.bits >= 8 * codec.header_size(8))


def test_budget_below_header_drops_everything(setup):
    ds, model = setup
    prof = fit_model_profile(model, ds, 0.2)
    res = split_inference(model, prof, ChannelSpec(8 * codec.header_size(8) - 1), ds.x_test)
    assert res.drops == ds.x_test.shape[1] and np.all(res.predictions == -1)
    report = split_inference(model, prof, ChannelSpec(8, "report_only"), ds.x_test)
    assert report.drops == ds.x_test.shape[1] and np.all(report.predictions >= 0)


def test_partial_budget_drops_only_long_streams(setup):
    ds, model = setup
    prof = fit_model_profile(model, ds, 0.2)
    full = split_inference(model, prof, ChannelSpec(), ds.x_test)
    budget = int(np.median(full.bits))
    res = split_inference(model, prof, ChannelSpec(budget), ds.x_test)
    over = full.bits > budget
    assert res.drops == over.sum()
    np.testing.assert_array_equal(res.predictions[~over], full.predictions[~over])


def test_channel_is_transparent_on_256_samples(setup):
    ds, model = setup
    x = make_rng(11).standard_normal((32, 256)) * 2
    for s in (0.05, 0.5, 2.0):
        prof = fit_model_profile(model, ds, s)
        res = split_inference(model, prof, ChannelSpec(), x)
        assert res.drops == 0
        np.testing.assert_array_equal(res.predictions, local_predictions(model, prof, x))


def test_channel_spec_validation():
    with pytest.raises(ConfigError):
        ChannelSpec(0)
    with pytest.raises(ConfigError):
        ChannelSpec(None, "drop")


def test_parse_grid():
    assert parse_grid("0.1:0.5:0.1") == [0.1, 0.2, 0.3, 0.4, 0.5]
    assert len(parse_grid("0.1:4.0:0.1")) == 40
    assert parse_grid("0.3") == [0.3] and parse_grid("1,2.5") == [1.0, 2.5]
    with pytest.raises(ConfigError):
        parse_grid("1:0:0.1")


def test_singleton_grid_one_row_per_model(setup):
    ds, model = setup
    pts = sweep_rate_accuracy({"A": model, "B": model}, ds, [0.5])
    assert [(p.model, p.s) for p in pts] == [("A", 0.5), ("B", 0.5)]


def test_huge_scale_collapses_to_one_class(setup):
    ds, model = setup
    (pt,) = sweep_rate_accuracy({"CE-T": model}, ds, [1e6])
    majority = np.bincount(ds.y_test).max() / ds.y_test.size
    assert pt.total_entropy_bits == 0.0
    assert pt.accuracy <= majority + 1e-12
    assert abs(pt.accuracy - majority) < 1e-12  # balanced classes: every constant guess scores the majority rate


def test_sweep_entropy_monotone_and_csv_round_trip(setup, tmp_path):
    ds, model = setup
    pts = sweep_rate_accuracy({"CE-T": model}, ds, parse_grid("0.1:2.0:0.1"))
    ent = [p.total_entropy_bits for p in pts]
    assert all(b <= a for a, b in zip(ent, ent[1:]))
    assert all(0 <= p.accuracy <= 1 and p.mean_bits_per_sample >= 0 for p in pts)
    write_points(pts, tmp_path / "sweep.csv")
    text = (tmp_path / "sweep.csv").read_text()
    assert text.splitlines()[0] == ",".join(SWEEP_COLUMNS)
    assert text.splitlines()[0] == "model,dataset,d_y,s,total_entropy_bits,mean_bits_per_sample,accuracy,drops"
    assert read_points(tmp_path / "sweep.csv") == pts
    assert points_csv(read_points(tmp_path / "sweep.csv")) == text


def test_read_points_rejects_other_schema(tmp_path):
    (tmp_path / "x.csv").write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        read_points(tmp_path / "x.csv")


def test_identity_distortion_matches_plain_sweep(setup):
    ds, model = setup
    grid = [0.2, 1.0]
    plain = sweep_rate_accuracy({"CE-T": model}, ds, grid)
    same = eval_distortion_robustness({"CE-T": model}, ds, AugmentSpec(kinds=("identity",)), grid)
    assert plain == same


def test_distortion_is_seeded(setup):
    ds, model = setup
    spec = AugmentSpec(kinds=("sign_flip_pair",), seed=3)
    a = eval_distortion_robustness({"CE-T": model}, ds, spec, [0.5])
    b = eval_distortion_robustness({"CE-T": model}, ds, spec, [0.5])
    assert a == b


def test_scale_for_entropy_hits_target(setup):
    ds, model = setup
    y = nn.encode(model, ds.x_test)
    prof = fit_model_profile(model, ds)
    target = 0.2 * codec.total_entropy(y, prof.with_scale(0.1)).total_bits
    s = scale_for_entropy(y, prof, target)
    assert codec.total_entropy(y, prof.with_scale(s)).total_bits <= target
    assert codec.total_entropy(y, prof.with_scale(s * 0.999)).total_bits > target


def point(tag, h, acc):
    return RateAccuracyPoint(tag, "t", 4, 1.0, h, 0.0, acc)


def test_matched_accuracy_gap_interpolates():
    pts = [point("a", 0, 0.5), point("a", 10, 1.0), point("b", 2, 0.4), point("b", 6, 0.6)]
    # on [2, 6], a = 0.6 .. 0.8 and b = 0.4 .. 0.6, so the gap is 0.2 everywhere
    assert matched_accuracy_gap(pts, "a", "b") == pytest.approx(0.2, abs=1e-12)
    assert np.isnan(matched_accuracy_gap(pts + [point("c", 20, 1), point("c", 30, 1)], "a", "c"))


def test_svg_empty_and_two_points(tmp_path):
    emit_plot([], tmp_path / "e.svg")
    root = ET.parse(tmp_path / "e.svg").getroot()
    assert root.tag == SVG + "svg"
    assert root.findall(SVG + "polyline") == [] and len(root.findall(SVG + "line")) == 2
    emit_plot([point("CE-T", 1, 0.5), point("CE-T", 3, 0.9)], tmp_path / "t.svg")
    polys = ET.parse(tmp_path / "t.svg").getroot().findall(SVG + "polyline")
    assert len(polys) == 1 and len(polys[0].get("points").split()) == 2


def test_svg_is_byte_stable(tmp_path):
    pts = [point("LDR-FT", 2, 0.7), point("CE-T", 1, 0.5), point("CE-T", 3, 0.9)]
    emit_plot(pts, tmp_path / "a.svg")
    emit_plot(list(reversed(pts)), tmp_path / "b.svg")
    ha = hashlib.sha256((tmp_path / "a.svg").read_bytes()).hexdigest()
    assert ha == hashlib.sha256((tmp_path / "b.svg").read_bytes()).hexdigest()
    assert "&lt;" in svg_lines({"<x>": [(0, 0), (1, 1)]}, "x", "y")


def std_dataset(x):
    return DatasetHandle("u", x.shape[0], 1, x, np.zeros(x.shape[1], int), x, np.zeros(x.shape[1], int))


def test_std_report_cases(setup, tmp_path):
    _, model = setup
    zero = model.copy()
    for k in zero.params:
        zero.params[k] = np.zeros_like(zero.params[k])
    x = make_rng(0).standard_normal((32, 4000))
    rows = latent_std_report(zero, std_dataset(x))
    assert len(rows) == 8 and all(s == 0.0 for _, _, s in rows)

    d = 6
    ident = Model([LayerSpec(d, d, "identity")], [LayerSpec(d, 1, "identity")], None, False,
                  {"enc.0.weight": np.eye(d), "enc.0.bias": np.zeros(d),
                   "dec.0.weight": np.zeros((1, d)), "dec.0.bias": np.zeros(1)})
    rows = latent_std_report(ident, std_dataset(x[:d]))
    stds = [s for _, _, s in rows]
    assert len(rows) == d and stds == sorted(stds, reverse=True)
    # std of a sample std from n=4000 unit normals is about 1/sqrt(2n) = 0.011
    assert max(abs(s - 1) for s in stds) < 0.05
    write_std_report(rows, tmp_path / "std.csv")
    lines = (tmp_path / "std.csv").read_text().splitlines()
    assert lines[0] == "rank,entry,std" and len(lines) == d + 1
