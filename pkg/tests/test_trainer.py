from dataclasses import replace

import numpy as np
import pytest

from ldrsplit import nn
from ldrsplit.augment import AugmentSpec
from ldrsplit.data import make_gaussian_mixture
from ldrsplit.errors import ConfigError, MaskEmpty
from ldrsplit.ldr import LdrConfig, Partition, delta_r
from ldrsplit.numerics import make_rng
from ldrsplit.trainer import (TrainConfig, TrainReport, accuracy, ce_train, duphil_round, keep_first_half,
                              screen_latent_dims, three_step_train, truncate, truncate_and_finetune)

ZERO = dict(e1_enc=0, e1_dec=0, e2_enc=0, e2_dec=0, e3=0)


@pytest.fixture(scope="module")
def mixture():
    return make_gaussian_mixture(3, 32, 200, 3.0, 0, n_test_per_class=100)


@pytest.fixture(scope="module")
def trained(mixture):
    cfg = TrainConfig(seed=0)
    model, report = three_step_train(nn.build_model(32, 16, 3, seed=0), mixture.train, mixture.test, cfg)
    return model, report, cfg


def same_params(a, b):
    return set(a.params) == set(b.params) and all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def side_delta_r(model, x, y, k):
    z = nn.side_features(model, nn.encode(model, x))
    return delta_r(z, Partition(y, k), LdrConfig())


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_12=0.01, lr_3=0.01)
    with pytest.raises(ConfigError):
        TrainConfig(e3=-1)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    assert TrainConfig().total_epochs() == 60


def test_duphil_with_no_epochs_is_rejected_and_leaves_params_alone(mixture):
    model = nn.build_model(32, 8, 3, seed=1)
    before = model.copy()
    with pytest.raises(ConfigError):
        duphil_round(model, mixture.x_train, mixture.y_train, "ldr", TrainConfig(), 0, 0)
    assert same_params(model, before)


def test_encoder_phase_leaves_decoder_bit_identical(mixture):
    model = nn.build_model(32, 8, 3, seed=1)
    out = duphil_round(model, mixture.x_train, mixture.y_train, "ldr", TrainConfig(), 2, 0)
    for name in model.names("dec"):
        assert out.params[name].tobytes() == model.params[name].tobytes()
    assert not np.array_equal(out.params["enc.0.weight"], model.params["enc.0.weight"])
    assert out.frozen == model.frozen


def test_decoder_phase_leaves_encoder_bit_identical(mixture):
    model = nn.build_model(32, 8, 3, seed=1)
    out = duphil_round(model, mixture.x_train, mixture.y_train, "ldr", TrainConfig(), 0, 2)
    for name in model.names("enc") + model.names("side"):
        assert out.params[name].tobytes() == model.params[name].tobytes()


def test_duphil_round_raises_delta_r_on_two_class_toy():
    rng = make_rng(3)
    y = np.repeat([0, 1], 100)
    x = rng.standard_normal((2, 200)) * 0.5 + np.where(y == 0, -1.5, 1.5)[None, :] * np.array([[1.0], [0.3]])
    model = nn.build_model(2, 4, 2, seed=3)
    cfg = TrainConfig(batch_size=50)
    out = duphil_round(model, x, y, "ldr", cfg, 5, 5)
    assert side_delta_r(out, x, y, 2) > side_delta_r(model, x, y, 2) + 0.1


def test_report_curve_lengths(mixture):
    cfg = TrainConfig(e1_enc=2, e1_dec=3, e2_enc=1, e2_dec=2, e3=4)
    _, report = three_step_train(nn.build_model(32, 8, 3, seed=0), mixture.train, mixture.test, cfg)
    lengths = {p: len(report.curve(p)) for p in ("s1_enc", "s1_dec", "s2_enc", "s2_dec", "s3_e2e")}
    assert lengths == {"s1_enc": 2, "s1_dec": 3, "s2_enc": 1, "s2_dec": 2, "s3_e2e": 4}


def test_all_zero_schedule_is_identity(mixture):
    model = nn.build_model(32, 8, 3, seed=0)
    out, _ = three_step_train(model, mixture.train, mixture.test, TrainConfig(**ZERO))
    assert same_params(out, model)


def test_step3_only_equals_plain_ce(mixture):
    model = nn.build_model(32, 8, 3, seed=0)
    cfg = TrainConfig(**dict(ZERO, e3=3))
    out, report = three_step_train(model, mixture.train, mixture.test, cfg)
    direct = ce_train(model, mixture.train, 3, cfg.lr_3, cfg)
    assert same_params(out, direct)
    assert report.test_accuracy == accuracy(direct, *mixture.test)


def test_full_schedule_reaches_95_percent(trained, mixture):
    model, report, cfg = trained
    assert cfg.total_epochs() <= 60
    assert report.test_accuracy >= 0.95
    assert report.test_accuracy == accuracy(model, *mixture.test)


def test_step3_keeps_side_branch_frozen(mixture):
    model = nn.build_model(32, 8, 3, seed=0)
    out, _ = three_step_train(model, mixture.train, mixture.test, TrainConfig(**dict(ZERO, e3=2)))
    for name in model.names("side"):
        assert out.params[name].tobytes() == model.params[name].tobytes()


def test_step2_encoder_ignores_ground_truth_labels(mixture):
    model = nn.build_model(32, 8, 3, seed=0)
    cfg = TrainConfig(augment=AugmentSpec.for_vectors(seed=4))
    shuffled = make_rng(9).permutation(mixture.y_train)
    a = duphil_round(model, mixture.x_train, mixture.y_train, "ldr_ssl", cfg, 2, 0)
    b = duphil_round(model, mixture.x_train, shuffled, "ldr_ssl", cfg, 2, 0)
    assert same_params(a, b)


def test_same_seed_same_checksum(mixture):
    cfg = TrainConfig(e1_enc=1, e1_dec=1, e2_enc=1, e2_dec=1, e3=1, seed=5)
    runs = [three_step_train(nn.build_model(32, 8, 3, seed=5), mixture.train, mixture.test, cfg)[1]
            for _ in range(2)]
    assert runs[0].checksum == runs[1].checksum
    other = three_step_train(nn.build_model(32, 8, 3, seed=5), mixture.train, mixture.test,
                             replace(cfg, seed=6))[1]
    assert other.checksum != runs[0].checksum


def test_report_files(tmp_path, mixture):
    cfg = TrainConfig(**dict(ZERO, e3=2))
    _, report = three_step_train(nn.build_model(32, 8, 3, seed=0), mixture.train, mixture.test, cfg)
    report.write_csv(tmp_path / "r.csv")
    report.write_config_echo(tmp_path / "r.txt")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "epoch,phase,loss,accuracy" and len(lines) == 3
    echo = (tmp_path / "r.txt").read_text()
    assert "lr_3=0.005" in echo and f"model_sha256={report.checksum}" in echo


def test_screening_singleton(mixture):
    chosen, table = screen_latent_dims(mixture.train, mixture.test, TrainConfig(screening_epochs=1), dims=[64])
    assert chosen == 64 and [d for d, _ in table] == [64]


def test_screening_tie_goes_to_smallest():
    rng = make_rng(0)
    x = rng.standard_normal((6, 20))
    y = np.zeros(20, dtype=np.int64)
    chosen, table = screen_latent_dims((x, y), (x, y), TrainConfig(screening_epochs=0), dims=[12, 3, 7],
                                       n_classes=1)
    assert {acc for _, acc in table} == {1.0}
    assert chosen == 3


def test_screening_needs_candidates(mixture):
    with pytest.raises(ConfigError):
        screen_latent_dims(mixture.train, mixture.test, TrainConfig())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_screening_never_picks_undersized_width(seed):
    ds = make_gaussian_mixture(9, 32, 100, 3.0, seed, n_test_per_class=50, intrinsic_dim=8)
    chosen, _ = screen_latent_dims(ds.train, ds.test, TrainConfig(seed=seed), dims=[4, 8, 32])
    assert chosen in (8, 32)


def test_truncate_shapes(trained, mixture):
    model = trained[0]
    half = truncate(model, keep_first_half(16))
    assert nn.encode(half, mixture.x_test).shape == (8, mixture.x_test.shape[1])
    assert half.d_y == 8 and nn.side_features(half, nn.encode(half, mixture.x_test)).shape[1] == 300
    np.testing.assert_allclose(nn.encode(half, mixture.x_test), nn.encode(model, mixture.x_test)[:8],
                               rtol=1e-12, atol=1e-12)
    picked = truncate(model, [1, 5, 9])
    np.testing.assert_allclose(nn.encode(picked, mixture.x_test), nn.encode(model, mixture.x_test)[[1, 5, 9]],
                               rtol=1e-12, atol=1e-12)


def test_truncate_rejects_empty_mask(trained):
    with pytest.raises(MaskEmpty):
        truncate(trained[0], np.zeros(16, dtype=bool))
    with pytest.raises(MaskEmpty):
        truncate(trained[0], [])


@pytest.mark.parametrize("mode", ["ldr_ft", "ce_ft"])
def test_keep_all_zero_epochs_is_identity(trained, mixture, mode):
    model = trained[0]
    out, _ = truncate_and_finetune(model, np.ones(16, dtype=bool), mode, mixture.train, mixture.test,
                                   TrainConfig(**ZERO))
    assert same_params(out, model) and out.encoder == model.encoder and out.decoder == model.decoder


def test_keep_half_recovery_direction():
    """ldr_ft recovers to within 2 points of the untruncated model; ce_ft does no
    better on at least two of three seeds."""
    ce_not_better = 0
    for seed in range(3):
        ds = make_gaussian_mixture(3, 32, 200, 3.0, seed, n_test_per_class=100)
        cfg = TrainConfig(seed=seed)
        model, full = three_step_train(nn.build_model(32, 16, 3, seed=seed), ds.train, ds.test, cfg)
        half = cfg.scaled(0.5)
        _, ldr = truncate_and_finetune(model, keep_first_half(16), "ldr_ft", ds.train, ds.test, half)
        _, ce = truncate_and_finetune(model, keep_first_half(16), "ce_ft", ds.train, ds.test, half)
        assert ldr.test_accuracy >= full.test_accuracy - 0.02
        ce_not_better += ce.test_accuracy <= ldr.test_accuracy
    assert ce_not_better >= 2


def test_report_default_is_empty():
    r = TrainReport()
    assert r.rows == [] and np.isnan(r.test_accuracy)
