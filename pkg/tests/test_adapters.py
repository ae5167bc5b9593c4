import numpy as np
import pytest

from olora_lab.adapters import (AdapterConfig, adapted_forward, lora_init, merge, olora_init,
                                spectral_diagnose, swap_adapter)
from olora_lab.errors import ConfigError, NumericError, RankError, ShapeError
from olora_lab.linalg import svd_values


def lora_cfg(**kw):
    return AdapterConfig(method="lora", **kw)


def olora_cfg(**kw):
    return AdapterConfig(method="olora", **kw)


def test_default_scale_is_alpha_over_rank():
    assert AdapterConfig(rank=32).s == 0.5
    assert AdapterConfig(rank=8).s == 2.0
    assert AdapterConfig(rank=8, scale=0.3).s == 0.3
    cfg = AdapterConfig()
    assert cfg.alpha == 16 and cfg.dropout == 0.05


def test_config_validation():
    with pytest.raises(ConfigError):
        AdapterConfig(method="dora")
    with pytest.raises(ConfigError):
        AdapterConfig(dropout=1.0)
    with pytest.raises(RankError):
        AdapterConfig(rank=0)


@pytest.mark.parametrize("r", [1, 3, 6])
def test_lora_b_is_zero(rng, r):
    layer = lora_init(rng.standard_normal((6, 9)), lora_cfg(rank=r))
    np.testing.assert_array_equal(layer.b.value, np.zeros((6, r)))


def test_lora_forward_at_init_is_base(rng):
    w = rng.standard_normal((5, 7))
    x = rng.standard_normal((7, 4))
    layer = lora_init(w, lora_cfg(rank=3))
    np.testing.assert_array_equal(adapted_forward(layer, x), w @ x)
    np.testing.assert_array_equal(merge(layer), w)


def test_lora_a_is_kaiming_uniform():
    k = 16
    layer = lora_init(np.zeros((4, k)), lora_cfg(rank=4, seed=9))
    assert np.all(np.abs(layer.a.value) <= 0.25)
    big = np.concatenate([lora_init(np.zeros((16, k)), lora_cfg(rank=16, seed=s)).a.value.ravel()
                          for s in range(40)])
    assert big.size >= 10_000
    # U(-1/4, 1/4): sigma = 0.25 / sqrt(3); 3-sigma bound on the sample mean
    sigma = 0.25 / np.sqrt(3)
    assert abs(big.mean()) <= 3 * sigma / np.sqrt(big.size)
    assert big.var() == pytest.approx(sigma ** 2, rel=0.05)


def test_lora_rank_too_large(rng):
    with pytest.raises(RankError):
        lora_init(rng.standard_normal((4, 6)), lora_cfg(rank=5))


def test_olora_zero_scale(rng):
    w = rng.standard_normal((6, 6))
    layer = olora_init(w, olora_cfg(rank=2, scale=0.0))
    np.testing.assert_array_equal(layer.base.value, w)
    np.testing.assert_array_equal(merge(layer), w)


def test_olora_identity_hand_case():
    layer = olora_init(np.eye(4), olora_cfg(rank=2, scale=1.0))
    np.testing.assert_array_equal(layer.b.value, np.eye(4)[:, :2])
    np.testing.assert_array_equal(layer.a.value, np.eye(4)[:2])
    np.testing.assert_array_equal(layer.base.value, np.diag([0.0, 0.0, 1.0, 1.0]))
    np.testing.assert_array_equal(merge(layer), np.eye(4))


def test_olora_exact_cancellation(rng):
    w = rng.standard_normal((8, 8))
    layer = olora_init(w, olora_cfg(rank=3, scale=0.5))
    assert np.max(np.abs(merge(layer) - w)) <= 1e-12


def test_olora_float32_cancellation(rng):
    w = rng.standard_normal((32, 64)).astype(np.float32)
    layer = olora_init(w, olora_cfg(rank=8))
    assert np.max(np.abs(merge(layer) - w)) <= 1e-5
    assert layer.b.value.dtype == np.float32


def test_olora_errors(rng):
    with pytest.raises(RankError):
        olora_init(rng.standard_normal((3, 5)), olora_cfg(rank=4))
    w = np.ones((3, 3))
    w[0, 0] = np.nan
    with pytest.raises(NumericError):
        olora_init(w, olora_cfg(rank=1))


def test_olora_deterministic(rng):
    w = rng.standard_normal((12, 10)).astype(np.float32)
    a, b = olora_init(w, olora_cfg(rank=4)), olora_init(w.copy(), olora_cfg(rank=4))
    for x, y in [(a.b.value, b.b.value), (a.a.value, b.a.value), (a.base.value, b.base.value)]:
        assert x.tobytes() == y.tobytes()


def test_lora_deterministic(rng):
    w = rng.standard_normal((12, 10))
    assert lora_init(w, lora_cfg(rank=4, seed=5)).a.value.tobytes() == \
        lora_init(w, lora_cfg(rank=4, seed=5)).a.value.tobytes()


def test_adapted_forward_hand_arithmetic():
    layer = lora_init(np.array([[1.0, 2.0], [0.0, 1.0]]), lora_cfg(rank=1, scale=2.0))
    layer = swap_adapter(layer, np.array([[1.0], [2.0]]), np.array([[3.0, -1.0]]))
    x = np.array([[1.0], [2.0]])
    # W x = [5, 2]; A x = 1; s B (A x) = [2, 4]
    np.testing.assert_array_equal(adapted_forward(layer, x), [[7.0], [6.0]])


def test_scale_applied_to_branch(rng):
    w = rng.standard_normal((32, 32))
    layer = lora_init(w, lora_cfg(rank=32))
    assert layer.scale == 0.5
    b = rng.standard_normal((32, 32))
    layer = swap_adapter(layer, b, layer.a.value)
    x = rng.standard_normal((32, 3))
    np.testing.assert_allclose(adapted_forward(layer, x) - w @ x, 0.5 * b @ layer.a.value @ x,
                               atol=1e-12)


def test_adapted_forward_shape_error(rng):
    layer = lora_init(rng.standard_normal((4, 5)), lora_cfg(rank=2))
    with pytest.raises(ShapeError):
        adapted_forward(layer, np.ones((4, 2)))


def test_eval_mode_is_deterministic(rng):
    layer = olora_init(rng.standard_normal((6, 5)), olora_cfg(rank=2, dropout=0.5))
    x = rng.standard_normal((5, 7))
    assert adapted_forward(layer, x).tobytes() == adapted_forward(layer, x).tobytes()


@pytest.mark.parametrize("method", ["lora", "olora"])
def test_train_mode_dropout_is_unbiased_in_update_mode(rng, method):
    """With dropout_target='update', only the learned change is dropped."""
    w = rng.standard_normal((6, 5))
    layer = AdapterConfig(rank=2, method=method, dropout=0.5)
    from olora_lab.adapters import init_adapter
    layer = init_adapter(w, layer, rng=np.random.default_rng(0))
    x = rng.standard_normal((5, 3))
    # at init the learned change is zero, so train mode equals eval mode
    np.testing.assert_allclose(adapted_forward(layer, x, True, np.random.default_rng(1)),
                               adapted_forward(layer, x), atol=1e-12)


def test_input_dropout_target_drops_whole_branch(rng):
    w = rng.standard_normal((6, 5))
    layer = olora_init(w, olora_cfg(rank=2, dropout=0.5, dropout_target="input"))
    x = rng.standard_normal((5, 3))
    mask_rng = np.random.default_rng(1)
    mask = (np.random.default_rng(1).random(x.shape) >= 0.5) / 0.5
    expected = layer.base.value @ x + layer.scale * layer.b.value @ layer.a.value @ (x * mask)
    np.testing.assert_allclose(adapted_forward(layer, x, True, mask_rng), expected, atol=1e-12)


def test_merge_after_update(rng):
    layer = olora_init(rng.standard_normal((7, 5)), olora_cfg(rank=3))
    layer = swap_adapter(layer, layer.b.value + 0.1 * rng.standard_normal((7, 3)),
                         layer.a.value - 0.1 * rng.standard_normal((3, 5)))
    for _ in range(8):
        x = rng.standard_normal((5, 4))
        np.testing.assert_allclose(merge(layer) @ x, adapted_forward(layer, x), atol=1e-12)


def test_swap_zeros_behaves_unadapted(rng):
    w = rng.standard_normal((4, 6))
    layer = lora_init(w, lora_cfg(rank=2))
    zeroed = swap_adapter(layer, np.zeros((4, 2)), np.zeros((2, 6)))
    x = rng.standard_normal((6, 3))
    np.testing.assert_array_equal(adapted_forward(zeroed, x), w @ x)


def test_swap_round_trip_is_bit_identical(rng):
    layer = olora_init(rng.standard_normal((6, 6)), olora_cfg(rank=3))
    x = rng.standard_normal((6, 5))
    before = adapted_forward(layer, x)
    out = swap_adapter(layer, np.zeros((6, 3)), np.zeros((3, 6)))
    back = swap_adapter(out, layer.b.value, layer.a.value)
    assert adapted_forward(back, x).tobytes() == before.tobytes()
    assert back.base.value is layer.base.value


def test_swap_into_other_base_matches_fresh_merge(rng):
    """Adapter trained for task 2 swapped into the task-1 base equals a fresh task-2 merge."""
    w = rng.standard_normal((5, 6))
    task1 = lora_init(w, lora_cfg(rank=2, seed=1))
    task2 = lora_init(w, lora_cfg(rank=2, seed=2))
    task2 = swap_adapter(task2, rng.standard_normal((5, 2)), task2.a.value)
    swapped = swap_adapter(task1, task2.b.value, task2.a.value)
    np.testing.assert_array_equal(merge(swapped), merge(task2))


def test_swap_shape_error(rng):
    layer = lora_init(rng.standard_normal((4, 6)), lora_cfg(rank=2))
    with pytest.raises(ShapeError):
        swap_adapter(layer, np.zeros((4, 3)), np.zeros((2, 6)))


def test_base_is_read_only(rng):
    layer = olora_init(rng.standard_normal((4, 4)), olora_cfg(rank=2))
    with pytest.raises(ValueError):
        layer.base.value[0, 0] = 1.0
    assert not layer.base.trainable


def test_spectral_diagnose_olora_init(rng):
    w = rng.standard_normal((32, 64)).astype(np.float32)
    report = spectral_diagnose(olora_init(w, olora_cfg(rank=8)))
    assert report["orthonormality_drift"] <= 1e-5
    assert np.all(np.diff(report["sigma_pretrained"]) <= 0)
    assert np.all(np.diff(report["sigma_ba"]) <= 0)
    assert len(report["sigma_ba"]) == 8
    assert report["subset_gap"] >= 0


def test_spectral_diagnose_orthogonal_invariance(rng):
    layer = olora_init(rng.standard_normal((16, 12)), olora_cfg(rank=5))
    report = spectral_diagnose(layer)
    np.testing.assert_allclose(report["sigma_ba"], svd_values(layer.a.value), atol=1e-10)


def test_spectral_diagnose_lora_and_drifted(rng):
    layer = lora_init(rng.standard_normal((8, 8)), lora_cfg(rank=3))
    report = spectral_diagnose(layer)
    assert report["sigma_ba"] == [0.0, 0.0, 0.0]
    drifted = swap_adapter(layer, 5 * rng.standard_normal((8, 3)), layer.a.value)
    drift = spectral_diagnose(drifted)["orthonormality_drift"]
    assert np.isfinite(drift) and drift >= 0
