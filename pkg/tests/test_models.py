import numpy as np
import pytest

from microevo.field import WindowedDataset, window_library
from microevo.fcg import build_fcg_library
from microevo.models import (
    FAMILIES,
    ModelSpec,
    Persistence,
    TrainConfig,
    TrainingDivergedError,
    build_model,
    count_params,
    forward_sequence,
    load_model,
    prior_logit,
    rollout_autoregressive,
    save_model,
    train,
)
from microevo.models import default_refeed_threshold, one_step_mae, train_step
from microevo.nn.layers import ConvLSTMCell, conv_lstm_cell_step, lstm_cell_step
from microevo.nn.optim import AdamState
from microevo.nn.tensor import Tensor, mse_loss, precision

SMALL = dict(grid=(12, 16), hidden=(8,), enc_channels=(4, 2), dec_channels=(4,), conv_lstm_hidden=3)


def _small(family, **kw):
    return ModelSpec(family, **{**SMALL, **kw})


def _frames(b, t=3, hw=(12, 16), seed=0):
    return (np.random.default_rng(seed).random((b, t) + hw) > 0.7).astype(np.float32)


# -- construction ----------------------------------------------------------------


def test_default_parameter_counts():
    snn = build_model(ModelSpec("base_snn"))
    lstm = build_model(ModelSpec("base_lstm"))
    assert count_params(snn) == snn.closed_form_param_count() < 10**4
    assert count_params(lstm) == lstm.closed_form_param_count()
    assert count_params(lstm) >= 1000 * count_params(snn)
    rec = sum(l.n_stored() for n, l in lstm.layers.items() if n.startswith("rec"))
    assert rec / count_params(lstm) > 0.99


def test_default_channels_and_kernels():
    m = build_model(ModelSpec("base_snn"))
    shapes = [m.layers[n].weight.shape for n in ("enc0", "enc1", "dec0", "dec1")]
    assert shapes == [(16, 1, 3, 3), (4, 16, 3, 3), (4, 16, 3, 3), (16, 1, 3, 3)]
    assert ModelSpec("base_lstm").hidden == (128,)


@pytest.mark.parametrize("family", FAMILIES)
def test_counts_and_seeded_init(family):
    spec = _small(family)
    a, b = build_model(spec, 3), build_model(spec, 3)
    assert count_params(a) == a.closed_form_param_count() == sum(p.size for p in a.state_dict().values())
    assert a.digest() == b.digest()
    assert a.digest() != build_model(spec, 4).digest()


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("transformer")
    with pytest.raises(ValueError):
        ModelSpec("base_snn", strides=(1,))
    with pytest.raises(ValueError):
        ModelSpec("base_snn", kernel=4)
    with pytest.raises(ValueError):
        ModelSpec("base_snn", dec_channels=())


def test_spec_round_trip():
    s = _small("stc_lif", output_bias=-2.0)
    assert ModelSpec.from_dict(s.to_dict()) == s


# -- forward -----------------------------------------------------------------------


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("out_len", [1, 2])
def test_shape_contract_and_statelessness(family, out_len):
    m = build_model(_small(family, out_len=out_len))
    x = _frames(2)
    y1 = m.predict(x)
    assert y1.shape == (2, out_len, 12, 16) and np.all(np.isfinite(y1))
    assert np.array_equal(y1, m.predict(x))
    np.testing.assert_allclose(m.predict(x[0]), y1[0], rtol=1e-5, atol=1e-6)
    with pytest.raises(ValueError):
        m.predict(_frames(1, t=2))


def test_snn_zero_input_gives_zero_logits():
    m = build_model(ModelSpec("base_snn"))
    z = forward_sequence(m, np.zeros((1, 3, 96, 132), np.float32), return_logits=True)
    assert not z.data.any()
    assert np.all(m.predict(np.zeros((3, 96, 132))) == 0.5)


def test_stc_zero_gates_equal_snn():
    spec = _small("stc_lif", output_bias=-1.0)
    stc = build_model(spec, 0)
    for name, layer in stc.layers.items():
        if name.endswith("_stc"):
            for p in layer.parameters():
                p.data[...] = 0
    snn = build_model(_small("base_snn", output_bias=-1.0), 0)
    snn.load_state_dict({k: v for k, v in stc.state_dict().items() if "_stc" not in k})
    x = _frames(2, seed=5) * 3
    assert np.array_equal(stc.predict(x), snn.predict(x))


def test_conv_lstm_1x1_equals_pixelwise_lstm():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        cell = ConvLSTMCell(3, 4, 1, rng)
        cell.params["bias"].data[...] = rng.normal(size=16)
        x, h, c = (Tensor(rng.normal(size=(2, n, 5, 6))) for n in (3, 4, 4))
        h1, c1 = cell(x, h, c)
        w = cell.params["weight"].data[:, :, 0, 0]
        dense = {"w_x": Tensor(w[:, :3]), "w_h": Tensor(w[:, 3:]), "bias": cell.params["bias"]}

        def pix(t):
            return Tensor(t.data.transpose(0, 2, 3, 1).reshape(-1, t.shape[1]))

        h2, c2 = lstm_cell_step(pix(x), pix(h), pix(c), dense)
    np.testing.assert_allclose(h1.data.transpose(0, 2, 3, 1).reshape(-1, 4), h2.data, atol=1e-6)
    np.testing.assert_allclose(c1.data.transpose(0, 2, 3, 1).reshape(-1, 4), c2.data, atol=1e-6)


def test_conv_lstm_zero_parameters():
    params = {"weight": Tensor(np.zeros((8, 3, 3, 3))), "bias": Tensor(np.zeros(8))}
    c_prev = np.random.default_rng(1).normal(size=(1, 2, 4, 4))
    h, c = conv_lstm_cell_step(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 2, 4, 4))), Tensor(c_prev), params, 1)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c_prev), rtol=1e-6)


# -- training ------------------------------------------------------------------------


def _dataset(n=4, hw=(12, 16), seed=0):
    x = _frames(n, hw=hw, seed=seed)
    y = _frames(n, t=1, hw=hw, seed=seed + 1)
    return WindowedDataset(x, y)


@pytest.mark.parametrize("family", FAMILIES)
def test_small_adam_step_descends(family):
    with precision(np.float64):
        m = build_model(_small(family), 0)
        data = _dataset()
        before = float(mse_loss(forward_sequence(m, data.inputs), data.targets).data)
        train_step(m, data.inputs, data.targets, AdamState.init(m.parameters(), lr=1e-5))
        after = float(mse_loss(forward_sequence(m, data.inputs), data.targets).data)
    assert after < before


def test_zero_epochs_leave_model_unchanged():
    m = build_model(_small("base_snn"))
    d = m.digest()
    res = train(m, _dataset(), TrainConfig(epochs=0))
    assert res.history == [] and m.digest() == d


def test_training_is_reproducible(tmp_path):
    runs = []
    for k in range(2):
        m = build_model(_small("conv_lstm"), 1)
        res = train(m, _dataset(6), TrainConfig(epochs=3, batch_size=4, eval_every=1), _dataset(2, seed=9), tmp_path / str(k))
        runs.append((res.losses, m.digest()))
    assert runs[0] == runs[1]
    assert (tmp_path / "0" / "train_log.csv").read_text() == (tmp_path / "1" / "train_log.csv").read_text()
    assert load_model(tmp_path / "0" / "final").digest() == runs[0][1]


def test_training_rejects_mismatched_data():
    with pytest.raises(ValueError):
        train(build_model(_small("base_snn")), _dataset(hw=(8, 8)), TrainConfig(epochs=1))


def test_divergence_restores_last_good_state():
    m = build_model(_small("conv_lstm"))
    d = m.digest()
    bad = _dataset()
    bad.targets[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError) as e:
        train(m, bad, TrainConfig(epochs=2))
    assert e.value.epoch == 1 and m.digest() == d


def test_checkpoint_round_trip(tmp_path):
    m = build_model(_small("stc_lif"), 2)
    save_model(m, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.digest() == m.digest() and back.spec == m.spec


def test_prior_logit():
    assert prior_logit(np.full(10, 0.5)) == 0.0
    assert prior_logit(np.zeros(10)) == pytest.approx(np.log(1e-4 / (1 - 1e-4)))


# -- rollout --------------------------------------------------------------------------


def test_single_hop_rollout_equals_forward():
    m = build_model(_small("base_rnn", out_len=2))
    x = _frames(1)[0]
    np.testing.assert_array_equal(rollout_autoregressive(m, x, 2), m.predict(x))


def test_identity_stub_rollout_is_constant():
    x = _frames(1)[0]
    out = rollout_autoregressive(Persistence(), x, 5)
    assert out.shape == (5, 12, 16) and all(np.array_equal(f, x[-1]) for f in out)


def test_fcg_rollout_to_final_frame():
    lib = build_fcg_library(1, base_seed=0)
    seq = lib.samples[0].data
    m = build_model(_small("base_snn", grid=(96, 132)))
    out = rollout_autoregressive(m, seq[:3], len(seq) - 3, default_refeed_threshold("base_snn", True))
    assert out.shape == (5, 96, 132)


def test_rollout_errors():
    with pytest.raises(ValueError):
        rollout_autoregressive(Persistence(), _frames(1)[0], 0)
    with pytest.raises(ValueError):
        rollout_autoregressive(Persistence(), _frames(1, t=2)[0], 1)


def test_refeed_policy():
    assert default_refeed_threshold("stc_lif", True) == 0.5
    assert default_refeed_threshold("base_lstm", True) is None
    assert default_refeed_threshold("base_snn", False) is None


def test_persistence_mae_on_fcg_equals_new_pixels():
    ds = window_library(build_fcg_library(3, base_seed=0), 3, 1)
    grown = np.sum(ds.targets[:, 0] - ds.inputs[:, -1]) / ds.targets.size
    assert one_step_mae(Persistence(), ds) == pytest.approx(grown, rel=1e-12)
