from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darcn import tensor as T
from darcn.errors import ConfigError, ContractError, DimensionError
from darcn.model import (PAPER, TINY, ArchConfig, DarcnModel, accumulated_loss, agm_forward, count_parameters,
                         darcn_forward, masked_mse, nrm_forward, preset, stack_input)
from darcn.tensor import Tensor


@pytest.fixture(scope="module")
def paper_model():
    return DarcnModel(PAPER, seed=0, dtype=np.float32)


@pytest.fixture
def tiny():
    return DarcnModel(TINY, seed=3, dtype=np.float64)


def mags(rng, b, t, f):
    return rng.uniform(0.0, 2.0, (b, t, f))


def test_paper_frequency_path():
    assert PAPER.nrm_freq_sizes == (161, 81, 41, 21, 11, 6, 4)
    assert PAPER.agm_freq_sizes == (161, 81, 41, 21, 11, 6)
    assert PAPER.nrm_enc_channels[-1] * PAPER.nrm_freq_sizes[-1] == 256
    # AGM decoder outputs 11, 21, 41, 81, 161 gate the NRM features of the same width
    assert PAPER.gate_targets == (4, 3, 2, 1, 0)


def test_stft_settings_follow_feature_length():
    cfg = PAPER.stft_config()
    assert (cfg.fft_size, cfg.win_length, cfg.hop) == (320, 320, 160)
    assert TINY.stft_config().n_bins == 17


@pytest.mark.parametrize("t", [1, 7, 50])
def test_paper_shapes(paper_model, t):
    x = mags(np.random.default_rng(t), 1, t, 161).astype(np.float32)
    with T.no_grad():
        traces = paper_model(x, 3)
    assert len(traces) == 3
    for tr in traces:
        assert tr.estimate.shape == (1, t, 161)
        assert np.all(tr.estimate.data >= 0)
        assert tr.bottleneck_shape == (1, t, 256)
        assert tr.state.h.shape == (1, 16, t, 161)


def test_paper_parameter_count_in_band(paper_model):
    rows, total = count_parameters(paper_model)
    assert 0.98e6 <= total <= 1.48e6
    assert sum(n for _, n in rows) == total == paper_model.num_parameters()


def _conv(cin, cout, kt, kf, bias):
    return cin * cout * kt * kf + (cout if bias else 0)


def _bn(c):
    return 2 * c


def _gate(cp, cq):
    ci = max(cq // 2, 4)
    return _conv(cp, ci, 1, 1, False) + _conv(cq, ci, 1, 1, False) + _conv(ci, 1, 1, 1, False) + 2 * _bn(ci) + _bn(1)


def closed_form_count(cfg: ArchConfig) -> int:
    kt, kf = cfg.kernel
    n = 0
    # AGM
    cin = 2
    for c in cfg.agm_enc_channels:
        n += _conv(cin, c, kt, kf, False) + _bn(c)
        cin = c
    enc, dec = cfg.agm_enc_channels, cfg.agm_dec_channels
    for j, c in enumerate(dec):
        cin = enc[-1] if j == 0 else dec[j - 1] + enc[-1 - j]
        n += _conv(cin, c, kt, kf, False) + _bn(c)
    feat_ch = (cfg.srnn_channels,) + cfg.nrm_enc_channels
    for c, tgt in zip(dec, cfg.gate_targets):
        n += _conv(c, feat_ch[tgt], 1, 1, True)
    # NRM: SRNN conv block and ConvGRU
    cs = cfg.srnn_channels
    n += _conv(2, cs, kt, kf, False) + _bn(cs)
    n += 3 * _conv(cs, cs, 1, 1, True) + 3 * _conv(cs, cs, 1, 1, False)
    cin = cs
    for c in cfg.nrm_enc_channels:
        n += _conv(cin, c, kt, kf, False) + _bn(c)
        cin = c
    w, hdn = cfg.bottleneck_width, cfg.glu_hidden
    n += cfg.glu_count * (2 * _conv(w, hdn, cfg.glu_kernel, 1, True) + _conv(hdn, w, 1, 1, False))
    enc, dec = cfg.nrm_enc_channels, cfg.nrm_dec_channels
    p = enc[-1]
    for i, c in enumerate(dec):
        q = enc[-1 - i]
        n += _gate(p, q) + _conv(p + q, c, kt, kf, False) + _bn(c)
        p = c
    n += _conv(dec[-1], 1, 1, 1, True)
    return n


@pytest.mark.parametrize("cfg", [TINY, PAPER])
def test_parameter_count_matches_closed_form(cfg):
    assert DarcnModel(cfg, dtype=np.float32).num_parameters() == closed_form_count(cfg)


def test_doubling_widths_roughly_quadruples_conv_count():
    base = DarcnModel(PAPER, dtype=np.float32)
    wide = DarcnModel(PAPER.scaled(2), dtype=np.float32)
    conv_w = lambda m: sum(p.size for n, p in m.named_parameters() if n.endswith("weight") and p.ndim == 4)  # noqa
    ratio = conv_w(wide) / conv_w(base)
    assert 3.5 < ratio <= 4.0


def test_gate_count_and_range(tiny):
    rng = np.random.default_rng(0)
    x = Tensor(mags(rng, 2, 5, 17))
    att = agm_forward(tiny, stack_input(x, x))
    assert len(att.maps) == len(TINY.agm_dec_channels)
    for m in att.maps:
        assert np.all(m.data > 0) and np.all(m.data < 1)


def test_zero_pointwise_gives_half_gates(tiny):
    for pw in tiny.agm.pointwise:
        pw.weight.data[...] = 0
        pw.bias.data[...] = 0
    x = Tensor(mags(np.random.default_rng(0), 1, 4, 17))
    for m in agm_forward(tiny, stack_input(x, x)).maps:
        np.testing.assert_array_equal(m.data, 0.5)


def test_saturated_gates_equal_ungated_network(tiny):
    x = Tensor(mags(np.random.default_rng(1), 2, 6, 17))
    x_in = stack_input(x, x)
    state = tiny.nrm.initial_state(2, 6, np.float64)
    att = agm_forward(tiny, x_in)
    ones = type(att)([Tensor(np.ones(m.shape)) for m in att.maps], att.targets)
    est_ones, _, _ = nrm_forward(tiny, x_in, ones, state)
    est_none, _, _ = nrm_forward(tiny, x_in, None, state)
    np.testing.assert_array_equal(est_ones.data, est_none.data)


def test_single_stage_is_one_pass(tiny):
    x = mags(np.random.default_rng(2), 1, 5, 17)
    (tr,) = darcn_forward(tiny, x, 1)
    xt = Tensor(x)
    x_in = stack_input(xt, xt)
    est, _, _ = nrm_forward(tiny, x_in, agm_forward(tiny, x_in), tiny.nrm.initial_state(1, 5, np.float64))
    np.testing.assert_array_equal(tr.estimate.data, est.data)


def test_forward_is_deterministic_and_weights_are_shared(tiny):
    x = mags(np.random.default_rng(3), 2, 6, 17)
    a = darcn_forward(tiny, x, 3)
    b = darcn_forward(tiny, x, 3)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.estimate.data, tb.estimate.data)
    tiny.nrm.out.bias.data += 0.1
    c = darcn_forward(tiny, x, 3)
    assert all(not np.array_equal(ta.estimate.data, tc.estimate.data) for ta, tc in zip(a, c))


def test_stage_count_errors(tiny):
    with pytest.raises(ConfigError):
        darcn_forward(tiny, np.ones((1, 3, 17)), 0)
    with pytest.raises(ConfigError):
        replace(TINY, stages=0)
    with pytest.raises(DimensionError):
        darcn_forward(tiny, np.ones((1, 3, 16)), 1)
    with pytest.raises(ConfigError):
        preset("huge")


def test_state_shape_mismatch_is_contract_error(tiny):
    x = Tensor(np.ones((1, 4, 17)))
    with pytest.raises(ContractError):
        nrm_forward(tiny, stack_input(x, x), None, tiny.nrm.initial_state(1, 5, np.float64))


def test_bad_paddings_rejected():
    with pytest.raises(ConfigError):
        replace(PAPER, nrm_freq_pads=(2, 2, 2, 2, 2, 2))  # ends at 3 bins, not 4


def test_accumulated_loss_sums_stages(tiny):
    rng = np.random.default_rng(4)
    x, s = mags(rng, 2, 5, 17), mags(rng, 2, 5, 17)
    traces = tiny(x, 3)
    loss = accumulated_loss(traces, s)
    assert loss.item() == pytest.approx(sum(tr.stage_loss.item() for tr in traces), rel=1e-12)
    perfect = accumulated_loss(traces, traces[0].estimate.data, lambdas=[1, 0, 0])
    assert perfect.item() == 0.0
    with pytest.raises(ContractError):
        accumulated_loss(traces, s, lambdas=[1, 1])
    with pytest.raises(DimensionError):
        accumulated_loss(traces, s[:, :4])


def test_weighted_sum_of_stage_losses():
    d = [Tensor(v) for v in (0.5, 0.3, 0.2)]
    total = sum((T.mul(x, 1.0) for x in d[1:]), T.mul(d[0], 1.0))
    assert total.item() == pytest.approx(1.0)


def test_masked_mse_ignores_padding():
    rng = np.random.default_rng(5)
    est, tgt = rng.standard_normal((1, 4, 3)), rng.standard_normal((1, 4, 3))
    pad_e = np.concatenate([est, rng.standard_normal((1, 6, 3))], axis=1)
    pad_t = np.concatenate([tgt, np.zeros((1, 6, 3))], axis=1)
    mask = np.r_[np.ones(4), np.zeros(6)][None]
    a = masked_mse(Tensor(est), tgt).item()
    b = masked_mse(Tensor(pad_e), pad_t, mask).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_padding_does_not_change_valid_outputs(tiny):
    # causal convolutions and masked batch statistics: extra trailing frames are invisible
    rng = np.random.default_rng(6)
    x = mags(rng, 2, 6, 17)
    mask = np.ones((2, 6))
    base = tiny(x, 2, mask=mask)
    xp = np.concatenate([x, rng.uniform(0, 2, (2, 3, 17))], axis=1)
    mp = np.concatenate([mask, np.zeros((2, 3))], axis=1)
    padded = tiny(xp, 2, mask=mp)
    for a, b in zip(base, padded):
        np.testing.assert_allclose(b.estimate.data[:, :6], a.estimate.data, rtol=1e-10, atol=1e-12)


def test_every_parameter_gets_gradient(tiny):
    rng = np.random.default_rng(7)
    traces = tiny(mags(rng, 2, 6, 17), 2)
    T.backward(accumulated_loss(traces, mags(rng, 2, 6, 17)))
    dead = [n for n, p in tiny.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert dead == []
    assert tiny.theta_a() and tiny.theta_r()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.floats(0.01, 20.0))
def test_property_gates_and_nonnegativity(seed, t, scale):
    rng = np.random.default_rng(seed)
    model = DarcnModel(TINY, seed=seed % 7, dtype=np.float64)
    with T.no_grad():
        traces = model(mags(rng, 1, t, 17) * scale, 2)
    for tr in traces:
        assert np.all(tr.estimate.data >= 0)
        for m in tr.attention.maps:
            assert np.all(m.data > 0) and np.all(m.data < 1)


def test_end_to_end_gradient_audit():
    from darcn.gradcheck import audit_model

    rows = audit_model("tiny", stages=2, per_tensor=2)
    worst = max(rows, key=lambda r: r.max_rel_err)
    assert worst.max_rel_err <= 1e-4, worst
