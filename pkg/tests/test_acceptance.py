"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training-based criteria (5, 6) share one session fixture that builds
the desk corpus and trains the tiny preset with three stages inside the
30-minute budget. Expect the whole module to take about half an hour on
one core.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE_LINES
from darcn import tensor as T
from darcn.data import DESK_SPLITS, SEEN_NOISES, UNSEEN_NOISES, Manifest, build_corpus
from darcn.dsp import PAPER_STFT, istft, magnitude, mix_at_snr, power, stft
from darcn.model import PAPER, TINY, DarcnModel, count_parameters, format_parameter_table
from darcn.nn import AttentionGate, ConvGruCell
from darcn.training import (Action, ScheduleState, TrainConfig, epoch_end, load_features, load_model, train,
                            validate)

TRAIN_BUDGET_S = 30 * 60
# the epoch that crosses this mark still has to finish inside the budget
TIME_BUDGET_S = 25 * 60


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.monotonic()
    paths = build_corpus(root / "corpus", seed=0, splits=dict(DESK_SPLITS))
    cfg = TrainConfig(preset="tiny", stages=3, seed=0, train_manifest=str(paths["train"]),
                      val_manifest=str(paths["val"]), out_dir=str(root / "run"), time_budget_s=TIME_BUDGET_S)
    result = train(cfg)
    elapsed = time.monotonic() - t0
    return paths, result, elapsed


def test_c1_gradient_audit():
    from darcn.gradcheck import AUDIT_TOL, audit_model, audit_ops

    t0 = time.monotonic()
    rows = audit_ops(0) + audit_model("tiny", stages=2)
    elapsed = time.monotonic() - t0
    worst = max(rows, key=lambda r: r.max_rel_err)
    ok = worst.max_rel_err <= 1e-4 and AUDIT_TOL <= 1e-4 and elapsed <= 300
    report(1, "gradient audit", ok, f"{len(rows)} cases, worst {worst.max_rel_err:.2e} at {worst.name}, "
                                    f"{elapsed:.0f} s")
    assert ok


def test_c2_shape_contract():
    model = DarcnModel(PAPER, seed=0, dtype=np.float32)
    rng = np.random.default_rng(0)
    shapes = []
    ok = True
    for t in (1, 7, 50):
        # the (1, T, 161, 2) network input is the noisy magnitude stacked with the previous estimate
        x = rng.uniform(0, 2, (1, t, 161)).astype(np.float32)
        with T.no_grad():
            traces = model(x)
        ok &= len(traces) == PAPER.stages
        for tr in traces:
            ok &= tr.estimate.shape == (1, t, 161) and bool(np.all(tr.estimate.data >= 0))
            ok &= tr.bottleneck_shape == (1, t, 256)
        shapes.append(f"T={t}: {traces[0].bottleneck_shape}")
    report(2, "shape contract", ok, f"Q={PAPER.stages}; bottleneck " + ", ".join(shapes))
    assert ok


def test_c3_parameter_count():
    t0 = time.monotonic()
    model = DarcnModel(PAPER, seed=0, dtype=np.float32)
    _, total = count_parameters(model)
    table = format_parameter_table(model, 1.23)
    elapsed = time.monotonic() - t0
    print(table)
    ok = 0.98e6 <= total <= 1.48e6 and "total" in table and elapsed < 10
    report(3, "parameter count", ok, f"{total:,} = {total / 1e6:.3f} M vs 1.23 M, band [0.98, 1.48] M")
    assert ok


def test_c4_stft_fidelity():
    rng = np.random.default_rng(4)
    n = PAPER_STFT.covered_length(PAPER_STFT.n_frames(16000))
    inner = slice(PAPER_STFT.win_length, n - PAPER_STFT.win_length)
    snrs = []
    for _ in range(100):
        x = rng.standard_normal(16000)
        y = istft(stft(x), length=len(x))
        snrs.append(10 * np.log10(power(x[inner]) / power(x[inner] - y[inner])))
    t = np.arange(16000) / 16000
    peaks = np.argmax(magnitude(stft(np.sin(2 * np.pi * 1000 * t))), axis=1)
    errs = []
    for target in (-5.0, 0.0, 5.0, 10.0, 2.7):
        s, d = rng.standard_normal(16000), rng.standard_normal(20000) * rng.uniform(0.1, 3)
        x, alpha = mix_at_snr(s, d, target)
        errs.append(abs(10 * np.log10(power(s) / power(x - s)) - target))
    ok = min(snrs) >= 60 and np.all(peaks == 20) and max(errs) <= 1e-9
    report(4, "STFT fidelity", ok, f"min round-trip {min(snrs):.1f} dB over 100 signals, tone bin "
                                   f"{set(peaks.tolist())}, worst mix error {max(errs):.1e} dB")
    assert ok


def test_c5_stage_refinement(desk_run):
    paths, result, elapsed = desk_run
    model, _, _ = load_model(result.best)
    val = load_features(Manifest.load(paths["val"]), TINY.stft_config())
    _, stage = validate(model, val, 3)
    ok = stage[2] <= stage[0] and elapsed <= TRAIN_BUDGET_S
    report(5, "stage refinement", ok, f"val D = {', '.join(f'{d:.5f}' for d in stage)}; "
                                      f"{len(result.history)} epochs, {elapsed / 60:.1f} min incl. synthesis")
    assert ok


def test_c6_enhancement_efficacy(desk_run):
    from darcn.enhance import evaluate

    paths, result, _ = desk_run
    records = [r for r in Manifest.load(paths["test"]) if r.snr_db == 0.0]
    rep = evaluate(result.best, records)
    gains = {}
    for row in rep.rows:
        if row.metric == "si_sdr":
            gains.setdefault(row.noise_kind, []).append(row.delta)
    overall = float(np.mean([v for vs in gains.values() for v in vs]))
    seen = float(np.mean([v for k in SEEN_NOISES for v in gains[k]]))
    unseen = float(np.mean([v for k in UNSEEN_NOISES for v in gains[k]]))
    for kind in SEEN_NOISES + UNSEEN_NOISES:
        print(f"  {kind:<10} {np.mean(gains[kind]):+6.2f} dB")
    ok = overall >= 5.0
    report(6, "enhancement efficacy", ok, f"0 dB SI-SDR gain {overall:+.2f} dB (seen {seen:+.2f}, unseen "
                                          f"{unseen:+.2f}, seen >= unseen: {seen >= unseen})")
    assert ok


def test_c7_schedule_compliance():
    sched = ScheduleState()
    trace = [1.0] + [1.5] * 10
    actions = [epoch_end(sched, v) for v in trace]
    halvings = [i for i, a in enumerate(actions) if a is Action.HALVE_LR]
    ok = halvings[0] == 3 and actions[-1] is Action.STOP and actions.count(Action.STOP) == 1
    ok &= Action.STOP not in actions[:-1] and sched.epochs_since_best == 10
    report(7, "schedule compliance", ok, f"first halving after increment {halvings[0]}, halvings at "
                                         f"{halvings}, stop after {sched.epochs_since_best} increments")
    assert ok


def test_c8_determinism(desk_run, tmp_path):
    from darcn.cli import run

    paths, _, _ = desk_run
    out = tmp_path / "run"
    blobs = []
    for _ in range(2):
        argv = ["train", "--train-manifest", str(paths["train"]), "--val-manifest", str(paths["val"]),
                "--out", str(out), "--preset", "tiny", "--stages", "3", "--seed", "7", "--max-epochs", "1",
                "--threads", "1"]
        assert run(argv) == 0
        blobs.append({name: (out / name).read_bytes() for name in ("last.ckpt", "best.ckpt", "train.log")})
        for p in out.iterdir():
            p.unlink()
    same = [name for name in blobs[0] if blobs[0][name] == blobs[1][name]]
    ok = len(same) == 3
    report(8, "determinism", ok, f"bit-identical: {', '.join(same) or 'none'}")
    assert ok


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.01, 50.0))
def _model_gates(seed, frames, scale):
    rng = np.random.default_rng(seed)
    model = DarcnModel(replace(TINY, stages=2), seed=seed % 11, dtype=np.float64)
    seen = []
    orig = AttentionGate.coefficients

    def spy(self, p, q, mask=None):
        c = orig(self, p, q, mask)
        seen.append(c.data)
        return c

    AttentionGate.coefficients = spy
    try:
        with T.no_grad():
            traces = model(rng.uniform(0, 2, (2, frames, 17)) * scale)
    finally:
        AttentionGate.coefficients = orig
    assert len(seen) == 2 * len(TINY.nrm_dec_channels)
    for c in seen:
        assert np.all(c > 0) and np.all(c < 1)
    for tr in traces:
        for m in tr.attention.maps:
            assert np.all(m.data > 0) and np.all(m.data < 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def _gate_alone(seed, scale):
    rng = np.random.default_rng(seed)
    gate = AttentionGate(4, 3, rng=rng)
    p = T.Tensor(rng.standard_normal((2, 4, 3, 5)) * scale)
    q = T.Tensor(rng.standard_normal((2, 3, 3, 5)) * scale)
    c = gate.coefficients(p, q).data
    assert np.all(c > 0) and np.all(c < 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0), st.floats(0.1, 5.0))
def _gru_between(seed, scale, weight_scale):
    rng = np.random.default_rng(seed)
    cell = ConvGruCell(3, rng=rng)
    for prm in cell.parameters():
        prm.data *= weight_scale
    h_hat = T.Tensor(rng.standard_normal((2, 3, 4, 5)) * scale)
    h = T.Tensor(rng.standard_normal((2, 3, 4, 5)) * scale)
    g = cell.gates(h_hat, h)
    lo, hi = np.minimum(h_hat.data, g["n"].data), np.maximum(h_hat.data, g["n"].data)
    assert np.all(g["h"].data >= lo - 1e-12) and np.all(g["h"].data <= hi + 1e-12)


def test_c9_gating_invariants():
    t0 = time.monotonic()
    failures = []
    for prop in (_model_gates, _gate_alone, _gru_between):
        try:
            prop()
        except AssertionError as exc:  # hypothesis re-raises the shrunk failure
            failures.append(f"{prop.__name__}: {exc}")
    elapsed = time.monotonic() - t0
    ok = not failures and elapsed <= 60
    report(9, "gating invariants", ok, f"105 examples over model gates, AG coefficients and ConvGRU, "
                                       f"{elapsed:.1f} s" + (f"; {failures}" if failures else ""))
    assert ok
