"""Central finite-difference audits of the analytic gradients.

Relative error is measured elementwise as ``|a - n| / max(|a|, |n|, floor)``;
the floor keeps entries whose true gradient is ~0 from producing
meaningless ratios of round-off noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import conv as C
from . import tensor as T
from .tensor import Tensor

REL_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(fn: Callable[[], Tensor], arr: np.ndarray, indices, eps: float = 1e-5) -> np.ndarray:
    """d fn() / d arr[idx] by central differences, perturbing ``arr`` in place."""
    out = np.empty(len(indices))
    for k, idx in enumerate(indices):
        orig = arr[idx]
        arr[idx] = orig + eps
        fp = fn().item()
        arr[idx] = orig - eps
        fm = fn().item()
        arr[idx] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out


def _sample_indices(shape, limit: int | None, rng: np.random.Generator):
    total = int(np.prod(shape))
    flat = np.arange(total) if limit is None or total <= limit else np.sort(rng.choice(total, limit, replace=False))
    return [np.unravel_index(int(i), shape) for i in flat]


def check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
          limit: int | None = None, rng: np.random.Generator | None = None) -> list[float]:
    """Max relative error for each input; ``limit`` caps entries probed per input."""
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    errors = []
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        idx = _sample_indices(t.shape, limit, rng)
        numeric = numeric_grad(fn, t.data, idx, eps)
        errors.append(rel_error(np.array([analytic[i] for i in idx]), numeric))
    return errors


def _projector(shape, rng):
    return Tensor(rng.standard_normal(shape))


@dataclass
class AuditRow:
    name: str
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= AUDIT_TOL


AUDIT_TOL = 1e-4


def _leaf(rng, *shape, scale=1.0, away_from_zero=False):
    x = rng.uniform(-1, 1, shape) * scale
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x) + 0.05 * (x == 0), x)
    return Tensor(x, requires_grad=True)


def op_cases(rng: np.random.Generator):
    """(name, loss-builder, inputs) for every differentiable primitive.

    Each loss projects the op output onto a fixed random tensor so no
    gradient entry is trivially one.
    """
    cases = []

    def case(name, f, *inputs):
        r = _projector(f(*inputs).shape, rng)
        cases.append((name, lambda: T.tsum(f(*inputs) * r), list(inputs)))

    for name, f in (("sigmoid", T.sigmoid), ("tanh", T.tanh), ("softplus", T.softplus),
                    ("exp", T.exp), ("square", T.square)):
        case(name, f, _leaf(rng, 3, 4))
    case("relu", T.relu, _leaf(rng, 3, 4, away_from_zero=True))
    case("elu", T.elu, _leaf(rng, 3, 4, away_from_zero=True))
    case("reshape", lambda v: T.reshape(v, (4, 3)), _leaf(rng, 3, 4))
    for name, f in (("add", T.add), ("sub", T.sub), ("mul", T.mul)):
        case(f"{name}(broadcast)", f, _leaf(rng, 2, 3, 4), _leaf(rng, 1, 3, 1))
    case("div", T.div, _leaf(rng, 2, 3), Tensor(rng.uniform(0.5, 1.5, (2, 3)), requires_grad=True))
    case("concat", lambda a, b: T.concat([a, b], axis=1), _leaf(rng, 1, 2, 3, 4), _leaf(rng, 1, 3, 3, 4))
    case("slice", lambda v: T.slice_axes(v, [None, (1, 3)]), _leaf(rng, 2, 3, 4))
    case("getitem", lambda v: v[:, 1:, ::2], _leaf(rng, 2, 3, 4))
    case("transpose", lambda v: T.transpose(v, (2, 0, 1)), _leaf(rng, 2, 3, 4))
    case("mean", lambda v: T.square(T.mean(v, axis=(0, 2))), _leaf(rng, 2, 3, 4))

    case("conv2d", lambda x, w, b: C.conv2d(x, w, b, (1, 2), (1, 0, 2, 2)),
         _leaf(rng, 2, 3, 5, 9), _leaf(rng, 4, 3, 2, 5), _leaf(rng, 4))
    case("conv2d(dilated)", lambda x, w: C.conv2d(x, w, None, 1, (4, 0, 0, 0), (2, 1)),
         _leaf(rng, 1, 2, 9, 1), _leaf(rng, 3, 2, 3, 1))
    case("conv_transpose2d", lambda x, w, b: C.conv_transpose2d(x, w, b, (1, 2), (0, 1, 2, 2), (5, 9)),
         _leaf(rng, 2, 4, 5, 5), _leaf(rng, 4, 3, 2, 5), _leaf(rng, 3))

    stats = C.RunningStats.zeros(3)
    mask = np.ones((2, 1, 4, 1))
    mask[1, :, 2:] = 0

    def bn_inputs():
        return (_leaf(rng, 2, 3, 4, 5), Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True), _leaf(rng, 3))

    case("batch_norm(train)", lambda x, g, b: C.batch_norm(x, g, b, stats, True), *bn_inputs())
    case("batch_norm(masked)", lambda x, g, b: C.batch_norm(x, g, b, stats, True, mask=mask), *bn_inputs())
    case("batch_norm(eval)", lambda x, g, b: C.batch_norm(x, g, b, stats, False), *bn_inputs())
    return cases


def audit_ops(seed: int = 0) -> list[AuditRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, fn, inputs in op_cases(rng):
        rows.append(AuditRow(name, max(check(fn, inputs))))
    return rows


def audit_model(preset_name: str = "tiny", stages: int | None = None, frames: int = 6, batch: int = 2,
                per_tensor: int = 3, seed: int = 0) -> list[AuditRow]:
    """End-to-end audit of the recursive model in float64.

    The loss is a fixed random projection of every stage's estimate, so
    all stages and the recurrent state carry gradient. A few entries of
    each parameter tensor and of the input are probed.
    """
    from dataclasses import replace

    from .model import DarcnModel, preset

    cfg = preset(preset_name)
    cfg = cfg if stages is None else replace(cfg, stages=stages)
    model = DarcnModel(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    mag = Tensor(rng.uniform(0.1, 2.0, (batch, frames, cfg.n_freq)), requires_grad=True)
    proj = [_projector((batch, frames, cfg.n_freq), rng) for _ in range(cfg.stages)]

    def loss():
        traces = model(mag)
        total = None
        for p, tr in zip(proj, traces):
            term = T.tsum(tr.estimate * p)
            total = term if total is None else total + term
        return total

    named = [("input", mag)] + list(model.named_parameters())
    errs = check(loss, [t for _, t in named], limit=per_tensor, rng=rng)
    return [AuditRow(f"model.{n}", e) for (n, _), e in zip(named, errs)]


def format_rows(rows: Sequence[AuditRow]) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'case':<{width}}  {'max rel err':>12}  status"]
    lines += [f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {'ok' if r.passed else 'FAIL'}" for r in rows]
    worst = max(r.max_rel_err for r in rows)
    lines.append(f"{len(rows)} cases, worst {worst:.3e}, tolerance {AUDIT_TOL:.0e}")
    return "\n".join(lines)
