"""Query cost and priority queue size models, fitted from warm-up runs.

Both models take the initial BSF (the approximate answer's distance) as
their input. Estimates are unitless scores: schedulers only compare and
sum them.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
import json
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from dataset import CorruptFile
from series import Series

SIGMOID_SEED = 0
SIGMOID_STARTS = 8

log = logging.getLogger(__name__)


class DegenerateFit(RuntimeError):
    """The samples cannot support the requested model."""


@dataclass(frozen=True)
class CalibrationSample:
    initial_bsf: float
    exec_time: float
    median_pq_size: float

    def __post_init__(self):
        assert self.exec_time > 0 and self.median_pq_size >= 0


@dataclass(frozen=True)
class LinearModel:
    a: float
    b: float
    r2: float = 0.0

    @classmethod
    def identity(cls) -> LinearModel:
        """Fallback: the initial BSF itself is the estimate."""
        return cls(1.0, 0.0)

    def __call__(self, x: float) -> float:
        return predict_time(self, x)


@dataclass(frozen=True)
class SigmoidParams:
    m: float
    M: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        assert self.m <= self.M, "lower asymptote above upper one"

    @classmethod
    def flat(cls, level: float, at: float = 0.0) -> SigmoidParams:
        return cls(level, level, 1.0, 1.0, at)

    def __call__(self, z: float) -> float:
        return float(self.curve(np.array([z]))[0])

    def curve(self, zs: Series) -> Series:
        with np.errstate(over="ignore"):
            e = np.exp(-self.c * (zs - self.d))
        return self.m + (self.M - self.m) / (1.0 + self.b * e)


def fit_linear(samples: Sequence[CalibrationSample]) -> LinearModel:
    if len(samples) < 2:
        raise DegenerateFit(f"need two samples, got {len(samples)}")
    x = np.array([s.initial_bsf for s in samples])
    y = np.array([s.exec_time for s in samples])
    try:
        fit = stats.linregress(x, y)
    except ValueError as e:  # every x identical
        raise DegenerateFit(str(e)) from e
    a, b = float(fit.slope), float(fit.intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    rss = float(np.sum((y - (a * x + b)) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - rss / ss_tot)
    return LinearModel(a, b, r2)


def predict_time(model: LinearModel, initial_bsf: float) -> float:
    return max(0.0, model.a * initial_bsf + model.b)


def _canonical(
    m: float, M: float, b: float, c: float, d: float
) -> SigmoidParams:
    """The same curve with m <= M (swap asymptotes, invert b, negate c)."""
    if m <= M:
        return SigmoidParams(m, M, b, c, d)
    return SigmoidParams(M, m, 1.0 / b, -c, d)


def fit_sigmoid(
    samples: Sequence[CalibrationSample], seed: int = SIGMOID_SEED
) -> SigmoidParams:
    """Least-squares sigmoid through (initial_bsf, median_pq_size).

    Nelder-Mead from several starts on standardised x and scaled y; b is
    searched as log(b) to keep it positive. Deterministic given the seed.
    """
    if len(samples) < 5:
        raise DegenerateFit(f"need five samples, got {len(samples)}")
    x = np.array([s.initial_bsf for s in samples])
    y = np.array([s.median_pq_size for s in samples])
    if np.ptp(y) == 0:
        return SigmoidParams.flat(float(y[0]), float(np.median(x)))
    x_mid, x_scale = float(np.median(x)), float(np.std(x)) or 1.0
    y_low, y_scale = float(y.min()), float(np.ptp(y))
    u = (x - x_mid) / x_scale
    v = (y - y_low) / y_scale

    def rss(p: Series) -> float:
        m, M, log_b, c, d = p
        with np.errstate(over="ignore"):
            f = m + (M - m) / (1.0 + np.exp(log_b - c * (u - d)))
        r = float(np.sum((f - v) ** 2))
        return r if math.isfinite(r) else math.inf

    rng = np.random.default_rng(seed)
    starts = [np.array([0.0, 1.0, 0.0, 1.0, 0.0])]
    starts.append(np.array([0.0, 1.0, 0.0, -1.0, 0.0]))
    for _ in range(SIGMOID_STARTS - len(starts)):
        sign = rng.choice([-1.0, 1.0])
        starts.append(
            np.array(
                [0.0, 1.0, 0.0, sign * rng.uniform(0.3, 5), rng.normal()]
            )
        )
    best_fun, best_x, evaluations = math.inf, starts[0], 0
    for start in starts:
        res = optimize.minimize(
            rss,
            start,
            method="Nelder-Mead",
            options={
                "xatol": 1e-10,
                "fatol": 1e-14,
                "maxiter": 20_000,
                "maxfev": 40_000,
                "adaptive": True,
            },
        )
        evaluations += res.nfev
        if float(res.fun) < best_fun:
            best_fun, best_x = float(res.fun), res.x
    if not math.isfinite(best_fun) or not np.all(np.isfinite(best_x)):
        raise DegenerateFit("sigmoid fit did not converge")
    m, M, log_b, c, d = (float(p) for p in best_x)
    if c == 0:
        raise DegenerateFit("sigmoid fit collapsed to c = 0")
    log.debug("sigmoid fit: rss=%g after %d evaluations", best_fun, evaluations)
    return _canonical(
        y_low + y_scale * m,
        y_low + y_scale * M,
        math.exp(log_b),
        c / x_scale,
        x_mid + x_scale * d,
    )


@dataclass(frozen=True)
class Models:
    """Everything calibration produces, as stored between CLI steps."""

    linear: LinearModel
    sigmoid: SigmoidParams
    samples: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> Models:
        try:
            raw = json.loads(text)
            linear, sigmoid = raw["linear"], raw["sigmoid"]
            if not sigmoid["m"] <= sigmoid["M"]:
                raise CorruptFile(
                    f"sigmoid lower asymptote {sigmoid['m']}"
                    f" above upper {sigmoid['M']}"
                )
            return cls(
                LinearModel(**linear),
                SigmoidParams(**sigmoid),
                int(raw.get("samples", 0)),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorruptFile(f"not a models file: {e!r}") from e

    def save(self, path: Path) -> None:
        path.write_text(self.to_json())

    @classmethod
    def load(cls, path: Path) -> Models:
        return cls.from_json(path.read_text())


def fit_models(
    samples: Sequence[CalibrationSample], seed: int = SIGMOID_SEED
) -> Models:
    """Fit both models, falling back where the samples are degenerate."""
    try:
        linear = fit_linear(samples)
    except DegenerateFit as e:
        log.warning("linear model falls back to identity: %s", e)
        linear = LinearModel.identity()
    try:
        sigmoid = fit_sigmoid(samples, seed)
    except DegenerateFit as e:
        sizes = [s.median_pq_size for s in samples]
        level = float(np.median(sizes)) if sizes else 0.0
        log.warning("sigmoid falls back to flat %g: %s", level, e)
        sigmoid = SigmoidParams.flat(level)
    log.info(
        "models: time = %.4g * bsf + %.4g (r2 %.3f); %s",
        linear.a,
        linear.b,
        linear.r2,
        sigmoid,
    )
    return Models(linear, sigmoid, len(samples))


# Unit tests


def _samples(
    xs: Series, times: Series, sizes: Series
) -> list[CalibrationSample]:
    return [
        CalibrationSample(float(x), float(t), float(s))
        for x, t, s in zip(xs, times, sizes)
    ]


def test_fit_linear_exact_line():
    xs = np.arange(1.0, 11.0)
    model = fit_linear(_samples(xs, 2 * xs + 1, xs))
    assert math.isclose(model.a, 2) and math.isclose(model.b, 1)
    assert math.isclose(model.r2, 1)


def test_fit_linear_constant_and_degenerate():
    xs = np.arange(1.0, 6.0)
    model = fit_linear(_samples(xs, np.full(5, 7.0), xs))
    assert abs(model.a) < 1e-12 and math.isclose(model.b, 7)
    for bad in [_samples(np.ones(4), np.arange(1.0, 5.0), np.ones(4)), []]:
        try:
            fit_linear(bad)
        except DegenerateFit:
            pass
        else:
            assert False, "expected DegenerateFit"
    assert fit_models(_samples(np.ones(3), np.ones(3), np.ones(3))).linear == (
        LinearModel.identity()
    )


def test_fit_linear_noisy_and_least_squares():
    rng = np.random.default_rng(1)
    xs = rng.uniform(0, 100, 1000)
    ys = 3 * xs + 10 + rng.normal(0, 2, 1000)
    samples = _samples(xs, ys, xs)
    model = fit_linear(samples)
    assert abs(model.a - 3) < 0.15

    def rss(a: float, b: float) -> float:
        return float(np.sum((ys - (a * xs + b)) ** 2))

    best = rss(model.a, model.b)
    for da in [-0.01, 0, 0.01]:
        for db in [-0.01, 0, 0.01]:
            assert rss(model.a * (1 + da), model.b * (1 + db)) >= best


def test_predict_time():
    assert predict_time(LinearModel(2, 1), 100) == 201
    assert predict_time(LinearModel(1, -50), 10) == 0
    assert LinearModel.identity()(3.5) == 3.5


def test_fit_sigmoid_round_trip():
    truth = SigmoidParams(m=100, M=1000, b=1, c=2, d=5)
    xs = np.linspace(0, 10, 60)
    sizes = truth.curve(xs)
    fitted = fit_sigmoid(_samples(xs, np.ones(60), sizes))
    rms = float(np.sqrt(np.mean((fitted.curve(xs) - sizes) ** 2)))
    assert rms <= 0.01 * (truth.M - truth.m)
    assert fitted == fit_sigmoid(_samples(xs, np.ones(60), sizes))


def test_fit_sigmoid_flat_and_decreasing():
    xs = np.linspace(0, 10, 20)
    flat = fit_sigmoid(_samples(xs, np.ones(20), np.full(20, 42.0)))
    assert flat.m == flat.M == 42

    falling = SigmoidParams(m=50, M=800, b=1, c=-1.5, d=4)
    fitted = fit_sigmoid(_samples(xs, np.ones(20), falling.curve(xs)))
    curve = fitted.curve(np.sort(xs))
    assert np.all(np.diff(curve) <= 1e-6)


def test_sigmoid_is_bounded():
    p = SigmoidParams(m=10, M=90, b=0.5, c=3, d=1)
    zs = np.linspace(-1e3, 1e3, 10_001)
    f = p.curve(zs)
    assert np.all(f >= p.m) and np.all(f <= p.M)
    assert _canonical(90, 10, 2.0, 3, 1) == SigmoidParams(10, 90, 0.5, -3, 1)


def test_models_json_round_trip(tmp_path: Path):
    models = Models(LinearModel(2.0, 1.0, 0.9), SigmoidParams(1, 5, 1, 2, 3))
    models.save(tmp_path / "models.json")
    assert Models.load(tmp_path / "models.json") == models


def test_models_load_rejects_bad_files(tmp_path: Path):
    path = tmp_path / "models.json"
    good = json.loads(
        Models(LinearModel(1.0, 0.0), SigmoidParams(1, 5, 1, 2, 3)).to_json()
    )
    inverted = dict(good, sigmoid=dict(good["sigmoid"], m=9.0, M=2.0))
    for text in [
        json.dumps(inverted),
        json.dumps({"linear": good["linear"]}),
        json.dumps(dict(good, linear={"a": 1.0})),
        "{not json",
    ]:
        path.write_text(text)
        try:
            Models.load(path)
        except CorruptFile:
            pass
        else:
            assert False, f"accepted {text}"
