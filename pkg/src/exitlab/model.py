"""Exit problem definition: interval, drift, diffusion and linearization data."""
from dataclasses import dataclass
from importlib import resources
import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .expr import ExpressionError, ScalarFunction, parse_function

GRID_POINTS = 10_000
LAMBDA_STEP = 1e-5
LAMBDA_RTOL = 1e-6
ZERO_ATOL = 1e-10
PRESETS = ("linear-ou", "linear-asym", "cubic", "varsigma")


class ModelError(ValueError):
    """Raised when a model violates its invariants; ``problems`` lists each violation."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ModelSpec:
    """Validated model ``dX = b(X) dt + eps sigma(X) dW`` on ``[q_minus, q_plus]``.

    ``lambda_`` is b'(0) and ``eta_bound`` bounds ``|eta|`` where
    ``b(x) = lambda_ x + eta(x) x^2``.  ``R`` carries an optional requested
    neighborhood half-width from the config file.
    """

    b: ScalarFunction
    sigma: ScalarFunction
    q_minus: float
    q_plus: float
    lambda_: float
    eta_bound: float
    R: Optional[float] = None

    def eta(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (self.b(x) - self.lambda_ * x) / x**2

    @property
    def is_linear(self):
        """True when the drift is exactly linear on the interval (eta vanishes)."""
        return self.eta_bound <= 1e-12

    @property
    def sigma0(self):
        return float(self.sigma(0.0))

    def to_dict(self):
        out = {"b": self.b.text, "sigma": self.sigma.text,
               "q_minus": self.q_minus, "q_plus": self.q_plus, "lambda": self.lambda_}
        if self.R is not None:
            out["R"] = self.R
        return out

    @property
    def content_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Neighborhood:
    """Half-width ``R`` in linearized coordinates and its preimage ``[v_minus, v_plus]``."""

    R: float
    v_minus: float
    v_plus: float


def central_slope(fun, x, h):
    """Fourth-order central difference; exp(lambda t) amplifies any O(h^2) error in lambda."""
    d1 = fun(x + h) - fun(x - h)
    d2 = fun(x + 2 * h) - fun(x - 2 * h)
    return float((8 * d1 - d2) / (12 * h))


def _bisect_zero(fun, a, b, iters=60):
    fa = fun(a)
    for _ in range(iters):
        m = 0.5 * (a + b)
        fm = fun(m)
        if fm == 0.0:
            return m
        if np.sign(fm) == np.sign(fa):
            a, fa = m, fm
        else:
            b = m
    return 0.5 * (a + b)


def _extra_zeros(b, q_minus, q_plus):
    """Locations where b fails to have the sign of x on a grid, refined by bisection."""
    grid = np.linspace(q_minus, q_plus, GRID_POINTS)
    grid = np.union1d(grid, [q_minus, q_plus])
    values = b(grid)
    scale = max(abs(q_minus), abs(q_plus))
    # the repelling zero itself is excluded by a small window around 0
    away = np.abs(grid) > 1e-6 * scale
    bad = away & (values * np.sign(grid) <= 0)
    if not bad.any():
        return []
    found = []
    idx = np.flatnonzero(bad)
    for i in idx:
        x = grid[i]
        if values[i] == 0.0:
            found.append(float(x))
            continue
        # walk back toward the origin to the neighbouring point of correct sign
        j = i - 1 if x > 0 else i + 1
        if 0 <= j < grid.size and away[j] and not bad[j]:
            found.append(float(_bisect_zero(lambda t: float(b(t)), grid[j], x)))
        elif not found:
            found.append(float(x))
    return sorted(set(round(z, 12) for z in found))


def validate_model(b, sigma, q_minus, q_plus, lambda_=None, R=None):
    """Check the exit-problem assumptions and return a :class:`ModelSpec`.

    ``b`` and ``sigma`` may be expression strings or parsed functions.  When
    ``lambda_`` is omitted it is estimated by a central difference of ``b`` at
    0; when supplied it must agree with that estimate.  Every violated
    assumption is reported in a single :class:`ModelError`.
    """
    problems = []
    try:
        b = b if isinstance(b, ScalarFunction) else parse_function(b)
        sigma = sigma if isinstance(sigma, ScalarFunction) else parse_function(sigma)
    except ExpressionError as exc:
        raise ModelError(f"cannot parse model function: {exc}") from exc
    q_minus, q_plus = float(q_minus), float(q_plus)
    if not q_minus < 0.0 < q_plus:
        raise ModelError(f"interval must satisfy q_minus < 0 < q_plus, got [{q_minus}, {q_plus}]")

    b0 = float(b(0.0))
    if abs(b0) > ZERO_ATOL:
        problems.append(f"b(0) = {b0:.3g} is not zero")
    slope = central_slope(b, 0.0, LAMBDA_STEP)
    if lambda_ is None:
        lambda_ = slope
    else:
        lambda_ = float(lambda_)
        if abs(lambda_ - slope) > LAMBDA_RTOL * max(abs(slope), 1e-300):
            problems.append(f"lambda = {lambda_} disagrees with b'(0) ~ {slope:.10g}")
    if not lambda_ > 0:
        problems.append(f"lambda = {lambda_:.6g} must be positive (zero of b must repel)")
    s0 = float(sigma(0.0))
    if not s0 > 0:
        problems.append(f"sigma(0) = {s0:.6g} must be positive")
    for z in _extra_zeros(b, q_minus, q_plus):
        problems.append(f"b has a second zero inside the interval near x = {z:.6g}")
    if R is not None and not float(R) > 0:
        problems.append(f"requested R = {R} must be positive")
    if problems:
        raise ModelError(problems)

    grid = np.linspace(q_minus, q_plus, GRID_POINTS)
    # cancellation in (b(x) - lambda x)/x^2 blows up near 0; eta is continuous there
    grid = grid[np.abs(grid) > 1e-3 * min(-q_minus, q_plus)]
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = (b(grid) - lambda_ * grid) / grid**2
    eta_bound = float(np.max(np.abs(eta)))
    return ModelSpec(b=b, sigma=sigma, q_minus=q_minus, q_plus=q_plus,
                     lambda_=float(lambda_), eta_bound=eta_bound,
                     R=None if R is None else float(R))


def model_from_dict(data):
    known = {"b", "sigma", "q_minus", "q_plus", "lambda", "R"}
    unknown = set(data) - known
    if unknown:
        raise ModelError(f"unknown model fields: {sorted(unknown)}")
    missing = {"b", "sigma", "q_minus", "q_plus"} - set(data)
    if missing:
        raise ModelError(f"missing model fields: {sorted(missing)}")
    return validate_model(data["b"], data["sigma"], data["q_minus"], data["q_plus"],
                          lambda_=data.get("lambda"), R=data.get("R"))


def load_model(source):
    """Load a model from a JSON file path or a preset name such as ``"cubic"``.

    A missing file raises :class:`FileNotFoundError` naming the path.
    """
    path = Path(source)
    if path.is_file():
        return model_from_dict(json.loads(path.read_text()))
    name = path.name[:-5] if path.name.endswith(".json") else path.name
    if name in PRESETS and not path.parent.name:
        return preset(name)
    raise FileNotFoundError(f"model file not found: {source}")


def preset(name):
    text = resources.files("exitlab.presets").joinpath(f"{name}.json").read_text()
    return model_from_dict(json.loads(text))


def choose_neighborhood(model, requested_R=None, table=None, cfg=None):
    """Pick ``R`` and the neighborhood ``g([-R, R])`` inside the interval.

    Without a request (and without ``model.R``) the default is half the
    smaller conjugated endpoint, ``0.5 * min(|f(q_minus)|, f(q_plus))``.
    """
    from .flow import DEFAULT_FLOW, build_conjugation_table, inverse_conjugation

    cfg = cfg or DEFAULT_FLOW
    if table is None:
        table = build_conjugation_table(model, cfg=cfg)
    if requested_R is None:
        requested_R = model.R
    if requested_R is None:
        R = 0.5 * min(-table.f_qminus, table.f_qplus)
    else:
        R = float(requested_R)
        if not R > 0:
            raise ModelError(f"R = {R} must be positive")
        if not (R < table.f_qplus and -R > table.f_qminus):
            raise ModelError(
                f"R = {R} too large: g(+-R) leaves the interval "
                f"(f-image is [{table.f_qminus:.6g}, {table.f_qplus:.6g}])")
    v_minus = inverse_conjugation(model, -R, cfg=cfg, table=table)
    v_plus = inverse_conjugation(model, R, cfg=cfg, table=table)
    xs = np.linspace(v_minus, v_plus, 1001)
    if np.any(model.sigma(xs) <= 0):
        raise ModelError(f"sigma-tilde vanishes on [-{R}, {R}]")
    return Neighborhood(R=float(R), v_minus=float(v_minus), v_plus=float(v_plus))
