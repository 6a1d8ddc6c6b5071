"""Moving-ellipse refinement over the events of one feature."""

from dataclasses import dataclass, field

import numpy as np

from .. import nls
from ..errors import InvalidArgumentError, RefineFailed
from . import conic

MIN_EVENTS = 12
SOFT_ABS_SCALE = 1e-6


@dataclass(eq=False)
class MovingEllipseFeature:
    """A conic translating with constant image velocity.

    ``coeffs`` describe the ellipse at ``t0_us`` (gauge ``alpha + gamma = 1``);
    the whole curve moves with ``velocity`` (pixels per second), so
    ``center(t) = center(t0) + velocity * (t - t0)``.
    """

    t0_us: int
    grid_id: int
    coeffs: np.ndarray
    velocity: np.ndarray
    half_span: float = 0.002  # seconds
    e_fit: float = 0.0
    cost: float = 0.0
    center0: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.t0_us = int(self.t0_us)
        self.grid_id = int(self.grid_id)
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        self.center0 = conic.center(self.coeffs)

    @property
    def Q(self):
        return conic.conic_matrix(self.coeffs)

    @property
    def t0(self):
        return self.t0_us * 1e-6

    def center(self, t):
        """Center at time(s) ``t`` in seconds."""
        dt = np.asarray(t, dtype=float) - self.t0
        return self.center0 + dt[..., None] * self.velocity

    def center_at_offset(self, offset):
        """Center at ``t0 + offset`` seconds."""
        offset = np.asarray(offset, dtype=float)
        return self.center0 + offset[..., None] * self.velocity


def moving_conic_residuals(params, xc, yc, tau, jacobian=False):
    """Algebraic residuals of the moving conic in centered coordinates."""
    a, b, d, e, f, vx, vy = params
    X = xc - vx * tau
    Y = yc - vy * tau
    g = 1.0 - a
    r = a * X * X + b * X * Y + g * Y * Y + d * X + e * Y + f
    if not jacobian:
        return r
    rX = 2 * a * X + b * Y + d
    rY = b * X + 2 * g * Y + e
    J = np.stack([X * X - Y * Y, X * Y, X, Y, np.ones_like(X), -tau * rX, -tau * rY], axis=1)
    return r, J


def refine_moving_ellipse(xs, ys, ts_us, t0_us, half_span=0.002, grid_id=-1, options=None):
    """Jointly fit conic and velocity to the events of one feature.

    Parameters
    ----------
    xs, ys : array_like
        Event pixel coordinates.
    ts_us : array_like of int
        Event timestamps in microseconds.
    t0_us : int
        Window start; the returned conic describes the ellipse at this time.
    half_span : float
        Half the window length in seconds.

    Returns
    -------
    MovingEllipseFeature
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    offs = np.asarray(ts_us, dtype=np.int64) - int(t0_us)
    if xs.size < MIN_EVENTS:
        raise RefineFailed(f"{xs.size} events, need at least {MIN_EVENTS}")
    if not (xs.size == ys.size == offs.size):
        raise InvalidArgumentError("event arrays differ in length")
    # reference time: mean event time, expressed relative to t0 only
    t_ref = offs.mean() * 1e-6
    tau = offs * 1e-6 - t_ref
    mx, my = xs.mean(), ys.mean()
    xc, yc = xs - mx, ys - my
    try:
        c0, _ = conic.fit_conic(xc, yc)
        c0 = conic.normalize(c0)
    except (InvalidArgumentError, np.linalg.LinAlgError) as exc:
        raise RefineFailed(f"initial conic fit failed: {exc}") from exc
    if not conic.is_ellipse(c0):
        raise RefineFailed("initial fit is not an ellipse")
    p0 = np.array([c0[0], c0[1], c0[3], c0[4], c0[5], 0.0, 0.0])

    block = nls.ParameterBlock(p0.copy(), name="moving_conic")

    def evaluate(values, need_jac):
        p = values[0]
        a, b = p[0], p[1]
        if not b * b - 4 * a * (1 - a) < 0:
            # leaving the ellipse family: make the trial step fail
            return np.full(xc.size, np.nan), None
        if need_jac:
            return moving_conic_residuals(p, xc, yc, tau, jacobian=True)
        return moving_conic_residuals(p, xc, yc, tau), None

    prob = nls.Problem([block], evaluate)
    opts = options or nls.SolverOptions(max_iterations=100, function_tolerance=1e-12)
    report = nls.solve(prob, nls.RobustLoss("soft_l1", SOFT_ABS_SCALE), opts)
    p = prob.blocks[0].value
    a, b, d, e, f, vx, vy = p
    c_ref = np.array([a, b, 1.0 - a, d, e, f])
    if not conic.is_ellipse(c_ref):
        raise RefineFailed("refined conic is not an ellipse")
    V = np.array([vx, vy])
    X = xc - vx * tau
    Y = yc - vy * tau
    e_fit = float(np.sqrt(np.mean(conic.sampson_distance(c_ref, X, Y) ** 2)))
    # move from the centered frame at t_ref to image coordinates at t0
    shift = np.array([mx, my]) - V * t_ref
    c_t0 = conic.normalize(conic.translate(c_ref, shift))
    return MovingEllipseFeature(
        t0_us=int(t0_us),
        grid_id=grid_id,
        coeffs=c_t0,
        velocity=V,
        half_span=half_span,
        e_fit=e_fit,
        cost=float(report.final_cost),
    )
