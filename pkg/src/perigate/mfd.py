"""Region MFDs: flow laws, critical/jam accumulations, disrupted variants.

Two functional forms are supported: a cubic polynomial (the usual fit for
a city-centre region) and a smoothed method-of-cuts form whose smoothing
parameter ``lam`` plays the role of an infrastructure potential. Both are
immutable after construction and safe to share across worker processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DomainError, InvariantError

# absolute tolerance of the critical-accumulation search, in vehicles
CRIT_SEARCH_TOL = 0.1

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class CubicPolynomial:
    """G(n) = a*n^3 + b*n^2 + c*n with n in vehicles and G in veh/s."""

    a: float
    b: float
    c: float

    def raw_flow(self, n):
        n = np.asarray(n, dtype=float)
        return ((self.a * n + self.b) * n + self.c) * n


@dataclass(frozen=True)
class SmoothedCuts:
    """Soft minimum of free-flow, capacity and backward-wave cuts.

    Cuts are normalised by the capacity flow so ``lam`` is dimensionless;
    a larger ``lam`` pulls the whole diagram down (less efficiently used
    infrastructure).
    """

    free_flow_speed: float  # veh/s of flow gained per vehicle, at n -> 0
    capacity_flow: float  # veh/s
    backward_wave: float  # veh/s of flow lost per vehicle near jam
    jam_accumulation: float  # veh
    lam: float

    def raw_flow(self, n):
        return smoothed_cuts_flow(
            self.free_flow_speed,
            self.capacity_flow,
            self.backward_wave,
            self.jam_accumulation,
            self.lam,
            n,
        )


MfdForm = Union[CubicPolynomial, SmoothedCuts]


def smoothed_cuts_flow(v_f, capacity, w, n_jam, lam, n):
    """Log-sum-exp soft minimum of the three capacity-normalised cuts.

    Returns capacity * softmin(v_f*n/C, 1, w*(n_jam - n)/C) clamped at 0.
    """
    if lam <= 0.0:
        raise DomainError(f"smoothing parameter must be positive, got {lam}")
    if min(v_f, capacity, w, n_jam) <= 0.0:
        raise DomainError("all cut parameters must be positive")
    n = np.asarray(n, dtype=float)
    q1 = v_f * n / capacity
    q3 = w * (n_jam - n) / capacity
    # shift by the hard minimum so the exponentials never underflow to 0
    m = np.minimum(np.minimum(q1, 1.0), q3)
    s = (
        np.exp(-(q1 - m) / lam)
        + np.exp(-(1.0 - m) / lam)
        + np.exp(-(q3 - m) / lam)
    )
    return np.maximum(capacity * (m - lam * np.log(s)), 0.0)


def _golden_max(fn, lo: float, hi: float, tol: float) -> float:
    """Golden-section search for the maximiser of a unimodal fn on [lo, hi]."""
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def _check_unimodal(fn, n_cap: float) -> None:
    """Reject flow laws that dip and rise again on [0, n_cap]."""
    grid = np.linspace(0.0, n_cap, 512)
    diffs = np.diff(fn(grid))
    signs = np.sign(diffs)
    signs = signs[signs != 0.0]
    if signs.size and np.any(np.diff(signs) > 0):
        raise InvariantError("flow law is not unimodal on [0, n_cap]")


def _cubic_caps(form: CubicPolynomial) -> tuple[float, float]:
    """Jam and critical accumulation of a cubic flow law.

    The critical point is the smaller root of G'. The jam accumulation is
    the largest positive root of G when one exists (bisection past the
    critical point); the shipped default cubic never actually reaches zero
    flow, in which case the stationary point where the flow bottoms out is
    used as the effective gridlock accumulation.
    """
    a, b, c = form.a, form.b, form.c
    if a <= 0.0 or c <= 0.0:
        raise InvariantError("cubic MFD needs a > 0 and positive free-flow slope")
    disc = 4.0 * b * b - 12.0 * a * c
    if disc <= 0.0:
        raise InvariantError("cubic MFD has no interior maximum")
    sq = math.sqrt(disc)
    n_crit = (-2.0 * b - sq) / (6.0 * a)
    n_trough = (-2.0 * b + sq) / (6.0 * a)
    if n_crit <= 0.0:
        raise InvariantError("critical accumulation must be positive")

    def g(n):
        return ((a * n + b) * n + c) * n

    # look for a zero crossing between the peak and (well past) the trough
    lo, hi = n_crit, 2.0 * n_trough
    if g(hi) >= 0.0 and g(n_trough) >= 0.0:
        return n_trough, n_crit
    hi = n_trough if g(n_trough) < 0.0 else hi
    while hi - lo > 1e-9 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), n_crit


@dataclass(frozen=True)
class MfdSpec:
    """One region's MFD with cached critical and jam accumulations."""

    form: MfdForm
    n_cap: float  # gridlock accumulation, veh
    n_crit: float  # accumulation of maximal flow, veh

    @classmethod
    def from_form(cls, form: MfdForm) -> "MfdSpec":
        if isinstance(form, CubicPolynomial):
            n_cap, n_crit = _cubic_caps(form)
        elif isinstance(form, SmoothedCuts):
            n_cap = form.jam_accumulation
            n_crit = _golden_max(
                lambda n: float(form.raw_flow(n)), 0.0, n_cap, CRIT_SEARCH_TOL
            )
        else:
            raise DomainError(f"unknown MFD form: {form!r}")
        spec = cls(form=form, n_cap=n_cap, n_crit=n_crit)
        _check_unimodal(spec.flow, n_cap)
        if not 0.0 < n_crit < n_cap:
            raise InvariantError(
                f"critical accumulation {n_crit} outside (0, {n_cap})"
            )
        return spec

    def flow(self, n):
        """Completion flow G(n) in veh/s; zero beyond n_cap, never negative."""
        n = np.asarray(n, dtype=float)
        if np.any(n < 0.0):
            raise DomainError("accumulation must be non-negative")
        out = np.maximum(self.form.raw_flow(n), 0.0)
        out = np.where(n > self.n_cap, 0.0, out)
        return out if out.ndim else float(out)

    @property
    def max_flow(self) -> float:
        return float(self.flow(self.n_crit))


def completion_rate(spec: MfdSpec, n) -> float:
    """Trip completion flow of a region holding n vehicles."""
    return spec.flow(n)


def critical_accumulation(spec: MfdSpec) -> float:
    """Accumulation maximising the completion flow (cached at construction)."""
    return spec.n_crit


def apply_speed_drop(spec: MfdSpec, delta: float) -> MfdSpec:
    """Scale the flow axis by (1 - delta), leaving both accumulations fixed."""
    _check_drop(delta)
    s = 1.0 - delta
    form = spec.form
    if isinstance(form, CubicPolynomial):
        new_form: MfdForm = CubicPolynomial(form.a * s, form.b * s, form.c * s)
    else:
        new_form = SmoothedCuts(
            form.free_flow_speed * s,
            form.capacity_flow * s,
            form.backward_wave * s,
            form.jam_accumulation,
            form.lam,
        )
    return MfdSpec.from_form(new_form)


def apply_capacity_drop(spec: MfdSpec, delta: float) -> MfdSpec:
    """Contract both axes by (1 - delta), preserving the free-flow slope."""
    _check_drop(delta)
    s = 1.0 - delta
    form = spec.form
    if isinstance(form, CubicPolynomial):
        new_form: MfdForm = CubicPolynomial(form.a / (s * s), form.b / s, form.c)
    else:
        new_form = SmoothedCuts(
            form.free_flow_speed,
            form.capacity_flow * s,
            form.backward_wave,
            form.jam_accumulation * s,
            form.lam,
        )
    return MfdSpec.from_form(new_form)


def with_lambda(spec: MfdSpec, lam: float) -> MfdSpec:
    """Cuts-form spec with the infrastructure potential replaced by lam."""
    form = spec.form
    if not isinstance(form, SmoothedCuts):
        raise DomainError("infrastructure-potential disruption needs a cuts-form MFD")
    return MfdSpec.from_form(
        SmoothedCuts(
            form.free_flow_speed,
            form.capacity_flow,
            form.backward_wave,
            form.jam_accumulation,
            lam,
        )
    )


def _check_drop(delta: float) -> None:
    if not 0.0 <= delta < 1.0:
        raise DomainError(f"drop fraction must be in [0, 1), got {delta}")


# -- shipped defaults --------------------------------------------------------

# inner-region cubic, coefficients in veh/h converted to veh/s
_INNER_A = 1.4877e-7 / 3600.0
_INNER_B = -2.9815e-3 / 3600.0
_INNER_C = 15.0912 / 3600.0

# outer region: accumulation axis doubled, flow axis scaled for a larger
# periphery; both ratios are config-overridable
OUTER_ACCUM_RATIO = 2.0
OUTER_FLOW_RATIO = 1.5

# default smoothed-cuts parameterisation, calibrated so the lam = 0.05 form
# peaks within 10% of the cubic's maximum flow and the critical accumulation
# grows with lam (free-flow slope steeper than the backward wave)
CUTS_FREE_FLOW = 2.2e-3
CUTS_CAPACITY = 6.4
CUTS_BACKWARD = 0.94e-3
CUTS_JAM = 10000.0
LAMBDA_BASE = 0.05


def default_inner_mfd() -> MfdSpec:
    """Cubic inner-region MFD (peak ~6.3 veh/s at ~3392 veh)."""
    return MfdSpec.from_form(CubicPolynomial(_INNER_A, _INNER_B, _INNER_C))


def default_outer_mfd(
    accum_ratio: float = OUTER_ACCUM_RATIO, flow_ratio: float = OUTER_FLOW_RATIO
) -> MfdSpec:
    """Inner cubic stretched along the accumulation axis and scaled in flow."""
    r, k = accum_ratio, flow_ratio
    return MfdSpec.from_form(
        CubicPolynomial(
            _INNER_A * k / r**3, _INNER_B * k / r**2, _INNER_C * k / r
        )
    )


def default_cuts_mfd(lam: float = LAMBDA_BASE) -> MfdSpec:
    """Smoothed-cuts inner-region MFD at a given infrastructure potential."""
    return MfdSpec.from_form(
        SmoothedCuts(CUTS_FREE_FLOW, CUTS_CAPACITY, CUTS_BACKWARD, CUTS_JAM, lam)
    )
