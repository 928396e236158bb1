"""The filter as a piecewise-deterministic Markov process.

Characteristics on a face with label a and level set A:

    flow        phi(t, nu)  = normalized nu_A e^{t Lambda_A}
    jump rate   lambda(nu)  = -nu Lambda 1_A
    jump law    Q(nu, .)    = atoms H_b[nu Lambda] with mass
                              q(nu, b) = nu Lambda 1_{h^{-1}(b)} / lambda(nu)

Sojourn survival has the closed form (nu_A e^{t Lambda_A}) . 1 (the log
derivative of the unnormalized-filter mass is the negated jump rate along
the flow).  Exit-time laws come in two independent routes: the nonlinear
normalized ODE here, and the classical sub-generator oracle in chain.py.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp

from .chain import RandomSource, RateMatrix, StateNotInSubset, sub_generator
from .filtering import FacePoint, FilterModel, FilterTrajectory, JumpRecord

DEG_TOL = 1e-12
BISECT_TOL = 1e-10
BISECT_MAX_ITER = 80


class LabelEqualsSource(ValueError):
    pass


class JumpLaw:
    """Finitely supported post-jump law: (target FacePoint, mass) atoms."""

    __slots__ = ("atoms", "source", "degenerate")

    def __init__(self, atoms, source: FacePoint, degenerate: bool = False):
        self.atoms = list(atoms)
        self.source = source
        self.degenerate = degenerate
        total = sum(m for _, m in self.atoms)
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"atom masses sum to {total}, expected 1")
        for target, mass in self.atoms:
            if mass < 0:
                raise ValueError("negative atom mass")
            if target.label == source.label:
                raise ValueError("jump target label equals source label")


PdpTrajectory = FilterTrajectory


class BeliefPdp:
    """PDP view of the filter; requires at least two observation labels."""

    def __init__(self, model: FilterModel):
        if len(model.obs.labels) < 2:
            raise ValueError("PDP representation requires at least two labels")
        self.model = model

    def jump_rate(self, nu: FacePoint) -> float:
        """lambda(nu) = -nu Lambda 1_{h^{-1}(a)} (nonnegative on the face)."""
        face = self.model.faces[nu.label]
        rate = -float((nu.weights @ self.model.rate.entries)[face].sum())
        return max(rate, 0.0)

    def jump_measure(self, nu: FacePoint, deg_tol: float = DEG_TOL) -> JumpLaw:
        """Atoms H_b[nu Lambda] with mass q(nu, b) for b != a.

        When lambda(nu) < deg_tol the uniform fallback over the other labels
        is returned, flagged degenerate (never sampled since the rate is 0).
        """
        model = self.model
        vec = nu.weights @ model.rate.entries
        lam = -float(vec[model.faces[nu.label]].sum())
        others = [b for b in model.obs.labels if b != nu.label]
        if lam < deg_tol:
            share = 1.0 / len(others)
            atoms = [(model.restrict_normalize(vec, b), share) for b in others]
            return JumpLaw(atoms, nu, degenerate=True)
        atoms = []
        for b in others:
            flux = float(vec[model.faces[b]].sum())
            if flux <= 0:
                continue
            atoms.append((model.restrict_normalize(vec, b), flux / lam))
        return JumpLaw(atoms, nu)

    def sojourn_survival(self, nu: FacePoint, t: float) -> float:
        """Closed form (nu_A e^{t Lambda_A}) . 1 = exp(-integrated jump rate)."""
        if t < 0:
            raise ValueError("t must be nonnegative")
        if t == 0:
            return 1.0
        face = self.model.faces[nu.label]
        wa = self.model._sub[nu.label].propagate(nu.weights[face], t)
        return float(min(max(wa.sum(), 0.0), 1.0))

    def sojourn_from_uniform(self, nu: FacePoint, u: float, horizon: float):
        """Inverse transform at a given uniform draw; None means censored.

        Bisection to 1e-10 time tolerance; plateaus (lambda = 0 stretches)
        resolve to their left endpoint.
        """
        if self.sojourn_survival(nu, horizon) > u:
            return None
        lo, hi = 0.0, float(horizon)
        for _ in range(BISECT_MAX_ITER):
            if hi - lo <= BISECT_TOL:
                break
            mid = 0.5 * (lo + hi)
            if self.sojourn_survival(nu, mid) > u:
                lo = mid
            else:
                hi = mid
        return hi

    def sample_sojourn(self, nu: FacePoint, horizon: float, rng):
        """Sample the sojourn time on [0, horizon]; None when censored."""
        gen = rng.generator() if isinstance(rng, RandomSource) else rng
        return self.sojourn_from_uniform(nu, gen.random(), horizon)

    def simulate_pdp(self, nu0: FacePoint, horizon: float, rng) -> PdpTrajectory:
        """Alternate sojourn sampling with draws from the jump law at the pre-jump point."""
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        gen = rng.generator() if isinstance(rng, RandomSource) else rng
        current = nu0
        t = 0.0
        segments = [(0.0, current)]
        jumps = []
        while True:
            s = self.sojourn_from_uniform(current, gen.random(), horizon - t)
            if s is None:
                break
            t += s
            pre = self.model.flow(s, current)
            law = self.jump_measure(pre)
            masses = np.array([m for _, m in law.atoms])
            k = int(np.searchsorted(np.cumsum(masses), gen.random(), side="right"))
            k = min(k, len(law.atoms) - 1)
            post = law.atoms[k][0]
            jumps.append(JumpRecord(t, pre, post))
            segments.append((t, post))
            current = post
        return PdpTrajectory(self.model, segments, jumps, horizon)

    def jump_time_density(self, nu: FacePoint, t: float, b) -> float:
        """Joint density of (next jump at t, target label b).

        Equals survival(t) * phi(t, nu) Lambda 1_{h^{-1}(b)}: the marginal
        jump-time density times q(phi(t, nu), b), written without the ratio
        so zero-rate points need no special casing.
        """
        if b == nu.label:
            raise LabelEqualsSource("target label equals source label")
        if t < 0:
            raise ValueError("t must be nonnegative")
        model = self.model
        face = model.faces[nu.label]
        wa = model._sub[nu.label].propagate(nu.weights[face], t)
        vec = np.zeros(model.n)
        vec[face] = wa
        flux = float((vec @ model.rate.entries)[model.faces[b]].sum())
        return max(flux, 0.0)


def exit_survival_nonlinear_curve(rate: RateMatrix, subset, i: int, ts,
                                  rtol: float = 1e-10, atol: float = 1e-12) -> np.ndarray:
    """P_i(tau_A > t) on a grid, via the normalized scalar ODE.

    Integrates y' = y Lambda_A - (y Lambda_A 1) y from delta_i together with
    the accumulated rate z' = y Lambda_A 1, and returns exp(z(t)).
    """
    subset = list(subset)
    if i not in subset:
        raise StateNotInSubset(f"state {i} not in subset")
    sub = sub_generator(rate, subset)
    d = len(subset)
    p = subset.index(i)
    ts = np.asarray(ts, dtype=float)
    if (ts < 0).any():
        raise ValueError("times must be nonnegative")
    t_end = float(ts.max(initial=0.0))
    if t_end == 0.0:
        return np.ones_like(ts)

    def rhs(_, yz):
        y = yz[:d]
        r = y @ sub
        s = r.sum()
        return np.concatenate([r - s * y, [s]])

    y0 = np.zeros(d + 1)
    y0[p] = 1.0
    sol = solve_ivp(rhs, (0.0, t_end), y0, method="DOP853", rtol=rtol, atol=atol,
                    dense_output=True)
    if not sol.success:
        raise RuntimeError(f"exit-time ODE integration failed: {sol.message}")
    z = sol.sol(ts)[d]
    return np.exp(z)


def exit_survival_nonlinear(rate: RateMatrix, subset, i: int, t: float, **kw) -> float:
    """Scalar version of exit_survival_nonlinear_curve."""
    return float(exit_survival_nonlinear_curve(rate, subset, i, [t], **kw)[0])
