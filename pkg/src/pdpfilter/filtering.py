"""Exact filter of a CTMC under noise-free observation Y = h(X).

The filter lives on the effective simplex: the union over labels a of the
faces of probability vectors supported on h^{-1}(a).  Between observation
jumps it follows the flow

    y' = 1_A * (y Lambda) - (y Lambda 1_A) y,      A = h^{-1}(a),

whose closed form is the normalization of x_A e^{t Lambda_A} (the
unnormalized filter solves u' = u Lambda_A on the face).  At an observation
jump to label b the filter restarts at the restriction/normalization of
(pre-jump) Lambda to h^{-1}(b).
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np
from scipy.linalg import expm

from .chain import (
    Distribution,
    ObservationModel,
    PiecewisePath,
    RateMatrix,
    sub_generator,
)

FALLBACK_TOL = 1e-12
DEG_TOL = 1e-12
NEG_FACE_TOL = 1e-12


class NegativeFaceMass(ValueError):
    """Input vector has genuinely negative entries on the target face."""


class FaceMassVanished(RuntimeError):
    """Flow mass hit zero; cannot occur for valid inputs (defensive)."""


class DegenerateJump(RuntimeError):
    """Jump denominator fell below tolerance: observation path inconsistent with model."""

    def __init__(self, time: float, value: float):
        self.time, self.value = time, value
        super().__init__(f"degenerate jump at t={time}: denominator {value}")


class FacePoint:
    """A point of the effective simplex: a label plus weights on its level set."""

    __slots__ = ("label", "weights", "degenerate")

    def __init__(self, label, weights: np.ndarray, degenerate: bool = False):
        self.label = label
        self.weights = weights
        self.degenerate = degenerate
        weights.setflags(write=False)

    def __repr__(self):
        return f"FacePoint(label={self.label!r}, weights={self.weights})"


class _SubExp:
    """x @ e^{tM} for a fixed small matrix M, with a cached-eigendecomposition
    fast path (used when the eigenvector matrix is well conditioned) and a
    scipy expm fallback."""

    def __init__(self, matrix: np.ndarray):
        self.matrix = matrix
        self.ok = False
        d = matrix.shape[0]
        if d == 1:
            self.ok = True
            self.vals = matrix[0].astype(complex)
            self.vecs = np.ones((1, 1), dtype=complex)
            self.inv = np.ones((1, 1), dtype=complex)
            return
        try:
            vals, vecs = np.linalg.eig(matrix)
            cond = np.linalg.cond(vecs)
            recon = vecs @ np.diag(vals) @ np.linalg.inv(vecs)
            scale = max(1.0, np.abs(matrix).max())
            if cond < 1e6 and np.abs(recon - matrix).max() < 1e-10 * scale:
                self.ok = True
                self.vals = vals
                self.vecs = vecs
                self.inv = np.linalg.inv(vecs)
        except np.linalg.LinAlgError:
            pass

    def expm(self, t: float) -> np.ndarray:
        if self.ok:
            return ((self.vecs * np.exp(t * self.vals)) @ self.inv).real
        return expm(t * self.matrix)

    def propagate(self, x: np.ndarray, t: float) -> np.ndarray:
        """Row vector x advanced to x e^{tM}."""
        if self.ok:
            return (((x @ self.vecs) * np.exp(t * self.vals)) @ self.inv).real
        return x @ expm(t * self.matrix)

    def propagate_times(self, x: np.ndarray, ts: np.ndarray) -> np.ndarray:
        """x e^{t M} for a batch of times; returns (len(ts), d)."""
        if self.ok:
            coef = x @ self.vecs
            return ((np.exp(np.outer(ts, self.vals)) * coef) @ self.inv).real
        return np.array([x @ expm(t * self.matrix) for t in ts])


class JumpRecord:
    __slots__ = ("time", "pre", "post")

    def __init__(self, time: float, pre: FacePoint, post: FacePoint):
        self.time, self.pre, self.post = time, pre, post


class FilterModel:
    """Bundles a generator and an observation model; hosts all filter operations."""

    def __init__(self, rate: RateMatrix, obs: ObservationModel):
        if obs.n != rate.n:
            raise ValueError("observation model size does not match generator")
        self.rate = rate
        self.obs = obs
        self.n = rate.n
        self.faces = {a: obs.level_sets[a] for a in obs.labels}
        self._sub = {a: _SubExp(sub_generator(rate, self.faces[a])) for a in obs.labels}
        # off-face blocks Lambda[A, B] used by jump laws
        self._blocks = {
            a: {b: rate.entries[np.ix_(self.faces[a], self.faces[b])] for b in obs.labels if b != a}
            for a in obs.labels
        }
        self._dense_exp_cache = {}

    # -- construction / restriction ------------------------------------

    def face_point(self, label, weights) -> FacePoint:
        """Validated FacePoint constructor."""
        w = np.array(weights, dtype=float).ravel()
        if len(w) != self.n:
            raise ValueError("weight vector has wrong length")
        face = self.faces[label]
        off = np.delete(w, face)
        if np.abs(off).max(initial=0.0) > 0:
            raise ValueError("weights must vanish off the face")
        if (w[face] < -1e-12).any():
            raise ValueError("negative weight")
        if abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("weights must sum to 1")
        return FacePoint(label, w)

    def restrict_normalize(self, mu, a, fallback_tol: float = FALLBACK_TOL) -> FacePoint:
        """Operator H_a: restrict mu to h^{-1}(a) and normalize.

        Entries off the face are ignored; entries on the face must be
        nonnegative (tiny negatives within 1e-12 are clipped).  If the face
        mass is below fallback_tol the uniform fallback measure on the face
        is returned with the degenerate flag set.
        """
        mu = np.asarray(mu.weights if isinstance(mu, Distribution) else mu, dtype=float).ravel()
        face = self.faces[a]
        vals = mu[face]
        if (vals < -NEG_FACE_TOL).any():
            raise NegativeFaceMass(f"negative mass on face {a!r}")
        vals = np.clip(vals, 0.0, None)
        mass = vals.sum()
        w = np.zeros(self.n)
        if mass < fallback_tol:
            w[face] = 1.0 / len(face)
            return FacePoint(a, w, degenerate=True)
        w[face] = vals / mass
        return FacePoint(a, w)

    # -- flow ------------------------------------------------------------

    def vector_field(self, y: FacePoint) -> np.ndarray:
        """F_a(y) = 1_A * (y Lambda) - (y Lambda 1_A) y."""
        face = self.faces[y.label]
        row = y.weights @ self.rate.entries
        out = np.zeros(self.n)
        out[face] = row[face]
        return out - row[face].sum() * y.weights

    def flow(self, t: float, x: FacePoint) -> FacePoint:
        """Closed-form flow: normalization of x_A e^{t Lambda_A} on the face."""
        if t < 0:
            raise ValueError("t must be nonnegative")
        face = self.faces[x.label]
        wa = self._sub[x.label].propagate(x.weights[face], t)
        mass = wa.sum()
        if mass <= 0:
            raise FaceMassVanished(f"flow mass {mass} at t={t}")
        w = np.zeros(self.n)
        w[face] = np.clip(wa, 0.0, None) / mass
        w[face] /= w[face].sum()
        return FacePoint(x.label, w)

    def flow_ode(self, t: float, x: FacePoint, step: float = 1e-3) -> FacePoint:
        """Fixed-step RK4 integration of the nonlinear field (cross-check of flow)."""
        if t == 0:
            return x
        face = self.faces[x.label]
        mask = np.zeros((1, self.n))
        mask[0, face] = 1.0
        y = _rk4_flow_batch(self.rate.entries, mask, x.weights[None, :], t, step)[0]
        mass = y.sum()
        # scale drift is O(step^4) per step and removed by the normalization
        # below; the guard only catches genuinely diverged integrations
        if abs(mass - 1.0) > 1e-3:
            raise FaceMassVanished(f"RK4 mass drifted to {mass}")
        w = np.zeros(self.n)
        w[face] = np.clip(y[face], 0.0, None)
        w /= w.sum()
        return FacePoint(x.label, w)

    # -- filtering --------------------------------------------------------

    def run_filter(self, obs_path: PiecewisePath, mu: Distribution, deg_tol: float = DEG_TOL) -> "FilterTrajectory":
        """Exact filter along an observation path.

        Pi_0 = H_{Y_0}[mu]; flows between observation jumps; at a jump to
        label b restarts at H_b[Pi_{T-} Lambda].  Raises DegenerateJump when
        the jump denominator is <= deg_tol (path inconsistent with the model).
        """
        Q = self.rate.entries
        current = self.restrict_normalize(mu, obs_path.initial_value)
        segments = [(0.0, current)]
        jumps = []
        t_prev = 0.0
        for tj, b in obs_path.jumps:
            pre = self.flow(tj - t_prev, current)
            vec = pre.weights @ Q
            den = vec[self.faces[b]].sum()
            if den <= deg_tol:
                raise DegenerateJump(tj, float(den))
            post = self.restrict_normalize(vec, b)
            jumps.append(JumpRecord(tj, pre, post))
            segments.append((tj, post))
            current = post
            t_prev = tj
        return FilterTrajectory(self, segments, jumps, obs_path.horizon)

    def discrete_filter(self, mu: Distribution, delta: float, obs_samples) -> list:
        """Discrete-time approximating filter on the grid k*delta.

        Pibar_0 = H_{Y_0}[mu]; Pibar_k = H_{Y_{k delta}}[Pibar_{k-1} e^{delta Lambda}].
        """
        obs_samples = list(obs_samples)
        if not obs_samples:
            raise ValueError("obs_samples must be nonempty")
        key = float(delta)
        P = self._dense_exp_cache.get(key)
        if P is None:
            P = expm(delta * self.rate.entries)
            self._dense_exp_cache[key] = P
        out = [self.restrict_normalize(mu, obs_samples[0])]
        for a in obs_samples[1:]:
            out.append(self.restrict_normalize(out[-1].weights @ P, a))
        return out

    def predict(self, pi, s: float) -> Distribution:
        """Law of X_{t+s} given observations to t: Pi_t e^{s Lambda}."""
        if s < 0:
            raise ValueError("s must be nonnegative")
        w = pi.weights if isinstance(pi, (FacePoint, Distribution)) else np.asarray(pi, float)
        if s == 0:
            return Distribution(np.array(w))
        return Distribution(w @ expm(s * self.rate.entries))


def _rk4_flow_batch(Q: np.ndarray, mask: np.ndarray, Y0: np.ndarray, t: float,
                    step: float, checkpoints=None):
    """Vectorized RK4 for the simplex flow field over a batch of face points.

    mask is a per-row indicator of the face; rows of Y0 are face points.
    If checkpoints is given, returns the batch state at those times
    (which must be multiples of the realized step); otherwise returns the
    final state at time t.
    """

    def field(Y):
        R = Y @ Q
        R = R * mask
        return R - R.sum(axis=1, keepdims=True) * Y

    n_steps = max(1, int(round(t / step)))
    h = t / n_steps
    Y = Y0.copy()
    out = []
    want = None
    if checkpoints is not None:
        want = {int(round(c / h)) for c in checkpoints}
        if 0 in want:
            out.append((0.0, Y.copy()))
    for k in range(n_steps):
        k1 = field(Y)
        k2 = field(Y + 0.5 * h * k1)
        k3 = field(Y + 0.5 * h * k2)
        k4 = field(Y + h * k3)
        Y = Y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if want is not None and (k + 1) in want:
            out.append(((k + 1) * h, Y.copy()))
    if checkpoints is not None:
        return out
    return Y


class FilterTrajectory:
    """Piecewise-deterministic filter path: flow segments plus jump records.

    Evaluation recomputes the closed-form flow from the enclosing segment
    start, so the object stays small and evaluation is exact.
    """

    def __init__(self, model: FilterModel, segments, jumps, horizon: float):
        self.model = model
        self.segments = list(segments)
        self.jumps = list(jumps)
        self.horizon = float(horizon)
        self._starts = [t for t, _ in self.segments]

    @property
    def jump_times(self):
        return [j.time for j in self.jumps]

    def value_at(self, t: float) -> FacePoint:
        if t < 0 or t > self.horizon:
            raise ValueError("time outside [0, horizon]")
        k = bisect_right(self._starts, t) - 1
        t0, fp = self.segments[k]
        if t == t0:
            return fp
        return self.model.flow(t - t0, fp)

    def left_limit_at(self, t: float) -> FacePoint:
        """Pre-jump value at t (equals value_at(t) off jump times)."""
        for j in self.jumps:
            if j.time == t:
                return j.pre
        return self.value_at(t)

    def to_rows(self, grid) -> list:
        """Rows (time, weights..., label) on the user grid plus pre/post jump rows."""
        jump_set = {j.time for j in self.jumps}
        events = []
        for t in grid:
            if 0 <= t <= self.horizon and float(t) not in jump_set:
                events.append((float(t), None))
        for j in self.jumps:
            events.append((j.time, j))
        events.sort(key=lambda e: (e[0], e[1] is not None))
        rows = []
        for t, j in events:
            if j is None:
                fp = self.value_at(t)
                rows.append((t, fp.weights, fp.label))
            else:
                rows.append((t, j.pre.weights, j.pre.label))
                rows.append((t, j.post.weights, j.post.label))
        return rows
