"""Optimal stopping of the partially observed chain, solved on the belief simplex.

The cost of stopping at tau is

    J(mu, tau) = E[ e^{-alpha tau} g(X_tau) + int_0^tau e^{-alpha s} l(X_s) ds ],

with the g-term dropped at tau = infinity.  In belief coordinates the value
function v on the effective simplex is the fixed point of a single-jump
dynamic-programming operator: continue along the flow up to a candidate time
t (running cost plus jump term weighted by the post-jump value), then either
stop (obstacle psi(nu) = nu g) or, on the horizon branch, keep the value
itself.  The expectation over the jump kernel is a finite sum because the
post-jump law has at most |O|-1 atoms.  A key simplification: the survival
weight times any belief functional along the flow collapses onto the
unnormalized filter u(s) = nu_A e^{s Lambda_A}, so every integrand below is
linear in u(s) (with piecewise-linear interpolated values of v at the
normalized jump targets).

The general-initial-condition value is the mixture
V(mu) = sum_a mu(h^{-1}(a)) v(H_a[mu]).
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .chain import Distribution, RandomSource, observe, sample_chain
from .filtering import FacePoint, FilterModel, FilterTrajectory

DEG_TOL = 1e-12
DEFAULT_DT = 0.05
DEFAULT_TAIL_TOL = 1e-7
DEFAULT_CHECK_TIMES = (2.0, 3.0, 5.0)


class NoConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class StoppingProblem:
    """Stopping cost g, running cost l (per-state vectors) and discount alpha > 0."""

    g: np.ndarray
    l: np.ndarray
    alpha: float

    def __post_init__(self):
        g = np.array(self.g, dtype=float).ravel()
        l = np.array(self.l, dtype=float).ravel()
        if len(g) != len(l):
            raise ValueError("g and l must have equal length")
        if not self.alpha > 0:
            raise ValueError("discount alpha must be strictly positive")
        g.setflags(write=False)
        l.setflags(write=False)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "l", l)


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


class FaceGrid:
    """Barycentric grid of resolution m on each face of the effective simplex."""

    def __init__(self, model: FilterModel, resolution: int):
        if resolution < 1:
            raise ValueError("resolution must be >= 1")
        self.model = model
        self.m = int(resolution)
        self.points = {}
        self._codes = {}
        for a, face in model.faces.items():
            d = len(face)
            counts = np.array(list(_compositions(self.m, d)), dtype=np.int64)
            self.points[a] = counts.astype(float) / self.m
            basis = (self.m + 1) ** np.arange(d, dtype=np.int64)
            codes = counts @ basis
            order = np.argsort(codes)
            self._codes[a] = (codes[order], order, basis)

    def n_points(self, a) -> int:
        return len(self.points[a])

    def face_point(self, a, row: int) -> FacePoint:
        w = np.zeros(self.model.n)
        w[self.model.faces[a]] = self.points[a][row]
        return FacePoint(a, w)

    def interpolation_weights(self, a, W):
        """Simplicial (Freudenthal/Kuhn) interpolation on the face lattice.

        W: (M, d) rows of face coordinates summing to 1.  Returns index and
        weight arrays of shape (M, d+1); weights are a convex combination,
        exact on lattice points, so interpolated values stay within the
        corner values of the containing cell.
        """
        m = self.m
        W = np.clip(np.asarray(W, dtype=float), 0.0, None)
        M, d = W.shape
        sorted_codes, order_perm, basis = self._codes[a]
        if d == 1:
            return np.zeros((M, 2), dtype=np.int64), np.column_stack(
                [np.ones(M), np.zeros(M)]
            )
        # cumulative (staircase) coordinates: x_i = m * sum_{j>=i} W_j, nonincreasing
        x = m * np.cumsum(W[:, ::-1], axis=1)[:, ::-1]
        x[:, 0] = m
        v = np.floor(x)
        f = x - v
        hi = f > 1.0 - 1e-9
        v[hi] += 1.0
        f[hi] = 0.0
        f[f < 1e-12] = 0.0
        order = np.argsort(-f, axis=1, kind="stable")
        fs = np.take_along_axis(f, order, axis=1)
        wgt = np.empty((M, d + 1))
        wgt[:, 0] = 1.0 - fs[:, 0]
        if d > 1:
            wgt[:, 1:d] = fs[:, : d - 1] - fs[:, 1:]
        wgt[:, d] = fs[:, d - 1]
        wgt = np.clip(wgt, 0.0, None)
        wgt /= wgt.sum(axis=1, keepdims=True)
        idx = np.zeros((M, d + 1), dtype=np.int64)
        z = np.rint(v).astype(np.int64)
        rows = np.arange(M)
        counts = np.empty_like(z)
        for k in range(d + 1):
            counts[:, : d - 1] = z[:, : d - 1] - z[:, 1:]
            counts[:, d - 1] = z[:, d - 1]
            valid = wgt[:, k] > 1e-12
            if valid.any() and (counts[valid] < 0).any():
                raise RuntimeError("interpolation produced an invalid lattice vertex")
            code = counts @ basis
            code = np.where(valid, code, sorted_codes[0])
            pos = np.searchsorted(sorted_codes, code)
            pos = np.clip(pos, 0, len(sorted_codes) - 1)
            if not (sorted_codes[pos] == code).all():
                raise RuntimeError("interpolation vertex not on the grid")
            idx[:, k] = order_perm[pos]
            wgt[:, k] = np.where(valid, wgt[:, k], 0.0)
            if k < d:
                z[rows, order[:, k]] += 1
        return idx, wgt


class ValueFunction:
    """Grid values per face with simplicial interpolation."""

    def __init__(self, grid: FaceGrid, values: dict, problem: StoppingProblem = None, info: dict = None):
        self.grid = grid
        self.values = {a: np.array(v, dtype=float) for a, v in values.items()}
        self.problem = problem
        self.info = dict(info or {})

    def batch(self, a, W) -> np.ndarray:
        idx, wgt = self.grid.interpolation_weights(a, W)
        return (self.values[a][idx] * wgt).sum(axis=1)

    def at(self, fp: FacePoint) -> float:
        face = self.grid.model.faces[fp.label]
        return float(self.batch(fp.label, fp.weights[face][None, :])[0])

    __call__ = at


def psi_values(grid: FaceGrid, prob: StoppingProblem) -> dict:
    """Obstacle psi(nu) = nu g on the grid."""
    out = {}
    for a, face in grid.model.faces.items():
        out[a] = grid.points[a] @ prob.g[face]
    return out


class BellmanOperator:
    """Single-jump value-iteration operator on the face grids.

    Branches minimized over: stop at each mesh time t_k (continuation
    integral plus discounted survival-weighted obstacle), continue to T_max
    keeping the value itself, and continue to each check time keeping the
    value itself.  The check-time branches are redundant for the exact value
    function, so the fixed point is unchanged; they make the variational
    inequalities at those times hold by fixed-point consistency.  Ties in the
    minimization go to the smallest t.  Integrals use composite Simpson on
    the uniform mesh (nodes plus midpoints).
    """

    def __init__(self, model: FilterModel, grid: FaceGrid, prob: StoppingProblem,
                 dt: float = DEFAULT_DT, t_max: float = None,
                 tail_tol: float = DEFAULT_TAIL_TOL,
                 check_times=DEFAULT_CHECK_TIMES, deg_tol: float = DEG_TOL):
        self.model = model
        self.grid = grid
        self.prob = prob
        alpha = prob.alpha
        if t_max is None:
            t_max = math.ceil((-math.log(tail_tol) / alpha) / dt) * dt
        K = max(1, int(round(t_max / dt)))
        self.dt = dt
        self.K = K
        self.t_max = K * dt
        self.times = np.arange(K + 1) * dt
        self.check_ks = sorted(
            {k for k in (int(round(c / dt)) for c in check_times) if 0 < k < K}
        )
        self.disc = np.exp(-alpha * self.times)
        self.discm = np.exp(-alpha * (self.times[:K] + dt / 2))
        self._pre = {}
        labels = model.obs.labels
        for a in labels:
            face = model.faces[a]
            d = len(face)
            n = grid.n_points(a)
            sub = model._sub[a].matrix
            E = expm(dt * sub)
            Eh = expm(0.5 * dt * sub)
            W = np.empty((K + 1, n, d))
            W[0] = grid.points[a]
            for k in range(K):
                W[k + 1] = W[k] @ E
            Wm = W[:K] @ Eh
            W = np.clip(W, 0.0, None)
            Wm = np.clip(Wm, 0.0, None)
            entry = {
                "face": face,
                "n": n,
                "stop": W @ prob.g[face],
                "run": W @ prob.l[face],
                "runm": Wm @ prob.l[face],
                "mass": W.sum(axis=2),
                "jump": [],
                "self_gather": {},
            }
            for b in labels:
                if b == a:
                    continue
                block = model._blocks[a][b]
                db = block.shape[1]
                jn = self._target_gather(b, W @ block, deg_tol, db)
                jm = self._target_gather(b, Wm @ block, deg_tol, db)
                entry["jump"].append((b, jn, jm))
            for k in list(self.check_ks) + [K]:
                mass = entry["mass"][k]
                Wn = W[k] / np.where(mass > 0, mass, 1.0)[:, None]
                idx, wgt = grid.interpolation_weights(a, Wn)
                entry["self_gather"][k] = (idx, wgt)
            self._pre[a] = entry

    def _target_gather(self, b, T, deg_tol, db):
        """Flux and interpolation gather arrays for jump targets onto face b."""
        T = np.clip(T, 0.0, None)
        shape = T.shape[:2]
        flux = T.sum(axis=2)
        denom = np.where(flux > deg_tol, flux, 1.0)
        Tn = T / denom[..., None]
        Tn[flux <= deg_tol] = 1.0 / db
        idx, wgt = self.grid.interpolation_weights(b, Tn.reshape(-1, db))
        idx = idx.reshape(shape + (db + 1,))
        wgt = wgt.reshape(shape + (db + 1,))
        return flux, idx, wgt

    def _cumulative(self, values: dict, a):
        """Cumulative Simpson integral I_k of the discounted running-plus-jump integrand."""
        e = self._pre[a]
        K = self.K
        jump_n = np.zeros_like(e["run"])
        jump_m = np.zeros_like(e["runm"])
        for b, (fn, ixn, wn), (fm, ixm, wm) in e["jump"]:
            vb = values[b]
            jump_n += fn * (vb[ixn] * wn).sum(axis=2)
            jump_m += fm * (vb[ixm] * wm).sum(axis=2)
        q = self.disc[:, None] * (e["run"] + jump_n)
        qm = self.discm[:, None] * (e["runm"] + jump_m)
        inc = (self.dt / 6.0) * (q[:-1] + 4.0 * qm + q[1:])
        I = np.empty_like(q)
        I[0] = 0.0
        np.cumsum(inc, axis=0, out=I[1:])
        return I

    def continuation_value(self, values: dict, a, k) -> np.ndarray:
        """Continue-to-t_k branch: I_k + e^{-alpha t_k} S_k v(phi_k)."""
        e = self._pre[a]
        if k not in e["self_gather"]:
            raise KeyError(f"time index {k} not precomputed")
        I = self._cumulative(values, a)
        idx, wgt = e["self_gather"][k]
        va = values[a]
        return I[k] + self.disc[k] * e["mass"][k] * (va[idx] * wgt).sum(axis=1)

    def apply(self, values: dict) -> dict:
        out = {}
        for a in self.model.obs.labels:
            e = self._pre[a]
            I = self._cumulative(values, a)
            g_stop = I + self.disc[:, None] * e["stop"]
            best = g_stop.min(axis=0)
            va = values[a]
            for k in list(self.check_ks) + [self.K]:
                idx, wgt = e["self_gather"][k]
                cont = I[k] + self.disc[k] * e["mass"][k] * (va[idx] * wgt).sum(axis=1)
                np.minimum(best, cont, out=best)
            out[a] = best
        return out


def bellman_operator(v: ValueFunction, prob: StoppingProblem,
                     dt: float = DEFAULT_DT, t_max: float = None) -> ValueFunction:
    """One application of the single-jump operator to an existing ValueFunction."""
    op = BellmanOperator(v.grid.model, v.grid, prob, dt=dt, t_max=t_max)
    return ValueFunction(v.grid, op.apply(v.values), prob, v.info)


def solve_value(model: FilterModel, prob: StoppingProblem, grid: FaceGrid,
                tol: float = 1e-6, dt: float = DEFAULT_DT, t_max: float = None,
                max_iter: int = 10000, check_times=DEFAULT_CHECK_TIMES) -> ValueFunction:
    """Value iteration from the obstacle psi until the sup-norm change < tol."""
    op = BellmanOperator(model, grid, prob, dt=dt, t_max=t_max, check_times=check_times)
    values = psi_values(grid, prob)
    iterations = 0
    delta = math.inf
    for iterations in range(1, max_iter + 1):
        new = op.apply(values)
        delta = max(np.abs(new[a] - values[a]).max() for a in new)
        values = new
        if delta < tol:
            break
    else:
        raise NoConvergence(f"no convergence in {max_iter} sweeps (last change {delta})")
    final = op.apply(values)
    residual = max(np.abs(final[a] - values[a]).max() for a in final)
    info = {
        "iterations": iterations,
        "residual": residual,
        "tol": tol,
        "dt": op.dt,
        "t_max": op.t_max,
    }
    vf = ValueFunction(grid, values, prob, info)
    vf._operator = op
    return vf


def contraction_witness(op: BellmanOperator, rng: RandomSource, n_pairs: int = 20) -> float:
    """Empirical sup-norm contraction modulus over random value pairs."""
    gen = rng.generator() if isinstance(rng, RandomSource) else rng
    labels = op.model.obs.labels
    beta = 0.0
    for _ in range(n_pairs):
        v1 = {a: gen.uniform(-1, 1, op.grid.n_points(a)) for a in labels}
        v2 = {a: gen.uniform(-1, 1, op.grid.n_points(a)) for a in labels}
        num = 0.0
        den = 0.0
        t1 = op.apply(v1)
        t2 = op.apply(v2)
        for a in labels:
            num = max(num, np.abs(t1[a] - t2[a]).max())
            den = max(den, np.abs(v1[a] - v2[a]).max())
        if den > 0:
            beta = max(beta, num / den)
    return beta


def value_general(mu: Distribution, v: ValueFunction) -> float:
    """V(mu) = sum_a mu(h^{-1}(a)) v(H_a[mu])."""
    model = v.grid.model
    total = 0.0
    w = mu.weights if isinstance(mu, Distribution) else np.asarray(mu, float)
    for a, face in model.faces.items():
        mass = float(w[face].sum())
        if mass <= 0:
            continue
        total += mass * v.at(model.restrict_normalize(w, a))
    return total


def cost_along_filter(traj: FilterTrajectory, tau: float, prob: StoppingProblem) -> float:
    """e^{-alpha tau} Pi_tau g + int_0^tau e^{-alpha s} Pi_s l ds.

    tau = math.inf drops the g-term and integrates to the trajectory horizon.
    Segment integrals use chunked 16-point Gauss-Legendre on the smooth
    closed-form flow.
    """
    model = traj.model
    alpha = prob.alpha
    if tau is None:
        tau = math.inf
    if math.isinf(tau):
        t_end = traj.horizon
        g_term = 0.0
    else:
        if tau < 0 or tau > traj.horizon + 1e-12:
            raise ValueError("tau must lie in [0, horizon] or be infinite")
        t_end = min(tau, traj.horizon)
        g_term = math.exp(-alpha * tau) * float(traj.value_at(t_end).weights @ prob.g)
    nodes, weights = _gauss_nodes()
    total = 0.0
    starts = [t for t, _ in traj.segments]
    for k, (t0, fp) in enumerate(traj.segments):
        t1 = starts[k + 1] if k + 1 < len(starts) else traj.horizon
        b = min(t1, t_end)
        if b <= t0:
            break
        face = model.faces[fp.label]
        l_face = prob.l[face]
        x = fp.weights[face]
        sub = model._sub[fp.label]
        length = b - t0
        n_chunks = max(1, int(math.ceil(length / 2.0)))
        edges = np.linspace(0.0, length, n_chunks + 1)
        for c in range(n_chunks):
            lo, hi = edges[c], edges[c + 1]
            half = 0.5 * (hi - lo)
            ts = lo + half * (nodes + 1.0)
            W = sub.propagate_times(x, ts)
            W = np.clip(W, 0.0, None)
            mass = W.sum(axis=1)
            vals = (W @ l_face) / np.where(mass > 0, mass, 1.0)
            total += half * float(
                (weights * np.exp(-alpha * (t0 + ts)) * vals).sum()
            )
    return total + g_term


_GAUSS = {}


def _gauss_nodes(order: int = 16):
    if order not in _GAUSS:
        _GAUSS[order] = np.polynomial.legendre.leggauss(order)
    return _GAUSS[order]


class StoppingPolicy:
    """Stop at first entry of the filter into the eps-relaxed contact set
    {nu : nu g <= v(nu) + eps}."""

    def __init__(self, value: ValueFunction, eps: float):
        if value.problem is None:
            raise ValueError("value function carries no stopping problem")
        self.value = value
        self.prob = value.problem
        self.eps = float(eps)
        self.model = value.grid.model

    def _margin_point(self, fp: FacePoint) -> float:
        return float(fp.weights @ self.prob.g) - self.value.at(fp) - self.eps

    def should_stop(self, fp: FacePoint) -> bool:
        return self._margin_point(fp) <= 0.0

    def _margin_batch(self, label, ts_rel, fp: FacePoint) -> np.ndarray:
        model = self.model
        face = model.faces[label]
        W = model._sub[label].propagate_times(fp.weights[face], ts_rel)
        W = np.clip(W, 0.0, None)
        W /= W.sum(axis=1, keepdims=True)
        obstacle = W @ self.prob.g[face]
        return obstacle - self.value.batch(label, W) - self.eps

    def first_entry(self, traj: FilterTrajectory, time_tol: float = 1e-8,
                    scan_step: float = 0.02) -> float:
        """First entry time into the contact set along the trajectory, or inf."""
        starts = [t for t, _ in traj.segments]
        for k, (t0, fp) in enumerate(traj.segments):
            t1 = starts[k + 1] if k + 1 < len(starts) else traj.horizon
            if self._margin_point(fp) <= 0.0:
                return t0
            sub = self.model._sub[fp.label].matrix
            if np.allclose(sub, sub[0, 0] * np.eye(len(sub)), atol=1e-14):
                continue  # scalar sub-generator: flow (and margin) constant
            length = t1 - t0
            if length <= 0:
                continue
            n_pts = max(2, int(math.ceil(length / scan_step)))
            ts = np.linspace(0.0, length, n_pts + 1)[1:]
            margins = self._margin_batch(fp.label, ts, fp)
            hits = np.flatnonzero(margins <= 0.0)
            if len(hits) == 0:
                continue
            j = hits[0]
            lo = 0.0 if j == 0 else ts[j - 1]
            hi = ts[j]
            while hi - lo > time_tol:
                mid = 0.5 * (lo + hi)
                if self._margin_batch(fp.label, np.array([mid]), fp)[0] <= 0.0:
                    hi = mid
                else:
                    lo = mid
            return t0 + hi
        return math.inf


def stopping_rule(v: ValueFunction, eps: float = None) -> StoppingPolicy:
    """Policy from the eps-relaxed contact set; eps defaults to 2 * solver tol."""
    if eps is None:
        eps = 2.0 * v.info.get("tol", 1e-6)
    return StoppingPolicy(v, eps)


def evaluate_policy_mc(mu: Distribution, policy, prob: StoppingProblem,
                       n_sims: int, horizon: float, rng: RandomSource,
                       model: FilterModel = None):
    """Monte Carlo estimate (mean, stderr) of the policy's cost from mu.

    Stopping is censored at the horizon (tau treated as infinite), valid when
    e^{-alpha horizon} (max|g| + max|l|/alpha) is negligible.
    """
    if model is None:
        model = policy.model
    costs = np.empty(n_sims)
    for r in range(n_sims):
        sub_rng = rng.stream(r)
        path = sample_chain(model.rate, mu, horizon, sub_rng)
        obs = observe(path, model.obs)
        traj = model.run_filter(obs, mu)
        tau = policy.first_entry(traj)
        if tau > horizon:
            tau = math.inf
        costs[r] = cost_along_filter(traj, tau, prob)
    mean = float(costs.mean())
    stderr = float(costs.std(ddof=1) / math.sqrt(n_sims)) if n_sims > 1 else 0.0
    return mean, stderr


def verify_variational(v: ValueFunction, prob: StoppingProblem,
                       t_checks=DEFAULT_CHECK_TIMES, tol: float = 5e-6,
                       operator: BellmanOperator = None) -> dict:
    """Check u <= psi and u <= continue-to-t-then-u on the grid.

    The continuation expectation uses the same single-jump quadrature as the
    Bellman operator; the one-jump truncation bound (value beyond T_max) is
    reported.  Maximality of v among solutions is NOT checked.
    """
    op = operator
    if op is None:
        op = getattr(v, "_operator", None)
    model = v.grid.model
    needed = sorted({int(round(c / (op.dt if op else DEFAULT_DT))) for c in t_checks})
    if op is None or any(
        k not in op._pre[model.obs.labels[0]]["self_gather"] and 0 < k < op.K
        for k in needed
    ):
        op = BellmanOperator(model, v.grid, prob, check_times=t_checks)
    psi = psi_values(v.grid, prob)
    obstacle_violation = max(float((v.values[a] - psi[a]).max()) for a in psi)
    cont_violation = -math.inf
    checked = []
    for k in needed:
        k = min(max(k, 1), op.K)
        if k not in op._pre[model.obs.labels[0]]["self_gather"]:
            continue
        checked.append(op.times[k])
        for a in model.obs.labels:
            cont = op.continuation_value(v.values, a, k)
            cont_violation = max(cont_violation, float((v.values[a] - cont).max()))
    g_max = float(np.abs(prob.g).max())
    l_max = float(np.abs(prob.l).max())
    truncation_bound = math.exp(-prob.alpha * op.t_max) * (g_max + l_max / prob.alpha)
    passed = obstacle_violation < tol and cont_violation < tol
    return {
        "pass": bool(passed),
        "tol": tol,
        "obstacle_violation": obstacle_violation,
        "continuation_violation": cont_violation,
        "checked_times": checked,
        "one_jump_truncation_bound": truncation_bound,
        "note": "maximality among solutions of the inequality system is not checked",
    }


def classical_stopping_values(rate, g, l, alpha: float, dt: float = DEFAULT_DT,
                              t_max: float = None, tol: float = 1e-6,
                              max_iter: int = 10000) -> np.ndarray:
    """Independent fully-observed stopping oracle on the states.

    Scalar value iteration with the same time mesh as the grid solver but
    closed-form per-interval integrals (everything is exponential when the
    state is observed), so it shares no code path with the simplex machinery.
    """
    Q = rate.entries
    g = np.asarray(g, dtype=float)
    l = np.asarray(l, dtype=float)
    n = len(g)
    lam = -np.diag(Q)
    off = Q - np.diag(np.diag(Q))
    if t_max is None:
        t_max = math.ceil((-math.log(DEFAULT_TAIL_TOL) / alpha) / dt) * dt
    K = max(1, int(round(t_max / dt)))
    times = np.arange(K + 1) * dt
    beta = alpha + lam  # per-state decay of e^{-alpha t} * survival
    decay = np.exp(-np.outer(times, beta))  # (K+1, n)
    v = g.copy()
    for _ in range(max_iter):
        c = l + off @ v
        integral = (1.0 - decay) / beta * c
        stop_branches = integral + decay * g
        cont = integral[K] + decay[K] * v
        new = np.minimum(stop_branches.min(axis=0), cont)
        delta = np.abs(new - v).max()
        v = new
        if delta < tol:
            return v
    raise NoConvergence("classical oracle did not converge")
