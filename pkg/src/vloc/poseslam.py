"""Pose-graph fusion of low-rate absolute visual fixes with high-rate
relative odometry.

States are camera poses on SE(3). Prior factors pin states to visual
localization results; between factors chain consecutive states through
odometry deltas. The stacked whitened residual ``log(measured^-1 *
predicted)`` is minimized by damped Gauss-Newton (Levenberg-Marquardt) with
analytic manifold Jacobians; prior factors carry a Huber loss so a bad fix
cannot drag the trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csc_matrix, lil_matrix
from scipy.sparse.linalg import splu

from .errors import (
    EmptyGraph,
    NoGaugePrior,
    NonMonotonicTimestamp,
    SingularNormalEquations,
    UnknownState,
)
from .geometry import Pose, se3_adjoint, se3_exp, se3_log, se3_right_jacobian_inv

HUBER_K = 3.0               # prior robust threshold, in whitened sigma units
LM_LAMBDA_INIT = 1e-4
LM_MAX_ITERS = 50
LM_REL_DECREASE = 1e-9
PRIOR_SIGMA_T = 0.1         # m
PRIOR_SIGMA_R = math.radians(2.0)
ODOM_SIGMA_T_BASE = 0.02    # m per step
ODOM_SIGMA_T_SCALE = 0.01   # fraction of step length
ODOM_SIGMA_R = math.radians(0.5)


def vloc_fix_sigmas(inliers: int, min_inliers: int) -> np.ndarray:
    """More inliers tighten the prior; at the acceptance floor it is 1x."""
    scale = min(1.0, min_inliers / max(1, inliers))
    return np.array([PRIOR_SIGMA_T] * 3 + [PRIOR_SIGMA_R] * 3) * scale


def odom_sigmas(step_length: float) -> np.ndarray:
    st = ODOM_SIGMA_T_BASE + ODOM_SIGMA_T_SCALE * abs(step_length)
    return np.array([st, st, st, ODOM_SIGMA_R, ODOM_SIGMA_R, ODOM_SIGMA_R])


@dataclass(frozen=True)
class PriorFactor:
    state_index: int
    measured: Pose
    sigmas: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.sigmas) <= 0):
            raise ValueError("sigmas must be positive")


@dataclass(frozen=True)
class BetweenFactor:
    index_a: int
    index_b: int
    measured: Pose
    sigmas: np.ndarray

    def __post_init__(self):
        if self.index_b != self.index_a + 1:
            raise ValueError("between factors link consecutive states")
        if np.any(np.asarray(self.sigmas) <= 0):
            raise ValueError("sigmas must be positive")


@dataclass
class FusionGraph:
    states: list = field(default_factory=list)
    timestamps: list = field(default_factory=list)
    priors: list = field(default_factory=list)
    betweens: list = field(default_factory=list)
    last_optimized_index: int = -1
    last_cost_trace: list = field(default_factory=list, repr=False)

    # -- construction --------------------------------------------------------

    def initialize(self, pose: Pose, timestamp: float) -> None:
        if self.states:
            raise ValueError("graph already initialized")
        self.states.append(pose)
        self.timestamps.append(float(timestamp))

    def propagate(self, odom_delta: Pose, sigmas, timestamp: float) -> Pose:
        """Append x_k = x_{k-1} * delta plus its between factor. No
        optimization happens here."""
        if not self.states:
            raise EmptyGraph("propagate on an empty graph; initialize first")
        if timestamp <= self.timestamps[-1]:
            raise NonMonotonicTimestamp(
                f"timestamp {timestamp} not after {self.timestamps[-1]}")
        k = len(self.states)
        new_pose = self.states[-1].compose(odom_delta)
        self.states.append(new_pose)
        self.timestamps.append(float(timestamp))
        self.betweens.append(BetweenFactor(index_a=k - 1, index_b=k,
                                           measured=odom_delta,
                                           sigmas=np.asarray(sigmas, dtype=float)))
        return new_pose

    def add_vloc_fix(self, state_index: int, pose: Pose, sigmas) -> None:
        if not 0 <= state_index < len(self.states):
            raise UnknownState(f"state {state_index} not in graph of "
                               f"{len(self.states)} states")
        self.priors.append(PriorFactor(state_index=state_index, measured=pose,
                                       sigmas=np.asarray(sigmas, dtype=float)))

    def current_pose(self):
        if not self.states:
            raise EmptyGraph("no states")
        return self.states[-1], self.timestamps[-1]

    def nearest_state(self, timestamp: float) -> int:
        if not self.states:
            raise EmptyGraph("no states")
        ts = np.asarray(self.timestamps)
        return int(np.argmin(np.abs(ts - timestamp)))

    # -- optimization --------------------------------------------------------

    def optimize(self, window: int | None = None):
        """Levenberg-Marquardt over the last ``window`` states (earlier
        states held fixed) or all states. Returns (poses, final_cost);
        accepted-cost trace is kept in ``last_cost_trace``."""
        n = len(self.states)
        if n == 0:
            raise EmptyGraph("nothing to optimize")
        first_free = 0 if window is None else max(0, n - int(window))
        if not self.priors:
            raise NoGaugePrior("graph has no prior factor; gauge is free")
        if first_free == 0 and not any(p.state_index >= first_free
                                       for p in self.priors):
            raise NoGaugePrior("no prior inside a full-graph optimization")

        free_index = {s: k for k, s in enumerate(range(first_free, n))}
        self._check_connected(first_free, free_index)

        # factors not touching a free state are constant in the window
        # objective and are excluded from it
        active_priors = [p for p in self.priors if p.state_index >= first_free]
        active_betweens = [b for b in self.betweens if b.index_b >= first_free]

        states = list(self.states)
        cost = self._total_cost(states, active_priors, active_betweens)
        self.last_cost_trace = [cost]
        if cost < 1e-18:
            return list(states), cost

        lam = LM_LAMBDA_INIT
        n_free = len(free_index)
        dense = n_free <= 60
        for _ in range(LM_MAX_ITERS):
            h, g = self._normal_equations(states, first_free, free_index, dense)
            try:
                if dense:
                    delta = np.linalg.solve(h + lam * np.eye(6 * n_free), -g)
                else:
                    solver = splu(h.tocsc() + lam * _sparse_eye(6 * n_free))
                    delta = solver.solve(-g)
            except (RuntimeError, np.linalg.LinAlgError) as exc:
                raise SingularNormalEquations(str(exc)) from exc
            if not np.all(np.isfinite(delta)):
                raise SingularNormalEquations("non-finite LM step")
            cand = list(states)
            for s, k in free_index.items():
                cand[s] = states[s].compose(se3_exp(delta[6 * k:6 * k + 6]))
            new_cost = self._total_cost(cand, active_priors, active_betweens)
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                states = cand
                cost = new_cost
                self.last_cost_trace.append(cost)
                lam = max(lam / 10.0, 1e-12)
                if rel < LM_REL_DECREASE:
                    break
            else:
                lam *= 10.0
                if lam > 1e10:
                    break
        self.states = states
        self.last_optimized_index = n - 1
        return list(states), cost

    # -- internals -----------------------------------------------------------

    def _factors(self):
        for p in self.priors:
            yield ("prior", p)
        for b in self.betweens:
            yield ("between", b)

    def _check_connected(self, first_free, free_index):
        """Every free state must reach an anchor (a prior or a fixed state)
        through factors; otherwise the normal equations are singular."""
        n_free = len(free_index)
        adj = {k: set() for k in range(n_free)}
        anchored = set()
        for p in self.priors:
            if p.state_index in free_index:
                anchored.add(free_index[p.state_index])
        for b in self.betweens:
            a_free = b.index_a in free_index
            b_free = b.index_b in free_index
            if a_free and b_free:
                adj[free_index[b.index_a]].add(free_index[b.index_b])
                adj[free_index[b.index_b]].add(free_index[b.index_a])
            elif a_free != b_free:
                anchored.add(free_index[b.index_a] if a_free
                             else free_index[b.index_b])
        seen = set()
        stack = list(anchored)
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(adj[cur] - seen)
        if len(seen) != n_free:
            raise SingularNormalEquations(
                f"{n_free - len(seen)} states unreachable from any anchor")

    @staticmethod
    def _prior_residual(state: Pose, factor: PriorFactor):
        rel = factor.measured.inverse().compose(state)
        r = se3_log(rel) / factor.sigmas
        return r, rel

    @staticmethod
    def _between_residual(xa: Pose, xb: Pose, factor: BetweenFactor):
        pred = xa.between(xb)
        rel = factor.measured.inverse().compose(pred)
        r = se3_log(rel) / factor.sigmas
        return r, rel, pred

    def _total_cost(self, states, priors=None, betweens=None) -> float:
        cost = 0.0
        for p in (self.priors if priors is None else priors):
            r, _ = self._prior_residual(states[p.state_index], p)
            s = float(np.linalg.norm(r))
            if s <= HUBER_K:
                cost += s * s
            else:
                cost += HUBER_K * (2.0 * s - HUBER_K)
        for b in (self.betweens if betweens is None else betweens):
            r, _, _ = self._between_residual(states[b.index_a], states[b.index_b], b)
            cost += float(r @ r)
        return cost

    def _normal_equations(self, states, first_free, free_index, dense=False):
        n_free = len(free_index)
        g = np.zeros(6 * n_free)
        if dense:
            h = np.zeros((6 * n_free, 6 * n_free))

            def add_block(ki, kj, block):
                h[6 * ki:6 * ki + 6, 6 * kj:6 * kj + 6] += block
        else:
            blocks = {}

            def add_block(ki, kj, block):
                key = (ki, kj)
                if key in blocks:
                    blocks[key] = blocks[key] + block
                else:
                    blocks[key] = block

        for p in self.priors:
            if p.state_index < first_free:
                continue
            r, rel = self._prior_residual(states[p.state_index], p)
            jr_inv = se3_right_jacobian_inv(se3_log(rel))
            jac = jr_inv / p.sigmas[:, None]
            s = float(np.linalg.norm(r))
            w = 1.0 if s <= HUBER_K else HUBER_K / s
            jac = jac * math.sqrt(w)
            rw = r * math.sqrt(w)
            k = free_index[p.state_index]
            add_block(k, k, jac.T @ jac)
            g[6 * k:6 * k + 6] += jac.T @ rw
        for b in self.betweens:
            if b.index_b < first_free:
                continue
            xa, xb = states[b.index_a], states[b.index_b]
            r, rel, pred = self._between_residual(xa, xb, b)
            jr_inv = se3_right_jacobian_inv(se3_log(rel))
            jb = jr_inv / b.sigmas[:, None]
            ja = -(jr_inv @ se3_adjoint(pred.inverse())) / b.sigmas[:, None]
            a_free = b.index_a >= first_free
            if a_free:
                ka = free_index[b.index_a]
                add_block(ka, ka, ja.T @ ja)
                g[6 * ka:6 * ka + 6] += ja.T @ r
            kb = free_index[b.index_b]
            add_block(kb, kb, jb.T @ jb)
            g[6 * kb:6 * kb + 6] += jb.T @ r
            if a_free:
                ka = free_index[b.index_a]
                add_block(ka, kb, ja.T @ jb)
                add_block(kb, ka, jb.T @ ja)
        if dense:
            return h, g
        h = lil_matrix((6 * n_free, 6 * n_free))
        for (ki, kj), block in blocks.items():
            h[6 * ki:6 * ki + 6, 6 * kj:6 * kj + 6] = block
        return h, g


def _sparse_eye(n):
    return csc_matrix((np.ones(n), (np.arange(n), np.arange(n))), shape=(n, n))
