"""Trust-region policy update: CPO with a connectivity constraint, TRPO as the
unconstrained mode, and the BC term folded into the objective."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from connav.net import FisherOperator, PolicyNet, ValueNet, avg_kl, log_prob
from connav.rl import Batch, bc_loss, constraint_estimate, fit_values, td_advantage, value_targets


class DegenerateGeometry(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrustRegionConfig:
    max_kl: float = 0.01  # eta
    cost_limit: float = 0.1  # d
    bc_coef: float = 0.1  # lambda_e
    gamma: float = 0.99
    gamma_c: float = 0.999
    damping: float = 0.1
    cg_iters: int = 10
    backtrack_ratio: float = 0.8
    max_backtracks: int = 10
    slack: float = 1e-3
    vf_step_size: float = 0.1
    vf_iters: int = 25


def conjugate_gradient(fvp: Callable[[np.ndarray], np.ndarray], rhs, iters: int = 10,
                       tol: float = 1e-10) -> np.ndarray:
    """Approximate H^{-1} rhs for symmetric positive definite H given as a product."""
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iters):
        if math.sqrt(rr) <= tol:
            break
        hp = fvp(p)
        alpha = rr / (p @ hp)
        x += alpha * p
        r -= alpha * hp
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


@dataclass
class SurrogateProblem:
    """max g.x  s.t.  b.x + c <= 0,  0.5 x.Hx <= delta.  ``b=None`` drops the cost constraint."""

    g: np.ndarray
    b: Optional[np.ndarray]
    c: float
    delta: float
    fvp: Callable[[np.ndarray], np.ndarray]
    cg_iters: int = 10


@dataclass
class StepInfo:
    mode: str  # "trpo" | "cpo" | "recovery"
    q: float = 0.0
    r: float = 0.0
    s: float = 0.0
    lam: float = 0.0
    nu: float = 0.0
    predicted_cost_change: float = 0.0


def compute_step(p: SurrogateProblem):
    """Solve the linear-quadratic trust-region subproblem in closed form.

    Returns (direction, StepInfo). With q = g'H^-1 g, r = g'H^-1 b,
    s = b'H^-1 b the dual optimum is lam = sqrt((q - r^2/s) / (2 delta - c^2/s)),
    nu = (r + lam c) / s and x = H^-1 (g - nu b) / lam when the constraint is
    active; if no point of the trust region satisfies the linearized
    constraint the step purely decreases the cost.
    """
    hg = conjugate_gradient(p.fvp, p.g, p.cg_iters)
    q = float(p.g @ hg)
    if p.b is None or not np.any(p.b):
        # no usable cost gradient: plain trust-region step on the objective
        if q <= 1e-12:
            raise DegenerateGeometry(f"g'H^-1 g = {q:.3e}")
        return math.sqrt(2 * p.delta / q) * hg, StepInfo("trpo", q=q)

    hb = conjugate_gradient(p.fvp, p.b, p.cg_iters)
    r = float(p.g @ hb)
    s = float(p.b @ hb)
    c = p.c
    if s <= 1e-12:
        if q <= 1e-12:
            raise DegenerateGeometry(f"g'H^-1 g = {q:.3e}")
        return math.sqrt(2 * p.delta / q) * hg, StepInfo("trpo", q=q, r=r, s=s)

    if c > 0 and c * c / s >= 2 * p.delta:
        scale = math.sqrt(2 * p.delta / s)
        return -scale * hb, StepInfo("recovery", q=q, r=r, s=s, predicted_cost_change=-scale * s)

    if q <= 1e-12:
        raise DegenerateGeometry(f"g'H^-1 g = {q:.3e}")
    # unconstrained trust-region step if it already satisfies the constraint
    lam_t = math.sqrt(q / (2 * p.delta))
    if r / lam_t + c <= 0:
        return hg / lam_t, StepInfo("cpo", q=q, r=r, s=s, lam=lam_t, predicted_cost_change=r / lam_t)

    A = q - r * r / s
    B = 2 * p.delta - c * c / s
    if A <= 1e-12 * q or B <= 0:
        # g parallel to b (or boundary tangent to the ellipsoid): minimum-norm boundary point
        x = -(c / s) * hb
        return x, StepInfo("cpo", q=q, r=r, s=s, predicted_cost_change=-c)
    lam = math.sqrt(A / B)
    nu = max(0.0, (r + lam * c) / s)
    x = (hg - nu * hb) / lam
    return x, StepInfo("cpo", q=q, r=r, s=s, lam=lam, nu=nu, predicted_cost_change=(r - nu * s) / lam)


class SurrogateTerms:
    """Importance-weighted objective and cost surrogates around theta_k on one batch."""

    def __init__(self, policy: PolicyNet, theta_k, batch: Batch, adv, cost_adv, j_c: float,
                 gamma_c: float, bc_coef: float):
        self.policy = policy
        self.theta_k = np.asarray(theta_k, dtype=float)
        self.obs = batch.obs
        self.actions = batch.actions
        self.logp_old = batch.logp
        self.adv = np.asarray(adv, dtype=float)
        self.cost_adv = np.asarray(cost_adv, dtype=float)
        self.j_c = j_c
        self.cost_scale = 1.0 / (1.0 - gamma_c)
        self.bc_coef = bc_coef
        self.expert = batch.expert_actions
        if bc_coef and self.expert is None:
            raise ValueError("bc_coef > 0 needs expert actions in the batch")

    def _ratio(self, theta):
        mean, cache = self.policy.forward(theta, self.obs)
        ls = self.policy.logstd(theta)
        ratio = np.exp(log_prob(mean, ls, self.actions) - self.logp_old)
        return ratio, mean, ls, cache

    def _weighted_grad(self, theta, weights, mean, ls, cache):
        # d/dtheta mean(weights * logp) with weights = ratio * A / B
        inv_var = np.exp(-2 * ls)
        diff = self.actions - mean
        dmean = (weights[:, None] * diff * inv_var)
        dlogstd = np.sum(weights[:, None] * (diff ** 2 * inv_var - 1.0), axis=0)
        return self.policy.backward(theta, cache, dmean, dlogstd)

    def objective(self, theta) -> float:
        ratio, mean, _, _ = self._ratio(theta)
        val = float(np.mean(ratio * self.adv))
        if self.bc_coef:
            val -= self.bc_coef * float(np.mean(np.sum((self.expert - mean) ** 2, axis=1)))
        return val

    def objective_grad(self, theta) -> np.ndarray:
        ratio, mean, ls, cache = self._ratio(theta)
        grad = self._weighted_grad(theta, ratio * self.adv / len(ratio), mean, ls, cache)
        if self.bc_coef:
            diff = self.expert - mean
            grad -= self.bc_coef * self.policy.backward(theta, cache, -2.0 * diff / len(diff))
        return grad

    def cost(self, theta) -> float:
        ratio = self._ratio(theta)[0]
        return self.j_c + self.cost_scale * float(np.mean(ratio * self.cost_adv))

    def cost_grad(self, theta) -> np.ndarray:
        ratio, mean, ls, cache = self._ratio(theta)
        w = self.cost_scale * ratio * self.cost_adv / len(ratio)
        return self._weighted_grad(theta, w, mean, ls, cache)


@dataclass
class UpdateDiagnostics:
    accepted: bool
    backtracks: int
    kl: float
    improvement: float
    predicted_cost: float
    realized_cost: float
    mode: str

    @property
    def recovery(self) -> bool:
        return self.mode == "recovery"


def line_search(policy: PolicyNet, theta_k, direction, terms: SurrogateTerms, info: StepInfo,
                cfg: TrustRegionConfig, constrained: bool = True):
    """Backtrack theta_k + ratio^j * direction until the KL, improvement and cost checks pass."""
    theta_k = np.asarray(theta_k, dtype=float)
    obj0 = terms.objective(theta_k)
    cost0 = terms.cost(theta_k)
    c = terms.j_c - cfg.cost_limit
    kl = improvement = cost_new = float("nan")
    for j in range(cfg.max_backtracks + 1):
        frac = cfg.backtrack_ratio ** j
        theta = theta_k + frac * direction
        kl = avg_kl(policy, theta_k, theta, terms.obs)
        improvement = terms.objective(theta) - obj0
        cost_new = terms.cost(theta)
        if not (np.isfinite(kl) and kl <= cfg.max_kl):
            continue
        if info.mode == "recovery":
            ok = cost_new < cost0
        else:
            ok = improvement >= 0
            if ok and constrained:
                ok = cost_new <= cfg.cost_limit + cfg.slack or (c > 0 and cost_new < cost0)
        if ok:
            return theta, UpdateDiagnostics(True, j, kl, improvement,
                                            terms.j_c + frac * info.predicted_cost_change, cost_new, info.mode)
    return theta_k.copy(), UpdateDiagnostics(False, cfg.max_backtracks + 1, 0.0, 0.0, cost0, cost0, info.mode)


def normalize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / (x.std() + 1e-8)


@dataclass
class Learner:
    """Policy and the two value networks with their current parameters."""

    policy: PolicyNet
    vnet: ValueNet
    theta: np.ndarray
    phi: np.ndarray
    phi_c: np.ndarray

    def advantages(self, batch: Batch, cfg: TrustRegionConfig):
        v, v_next = self.vnet(self.phi, batch.obs), self.vnet(self.phi, batch.next_obs)
        vc, vc_next = self.vnet(self.phi_c, batch.obs), self.vnet(self.phi_c, batch.next_obs)
        adv = td_advantage(batch.rewards, v, v_next, cfg.gamma, batch.terminal)
        cadv = td_advantage(batch.costs, vc, vc_next, cfg.gamma_c, batch.terminal)
        ret = value_targets(batch, v_next, cfg.gamma, batch.rewards)
        cret = value_targets(batch, vc_next, cfg.gamma_c, batch.costs)
        return adv, cadv, ret, cret

    def update(self, batch: Batch, cfg: TrustRegionConfig, mode: str = "cpo", bc: bool = True) -> dict:
        """One policy step followed by value refits; returns a diagnostics dict."""
        if mode not in ("cpo", "trpo"):
            raise ValueError(f"unknown mode {mode!r}")
        adv, cadv, ret, cret = self.advantages(batch, cfg)
        adv = normalize(adv)
        j_c = constraint_estimate(batch, cfg.gamma_c)
        bc_coef = cfg.bc_coef if bc else 0.0
        terms = SurrogateTerms(self.policy, self.theta, batch, adv, cadv, j_c, cfg.gamma_c, bc_coef)
        bc_value = (bc_loss(self.policy, self.theta, batch.obs, batch.expert_actions, with_grad=False)
                    if batch.expert_actions is not None else float("nan"))

        g = terms.objective_grad(self.theta)
        b = terms.cost_grad(self.theta) if mode == "cpo" else None
        fvp = FisherOperator(self.policy, self.theta, batch.obs, cfg.damping)
        problem = SurrogateProblem(g, b, j_c - cfg.cost_limit, cfg.max_kl, fvp, cfg.cg_iters)
        try:
            direction, info = compute_step(problem)
            new_theta, diag = line_search(self.policy, self.theta, direction, terms, info, cfg,
                                          constrained=(mode == "cpo"))
        except DegenerateGeometry:
            new_theta = self.theta.copy()
            diag = UpdateDiagnostics(False, 0, 0.0, 0.0, j_c, j_c, "degenerate")
        self.theta = new_theta

        self.phi, vl0, vl1 = fit_values(self.vnet, self.phi, batch.obs, ret, cfg.vf_step_size, cfg.vf_iters)
        self.phi_c, cl0, cl1 = fit_values(self.vnet, self.phi_c, batch.obs, cret, cfg.vf_step_size, cfg.vf_iters)
        return {
            "avg_return": float(np.mean(batch.episode_returns())),
            "J_c": j_c,
            "bc_loss": bc_value,
            "kl": diag.kl,
            "steps": len(batch),
            "accepted": diag.accepted,
            "backtracks": diag.backtracks,
            "improvement": diag.improvement,
            "predicted_cost": diag.predicted_cost,
            "realized_cost": diag.realized_cost,
            "mode": diag.mode,
            "v_loss": vl1,
            "vc_loss": cl1,
        }
