"""Batches, returns and advantages, value fitting, constraint estimate, BC loss."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from connav.net import PolicyNet, ValueNet


@dataclass
class Batch:
    """Pooled per-robot transitions; ``episodes`` are (start, stop) slices.

    ``terminal[t]`` marks a true MDP end (success or collision); the last step
    of a timed-out episode has ``terminal`` False and is bootstrapped.
    """

    obs: np.ndarray
    next_obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    terminal: np.ndarray
    episodes: list[tuple[int, int]]
    expert_actions: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def concat(cls, parts: list["Batch"]) -> "Batch":
        eps, off = [], 0
        for p in parts:
            eps.extend((a + off, b + off) for a, b in p.episodes)
            off += len(p)

        def cat(name):
            vals = [getattr(p, name) for p in parts]
            return None if any(v is None for v in vals) else np.concatenate(vals)

        return cls(
            obs=cat("obs"), next_obs=cat("next_obs"), actions=cat("actions"), logp=cat("logp"),
            rewards=cat("rewards"), costs=cat("costs"), terminal=cat("terminal"), episodes=eps,
            expert_actions=cat("expert_actions"),
        )

    def episode_returns(self) -> np.ndarray:
        return np.array([self.rewards[a:b].sum() for a, b in self.episodes])


def discounted_returns(rewards, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    """G_t = r_t + gamma * G_{t+1} within one episode, with G_T = ``bootstrap``."""
    r = np.asarray(rewards, dtype=float)
    out = np.empty_like(r)
    acc = float(bootstrap)
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def td_advantage(r, v, v_next, gamma: float, terminal):
    """One-step TD error r + gamma * V(s') - V(s), with V(s') masked at terminals."""
    r, v, v_next = np.asarray(r, dtype=float), np.asarray(v, dtype=float), np.asarray(v_next, dtype=float)
    mask = 1.0 - np.asarray(terminal, dtype=float)
    return r + gamma * mask * v_next - v


def constraint_estimate(batch: Batch, gamma_c: float) -> float:
    """Mean over episodes of the gamma_c-discounted cost sum (sample J_c)."""
    if not batch.episodes:
        raise ValueError("empty batch")
    totals = []
    for a, b in batch.episodes:
        c = batch.costs[a:b]
        totals.append(float(np.sum(c * gamma_c ** np.arange(len(c)))))
    return float(np.mean(totals))


def value_targets(batch: Batch, values_next: np.ndarray, gamma: float, signal: np.ndarray) -> np.ndarray:
    """Discounted returns of ``signal`` per episode; truncated episodes bootstrap from V(o_T)."""
    out = np.empty(len(batch))
    for a, b in batch.episodes:
        boot = 0.0 if batch.terminal[b - 1] else float(values_next[b - 1])
        out[a:b] = discounted_returns(signal[a:b], gamma, boot)
    return out


def bc_loss(policy: PolicyNet, theta, obs, expert_actions, with_grad: bool = True):
    """Mean over samples of |a_E - mean_theta(o)|^2, and its gradient wrt theta."""
    mean, cache = policy.forward(theta, obs)
    diff = np.asarray(expert_actions) - mean
    loss = float(np.mean(np.sum(diff ** 2, axis=1)))
    if not with_grad:
        return loss
    return loss, policy.backward(theta, cache, -2.0 * diff / len(diff))


# -------------------------------------------------------------------- L-BFGS

@dataclass
class LBFGSResult:
    x: np.ndarray
    f: float
    n_iter: int
    converged: bool
    message: str


def _two_loop(g, s_hist, y_hist):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        q *= (s_hist[-1] @ y_hist[-1]) / (y_hist[-1] @ y_hist[-1])
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def lbfgs_minimize(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0, memory: int = 10,
                   step_size: float = 0.1, max_iter: int = 25, gtol: float = 1e-6,
                   c1: float = 1e-4, shrink: float = 0.5, max_backtracks: int = 30) -> LBFGSResult:
    """Limited-memory BFGS with Armijo backtracking.

    ``step_size`` scales the first steepest-descent step (no curvature pairs
    yet); later iterations start from the unit quasi-Newton step.
    """
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    for it in range(max_iter):
        if np.linalg.norm(g) <= gtol:
            return LBFGSResult(x, f, it, True, "gradient tolerance reached")
        d = -_two_loop(g, s_hist, y_hist)
        slope = g @ d
        if slope >= 0:  # stale curvature; restart from steepest descent
            s_hist.clear()
            y_hist.clear()
            d = -g
            slope = g @ d
        t = step_size * min(1.0, 1.0 / np.abs(g).sum()) if not s_hist else 1.0
        for _ in range(max_backtracks):
            x_new = x + t * d
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + c1 * t * slope:
                break
            t *= shrink
        else:
            return LBFGSResult(x, f, it, False, "line search failed")
        s, y = x_new - x, g_new - g
        if s @ y > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            s_hist.append(s)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = x_new, f_new, g_new
    conv = bool(np.linalg.norm(g) <= gtol)
    return LBFGSResult(x, f, max_iter, conv, "converged" if conv else "iteration limit")


def fit_values(vnet: ValueNet, phi, obs, targets, step_size: float = 0.1, max_iter: int = 25):
    """Minimize the mean squared value error with L-BFGS; returns (phi, loss_before, loss_after)."""
    targets = np.asarray(targets, dtype=float)

    def fun(p):
        return vnet.mse_and_grad(p, obs, targets)

    before = fun(phi)[0]
    res = lbfgs_minimize(fun, phi, step_size=step_size, max_iter=max_iter)
    return res.x, before, res.f


# --------------------------------------------------------------- diagnostics

def append_jsonl(path, record: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
