"""Policy / value networks over a flat parameter vector, with exact gradients.

The architecture is fixed (Conv1D stack on the scan, FC feature layer, tanh
MLP head) so reverse- and forward-mode passes are written out by hand.
Layer weights are stored as (fan_in, fan_out) and applied as ``x @ W + b``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    n_beams: int = 90
    n_robots: int = 3
    conv: tuple[tuple[int, int, int], ...] = ((32, 5, 2), (32, 3, 2))  # (filters, kernel, stride)
    feature_dim: int = 128
    hidden: tuple[int, ...] = (128, 128)
    value_hidden: tuple[int, ...] = (128, 128)
    action_dim: int = 2
    init_logstd: float = math.log(0.35)  # log(0.5 * v_max)
    logstd_bounds: tuple[float, float] = (-5.0, 1.0)
    dtype: str = "float64"  # compute precision of forward/backward passes

    @property
    def obs_dim(self) -> int:
        return self.n_beams + 4 + 2 * (self.n_robots - 1)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["conv"] = tuple(tuple(c) for c in d["conv"])
        for k in ("hidden", "value_hidden", "logstd_bounds"):
            d[k] = tuple(d[k])
        return cls(**d)


def conv_out_len(length: int, kernel: int, stride: int) -> int:
    if length < kernel:
        raise ShapeMismatch(f"sequence length {length} shorter than kernel {kernel}")
    return (length - kernel) // stride + 1


def orthogonal_init(rows: int, cols: int, gain: float = 1.0,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Random matrix with orthonormal rows (rows <= cols) or columns, times ``gain``."""
    rng = np.random.default_rng() if rng is None else rng
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q.T if rows < cols else q
    return gain * w[:rows, :cols]


class ParamLayout:
    """Ordered registry mapping layer parameter names to slices of a flat vector."""

    def __init__(self):
        self.entries: dict[str, tuple[int, tuple[int, ...]]] = {}
        self.size = 0

    def add(self, name: str, shape) -> None:
        shape = tuple(int(s) for s in shape)
        self.entries[name] = (self.size, shape)
        self.size += int(np.prod(shape))

    def slice(self, name: str) -> slice:
        off, shape = self.entries[name]
        return slice(off, off + int(np.prod(shape)))

    def view(self, theta: np.ndarray, name: str) -> np.ndarray:
        off, shape = self.entries[name]
        return theta[off: off + int(np.prod(shape))].reshape(shape)

    def to_dict(self) -> dict:
        return {k: [off, list(shape)] for k, (off, shape) in self.entries.items()}

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamLayout) and self.entries == other.entries


def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # x (B, L, C) -> (B, Lout, K*C)
    b, length, c = x.shape
    lout = conv_out_len(length, kernel, stride)
    idx = stride * np.arange(lout)[:, None] + np.arange(kernel)[None, :]
    return x[:, idx, :].reshape(b, lout, kernel * c)


def _col2im(dcols: np.ndarray, length: int, channels: int, kernel: int, stride: int) -> np.ndarray:
    b, lout, _ = dcols.shape
    d = dcols.reshape(b, lout, kernel, channels)
    dx = np.zeros((b, length, channels), dcols.dtype)
    for k in range(kernel):
        dx[:, k: k + stride * (lout - 1) + 1: stride, :] += d[:, :, k, :]
    return dx


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Valid 1D convolution on channels-last input (B, L, C_in); w is (kernel*C_in, filters)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    if w.shape[0] != kernel * x.shape[2]:
        raise ShapeMismatch(f"filter rows {w.shape[0]} != kernel*channels {kernel * x.shape[2]}")
    return _im2col(x, kernel, stride) @ w + b


class _MLP:
    """tanh hidden layers, linear output; parameters named ``{prefix}{k}.w/.b``."""

    def __init__(self, layout: ParamLayout, prefix: str, sizes: list[int], dtype=np.float64):
        self.layout = layout
        self.dtype = dtype
        self.names = []
        for k, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
            name = f"{prefix}{k}" if k < len(sizes) - 2 else "out"
            layout.add(name + ".w", (m, n))
            layout.add(name + ".b", (n,))
            self.names.append(name)

    def _p(self, theta, name):
        return self.layout.view(theta, name).astype(self.dtype, copy=False)

    def forward(self, theta, x):
        acts = [x]
        h = x
        last = len(self.names) - 1
        for k, name in enumerate(self.names):
            z = h @ self._p(theta, name + ".w") + self._p(theta, name + ".b")
            h = z if k == last else np.tanh(z)
            acts.append(h)
        return h, acts

    def backward(self, theta, acts, dout, grad):
        """Accumulate parameter gradients into ``grad``; return d(input)."""
        d = dout
        last = len(self.names) - 1
        for k in range(last, -1, -1):
            name = self.names[k]
            if k != last:
                d = d * (1.0 - acts[k + 1] ** 2)
            grad[self.layout.slice(name + ".w")] += (acts[k].T @ d).ravel()
            grad[self.layout.slice(name + ".b")] += d.sum(axis=0)
            d = d @ self._p(theta, name + ".w").T
        return d

    def jvp(self, theta, acts, v, dx):
        """Tangent of the output for parameter tangent ``v`` and input tangent ``dx``."""
        t = dx
        last = len(self.names) - 1
        for k, name in enumerate(self.names):
            w = self._p(theta, name + ".w")
            dz = acts[k] @ self._p(v, name + ".w") + self._p(v, name + ".b")
            if t is not None:
                dz = dz + t @ w
            t = dz if k == last else dz * (1.0 - acts[k + 1] ** 2)
        return t


def _gain_init(layout: ParamLayout, rng, gains: dict[str, float]) -> np.ndarray:
    theta = np.zeros(layout.size)
    for name, (off, shape) in layout.entries.items():
        if name.endswith(".w"):
            gain = gains.get(name[:-2], math.sqrt(2.0))
            theta[layout.slice(name)] = orthogonal_init(shape[0], shape[1], gain, rng).ravel()
    return theta


class PolicyNet:
    """Gaussian policy: conv features of the scan + [o_v, o_g, o_p] -> action mean.

    The last ``action_dim`` entries of theta are the free log-std vector.
    """

    def __init__(self, cfg: NetConfig = NetConfig()):
        self.cfg = cfg
        self.layout = ParamLayout()
        length, channels = cfg.n_beams, 1
        self.conv_shapes = []
        for k, (filters, kernel, stride) in enumerate(cfg.conv):
            lout = conv_out_len(length, kernel, stride)
            self.layout.add(f"conv{k}.w", (kernel * channels, filters))
            self.layout.add(f"conv{k}.b", (filters,))
            self.conv_shapes.append((length, channels, kernel, stride))
            length, channels = lout, filters
        self.flat_dim = length * channels
        self.layout.add("feat.w", (self.flat_dim, cfg.feature_dim))
        self.layout.add("feat.b", (cfg.feature_dim,))
        self.rest_dim = cfg.obs_dim - cfg.n_beams
        sizes = [cfg.feature_dim + self.rest_dim, *cfg.hidden, cfg.action_dim]
        self.dtype = np.dtype(cfg.dtype)
        self.head = _MLP(self.layout, "fc", sizes, self.dtype)
        self.layout.add("logstd", (cfg.action_dim,))

    @property
    def size(self) -> int:
        return self.layout.size

    def init_params(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        rng = np.random.default_rng() if rng is None else rng
        theta = _gain_init(self.layout, rng, {"out": 0.01})
        theta[self.layout.slice("logstd")] = self.cfg.init_logstd
        return theta

    def _p(self, theta, name):
        return self.layout.view(theta, name).astype(self.dtype, copy=False)

    def _check(self, theta, obs):
        obs = np.asarray(obs, dtype=self.dtype)
        if obs.ndim == 1:
            obs = obs[None]
        if obs.shape[1] != self.cfg.obs_dim:
            raise ShapeMismatch(f"observation dim {obs.shape[1]} != {self.cfg.obs_dim}")
        if theta.shape != (self.size,):
            raise ShapeMismatch(f"parameter vector length {theta.shape} != {self.size}")
        return obs

    def forward(self, theta: np.ndarray, obs: np.ndarray):
        """Returns (mean (B, action_dim), cache)."""
        obs = self._check(theta, obs)
        nb = self.cfg.n_beams
        bsz = len(obs)
        h = obs[:, :nb, None]
        conv_cache = []
        for k, (length, channels, kernel, stride) in enumerate(self.conv_shapes):
            cols = _im2col(h, kernel, stride)
            lout = cols.shape[1]
            cols = cols.reshape(bsz * lout, -1)
            h = np.tanh(cols @ self._p(theta, f"conv{k}.w") + self._p(theta, f"conv{k}.b"))
            conv_cache.append((cols, 1.0 - h * h))
            h = h.reshape(bsz, lout, -1)
        flat = h.reshape(bsz, -1)
        feat = np.tanh(flat @ self._p(theta, "feat.w") + self._p(theta, "feat.b"))
        x = np.concatenate([feat, obs[:, nb:]], axis=1)
        mean, acts = self.head.forward(theta, x)
        return mean, (conv_cache, flat, 1.0 - feat * feat, acts)

    def mean(self, theta, obs) -> np.ndarray:
        return self.forward(theta, obs)[0]

    def logstd(self, theta) -> np.ndarray:
        lo, hi = self.cfg.logstd_bounds
        return np.clip(theta[self.layout.slice("logstd")], lo, hi)

    def logstd_mask(self, theta) -> np.ndarray:
        lo, hi = self.cfg.logstd_bounds
        raw = theta[self.layout.slice("logstd")]
        return ((raw >= lo) & (raw <= hi)).astype(float)

    def backward(self, theta, cache, dmean, dlogstd=None) -> np.ndarray:
        """Gradient wrt theta given d(loss)/d(mean) (B, A) and d(loss)/d(logstd) (A,)."""
        conv_cache, flat, dfeat_dz, acts = cache
        bsz = len(flat)
        grad = np.zeros(self.size)
        dx = self.head.backward(theta, acts, np.asarray(dmean, dtype=self.dtype), grad)
        dfeat = dx[:, : self.cfg.feature_dim] * dfeat_dz
        grad[self.layout.slice("feat.w")] += (flat.T @ dfeat).ravel()
        grad[self.layout.slice("feat.b")] += dfeat.sum(axis=0)
        dh = dfeat @ self._p(theta, "feat.w").T  # (B, Lout*F) == (B*Lout, F) row-major
        for k in range(len(self.conv_shapes) - 1, -1, -1):
            length, channels, kernel, stride = self.conv_shapes[k]
            cols, dact = conv_cache[k]
            dz = dh.reshape(dact.shape) * dact
            grad[self.layout.slice(f"conv{k}.w")] += (cols.T @ dz).ravel()
            grad[self.layout.slice(f"conv{k}.b")] += dz.sum(axis=0)
            if k > 0:
                dcols = (dz @ self._p(theta, f"conv{k}.w").T).reshape(bsz, -1, cols.shape[1])
                dh = _col2im(dcols, length, channels, kernel, stride)
        if dlogstd is not None:
            grad[self.layout.slice("logstd")] += np.asarray(dlogstd) * self.logstd_mask(theta)
        return grad

    def jvp(self, theta, cache, v) -> np.ndarray:
        """Directional derivative of the mean, (B, A), along parameter tangent ``v``."""
        conv_cache, flat, dfeat_dz, acts = cache
        bsz = len(flat)
        t = None
        for k, (length, channels, kernel, stride) in enumerate(self.conv_shapes):
            cols, dact = conv_cache[k]
            dz = cols @ self._p(v, f"conv{k}.w") + self._p(v, f"conv{k}.b")
            if t is not None:
                tc = _im2col(t, kernel, stride).reshape(len(cols), -1)
                dz += tc @ self._p(theta, f"conv{k}.w")
            t = (dz * dact).reshape(bsz, -1, dact.shape[1])
        dflat = t.reshape(bsz, -1)
        dz = dflat @ self._p(theta, "feat.w") + flat @ self._p(v, "feat.w") \
            + self._p(v, "feat.b")
        dx = np.concatenate([dz * dfeat_dz, np.zeros((bsz, self.rest_dim), self.dtype)], axis=1)
        return self.head.jvp(theta, acts, v, dx)


class ValueNet:
    """tanh MLP from the full observation to a scalar."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        self.cfg = cfg
        self.layout = ParamLayout()
        self.dtype = np.dtype(cfg.dtype)
        self.mlp = _MLP(self.layout, "fc", [cfg.obs_dim, *cfg.value_hidden, 1], self.dtype)

    @property
    def size(self) -> int:
        return self.layout.size

    def init_params(self, rng: Optional[np.random.Generator] = None, zero_head: bool = False) -> np.ndarray:
        """Orthogonal init; ``zero_head`` zeros the output layer so V starts identically 0."""
        rng = np.random.default_rng() if rng is None else rng
        phi = _gain_init(self.layout, rng, {"out": 1.0})
        if zero_head:
            phi[self.layout.slice("out.w")] = 0.0
        return phi

    def forward(self, phi, obs):
        obs = np.asarray(obs, dtype=self.dtype)
        if obs.ndim == 1:
            obs = obs[None]
        if obs.shape[1] != self.cfg.obs_dim:
            raise ShapeMismatch(f"observation dim {obs.shape[1]} != {self.cfg.obs_dim}")
        out, acts = self.mlp.forward(phi, obs)
        return out[:, 0], acts

    def __call__(self, phi, obs) -> np.ndarray:
        return self.forward(phi, obs)[0]

    def backward(self, phi, acts, dv) -> np.ndarray:
        grad = np.zeros(self.size)
        self.mlp.backward(phi, acts, np.asarray(dv, dtype=self.dtype)[:, None], grad)
        return grad

    def mse_and_grad(self, phi, obs, targets):
        v, acts = self.forward(phi, obs)
        err = v - targets
        loss = float(np.mean(err ** 2))
        return loss, self.backward(phi, acts, 2.0 * err / len(err))


# ---------------------------------------------------------------- Gaussians

@dataclass
class GaussianAction:
    mean: np.ndarray
    logstd: np.ndarray

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.exp(self.logstd) * rng.standard_normal(np.shape(self.mean))


def policy_forward(policy: PolicyNet, theta, obs) -> GaussianAction:
    return GaussianAction(policy.mean(theta, obs), policy.logstd(theta))


def log_prob(mean, logstd, a) -> np.ndarray:
    """Diagonal Gaussian log-density summed over the last axis."""
    mean, logstd, a = np.asarray(mean), np.asarray(logstd), np.asarray(a)
    z = (a - mean) * np.exp(-logstd)
    return np.sum(-0.5 * z ** 2 - logstd - 0.5 * LOG_2PI, axis=-1)


def gaussian_kl(mean0, logstd0, mean1, logstd1) -> np.ndarray:
    """KL(N0 || N1) for diagonal Gaussians, summed over the last axis."""
    mean0, logstd0, mean1, logstd1 = map(np.asarray, (mean0, logstd0, mean1, logstd1))
    var0 = np.exp(2 * logstd0)
    var1 = np.exp(2 * logstd1)
    return np.sum(logstd1 - logstd0 + (var0 + (mean0 - mean1) ** 2) / (2 * var1) - 0.5, axis=-1)


def avg_kl(policy: PolicyNet, theta_old, theta, obs) -> float:
    m0 = policy.mean(theta_old, obs)
    m1 = policy.mean(theta, obs)
    return float(np.mean(gaussian_kl(m0, policy.logstd(theta_old), m1, policy.logstd(theta))))


def avg_kl_grad(policy: PolicyNet, theta_old, theta, obs):
    """(avg KL(pi_old || pi_theta), gradient wrt theta)."""
    m0 = policy.mean(theta_old, obs)
    ls0 = policy.logstd(theta_old)
    m1, cache = policy.forward(theta, obs)
    ls1 = policy.logstd(theta)
    b = len(m0)
    var1 = np.exp(2 * ls1)
    kl = float(np.mean(gaussian_kl(m0, ls0, m1, ls1)))
    dmean = (m1 - m0) / var1 / b
    dlogstd = np.mean(1.0 - (np.exp(2 * ls0) + (m0 - m1) ** 2) / var1, axis=0)
    return kl, policy.backward(theta, cache, dmean, dlogstd)


class FisherOperator:
    """v -> (H + damping I) v with H the Hessian of the average KL at theta_old.

    Uses the Gauss-Newton form, which is exact at theta_old for Gaussian
    policies: J^T diag(1/sigma^2) J / B on the mean, 2 I on the log-std.
    """

    def __init__(self, policy: PolicyNet, theta_old, obs, damping: float = 0.1):
        self.policy = policy
        self.theta = np.asarray(theta_old, dtype=float)
        self.mean, self.cache = policy.forward(self.theta, obs)
        self.inv_var = np.exp(-2 * policy.logstd(self.theta))
        self.mask = policy.logstd_mask(self.theta)
        self.damping = damping
        self.ls = policy.layout.slice("logstd")

    def __call__(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        jv = self.policy.jvp(self.theta, self.cache, v)
        u = jv * self.inv_var / len(jv)
        out = self.policy.backward(self.theta, self.cache, u)
        out[self.ls] += 2.0 * self.mask * v[self.ls]
        return out + self.damping * v


def fisher_vector_product(policy: PolicyNet, theta_old, obs, v, damping: float = 0.1) -> np.ndarray:
    return FisherOperator(policy, theta_old, obs, damping)(v)


# --------------------------------------------------------------- checkpoints

def save_checkpoint(path, cfg: NetConfig, params: dict[str, np.ndarray], layouts: dict[str, ParamLayout],
                    extra: Optional[dict] = None) -> None:
    """npz with flat vectors per network plus a JSON header (version, config, layouts)."""
    header = {
        "version": CHECKPOINT_VERSION,
        "net_config": asdict(cfg),
        "layouts": {k: v.to_dict() for k, v in layouts.items()},
        "extra": extra or {},
    }
    arrays = {f"param_{k}": np.asarray(v, dtype=np.float64) for k, v in params.items()}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, header=np.array(json.dumps(header)), **arrays)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (NetConfig, params dict, header dict)."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        params = {k[len("param_"):]: z[k].copy() for k in z.files if k.startswith("param_")}
    cfg = NetConfig.from_dict(header["net_config"])
    return cfg, params, header
