"""Dueling Q-network with factorized-noisy heads, by hand.

The network is small enough that forward, backward, and the Adam update are
written directly in numpy: two ReLU hidden layers, then a noisy value head
and a noisy advantage head combined as Q = V + A - mean(A). Gradients are
exact analytic expressions, checked against central finite differences in
the test suite.

Noisy layers follow the factorized-Gaussian construction: the effective
weight is mu + sigma * outer(eps_out, eps_in) with eps drawn through
f(x) = sign(x) * sqrt(|x|). A NoiseSet of zeros turns a noisy layer into a
plain dense layer over its mu parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
SIGMA_INIT = 0.5
HUBER_KAPPA = 1.0


@dataclass
class NoisyParams:
    w_mu: np.ndarray
    w_sigma: np.ndarray
    b_mu: np.ndarray
    b_sigma: np.ndarray


@dataclass
class NetworkParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    value: NoisyParams
    adv: NoisyParams
    # contiguous backing store; every leaf above is a view into it, so the
    # optimizer and soft updates run as single vector ops
    flat: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def action_count(self) -> int:
        return self.adv.w_mu.shape[0]


@dataclass
class NoiseSet:
    eps_in_v: np.ndarray
    eps_out_v: np.ndarray
    eps_in_a: np.ndarray
    eps_out_a: np.ndarray


@dataclass
class AdamState:
    m: NetworkParams
    v: NetworkParams
    t: int = 0


#: Leaf order for all parameter-tree walks (keep stable: checkpoints rely on it).
LEAF_NAMES = (
    "w1", "b1", "w2", "b2",
    "value.w_mu", "value.w_sigma", "value.b_mu", "value.b_sigma",
    "adv.w_mu", "adv.w_sigma", "adv.b_mu", "adv.b_sigma",
)


def leaves(params: NetworkParams) -> list[np.ndarray]:
    return [
        params.w1, params.b1, params.w2, params.b2,
        params.value.w_mu, params.value.w_sigma, params.value.b_mu, params.value.b_sigma,
        params.adv.w_mu, params.adv.w_sigma, params.adv.b_mu, params.adv.b_sigma,
    ]


def _carve(flat: np.ndarray, shapes: list[tuple]) -> NetworkParams:
    views, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape, dtype=int))
        views.append(flat[offset:offset + size].reshape(shape))
        offset += size
    return NetworkParams(
        w1=views[0], b1=views[1], w2=views[2], b2=views[3],
        value=NoisyParams(*views[4:8]), adv=NoisyParams(*views[8:12]),
        flat=flat,
    )


def from_leaves(arrays: list[np.ndarray]) -> NetworkParams:
    """Copy twelve leaf arrays into one contiguous buffer and return the
    tree of views over it."""
    flat = np.concatenate([np.ravel(a) for a in arrays])
    return _carve(flat, [np.shape(a) for a in arrays])


def _flat_of(tree: NetworkParams) -> np.ndarray:
    if tree.flat is not None:
        return tree.flat
    return np.concatenate([np.ravel(a) for a in leaves(tree)])


def _like(flat: np.ndarray, template: NetworkParams) -> NetworkParams:
    return _carve(flat, [a.shape for a in leaves(template)])


def tree_map(fn, *trees: NetworkParams) -> NetworkParams:
    return from_leaves([fn(*arrs) for arrs in zip(*(leaves(t) for t in trees))])


def init_network(input_dim: int, action_count: int, rng: np.random.Generator,
                 hidden: int = 256, dtype=np.float64) -> NetworkParams:
    """Fresh parameters: Glorot-uniform dense layers, noisy heads with
    mu ~ U(+-1/sqrt(fan_in)) and constant sigma = SIGMA_INIT/sqrt(fan_in)."""
    if input_dim < 1 or action_count < 2:
        raise ValueError("need input_dim >= 1 and action_count >= 2")

    def glorot(fan_out, fan_in):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)

    def noisy(fan_out, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        sigma = SIGMA_INIT / np.sqrt(fan_in)
        return NoisyParams(
            w_mu=rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype),
            w_sigma=np.full((fan_out, fan_in), sigma, dtype=dtype),
            b_mu=rng.uniform(-bound, bound, size=fan_out).astype(dtype),
            b_sigma=np.full(fan_out, sigma, dtype=dtype),
        )

    w1 = glorot(hidden, input_dim)
    w2 = glorot(hidden, hidden)
    v = noisy(1, hidden)
    a = noisy(action_count, hidden)
    return from_leaves([
        w1, np.zeros(hidden, dtype=dtype), w2, np.zeros(hidden, dtype=dtype),
        v.w_mu, v.w_sigma, v.b_mu, v.b_sigma,
        a.w_mu, a.w_sigma, a.b_mu, a.b_sigma,
    ])


def _scaled_noise(rng: np.random.Generator, size: int, dtype) -> np.ndarray:
    x = np.asarray(rng.standard_normal(size), dtype=dtype)
    return np.sign(x) * np.sqrt(np.abs(x))


def sample_noise(params: NetworkParams, rng: np.random.Generator) -> NoiseSet:
    h = params.hidden_dim
    dt = params.w1.dtype
    return NoiseSet(
        eps_in_v=_scaled_noise(rng, h, dt),
        eps_out_v=_scaled_noise(rng, 1, dt),
        eps_in_a=_scaled_noise(rng, h, dt),
        eps_out_a=_scaled_noise(rng, params.action_count, dt),
    )


def zero_noise(params: NetworkParams) -> NoiseSet:
    h = params.hidden_dim
    dt = params.w1.dtype
    return NoiseSet(np.zeros(h, dtype=dt), np.zeros(1, dtype=dt),
                    np.zeros(h, dtype=dt), np.zeros(params.action_count, dtype=dt))


def _effective(layer: NoisyParams, eps_in: np.ndarray, eps_out: np.ndarray):
    w = layer.w_mu + layer.w_sigma * np.outer(eps_out, eps_in)
    b = layer.b_mu + layer.b_sigma * eps_out
    return w, b


def _forward_cached(params: NetworkParams, obs: np.ndarray, noise: NoiseSet):
    x = np.atleast_2d(np.asarray(obs, dtype=params.w1.dtype))
    z1 = x @ params.w1.T + params.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ params.w2.T + params.b2
    h2 = np.maximum(z2, 0.0)
    wv, bv = _effective(params.value, noise.eps_in_v, noise.eps_out_v)
    wa, ba = _effective(params.adv, noise.eps_in_a, noise.eps_out_a)
    v = h2 @ wv.T + bv
    a = h2 @ wa.T + ba
    q = v + a - a.mean(axis=1, keepdims=True)
    return q, (x, z1, h1, z2, h2, wv, wa)


def forward(params: NetworkParams, obs: np.ndarray, noise: NoiseSet) -> np.ndarray:
    """Q-values for one observation (returns shape (actions,)) or a batch
    (returns (batch, actions))."""
    obs = np.asarray(obs, dtype=float)
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite observation")
    q, _ = _forward_cached(params, obs, noise)
    return q[0] if obs.ndim == 1 else q


def huber_td_loss(q_pred: np.ndarray, actions: np.ndarray, targets: np.ndarray):
    """Mean Huber(kappa=1) loss over the taken-action entries.

    Returns (loss, dloss/dq) where the gradient matrix is nonzero only at
    the taken-action entries.
    """
    q_pred = np.atleast_2d(q_pred)
    actions = np.asarray(actions, dtype=int)
    targets = np.asarray(targets, dtype=float)
    n = q_pred.shape[0]
    idx = np.arange(n)
    resid = q_pred[idx, actions] - targets
    absr = np.abs(resid)
    quad = absr <= HUBER_KAPPA
    losses = np.where(quad, 0.5 * resid * resid, HUBER_KAPPA * (absr - 0.5 * HUBER_KAPPA))
    dq = np.zeros_like(q_pred)
    dq[idx, actions] = np.clip(resid, -HUBER_KAPPA, HUBER_KAPPA) / n
    return float(losses.mean()), dq


def backward(params: NetworkParams, batch_obs: np.ndarray, actions: np.ndarray,
             targets: np.ndarray, noise: NoiseSet):
    """Analytic gradient of the Huber TD loss w.r.t. every parameter,
    including the noisy mu and sigma tensors. Returns (loss, GradientSet),
    the gradient set being shape-congruent with the parameters."""
    q, (x, z1, h1, z2, h2, wv, wa) = _forward_cached(params, batch_obs, noise)
    if not np.all(np.isfinite(q)):
        raise FloatingPointError("non-finite activations in backward pass")
    loss, g = huber_td_loss(q, actions, targets)

    k = params.action_count
    dv = g.sum(axis=1, keepdims=True)              # dQ/dV = 1 for every action
    da = g - g.sum(axis=1, keepdims=True) / k      # mean subtraction couples actions

    dwv_eff = dv.T @ h2
    dbv_eff = dv.sum(axis=0)
    dwa_eff = da.T @ h2
    dba_eff = da.sum(axis=0)

    ev = np.outer(noise.eps_out_v, noise.eps_in_v)
    ea = np.outer(noise.eps_out_a, noise.eps_in_a)
    g_value = NoisyParams(w_mu=dwv_eff, w_sigma=dwv_eff * ev,
                          b_mu=dbv_eff, b_sigma=dbv_eff * noise.eps_out_v)
    g_adv = NoisyParams(w_mu=dwa_eff, w_sigma=dwa_eff * ea,
                        b_mu=dba_eff, b_sigma=dba_eff * noise.eps_out_a)

    dh2 = dv @ wv + da @ wa
    dz2 = dh2 * (z2 > 0)
    dw2 = dz2.T @ h1
    db2 = dz2.sum(axis=0)
    dh1 = dz2 @ params.w2
    dz1 = dh1 * (z1 > 0)
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)

    grads = NetworkParams(w1=dw1, b1=db1, w2=dw2, b2=db2, value=g_value, adv=g_adv)
    return loss, grads


def init_adam_state(params: NetworkParams) -> AdamState:
    n = _flat_of(params).size
    dt = params.w1.dtype
    return AdamState(m=_like(np.zeros(n, dtype=dt), params),
                     v=_like(np.zeros(n, dtype=dt), params), t=0)


def adam_step(params: NetworkParams, grads: NetworkParams, state: AdamState,
              lr: float) -> tuple[NetworkParams, AdamState]:
    """One bias-corrected Adam update; returns fresh params and state. All
    twelve leaves update in a single pass over the flat backing buffer."""
    t = state.t + 1
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    p, g = _flat_of(params), _flat_of(grads)
    m2 = ADAM_BETA1 * _flat_of(state.m)
    m2 += (1.0 - ADAM_BETA1) * g
    v2 = ADAM_BETA2 * _flat_of(state.v)
    v2 += (1.0 - ADAM_BETA2) * np.square(g)
    denom = np.sqrt(v2 / c2)
    denom += ADAM_EPS
    upd = m2 / c1
    upd /= denom
    upd *= lr
    return _like(p - upd, params), AdamState(m=_like(m2, params),
                                             v=_like(v2, params), t=t)


def soft_update(target: NetworkParams, eval_params: NetworkParams, tau: float) -> NetworkParams:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    mixed = tau * _flat_of(eval_params) + (1.0 - tau) * _flat_of(target)
    return _like(mixed, target)


def clone(params: NetworkParams) -> NetworkParams:
    return _like(_flat_of(params).copy(), params)


def mean_sigma(params: NetworkParams) -> float:
    """Mean |sigma| over both noisy heads; a cheap exploration-level readout."""
    parts = [params.value.w_sigma, params.value.b_sigma,
             params.adv.w_sigma, params.adv.b_sigma]
    return float(np.mean([np.abs(p).mean() for p in parts]))


CHECKPOINT_VERSION = 1


def save_params(path, params: NetworkParams) -> None:
    """Versioned lossless checkpoint: one npz entry per parameter tensor."""
    data = {name: arr for name, arr in zip(LEAF_NAMES, leaves(params))}
    data["format_version"] = np.array(CHECKPOINT_VERSION)
    np.savez(path, **data)


def load_params(path) -> NetworkParams:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return from_leaves([np.array(data[name]) for name in LEAF_NAMES])
