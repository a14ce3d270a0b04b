"""Per-agent intrinsic curiosity: encoder, forward model and inverse model.

The forward model predicts the next feature vector from the current feature
and the agent's action; its squared error (scaled by ``eta``) is the intrinsic
reward. The inverse model classifies the action from consecutive features and
is the only signal that trains the encoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import N_ACTIONS
from .nn import Adam, Network, TrainingDivergence, init_network, softmax


@dataclass
class IcmConfig:
    eta: float = 0.1
    beta: float = 0.2
    feature_dim: int = 16
    lr: float = 1e-3
    hidden: int = 64
    predict_raw_observations: bool = False

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


class CuriosityModule:
    def __init__(self, obs_dim: int, config: IcmConfig, seed: int | np.random.Generator):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        h, f = config.hidden, config.feature_dim
        self.config = config
        self.obs_dim = obs_dim
        self.encoder = init_network([obs_dim, h, h, f], rng)
        if config.predict_raw_observations:
            self.forward_model = init_network([obs_dim + N_ACTIONS, h, obs_dim], rng)
        else:
            self.forward_model = init_network([f + N_ACTIONS, h, f], rng)
        self.inverse_model = init_network([2 * f, h, N_ACTIONS], rng)
        self.opt = Adam(self.params(), config.lr)

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.forward_model.params() + self.inverse_model.params()

    def networks(self) -> dict[str, Network]:
        return {"encoder": self.encoder, "forward": self.forward_model, "inverse": self.inverse_model}

    def step(self, obs: np.ndarray, action: np.ndarray, next_obs: np.ndarray, learn: bool = True) -> float:
        """Intrinsic reward for one transition, then (optionally) one training step on it."""
        if not learn:
            phi_t, phi_t1 = encode(self, obs), encode(self, next_obs)
            if self.config.predict_raw_observations:
                return intrinsic_reward(self.config, predict_next(self, obs, action), next_obs)
            return intrinsic_reward(self.config, predict_next(self, phi_t, action), phi_t1)
        out = _losses_and_grads(self, obs, action, next_obs)
        _apply(self, out["grads"], out["forward_loss"] + out["inverse_loss"])
        return float(out["rewards"][0])


def _check(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != width:
        raise ValueError(f"{what} width {x.shape[-1]} != {width}")
    return x


def encode(module: CuriosityModule, obs: np.ndarray) -> np.ndarray:
    return module.encoder(_check(obs, module.obs_dim, "observation"))


def predict_next(module: CuriosityModule, feature: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Forward-model prediction; ``feature`` is the raw observation in the raw-prediction variant."""
    width = module.forward_model.n_in - N_ACTIONS
    x = np.concatenate([_check(feature, width, "feature"), _check(action, N_ACTIONS, "action")], axis=-1)
    return module.forward_model(x)


def intrinsic_reward(config: IcmConfig, predicted: np.ndarray, actual: np.ndarray) -> float | np.ndarray:
    """eta * 0.5 * ||predicted - actual||^2 over the last axis."""
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {actual.shape}")
    d = predicted - actual
    r = config.eta * 0.5 * (d * d).sum(axis=-1)
    return float(r) if np.ndim(r) == 0 else r


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = len(labels)
    loss = float(-log_p[np.arange(b), labels].mean())
    g = np.exp(log_p)
    g[np.arange(b), labels] -= 1.0
    return loss, g / b


def inverse_loss(module: CuriosityModule, feature_t: np.ndarray, feature_t1: np.ndarray, action: np.ndarray) -> float:
    f = module.config.feature_dim
    x = np.concatenate([_check(feature_t, f, "feature"), _check(feature_t1, f, "feature")], axis=-1)
    logits = np.atleast_2d(module.inverse_model(x))
    labels = np.atleast_2d(_check(action, N_ACTIONS, "action")).argmax(axis=1)
    return _cross_entropy(logits, labels)[0]


def inverse_probabilities(module: CuriosityModule, feature_t: np.ndarray, feature_t1: np.ndarray) -> np.ndarray:
    return softmax(module.inverse_model(np.concatenate([feature_t, feature_t1], axis=-1)))


def _losses_and_grads(module: CuriosityModule, obs, action, next_obs) -> dict:
    cfg = module.config
    o = np.atleast_2d(_check(obs, module.obs_dim, "observation"))
    o1 = np.atleast_2d(_check(next_obs, module.obs_dim, "observation"))
    a = np.atleast_2d(_check(action, N_ACTIONS, "action"))
    b = len(o)

    phi_t, tape_t = module.encoder.forward(o)
    phi_t1, tape_t1 = module.encoder.forward(o1)

    # forward term: encoder outputs enter as constants
    src, target = (o, o1) if cfg.predict_raw_observations else (phi_t, phi_t1)
    pred, ftape = module.forward_model.forward(np.concatenate([src, a], axis=1))
    diff = pred - target
    per_sample = 0.5 * (diff * diff).sum(axis=1)
    forward_loss = float(per_sample.mean())
    fgrads, _ = module.forward_model.backward(ftape, (cfg.beta / b) * diff)

    logits, itape = module.inverse_model.forward(np.concatenate([phi_t, phi_t1], axis=1))
    inv_loss, g_logits = _cross_entropy(logits, a.argmax(axis=1))
    igrads, g_in = module.inverse_model.backward(itape, (1.0 - cfg.beta) * g_logits)
    f = cfg.feature_dim
    e0, _ = module.encoder.backward(tape_t, g_in[:, :f])
    e1, _ = module.encoder.backward(tape_t1, g_in[:, f:])
    egrads = [x + y for x, y in zip(e0, e1)]

    return {
        "forward_loss": forward_loss,
        "inverse_loss": inv_loss,
        "rewards": cfg.eta * per_sample,
        "grads": egrads + fgrads + igrads,
    }


def _apply(module: CuriosityModule, grads, loss: float) -> None:
    if not np.isfinite(loss):
        raise TrainingDivergence("non-finite curiosity loss")
    module.opt.step(module.params(), grads)


def icm_update(module: CuriosityModule, obs, action, next_obs) -> tuple[float, float]:
    """One optimizer step on beta * forward + (1 - beta) * inverse; returns pre-step (forward, inverse) losses."""
    out = _losses_and_grads(module, obs, action, next_obs)
    _apply(module, out["grads"], out["forward_loss"] + out["inverse_loss"])
    return out["forward_loss"], out["inverse_loss"]


def total_reward(r_intrinsic, r_external):
    return r_intrinsic + r_external
