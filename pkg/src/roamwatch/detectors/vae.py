"""Fully connected variational autoencoder in plain numpy.

Encoder d -> 128 -> 64 -> (mu, log-variance) over a 32-dim latent;
decoder mirrors back to d.  Training minimizes the batch mean of
``beta * L_kl + L_rec`` with the reparameterization trick; gradients
are derived by hand and verified against finite differences in the
test suite.  Inference is deterministic: a point is scored by the
squared reconstruction error of its posterior-mean code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["FcVae", "vae_loss_and_grads", "kl_divergence"]

HIDDEN1 = 128
HIDDEN2 = 64
LATENT = 32

PARAM_NAMES = (
    "enc_w1", "enc_b1",
    "enc_w2", "enc_b2",
    "mu_w", "mu_b",
    "lv_w", "lv_b",
    "dec_w1", "dec_b1",
    "dec_w2", "dec_b2",
    "out_w", "out_b",
)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def kl_divergence(mu: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    """Per-point KL(q(z|x) || N(0, I)) for diagonal Gaussians."""
    return -0.5 * np.sum(1.0 + log_var - mu**2 - np.exp(log_var), axis=-1)


def init_params(d: int, rng: np.random.Generator, scale: float = 1.0) -> dict:
    """He-style initialization sized to the input width ``d``."""

    def w(fan_in, fan_out):
        return rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))

    return {
        "enc_w1": w(d, HIDDEN1), "enc_b1": np.zeros(HIDDEN1),
        "enc_w2": w(HIDDEN1, HIDDEN2), "enc_b2": np.zeros(HIDDEN2),
        "mu_w": w(HIDDEN2, LATENT), "mu_b": np.zeros(LATENT),
        "lv_w": w(HIDDEN2, LATENT), "lv_b": np.zeros(LATENT),
        "dec_w1": w(LATENT, HIDDEN2), "dec_b1": np.zeros(HIDDEN2),
        "dec_w2": w(HIDDEN2, HIDDEN1), "dec_b2": np.zeros(HIDDEN1),
        "out_w": w(HIDDEN1, d), "out_b": np.zeros(d),
    }


def _encode(params: dict, X: np.ndarray):
    a1 = X @ params["enc_w1"].T + params["enc_b1"]
    h1 = _relu(a1)
    a2 = h1 @ params["enc_w2"].T + params["enc_b2"]
    h2 = _relu(a2)
    mu = h2 @ params["mu_w"].T + params["mu_b"]
    lv = h2 @ params["lv_w"].T + params["lv_b"]
    return a1, h1, a2, h2, mu, lv


def _decode(params: dict, Z: np.ndarray):
    a3 = Z @ params["dec_w1"].T + params["dec_b1"]
    g1 = _relu(a3)
    a4 = g1 @ params["dec_w2"].T + params["dec_b2"]
    g2 = _relu(a4)
    xhat = g2 @ params["out_w"].T + params["out_b"]
    return a3, g1, a4, g2, xhat


def vae_loss_and_grads(
    params: dict, X: np.ndarray, eps: np.ndarray, beta: float = 1.0
) -> tuple[float, dict]:
    """Batch loss mean(beta*L_kl + L_rec) and its analytic gradients.

    ``eps`` is the (n, latent) standard-normal draw used by the
    reparameterization, passed in explicitly so the function is pure
    (the finite-difference oracle depends on that).
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]

    a1, h1, a2, h2, mu, lv = _encode(params, X)
    sigma = np.exp(0.5 * lv)
    Z = mu + sigma * eps
    a3, g1, a4, g2, xhat = _decode(params, Z)

    rec = np.sum((X - xhat) ** 2, axis=1)
    kl = kl_divergence(mu, lv)
    loss = float(np.mean(beta * kl + rec))

    g = {}
    # reconstruction head
    d_xhat = 2.0 * (xhat - X) / n
    g["out_w"] = d_xhat.T @ g2
    g["out_b"] = d_xhat.sum(axis=0)
    d_g2 = d_xhat @ params["out_w"]
    d_a4 = d_g2 * (a4 > 0)
    g["dec_w2"] = d_a4.T @ g1
    g["dec_b2"] = d_a4.sum(axis=0)
    d_g1 = d_a4 @ params["dec_w2"]
    d_a3 = d_g1 * (a3 > 0)
    g["dec_w1"] = d_a3.T @ Z
    g["dec_b1"] = d_a3.sum(axis=0)
    d_z = d_a3 @ params["dec_w1"]

    # reparameterization + KL terms
    d_mu = d_z + beta * mu / n
    d_lv = d_z * eps * 0.5 * sigma + beta * (np.exp(lv) - 1.0) / (2.0 * n)

    g["mu_w"] = d_mu.T @ h2
    g["mu_b"] = d_mu.sum(axis=0)
    g["lv_w"] = d_lv.T @ h2
    g["lv_b"] = d_lv.sum(axis=0)
    d_h2 = d_mu @ params["mu_w"] + d_lv @ params["lv_w"]
    d_a2 = d_h2 * (a2 > 0)
    g["enc_w2"] = d_a2.T @ h1
    g["enc_b2"] = d_a2.sum(axis=0)
    d_h1 = d_a2 @ params["enc_w2"]
    d_a1 = d_h1 * (a1 > 0)
    g["enc_w1"] = d_a1.T @ X
    g["enc_b1"] = d_a1.sum(axis=0)
    return loss, g


@dataclass
class FcVae:
    kind = "fcvae"

    params: dict
    beta: float = 1.0
    input_dim: int = 0
    loss_history: list[float] = field(default_factory=list)

    @classmethod
    def fit(
        cls,
        X: np.ndarray,
        *,
        epochs: int = 50,
        batch_size: int = 128,
        learning_rate: float = 1e-3,
        beta: float = 1.0,
        seed: int | np.random.Generator = 0,
    ) -> "FcVae":
        """Train with adaptive-moment gradient descent.

        Batch order and noise draws come from the seeded RNG, so the
        fitted model is a pure function of (data, hyperparameters, seed).
        """
        X = np.asarray(X, dtype=float)
        n, d = X.shape
        if beta <= 0:
            raise ValueError("beta must be positive")
        batch_size = min(batch_size, n)
        rng = (
            seed
            if isinstance(seed, np.random.Generator)
            else np.random.default_rng(seed)
        )
        params = init_params(d, rng)

        b1, b2, adam_eps = 0.9, 0.999, 1e-8
        m = {k: np.zeros_like(v) for k, v in params.items()}
        v = {k: np.zeros_like(w) for k, w in params.items()}
        step = 0
        history = []
        for epoch in range(epochs):
            order = rng.permutation(n)
            epoch_losses = []
            for start in range(0, n, batch_size):
                batch = X[order[start : start + batch_size]]
                eps = rng.standard_normal((batch.shape[0], LATENT))
                loss, grads = vae_loss_and_grads(params, batch, eps, beta)
                if not np.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite loss {loss} at epoch {epoch} step {step}; "
                        "lower the learning rate or rescale the inputs"
                    )
                epoch_losses.append(loss)
                step += 1
                for key in params:
                    gk = grads[key]
                    m[key] = b1 * m[key] + (1 - b1) * gk
                    v[key] = b2 * v[key] + (1 - b2) * gk**2
                    mhat = m[key] / (1 - b1**step)
                    vhat = v[key] / (1 - b2**step)
                    params[key] -= learning_rate * mhat / (np.sqrt(vhat) + adam_eps)
            history.append(float(np.mean(epoch_losses)))
        return cls(params=params, beta=beta, input_dim=d, loss_history=history)

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        """Decode the posterior mean; no sampling, fully deterministic."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        *_, mu, _lv = _encode(self.params, X)
        *_, xhat = _decode(self.params, mu)
        return xhat

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        xhat = self.reconstruct(X)
        return np.sum((X - xhat) ** 2, axis=1)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "input_dim": self.input_dim,
            "loss_history": self.loss_history,
            "params": {k: v.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FcVae":
        return cls(
            params={k: np.array(v) for k, v in d["params"].items()},
            beta=float(d["beta"]),
            input_dim=int(d["input_dim"]),
            loss_history=list(d.get("loss_history", [])),
        )
