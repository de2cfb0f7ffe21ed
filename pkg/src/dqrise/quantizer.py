"""Residual VQ-VAE over normalized 6-joint hand states.

Hand states in [0, 1] are rescaled to [-1, 1], encoded by a tanh MLP,
quantized greedily through a stack of small codebooks (each layer quantizes
what the previous layers left over) and decoded back. Training uses the
reconstruction term plus the two stop-gradient codebook terms::

    |s - s_hat|^2 + beta * |sg[z_e] - z_q|^2 + gamma * |z_e - sg[z_q]|^2

with a straight-through copy of the decoder gradient onto ``z_e``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import HAND_DIM, check_hand_states
from .mathcore import Adam, Mlp, kmeans, make_rng, mlp_backward, mlp_forward


@dataclass
class QuantizeResult:
    z_e: np.ndarray
    z_q: np.ndarray
    layer_indices: tuple
    reconstruction: np.ndarray | None = None

    def composite_index(self, codebook_size=4) -> int:
        return composite_index(self.layer_indices, codebook_size)


def composite_index(layer_indices, codebook_size=4):
    """Mixed-radix index, first layer most significant (4*i1 + i2 for 2x4)."""
    idx = np.asarray(layer_indices)
    out = np.zeros(idx.shape[:-1], dtype=int)
    for col in range(idx.shape[-1]):
        out = out * codebook_size + idx[..., col]
    return out if out.ndim else int(out)


def residual_quantize(codebooks, z_e):
    """Greedy layer-wise nearest-code quantization of a batch of latents.

    ``codebooks`` has shape (layers, codes, dim). Returns ``(z_q, indices)``
    where indices is (n, layers). Ties go to the lowest code index.
    """
    codebooks = np.asarray(codebooks, dtype=float)
    z = np.atleast_2d(np.asarray(z_e, dtype=float))
    residual = z.copy()
    z_q = np.zeros_like(z)
    indices = np.empty((z.shape[0], codebooks.shape[0]), dtype=int)
    for layer, codes in enumerate(codebooks):
        d2 = ((residual[:, None, :] - codes[None, :, :]) ** 2).sum(axis=2)
        pick = np.argmin(d2, axis=1)
        chosen = codes[pick]
        indices[:, layer] = pick
        z_q += chosen
        residual -= chosen
    return z_q, indices


def quantize_residual(codebooks, z_e) -> QuantizeResult:
    """Quantize a single latent vector; see :func:`residual_quantize`."""
    z_e = np.asarray(z_e, dtype=float)
    codebooks = np.asarray(codebooks, dtype=float)
    if z_e.shape != (codebooks.shape[2],):
        raise ValueError(f"latent must have length {codebooks.shape[2]}")
    z_q, idx = residual_quantize(codebooks, z_e)
    return QuantizeResult(z_e.copy(), z_q[0], tuple(int(i) for i in idx[0]))


def _decode_to_hand(decoder, z):
    out, cache = mlp_forward(decoder, z)
    return (np.clip(out, -1.0, 1.0) + 1.0) / 2.0, out, cache


def _loss_and_grads(model, S, quantize=True):
    """Batch-mean loss terms and gradients for encoder, decoder and codebooks.

    With ``quantize=False`` the decoder reads ``z_e`` directly and only the
    reconstruction term is used (encoder/decoder warm-up).
    """
    B = S.shape[0]
    enc, dec = model.encoder_, model.decoder_
    z_e, enc_cache = mlp_forward(enc, 2.0 * S - 1.0)
    if quantize:
        z_q, idx = residual_quantize(model.codebooks_, z_e)
    else:
        z_q, idx = z_e, None
    # straight-through: the decoder sees the value of z_q
    s_hat, d_out, dec_cache = _decode_to_hand(dec, z_q)

    diff = S - s_hat
    rec = float(np.sum(diff * diff)) / B
    gap = z_q - z_e
    cb = float(np.sum(gap * gap)) / B if quantize else 0.0
    terms = {"reconstruction": rec, "codebook": cb, "commitment": cb}
    terms["total"] = rec + model.beta * cb + model.gamma * cb

    inside = (d_out > -1.0) & (d_out < 1.0)
    g_dout = (-2.0 * diff / B) * 0.5 * inside
    dec_grads, g_zin = mlp_backward(dec, dec_cache, g_dout)
    g_ze = g_zin.copy()
    cb_grad = np.zeros_like(model.codebooks_)
    if quantize:
        g_ze += 2.0 * model.gamma * (z_e - z_q) / B
        g_zq = 2.0 * model.beta * (z_q - z_e) / B
        for layer in range(cb_grad.shape[0]):
            np.add.at(cb_grad[layer], idx[:, layer], g_zq)
    enc_grads, _ = mlp_backward(enc, enc_cache, g_ze)
    return terms, enc_grads + dec_grads + [cb_grad], s_hat


def vqvae_forward(model, s):
    """Encode, quantize and decode one hand state.

    Returns ``(QuantizeResult, loss_terms)`` where ``loss_terms`` holds the
    reconstruction, codebook (beta-weighted) and commitment (gamma-weighted)
    terms, unweighted, plus the weighted total.
    """
    S = check_hand_states(np.atleast_2d(s))
    z_e = model.encoder_(2.0 * S - 1.0)
    z_q, idx = residual_quantize(model.codebooks_, z_e)
    terms, _, s_hat = _loss_and_grads(model, S)
    result = QuantizeResult(z_e[0], z_q[0], tuple(int(i) for i in idx[0]), s_hat[0])
    return result, terms


def vqvae_loss(model, S):
    """Batch-mean loss terms and gradients (encoder, decoder, codebooks)."""
    terms, grads, _ = _loss_and_grads(model, check_hand_states(S))
    return terms, grads


def merge_codebooks(model):
    """Decode every combination of layer codes.

    Returns an array (codebook_size ** n_layers, 6) ordered by composite
    index. Codes never selected by the data are kept.
    """
    check_is_fitted(model, "codebooks_")
    cbs = model.codebooks_
    combos = itertools.product(range(cbs.shape[1]), repeat=cbs.shape[0])
    latents = np.array([sum(cbs[l, i] for l, i in enumerate(c)) for c in combos])
    return _decode_to_hand(model.decoder_, latents)[0]


class ResidualVQVAE(BaseEstimator, TransformerMixin):
    """Residual VQ-VAE hand-state quantizer.

    ``transform`` returns the quantized latent, ``predict`` the composite
    code index, ``reconstruct`` the decoded hand state.

    With ``zero_residual_code`` (default) code 0 of every layer after the
    first is pinned at the zero vector. Greedy selection can then always
    decline a refinement, so adding a layer never increases the
    quantization error.
    """

    def __init__(self, latent_dim=8, hidden_dim=128, n_layers=2, codebook_size=4,
                 beta=1.67, gamma=1.67, learning_rate=3e-4, batch_size=256,
                 epochs=1500, warmup_epochs=10, kmeans_iter=50, zero_residual_code=True,
                 random_state=0):
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.codebook_size = codebook_size
        self.beta = beta
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.kmeans_iter = kmeans_iter
        self.zero_residual_code = zero_residual_code
        self.random_state = random_state

    @property
    def n_codes(self):
        return self.codebook_size ** self.n_layers

    def _init_networks(self, rng):
        self.encoder_ = Mlp.init((HAND_DIM, self.hidden_dim, self.latent_dim), rng)
        self.decoder_ = Mlp.init((self.latent_dim, self.hidden_dim, HAND_DIM), rng)
        self.codebooks_ = np.zeros((self.n_layers, self.codebook_size, self.latent_dim))

    def _pinned(self, layer):
        return self.zero_residual_code and layer > 0

    def _init_codebooks(self, X, rng):
        residual = self.encoder_(2.0 * X - 1.0)
        k = self.codebook_size
        for layer in range(self.n_layers):
            if np.unique(residual, axis=0).shape[0] >= k:
                centers, _ = kmeans(residual, k, self.kmeans_iter, rng)
            else:
                # earlier layers already fit the data exactly
                scale = max(float(np.abs(residual).max()), 1e-3)
                centers = rng.normal(0.0, scale, size=(k, self.latent_dim))
            if self._pinned(layer):
                # the centroid nearest the origin becomes the pinned zero code;
                # replacing a k-means centroid instead leaves a dominant pose
                # with a single code and no near neighbours
                j = int(np.argmin((centers ** 2).sum(axis=1)))
                centers = np.vstack([np.zeros(self.latent_dim), np.delete(centers, j, axis=0)])
            self.codebooks_[layer] = centers
            labels = np.argmin(((residual[:, None] - centers[None]) ** 2).sum(2), axis=1)
            residual = residual - centers[labels]

    def fit(self, X, y=None):
        X = check_hand_states(X)
        if np.unique(X, axis=0).shape[0] < self.codebook_size:
            raise ValueError(
                f"need at least {self.codebook_size} distinct hand states to fit the codebooks")
        rng = make_rng(self.random_state)
        self._init_networks(rng)
        params = self.encoder_.params + self.decoder_.params + [self.codebooks_]
        opt = Adam(params, lr=self.learning_rate)
        n = X.shape[0]
        self.loss_history_ = []
        self.recon_history_ = []
        for epoch in range(self.epochs):
            warm = epoch < self.warmup_epochs
            if epoch == self.warmup_epochs:
                self._init_codebooks(X, rng)
            order = rng.permutation(n)
            loss_sum = rec_sum = 0.0
            for start in range(0, n, self.batch_size):
                batch = X[order[start:start + self.batch_size]]
                terms, grads, _ = _loss_and_grads(self, batch, quantize=not warm)
                for layer in range(1, self.n_layers):
                    if self._pinned(layer):
                        grads[-1][layer, 0] = 0.0
                if not np.isfinite(terms["total"]):
                    raise FloatingPointError(f"non-finite VQ-VAE loss at epoch {epoch + 1}")
                opt.step(grads)
                loss_sum += terms["total"] * len(batch)
                rec_sum += terms["reconstruction"] * len(batch)
            self.loss_history_.append(loss_sum / n)
            self.recon_history_.append(rec_sum / n / HAND_DIM)
        if self.epochs <= self.warmup_epochs:
            self._init_codebooks(X, rng)
        return self

    def transform(self, X):
        check_is_fitted(self, "codebooks_")
        X = check_hand_states(X)
        return residual_quantize(self.codebooks_, self.encoder_(2.0 * X - 1.0))[0]

    def predict(self, X):
        """Composite code index of every hand state."""
        check_is_fitted(self, "codebooks_")
        X = check_hand_states(X)
        _, idx = residual_quantize(self.codebooks_, self.encoder_(2.0 * X - 1.0))
        return composite_index(idx, self.codebook_size)

    def layer_indices(self, X):
        check_is_fitted(self, "codebooks_")
        X = check_hand_states(X)
        return residual_quantize(self.codebooks_, self.encoder_(2.0 * X - 1.0))[1]

    def reconstruct(self, X):
        return _decode_to_hand(self.decoder_, self.transform(X))[0]

    def inverse_transform(self, Z):
        check_is_fitted(self, "codebooks_")
        return _decode_to_hand(self.decoder_, np.atleast_2d(Z))[0]

    def reconstruction_mse(self, X):
        X = check_hand_states(X)
        return float(np.mean((self.reconstruct(X) - X) ** 2))

    def code_table(self):
        return merge_codebooks(self)

    # serialization -----------------------------------------------------

    def to_dict(self):
        check_is_fitted(self, "codebooks_")
        return {
            "latent_dim": self.latent_dim,
            "layer_sizes": {"encoder": list(self.encoder_.sizes),
                            "decoder": list(self.decoder_.sizes)},
            "encoder_params": self.encoder_.flat(),
            "decoder_params": self.decoder_.flat(),
            "codebooks": self.codebooks_.tolist(),
            "beta": self.beta,
            "gamma": self.gamma,
            "seed": self.random_state,
            "loss_history": list(self.loss_history_),
            "recon_history": list(self.recon_history_),
            "params": self.get_params(),
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            model = cls(**doc.get("params", {}))
            model.latent_dim = int(doc["latent_dim"])
            model.beta = float(doc["beta"])
            model.gamma = float(doc["gamma"])
            model.encoder_ = Mlp.from_flat(doc["layer_sizes"]["encoder"], doc["encoder_params"])
            model.decoder_ = Mlp.from_flat(doc["layer_sizes"]["decoder"], doc["decoder_params"])
            model.codebooks_ = np.asarray(doc["codebooks"], dtype=float)
            model.loss_history_ = list(doc.get("loss_history", []))
            model.recon_history_ = list(doc.get("recon_history", []))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed VQ-VAE document: {exc}") from exc
        if model.codebooks_.ndim != 3 or model.codebooks_.shape[2] != model.latent_dim:
            raise ValueError("codebooks do not match latent_dim")
        if model.encoder_.sizes[-1] != model.latent_dim or model.decoder_.sizes[0] != model.latent_dim:
            raise ValueError("network sizes do not match latent_dim")
        model.n_layers, model.codebook_size = model.codebooks_.shape[:2]
        return model

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def save(self, path):
        text = self.dumps()
        with open(path, "w") as fh:
            fh.write(text + "\n")
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def train_vqvae(dataset, seed=0, **params):
    """Fit a :class:`ResidualVQVAE` on hand states; returns the fitted model."""
    return ResidualVQVAE(random_state=seed, **params).fit(dataset)
