"""DDPM action-chunk policies over a low-dimensional observation.

Variants (chunk layout per step):

=============  =====================================================
``dq-rise``    arm (4) + relaxed hand index (1), diffused jointly
``no-reindex`` same as ``dq-rise`` but ranks follow raw composite order
``rise``       arm (4) + raw hand (6), diffused jointly
``rise-s``     arm (4) and raw hand (6) from two separate denoisers
``dq-rise-c``  arm (4) diffused, hand code classified afterwards
=============  =====================================================

All variants share one observation encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .demos import ARM_DIM, HAND_DIM, OBS_DIM, env_reset, env_step, expert_policy
from .mathcore import Adam, Mlp, clip_grad_norm, make_rng, mlp_backward, mlp_forward
from .relaxation import ReindexedCodebook, scalar_to_rank

VARIANTS = ("dq-rise", "rise", "rise-s", "dq-rise-c", "no-reindex")
QUANTIZED = ("dq-rise", "no-reindex", "dq-rise-c")


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.07

    @property
    def betas(self):
        if self.T == 1:
            return np.array([self.beta_start])
        return np.linspace(self.beta_start, self.beta_end, self.T)

    @property
    def alphas(self):
        return 1.0 - self.betas

    @property
    def alpha_bars(self):
        return np.cumprod(self.alphas)

    def to_dict(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def ddpm_add_noise(x0, t, eps, schedule: DiffusionSchedule):
    """Forward process sample x_t for integer ``t`` in 1..T (scalar or per-row)."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"diffusion step must lie in [1, {schedule.T}]")
    ab = schedule.alpha_bars[t - 1]
    x0 = np.asarray(x0, dtype=float)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=float)


def step_layout(variant):
    """Per-step action width and the diffusion heads as (name, start, stop)."""
    if variant in ("dq-rise", "no-reindex"):
        return 5, [("joint", 0, 5)]
    if variant == "rise":
        return 10, [("joint", 0, 10)]
    if variant == "rise-s":
        return 10, [("arm", 0, 4), ("hand", 4, 10)]
    if variant == "dq-rise-c":
        return 5, [("arm", 0, 4)]
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def demo_actions(demo, variant):
    """Per-step action rows for ``variant``; quantized variants need relabeled demos."""
    if variant in QUANTIZED:
        if demo.rank is None:
            raise ValueError(f"variant {variant!r} needs relabeled demonstrations")
        last = demo.hand[:, None] if variant != "dq-rise-c" else demo.rank[:, None].astype(float)
        return np.hstack([demo.arm, last])
    if demo.hand.ndim != 2:
        raise ValueError(f"variant {variant!r} needs raw hand states")
    return np.hstack([demo.arm, demo.hand])


def build_training_pairs(demos, variant, horizon=8):
    """One (observation, future chunk) pair per timestep.

    Chunks running past the end of a demo repeat its final action.
    """
    if not demos:
        raise ValueError("no demonstrations")
    obs, chunks = [], []
    for demo in demos:
        acts = demo_actions(demo, variant)
        n = len(acts)
        if n == 0:
            raise ValueError("empty demonstration")
        idx = np.minimum(np.arange(n)[:, None] + np.arange(horizon)[None, :], n - 1)
        obs.append(demo.obs)
        chunks.append(acts[idx])
    return np.concatenate(obs), np.concatenate(chunks)


@dataclass
class MinMaxScaler:
    """Affine map of each column onto [-1, 1]; constant columns are only shifted."""

    min: np.ndarray
    max: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=float).reshape(-1, np.shape(X)[-1])
        return cls(X.min(axis=0), X.max(axis=0))

    @property
    def _center(self):
        return (self.max + self.min) / 2.0

    @property
    def _half(self):
        half = (self.max - self.min) / 2.0
        return np.where(half > 1e-9, half, 1.0)

    def transform(self, X):
        return (X - self._center) / self._half

    def inverse_transform(self, X):
        return X * self._half + self._center


class DiffusionPolicy(BaseEstimator):
    """Observation-conditioned DDPM over action chunks.

    ``fit(X, Y)`` takes observations (n, 13) and target chunks
    (n, horizon, step_width) as produced by :func:`build_training_pairs`.
    ``predict`` samples chunks.
    """

    def __init__(self, variant="dq-rise", horizon=8, n_codes=16, feature_dim=64,
                 encoder_hidden=128, denoiser_hidden=256, n_diffusion_steps=100,
                 beta_start=1e-4, beta_end=0.07, learning_rate=3e-4, batch_size=256,
                 epochs=300, grad_clip=1.0, cls_weight=1.0, arm_conditioning=True,
                 random_state=0):
        self.variant = variant
        self.horizon = horizon
        self.n_codes = n_codes
        self.feature_dim = feature_dim
        self.encoder_hidden = encoder_hidden
        self.denoiser_hidden = denoiser_hidden
        self.n_diffusion_steps = n_diffusion_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.grad_clip = grad_clip
        self.cls_weight = cls_weight
        self.arm_conditioning = arm_conditioning
        self.random_state = random_state

    @property
    def schedule(self):
        return DiffusionSchedule(self.n_diffusion_steps, self.beta_start, self.beta_end)

    @property
    def heads(self):
        return step_layout(self.variant)[1]

    def _classifier_in(self):
        return self.feature_dim + (self.horizon * ARM_DIM if self.arm_conditioning else 0)

    def _build(self, rng, obs_scaler, target_scaler):
        width, heads = step_layout(self.variant)
        self.obs_scaler_ = obs_scaler
        self.target_scaler_ = target_scaler
        self.encoder_ = Mlp.init((OBS_DIM, self.encoder_hidden, self.feature_dim), rng)
        self.denoisers_ = []
        for _, lo, hi in heads:
            d = self.horizon * (hi - lo)
            self.denoisers_.append(Mlp.init(
                (self.feature_dim + d + 1, self.denoiser_hidden, self.denoiser_hidden, d), rng))
        self.classifier_ = None
        if self.variant == "dq-rise-c":
            self.classifier_ = Mlp.init(
                (self._classifier_in(), self.denoiser_hidden, self.horizon * self.n_codes), rng)

    def _networks(self):
        nets = [self.encoder_] + list(self.denoisers_)
        if self.classifier_ is not None:
            nets.append(self.classifier_)
        return nets

    def _diffused_slice(self, Yn, lo, hi):
        return Yn[:, :, lo:hi].reshape(Yn.shape[0], -1)

    def _loss_and_grads(self, obs_n, Yn, labels, t, eps_list):
        """Batch loss and gradients for fixed diffusion steps and noise."""
        B = obs_n.shape[0]
        sched = self.schedule
        feat, enc_cache = mlp_forward(self.encoder_, obs_n)
        g_feat = np.zeros_like(feat)
        grads_by_net = []
        diffusion = 0.0
        tcol = (t / sched.T)[:, None]
        for (_, lo, hi), net, eps in zip(self.heads, self.denoisers_, eps_list):
            x0 = self._diffused_slice(Yn, lo, hi)
            xt = ddpm_add_noise(x0, t, eps, sched)
            pred, cache = mlp_forward(net, np.hstack([feat, xt, tcol]))
            err = pred - eps
            diffusion += float(np.mean(err * err))
            g, g_in = mlp_backward(net, cache, 2.0 * err / err.size)
            grads_by_net.append(g)
            g_feat += g_in[:, :self.feature_dim]
        ce = 0.0
        if self.classifier_ is not None:
            parts = [feat]
            if self.arm_conditioning:
                parts.append(self._diffused_slice(Yn, 0, ARM_DIM))
            logits, cache = mlp_forward(self.classifier_, np.hstack(parts))
            logits = logits.reshape(B, self.horizon, self.n_codes)
            shifted = logits - logits.max(axis=2, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=2, keepdims=True))
            onehot = np.eye(self.n_codes)[labels]
            ce = float(-np.sum(onehot * logp) / (B * self.horizon))
            g_logits = self.cls_weight * (np.exp(logp) - onehot) / (B * self.horizon)
            g, g_in = mlp_backward(self.classifier_, cache, g_logits.reshape(B, -1))
            grads_by_net.append(g)
            g_feat += g_in[:, :self.feature_dim]
        enc_grads, _ = mlp_backward(self.encoder_, enc_cache, g_feat)
        grads = list(enc_grads)
        for g in grads_by_net:
            grads.extend(g)
        return diffusion + self.cls_weight * ce, grads, {"diffusion": diffusion, "cross_entropy": ce}

    def _prepare_targets(self, Y):
        Y = np.asarray(Y, dtype=float)
        width, _ = step_layout(self.variant)
        if Y.ndim != 3 or Y.shape[1:] != (self.horizon, width):
            raise ValueError(f"targets must have shape (n, {self.horizon}, {width})")
        if not np.all(np.isfinite(Y)):
            raise ValueError("targets contain non-finite values")
        labels = None
        if self.variant == "dq-rise-c":
            labels = Y[:, :, ARM_DIM].astype(int)
            if labels.min() < 0 or labels.max() >= self.n_codes:
                raise ValueError("hand code labels out of range")
            Y = Y[:, :, :ARM_DIM]
        return Y, labels

    def fit(self, X, Y):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != OBS_DIM:
            raise ValueError(f"observations must have {OBS_DIM} columns")
        Yd, labels = self._prepare_targets(Y)
        if X.shape[0] != Yd.shape[0] or X.shape[0] == 0:
            raise ValueError("need a nonempty, equal number of observations and targets")
        rng = make_rng(self.random_state)
        self._build(rng, MinMaxScaler.fit(X), MinMaxScaler.fit(Yd))
        obs_n = self.obs_scaler_.transform(X)
        Yn = self.target_scaler_.transform(Yd)
        params = [p for net in self._networks() for p in net.params]
        opt = Adam(params, lr=self.learning_rate)
        n = X.shape[0]
        self.loss_history_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                b = order[start:start + self.batch_size]
                t = rng.integers(1, self.n_diffusion_steps + 1, size=len(b))
                eps = [rng.standard_normal((len(b), self.horizon * (hi - lo)))
                       for _, lo, hi in self.heads]
                loss, grads, _ = self._loss_and_grads(
                    obs_n[b], Yn[b], None if labels is None else labels[b], t, eps)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"non-finite policy loss at epoch {epoch + 1}")
                clip_grad_norm(grads, self.grad_clip)
                opt.step(grads)
                total += loss * len(b)
            self.loss_history_.append(total / n)
        return self

    @classmethod
    def untrained(cls, variant="dq-rise", seed=0, **params):
        """Randomly initialised policy with identity normalization (for testing)."""
        model = cls(variant=variant, random_state=seed, **params)
        width, _ = step_layout(variant)
        d = ARM_DIM if variant == "dq-rise-c" else width
        model._build(make_rng(seed), MinMaxScaler(-np.ones(OBS_DIM), np.ones(OBS_DIM)),
                     MinMaxScaler(-np.ones(d), np.ones(d)))
        model.loss_history_ = []
        return model

    # sampling ------------------------------------------------------------

    def _noise_width(self):
        return sum(self.horizon * (hi - lo) for _, lo, hi in self.heads)

    def sample_normalized(self, obs, rngs):
        """Reverse diffusion for a batch; returns clamped normalized chunks.

        ``rngs`` is one Generator per row so that each row's noise does not
        depend on the rest of the batch. For ``dq-rise-c`` also returns labels.
        """
        check_is_fitted(self, "encoder_")
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        n = obs.shape[0]
        if len(rngs) != n:
            raise ValueError("need one random generator per observation")
        sched = self.schedule
        T = sched.T
        noise = np.stack([r.standard_normal((T, self._noise_width())) for r in rngs])
        feat = self.encoder_(self.obs_scaler_.transform(obs))
        betas, alphas, abars = sched.betas, sched.alphas, sched.alpha_bars
        pieces, offset = [], 0
        for (_, lo, hi), net in zip(self.heads, self.denoisers_):
            d = self.horizon * (hi - lo)
            block = noise[:, :, offset:offset + d]
            offset += d
            x = block[:, 0]
            for t in range(T, 0, -1):
                inp = np.hstack([feat, x, np.full((n, 1), t / T)])
                eps_hat = net(inp)
                x = (x - betas[t - 1] / np.sqrt(1.0 - abars[t - 1]) * eps_hat) / np.sqrt(alphas[t - 1])
                if t > 1:
                    x = x + np.sqrt(betas[t - 1]) * block[:, T - t + 1]
            pieces.append(np.clip(x, -1.0, 1.0).reshape(n, self.horizon, hi - lo))
        chunk = np.concatenate(pieces, axis=2)
        if self.variant != "dq-rise-c":
            return chunk, None
        parts = [feat]
        if self.arm_conditioning:
            parts.append(chunk.reshape(n, -1))
        logits = self.classifier_(np.hstack(parts)).reshape(n, self.horizon, self.n_codes)
        return chunk, np.argmax(logits, axis=2)

    def predict(self, X, rngs=None, random_state=None):
        """Sample denormalized chunks (n, horizon, step_width).

        For ``dq-rise-c`` the last column holds the predicted code rank.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if rngs is None:
            base = make_rng(random_state)
            rngs = [np.random.default_rng(s) for s in base.integers(0, 2**63, size=len(X))]
        chunk, labels = self.sample_normalized(X, rngs)
        out = self.target_scaler_.inverse_transform(chunk)
        if labels is not None:
            out = np.concatenate([out, labels[:, :, None].astype(float)], axis=2)
        return out

    # serialization -------------------------------------------------------

    def to_dict(self, codebook=None):
        check_is_fitted(self, "encoder_")
        doc = {
            "variant": self.variant,
            "config": self.get_params(),
            "normalization": {"min": self.target_scaler_.min.tolist(),
                              "max": self.target_scaler_.max.tolist(),
                              "obs_min": self.obs_scaler_.min.tolist(),
                              "obs_max": self.obs_scaler_.max.tolist()},
            "encoder_params": self.encoder_.flat(),
            "denoiser_params": self.denoisers_[0].flat(),
            "schedule": self.schedule.to_dict(),
            "seed": self.random_state,
            "loss_history": list(self.loss_history_),
        }
        if len(self.denoisers_) > 1:
            doc["denoiser2_params"] = self.denoisers_[1].flat()
        if self.classifier_ is not None:
            doc["classifier_params"] = self.classifier_.flat()
        if codebook is not None:
            doc["codebook"] = codebook.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc):
        try:
            model = cls(**doc["config"])
            if model.variant != doc["variant"]:
                raise ValueError("variant does not match config")
            norm = doc["normalization"]
            model._build(make_rng(0),
                         MinMaxScaler(np.asarray(norm["obs_min"]), np.asarray(norm["obs_max"])),
                         MinMaxScaler(np.asarray(norm["min"]), np.asarray(norm["max"])))
            model.encoder_ = Mlp.from_flat(model.encoder_.sizes, doc["encoder_params"])
            keys = ["denoiser_params", "denoiser2_params"][:len(model.denoisers_)]
            model.denoisers_ = [Mlp.from_flat(net.sizes, doc[k])
                                for net, k in zip(model.denoisers_, keys)]
            if model.classifier_ is not None:
                model.classifier_ = Mlp.from_flat(model.classifier_.sizes, doc["classifier_params"])
            model.loss_history_ = list(doc.get("loss_history", []))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed checkpoint: {exc}") from exc
        codebook = ReindexedCodebook.from_dict(doc["codebook"]) if "codebook" in doc else None
        return model, codebook

    def save(self, path, codebook=None):
        with open(path, "w") as fh:
            fh.write(json.dumps(self.to_dict(codebook), sort_keys=True) + "\n")

    @staticmethod
    def load(path):
        with open(path) as fh:
            return DiffusionPolicy.from_dict(json.load(fh))


def train_policy(pairs, variant, seed=0, **params):
    obs, chunks = pairs
    return DiffusionPolicy(variant=variant, random_state=seed, **params).fit(obs, chunks)


def sample_chunk(model, obs, rng):
    """One denormalized chunk for a single observation."""
    return model.predict(np.asarray(obs)[None, :], rngs=[make_rng(rng)])[0]


# closed loop ---------------------------------------------------------------

class PolicyController:
    """Turns sampled chunks into executable (arm, hand) commands."""

    def __init__(self, model: DiffusionPolicy, codebook: ReindexedCodebook | None = None):
        if model.variant in QUANTIZED and codebook is None:
            raise ValueError(f"variant {model.variant!r} needs a codebook")
        self.model = model
        self.codebook = codebook

    def __call__(self, obs, states, rngs):
        chunk = self.model.predict(obs, rngs=rngs)
        arm = chunk[:, :, :ARM_DIM]
        variant = self.model.variant
        if variant in ("dq-rise", "no-reindex"):
            ranks = scalar_to_rank(chunk[:, :, ARM_DIM], self.codebook.K)
            hand = self.codebook.codes[ranks]
        elif variant == "dq-rise-c":
            hand = self.codebook.codes[chunk[:, :, ARM_DIM].astype(int)]
        else:
            hand = np.clip(chunk[:, :, ARM_DIM:], 0.0, 1.0)
        return arm, hand


class ExpertController:
    """The scripted expert behind the controller interface (one-step chunks)."""

    def __init__(self, sigma_pos=0.01, sigma_hand=0.02, hand_lead=None):
        self.sigma_pos = sigma_pos
        self.sigma_hand = sigma_hand
        self.hand_lead = hand_lead

    def __call__(self, obs, states, rngs):
        acts = [expert_policy(s.task, s, r, self.sigma_pos, self.sigma_hand, self.hand_lead)
                for s, r in zip(states, rngs)]
        arm = np.array([a for a, _ in acts])[:, None, :]
        hand = np.array([h for _, h in acts])[:, None, :]
        return arm, hand


@dataclass
class EpisodeResult:
    seed: int
    phases: dict
    length: int
    obs: np.ndarray
    arm_commands: np.ndarray
    hand_commands: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def success(self):
        return all(self.phases.values())


def episode_rng(seed):
    return np.random.default_rng([int(seed), 1])


def rollout_batch(controller, task, seeds, max_steps=120, n_execute=4):
    """Run episodes in lockstep; each episode owns its env and random stream."""
    if not isinstance(controller, (PolicyController, ExpertController)) and isinstance(
            controller, DiffusionPolicy):
        controller = PolicyController(controller)
    seeds = [int(s) for s in seeds]
    states = [env_reset(task, s) for s in seeds]
    rngs = [episode_rng(s) for s in seeds]
    traces = [([], [], []) for _ in seeds]
    active = list(range(len(seeds)))
    steps = 0
    while active and steps < max_steps:
        obs = np.array([states[i].observation() for i in active])
        arm, hand = controller(obs, [states[i] for i in active], [rngs[i] for i in active])
        n_run = min(n_execute, arm.shape[1], max_steps - steps)
        still = []
        for j, i in enumerate(active):
            for k in range(n_run):
                o, a, h = traces[i]
                o.append(states[i].observation())
                a.append(arm[j, k])
                h.append(hand[j, k])
                states[i] = env_step(states[i], arm[j, k], hand[j, k])
                if states[i].success:
                    break
            if not states[i].success:
                still.append(i)
        active = still
        steps += n_run
    return [EpisodeResult(s, dict(st.flags), len(tr[0]), np.array(tr[0]), np.array(tr[1]),
                          np.array(tr[2]))
            for s, st, tr in zip(seeds, states, traces)]


def rollout(controller, task, seed, max_steps=120, n_execute=4):
    return rollout_batch(controller, task, [seed], max_steps, n_execute)[0]
