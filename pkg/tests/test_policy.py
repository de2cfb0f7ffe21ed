import json
import math

import numpy as np
import pytest

from dqrise.policy import (DiffusionPolicy, DiffusionSchedule, PolicyController, build_training_pairs,
                           ddpm_add_noise, rollout, rollout_batch, sample_chunk, step_layout)
from dqrise.relaxation import relabel_demo
from oracles import diffusion_grad_error

# independent product of (1 - beta_t) for the default schedule
ALPHA_BAR_T_DEFAULT = 0.02759242220029392


def _zero_denoiser(model):
    for net in model.denoisers_:
        for p in net.params:
            p[...] = 0.0
    return model


def test_schedule_identities():
    s = DiffusionSchedule()
    assert np.all(np.diff(s.betas) > 0) and 0 < s.betas[0] and s.betas[-1] < 1
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[-1] < 0.05 and s.alpha_bars[0] > 0.99
    prod = 1.0
    for i in range(100):
        prod *= 1.0 - (1e-4 + i * (0.07 - 1e-4) / 99)
    assert s.alpha_bars[-1] == pytest.approx(prod, abs=1e-12)
    assert s.alpha_bars[-1] == pytest.approx(ALPHA_BAR_T_DEFAULT, abs=1e-12)


def test_add_noise_closed_form():
    s = DiffusionSchedule()
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    t = np.array([1, 17, 50, 100])
    out = ddpm_add_noise(x0, t, eps, s)
    for i, ti in enumerate(t):
        ab = math.prod(1.0 - b for b in s.betas[:ti])
        assert np.allclose(out[i], math.sqrt(ab) * x0[i] + math.sqrt(1 - ab) * eps[i], atol=1e-12)
    assert np.allclose(ddpm_add_noise(x0, 5, 0 * eps, s), np.sqrt(s.alpha_bars[4]) * x0)
    assert np.allclose(ddpm_add_noise(0 * x0, 5, eps, s), np.sqrt(1 - s.alpha_bars[4]) * eps)
    with pytest.raises(ValueError):
        ddpm_add_noise(x0, 0, eps, s)
    with pytest.raises(ValueError):
        ddpm_add_noise(x0, 101, eps, s)


def test_single_step_schedule_sampling():
    model = DiffusionPolicy.untrained("dq-rise", 0, n_diffusion_steps=1, beta_start=0.3)
    obs = np.zeros((1, 13))
    rng = np.random.default_rng(5)
    x_T = np.random.default_rng(5).standard_normal((1, 40))[0]
    feat = model.encoder_(obs)
    eps_hat = model.denoisers_[0](np.hstack([feat[0], x_T, [1.0]]))
    expected = np.clip((x_T - 0.3 / np.sqrt(0.3) * eps_hat) / np.sqrt(0.7), -1, 1)
    chunk, _ = model.sample_normalized(obs, [rng])
    assert np.allclose(chunk.reshape(-1), expected, atol=1e-12)


def test_zero_denoiser_sample_mean():
    model = _zero_denoiser(DiffusionPolicy.untrained("dq-rise", 0))
    obs = np.zeros((1000, 13))
    rngs = [np.random.default_rng([7, i]) for i in range(1000)]
    chunk, _ = model.sample_normalized(obs, rngs)
    means = np.abs(chunk.reshape(1000, -1).mean(axis=0))
    assert np.all(means < 3 / np.sqrt(1000))


@pytest.mark.parametrize("variant, width, heads", [
    ("dq-rise", 5, [5]), ("no-reindex", 5, [5]), ("rise", 10, [10]), ("rise-s", 10, [4, 6]),
    ("dq-rise-c", 5, [4])])
def test_step_layout(variant, width, heads):
    w, hs = step_layout(variant)
    assert w == width and [hi - lo for _, lo, hi in hs] == heads


def test_unknown_variant():
    with pytest.raises(ValueError):
        step_layout("act")


@pytest.mark.parametrize("variant", ["dq-rise", "rise", "rise-s", "dq-rise-c"])
@pytest.mark.parametrize("seed", range(5))
def test_diffusion_loss_gradients(variant, seed):
    assert diffusion_grad_error(variant, seed) < 1e-4


def test_classifier_gradients_without_arm_conditioning():
    assert diffusion_grad_error("dq-rise-c", 0, arm_conditioning=False) < 1e-4


def test_training_pairs_pad_with_last_action(hooklid_corpus, small_codebook):
    demo = hooklid_corpus[0]
    obs, chunks = build_training_pairs([demo], "rise", horizon=8)
    n = len(demo)
    assert obs.shape == (n, 13) and chunks.shape == (n, 8, 10)
    assert np.array_equal(chunks[n - 1, :, :4], np.repeat(demo.arm[-1:], 8, axis=0))
    assert np.array_equal(chunks[0, 3, 4:], demo.hand[3])
    rl = relabel_demo(demo, small_codebook)
    _, c = build_training_pairs([rl], "dq-rise-c")
    assert np.array_equal(c[:, 0, 4].astype(int), rl.rank)
    _, c = build_training_pairs([rl], "dq-rise")
    assert np.array_equal(c[:, 0, 4], rl.hand)
    with pytest.raises(ValueError):
        build_training_pairs([demo], "dq-rise")
    with pytest.raises(ValueError):
        build_training_pairs([rl], "rise")
    with pytest.raises(ValueError):
        build_training_pairs([], "rise")


@pytest.fixture(scope="module")
def tiny_policies(hooklid_corpus, small_codebook):
    rl = [relabel_demo(d, small_codebook) for d in hooklid_corpus[:3]]
    out = {}
    for variant in ("dq-rise", "rise-s", "dq-rise-c"):
        demos = hooklid_corpus[:3] if variant == "rise-s" else rl
        obs, chunks = build_training_pairs(demos, variant)
        out[variant] = DiffusionPolicy(variant=variant, epochs=3, feature_dim=8,
                                       encoder_hidden=16, denoiser_hidden=16,
                                       n_diffusion_steps=20).fit(obs, chunks)
    return out


def test_fit_records_finite_losses(tiny_policies):
    for model in tiny_policies.values():
        assert len(model.loss_history_) == 3 and np.all(np.isfinite(model.loss_history_))


def test_fit_rejects_bad_targets_and_aborts_on_nan_loss(hooklid_corpus, monkeypatch):
    obs, chunks = build_training_pairs(hooklid_corpus[:1], "rise")
    chunks[0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        DiffusionPolicy(variant="rise", epochs=1, denoiser_hidden=8).fit(obs, chunks)
    chunks[0, 0, 0] = 0.0
    real = DiffusionPolicy._loss_and_grads

    def nan_loss(self, *args):
        loss, grads, parts = real(self, *args)
        return float("nan"), grads, parts

    monkeypatch.setattr(DiffusionPolicy, "_loss_and_grads", nan_loss)
    with pytest.raises(FloatingPointError, match="epoch 1"):
        DiffusionPolicy(variant="rise", epochs=1, denoiser_hidden=8).fit(obs, chunks)


def test_fit_is_deterministic(hooklid_corpus):
    obs, chunks = build_training_pairs(hooklid_corpus[:2], "rise")
    a = DiffusionPolicy(variant="rise", epochs=2, denoiser_hidden=8).fit(obs, chunks)
    b = DiffusionPolicy(variant="rise", epochs=2, denoiser_hidden=8).fit(obs, chunks)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_predict_shapes_and_labels(tiny_policies, hooklid_corpus):
    obs = hooklid_corpus[0].obs[:4]
    out = tiny_policies["dq-rise-c"].predict(obs, random_state=0)
    assert out.shape == (4, 8, 5)
    labels = out[:, :, 4]
    assert np.array_equal(labels, np.round(labels)) and labels.min() >= 0 and labels.max() < 16
    assert tiny_policies["rise-s"].predict(obs, random_state=0).shape == (4, 8, 10)
    single = sample_chunk(tiny_policies["dq-rise"], obs[0], 3)
    assert single.shape == (8, 5)


def test_rows_use_their_own_noise(tiny_policies, hooklid_corpus):
    model = tiny_policies["dq-rise"]
    obs = hooklid_corpus[0].obs[:3]
    batch = model.predict(obs, rngs=[np.random.default_rng(i) for i in range(3)])
    alone = model.predict(obs[1:2], rngs=[np.random.default_rng(1)])
    assert np.allclose(batch[1], alone[0], atol=1e-12)


def test_checkpoint_round_trip(tmp_path, tiny_policies, small_codebook, hooklid_corpus):
    obs = hooklid_corpus[0].obs[:2]
    for variant, model in tiny_policies.items():
        path = tmp_path / f"{variant}.json"
        model.save(path, small_codebook)
        doc = json.loads(path.read_text())
        for key in ("variant", "config", "normalization", "encoder_params", "denoiser_params",
                    "schedule", "seed"):
            assert key in doc
        assert ("denoiser2_params" in doc) == (variant == "rise-s")
        assert ("classifier_params" in doc) == (variant == "dq-rise-c")
        back, cb = DiffusionPolicy.load(path)
        assert np.array_equal(cb.codes, small_codebook.codes)
        assert np.array_equal(back.predict(obs, random_state=4), model.predict(obs, random_state=4))


def test_checkpoint_rejects_malformed(tiny_policies):
    doc = tiny_policies["dq-rise"].to_dict()
    del doc["encoder_params"]
    with pytest.raises(ValueError):
        DiffusionPolicy.from_dict(doc)
    doc = tiny_policies["dq-rise"].to_dict()
    doc["variant"] = "rise"
    with pytest.raises(ValueError):
        DiffusionPolicy.from_dict(doc)


def test_quantized_controller_needs_codebook(tiny_policies):
    with pytest.raises(ValueError):
        PolicyController(tiny_policies["dq-rise"])


def test_executed_hand_commands_are_codes(tiny_policies, small_codebook):
    for variant in ("dq-rise", "dq-rise-c"):
        ctrl = PolicyController(tiny_policies[variant], small_codebook)
        res = rollout_batch(ctrl, "hooklid", [100, 101], max_steps=12)
        for r in res:
            for h in r.hand_commands:
                assert any(np.array_equal(h, c) for c in small_codebook.codes)


def test_raw_hand_commands_are_clamped(tiny_policies):
    res = rollout(PolicyController(tiny_policies["rise-s"]), "hooklid", 100, max_steps=8)
    assert res.hand_commands.min() >= 0 and res.hand_commands.max() <= 1


def test_rollout_is_reproducible(tiny_policies, small_codebook):
    ctrl = PolicyController(tiny_policies["dq-rise"], small_codebook)
    a = rollout_batch(ctrl, "hooklid", [5, 6], max_steps=16)
    b = rollout_batch(ctrl, "hooklid", [5, 6], max_steps=16)
    for x, y in zip(a, b):
        assert np.array_equal(x.arm_commands, y.arm_commands)
        assert np.array_equal(x.obs, y.obs) and x.phases == y.phases


def test_receding_horizon_executes_four_steps(tiny_policies, small_codebook):
    ctrl = PolicyController(tiny_policies["dq-rise"], small_codebook)
    res = rollout(ctrl, "hooklid", 9, max_steps=8)
    first = tiny_policies["dq-rise"].predict(res.obs[:1], rngs=[np.random.default_rng([9, 1])])
    assert np.allclose(res.arm_commands[:4], first[0, :4, :4])
