"""End-to-end runs: corpus, quantizer, re-indexing, policies, evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .demos import PHASES, TASKS, generate_corpus, hand_states
from .policy import QUANTIZED, VARIANTS, DiffusionPolicy, PolicyController, build_training_pairs
from .policy import rollout_batch
from .quantizer import ResidualVQVAE
from .relaxation import reindex_codes, relabel_demo

EVAL_SEED_OFFSET = 10_000   # episode seeds stay clear of the demo seeds


@dataclass
class RunConfig:
    task: str = "hooklid"
    variant: str = "dq-rise"
    seed: int = 0
    # suite
    tasks: list = field(default_factory=lambda: list(TASKS))
    variants: list = field(default_factory=lambda: list(VARIANTS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    trials: int = 20
    max_steps: int = 120
    n_execute: int = 4
    record_time: bool = False
    jobs: int = 1
    # demonstrations
    n_demos: int = 50
    # quantizer
    latent_dim: int = 8
    vq_hidden: int = 128
    n_layers: int = 2
    codebook_size: int = 4
    beta: float = 1.67
    gamma: float = 1.67
    vq_learning_rate: float = 3e-4
    vq_batch_size: int = 256
    vq_epochs: int = 1500
    warmup_epochs: int = 10
    kmeans_iter: int = 50
    # policy
    horizon: int = 8
    feature_dim: int = 64
    encoder_hidden: int = 128
    denoiser_hidden: int = 256
    n_diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.07
    learning_rate: float = 3e-4
    batch_size: int = 256
    epochs: int = 1500
    grad_clip: float = 1.0
    cls_weight: float = 1.0
    arm_conditioning: bool = True
    # files
    demos: str = ""
    vqvae: str = ""
    codebook: str = ""
    checkpoint: str = ""
    out: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self):
        for task in [self.task, *self.tasks]:
            if task not in TASKS:
                raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        for variant in [self.variant, *self.variants]:
            if variant not in VARIANTS:
                raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if self.trials < 0 or self.n_demos < 1:
            raise ValueError("trials must be >= 0 and n_demos >= 1")
        return self

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ValueError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def updated(self, **overrides):
        doc = asdict(self)
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(doc)

    def to_dict(self):
        return asdict(self)

    def vq_params(self):
        return dict(latent_dim=self.latent_dim, hidden_dim=self.vq_hidden, n_layers=self.n_layers,
                    codebook_size=self.codebook_size, beta=self.beta, gamma=self.gamma,
                    learning_rate=self.vq_learning_rate, batch_size=self.vq_batch_size,
                    epochs=self.vq_epochs, warmup_epochs=self.warmup_epochs,
                    kmeans_iter=self.kmeans_iter)

    def policy_params(self):
        return dict(horizon=self.horizon, n_codes=self.codebook_size ** self.n_layers,
                    feature_dim=self.feature_dim, encoder_hidden=self.encoder_hidden,
                    denoiser_hidden=self.denoiser_hidden,
                    n_diffusion_steps=self.n_diffusion_steps, beta_start=self.beta_start,
                    beta_end=self.beta_end, learning_rate=self.learning_rate,
                    batch_size=self.batch_size, epochs=self.epochs, grad_clip=self.grad_clip,
                    cls_weight=self.cls_weight, arm_conditioning=self.arm_conditioning)


def eval_seeds(seed, trials):
    """Episode seeds for evaluation run ``seed``."""
    start = EVAL_SEED_OFFSET * (int(seed) + 1)
    return list(range(start, start + trials))


def prepare_task(config: RunConfig, task):
    """Corpus and quantizer shared by every variant of one task."""
    demos, _ = generate_corpus(task, config.n_demos, seed=config.seed, jobs=config.jobs)
    vq = ResidualVQVAE(random_state=config.seed, **config.vq_params()).fit(hand_states(demos))
    return demos, vq


def fit_variant(config: RunConfig, variant, demos, vq, seed):
    """Train one policy; returns ``(model, codebook or None)``."""
    codebook = None
    train_demos = demos
    if variant in QUANTIZED:
        codebook = reindex_codes(vq.code_table(), hand_states(demos),
                                 reorder=variant != "no-reindex")
        train_demos = [relabel_demo(d, codebook) for d in demos]
    obs, chunks = build_training_pairs(train_demos, variant, config.horizon)
    model = DiffusionPolicy(variant=variant, random_state=seed, **config.policy_params())
    return model.fit(obs, chunks), codebook


def evaluate(model, codebook, task, seeds, max_steps=120, n_execute=4):
    """Phase success rates and mean length of ``model`` on ``seeds``."""
    results = rollout_batch(PolicyController(model, codebook), task, seeds, max_steps, n_execute)
    return summarize(results, task)


def summarize(results, task):
    phases = {p: (float(np.mean([r.phases[p] for r in results])) if results else 0.0)
              for p in PHASES[task]}
    mean_len = float(np.mean([r.length for r in results])) if results else 0.0
    return phases, mean_len


def run_record(variant, task, seed, trials, phases, mean_len, wall_ms=0):
    return {"variant": variant, "task": task, "seed": int(seed), "trials": int(trials),
            "phases": dict(phases), "mean_len": mean_len, "wall_ms": int(wall_ms)}


def evaluate_suite(config: RunConfig, log=None):
    """Train and evaluate every variant x task x seed in ``config``.

    Wall-clock is written only with ``record_time`` so that repeated runs
    produce identical bytes.
    """
    runs = []
    if config.trials > 0:
        for task in config.tasks:
            demos, vq = prepare_task(config, task)
            for variant in config.variants:
                for seed in config.seeds:
                    t0 = time.perf_counter()
                    model, codebook = fit_variant(config, variant, demos, vq, seed)
                    phases, mean_len = evaluate(model, codebook, task,
                                                eval_seeds(seed, config.trials),
                                                config.max_steps, config.n_execute)
                    wall = (time.perf_counter() - t0) * 1000 if config.record_time else 0
                    runs.append(run_record(variant, task, seed, config.trials, phases,
                                           mean_len, wall))
                    if log is not None:
                        log(f"{task} {variant} seed={seed} {phases} len={mean_len:.1f}")
    return metrics_document(runs)


def metrics_document(runs):
    return {"runs": sorted(runs, key=lambda r: (r["task"], r["variant"], r["seed"]))}


def dumps_metrics(doc):
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def validate_metrics(doc):
    """Schema check for a metrics document; raises ValueError."""
    if not isinstance(doc, dict) or not isinstance(doc.get("runs"), list):
        raise ValueError("metrics must be an object with a 'runs' list")
    need = {"variant", "task", "seed", "trials", "phases", "mean_len", "wall_ms"}
    for run in doc["runs"]:
        if not isinstance(run, dict) or set(run) != need:
            raise ValueError(f"malformed run record: {run!r}")
        if run["task"] not in TASKS or run["variant"] not in VARIANTS:
            raise ValueError(f"unknown task or variant in {run!r}")
        if set(run["phases"]) != set(PHASES[run["task"]]):
            raise ValueError(f"phase names do not match task {run['task']!r}")
        if any(not 0.0 <= v <= 1.0 for v in run["phases"].values()):
            raise ValueError("phase rates must lie in [0, 1]")
    return doc


def aggregate(doc, task, variant, phase):
    """Mean phase rate over seeds."""
    rates = [r["phases"][phase] for r in doc["runs"]
             if r["task"] == task and r["variant"] == variant]
    return float(np.mean(rates)) if rates else float("nan")
