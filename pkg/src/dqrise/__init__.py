"""Discrete hand-action quantization with continuous relaxation for diffusion policies."""

from .demos import (env_reset, env_step, expert_policy, generate_corpus, hand_states, load_demos,
                    save_demos)
from .pipeline import RunConfig, evaluate_suite
from .policy import (DiffusionPolicy, DiffusionSchedule, build_training_pairs, ddpm_add_noise,
                     rollout, sample_chunk)
from .quantizer import ResidualVQVAE, merge_codebooks, quantize_residual, train_vqvae
from .relaxation import CodeRelaxer, ReindexedCodebook, project_index, reindex_codes, relabel_demo

__version__ = "0.1.0"

__all__ = [
    "CodeRelaxer", "DiffusionPolicy", "DiffusionSchedule", "ReindexedCodebook",
    "ResidualVQVAE", "RunConfig", "build_training_pairs", "ddpm_add_noise", "env_reset", "env_step",
    "evaluate_suite", "expert_policy", "generate_corpus", "hand_states", "load_demos", "merge_codebooks",
    "project_index", "quantize_residual", "reindex_codes", "relabel_demo", "rollout",
    "sample_chunk", "save_demos", "train_vqvae",
]
