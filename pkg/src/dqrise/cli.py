"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys

import numpy as np

from .demos import TASKS, generate_corpus, hand_states, load_demos, save_demos
from .mathcore import pca_components
from .pipeline import (RunConfig, dumps_metrics, eval_seeds, evaluate,
                       metrics_document, run_record, validate_metrics)
from .policy import QUANTIZED, VARIANTS, DiffusionPolicy, build_training_pairs
from .quantizer import ResidualVQVAE
from .relaxation import ReindexedCodebook, nearest_code, reindex_codes, relabel_demo

COMMANDS = ("gen-demos", "train-vqvae", "reindex", "relabel", "train-policy", "eval",
            "export-plot", "config-dump", "suite")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _shared():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--out")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--trials", type=int)
    p.add_argument("--n", type=int, dest="n_demos")
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-arm-conditioning", dest="arm_conditioning", action="store_const",
                   const=False)
    p.add_argument("--jobs", type=int)
    p.add_argument("--demos")
    p.add_argument("--vqvae")
    p.add_argument("--codebook")
    p.add_argument("--checkpoint")
    return p


def build_parser():
    parser = _Parser(prog="dqrise", description="Quantized hand-action diffusion policies.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    shared = _shared()
    helps = {
        "gen-demos": "generate a scripted demonstration corpus",
        "train-vqvae": "train the residual VQ-VAE on corpus hand states",
        "reindex": "order the code table along the first principal axis",
        "relabel": "replace corpus hand states by relaxed code indices",
        "train-policy": "train a diffusion policy variant",
        "eval": "roll out a checkpoint and write metrics",
        "export-plot": "write code/data scatter CSV",
        "config-dump": "print the effective configuration",
        "suite": "train and evaluate every configured variant",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[shared], help=helps[name])
    return parser


def resolve_config(args):
    """Defaults < config file < command-line flags."""
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
    config = RunConfig.from_dict(doc)
    flags = {k: v for k, v in vars(args).items()
             if k not in ("command", "config", "epochs") and v is not None}
    if args.epochs is not None:
        flags["vq_epochs" if args.command == "train-vqvae" else "epochs"] = args.epochs
    return config.updated(**flags)


def _need(config, *names):
    missing = [f"--{n}" for n in names if not getattr(config, n)]
    if missing:
        raise UsageError(f"missing required flag(s): {' '.join(missing)}")


def _write(path, text):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_gen_demos(config):
    _need(config, "out")
    demos, skipped = generate_corpus(config.task, config.n_demos, config.seed, config.jobs)
    save_demos(config.out, demos, config.task, config.seed, skipped)
    load_demos(config.out)
    print(f"wrote {len(demos)} demos to {config.out}", file=sys.stderr)


def cmd_train_vqvae(config):
    _need(config, "demos", "out")
    demos, _ = load_demos(config.demos)
    vq = ResidualVQVAE(random_state=config.seed, **config.vq_params()).fit(hand_states(demos))
    digest = vq.save(config.out)
    ResidualVQVAE.load(config.out)
    print(f"reconstruction mse {vq.reconstruction_mse(hand_states(demos)):.3e}; "
          f"sha256 {digest}", file=sys.stderr)


def _model_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def cmd_reindex(config):
    _need(config, "vqvae", "demos", "out")
    vq = ResidualVQVAE.load(config.vqvae)
    demos, _ = load_demos(config.demos)
    cb = reindex_codes(vq.code_table(), hand_states(demos),
                       reorder=config.variant != "no-reindex",
                       source_model_hash=_model_hash(config.vqvae))
    cb.save(config.out)
    ReindexedCodebook.load(config.out)


def cmd_relabel(config):
    _need(config, "demos", "codebook", "out")
    demos, manifest = load_demos(config.demos)
    cb = ReindexedCodebook.load(config.codebook)
    relabeled = [relabel_demo(d, cb) for d in demos]
    save_demos(config.out, relabeled, manifest["task"], manifest.get("seed", config.seed),
               manifest.get("skipped_seeds", ()), relabeled=True)
    load_demos(config.out)


def cmd_train_policy(config):
    _need(config, "demos", "out")
    demos, _ = load_demos(config.demos)
    variant = config.variant
    codebook = None
    if variant in QUANTIZED:
        _need(config, "codebook")
        codebook = ReindexedCodebook.load(config.codebook)
        demos = [relabel_demo(d, codebook) for d in demos]
    elif demos[0].rank is not None:
        demos = [d.__class__(d.task, d.seed, d.obs, d.arm, d.original_hand) for d in demos]
    obs, chunks = build_training_pairs(demos, variant, config.horizon)
    model = DiffusionPolicy(variant=variant, random_state=config.seed, **config.policy_params())
    model.fit(obs, chunks)
    model.save(config.out, codebook)
    DiffusionPolicy.load(config.out)


def cmd_eval(config):
    _need(config, "checkpoint", "out")
    model, codebook = DiffusionPolicy.load(config.checkpoint)
    runs = []
    if config.trials > 0:
        phases, mean_len = evaluate(model, codebook, config.task,
                                    eval_seeds(config.seed, config.trials),
                                    config.max_steps, config.n_execute)
        runs.append(run_record(model.variant, config.task, config.seed, config.trials,
                               phases, mean_len))
    doc = metrics_document(runs)
    _write(config.out, dumps_metrics(doc))
    if config.out:
        with open(config.out) as fh:
            validate_metrics(json.load(fh))


def export_plot(codebook: ReindexedCodebook, demos, out):
    """Scatter CSV of dataset hand states and codes in the top two PCA axes.

    pc1 is the codebook's own ordering axis; pc2 is the next component of the
    raw hand states.
    """
    H = hand_states(demos)
    mean, axes = pca_components(H, 2)
    pc1_axis, pc2_axis = codebook.pca_axis, axes[1]
    header = ["kind", "rank", "pc1", "pc2"] + [f"j{i}" for i in range(H.shape[1])]
    ranks = nearest_code(codebook, H)
    rows = []
    for kind, states, rk in (("data", H, ranks), ("code", codebook.codes, np.arange(codebook.K))):
        pc1 = (states - codebook.pca_mean) @ pc1_axis
        pc2 = (states - mean) @ pc2_axis
        for s, r, a, b in zip(states, rk, pc1, pc2):
            rows.append([kind, int(r), repr(float(a)), repr(float(b))] + [repr(float(v)) for v in s])
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return len(rows)


def cmd_export_plot(config):
    _need(config, "codebook", "demos", "out")
    demos, _ = load_demos(config.demos)
    export_plot(ReindexedCodebook.load(config.codebook), demos, config.out)


def cmd_config_dump(config):
    _write(config.out, json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")


def cmd_suite(config):
    from .pipeline import evaluate_suite
    doc = evaluate_suite(config, log=lambda m: print(m, file=sys.stderr))
    _write(config.out, dumps_metrics(doc))


HANDLERS = {
    "gen-demos": cmd_gen_demos, "train-vqvae": cmd_train_vqvae, "reindex": cmd_reindex,
    "relabel": cmd_relabel, "train-policy": cmd_train_policy, "eval": cmd_eval,
    "export-plot": cmd_export_plot, "config-dump": cmd_config_dump, "suite": cmd_suite,
}


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        config = resolve_config(args)
        HANDLERS[args.command](config)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return 0 if not exc.code else 1
    except (ValueError, KeyError, TypeError, OSError, json.JSONDecodeError,
            FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
