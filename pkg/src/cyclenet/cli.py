"""Command-line entry points.

Exit status: 0 on success, 1 when an input fails validation, 2 on I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import rf
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig, load_config
from .network import NetworkSpec, count_params, cycle_dense_equivalent, linear_cycle
from .pathfinder import GenConfig, GenerationError, PFDSFormatError, gen_dataset
from .tensor import SeededRng
from .train import Dataset, TrainingDiverged, evaluate, train, write_metrics

log = logging.getLogger("cyclenet")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def _seeded(cfg: dict, seed: int | None) -> dict:
    if seed is not None:
        cfg = {**cfg, "seed": str(seed)}
    return cfg


def cmd_gen_pathfinder(args) -> int:
    cfg = _seeded(load_config(args.config), args.seed)
    known = {k: v for k, v in cfg.items() if k not in ("n_train", "n_test", "_dir")}
    try:
        gen = GenConfig.from_mapping(known)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad generator config: {exc}") from None
    n_train = int(cfg.get("n_train", 20000))
    n_test = int(cfg.get("n_test", 4000))
    train_path, test_path = gen_dataset(gen, n_train, n_test, args.out)
    print(f"wrote {train_path} ({n_train} samples)")
    print(f"wrote {test_path} ({n_test} samples)")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _seeded(load_config(args.config), args.seed)
    spec = NetworkSpec.from_mapping(cfg)
    tcfg = TrainConfig.from_mapping(cfg)

    def progress(epoch, done, total, loss):
        log.debug("epoch %d: %d/%d loss %.4f", epoch, done, total, loss)

    result = train(tcfg, spec, progress)
    save_checkpoint(args.out, result.checkpoint)
    if args.metrics:
        write_metrics(args.metrics, result.metrics)
    last = result.metrics[-1] if result.metrics else None
    if last:
        print(f"epoch {last['epoch']}: train_acc {last['train_acc']:.4f} eval_acc {last['eval_acc']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    data = Dataset.from_pfds(args.data)
    acc, loss = evaluate(ckpt.network, data)
    print(f"accuracy {acc:.6f}")
    print(f"loss {loss:.6f}")
    return EXIT_OK


def cmd_rf_profile(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    data = Dataset.from_pfds(args.data)
    rows = rf.rf_depth_profile(ckpt.network, data.images, args.samples, seed=args.seed or 0)
    text = rf.format_profile(rows)
    try:
        Path(args.out).write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise OSError(f"cannot write {args.out}: {exc.strerror or exc}") from exc
    sys.stdout.write(text)
    return EXIT_OK


def cmd_param_count(args) -> int:
    spec = NetworkSpec.from_mapping(load_config(args.config))
    print(count_params(spec).format())
    return EXIT_OK


def cmd_cycle_equiv_check(args) -> int:
    """Exhaustive 1x1 linear cycle vs Kronecker-factored dense operator."""
    if args.size < 1:
        raise ConfigError("--size must be >= 1")
    rng = SeededRng(args.seed or 0, 0xE45)
    worst = 0.0
    cases = 0
    for x in range(1, args.size + 1):
        for y in range(1, args.size + 1):
            for z in range(1, args.size + 1):
                for _ in range(args.trials):
                    k1 = rng.uniform(-1, 1, size=(1, 1, z, z))
                    k2 = rng.uniform(-1, 1, size=(1, 1, y, y))
                    k3 = rng.uniform(-1, 1, size=(1, 1, x, x))
                    t = rng.uniform(-1, 1, size=(x, y, z))
                    dense = cycle_dense_equivalent(k1, k2, k3) @ t.ravel()
                    worst = max(worst, float(np.max(np.abs(linear_cycle(t, k1, k2, k3).ravel() - dense))))
                    cases += 1
    ok = worst <= 1e-10
    print(f"{cases} cases, max abs error {worst:.3e}: {'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_INVALID


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors; status 2 is reserved for I/O
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cyclenet", description="Cycles of orthogonal convolutions.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None, help="u64 seed; overrides any seed in the config")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-pathfinder", cmd_gen_pathfinder, "generate train/test PFDS files")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True, help="output stem; writes <stem>.train.pfds and <stem>.test.pfds")
    sp = add("train", cmd_train, "train a network and write a checkpoint")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics", default=None)
    sp = add("eval", cmd_eval, "accuracy and loss of a checkpoint on a PFDS file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp = add("rf-profile", cmd_rf_profile, "saliency receptive-field size per depth")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--samples", type=int, default=100)
    sp = add("param-count", cmd_param_count, "kernel parameter and MAC counts")
    sp.add_argument("--config", required=True)
    sp = add("cycle-equiv-check", cmd_cycle_equiv_check, "verify the 1x1 cycle dense equivalence")
    sp.add_argument("--size", type=int, required=True)
    sp.add_argument("--trials", type=int, default=10)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.fn(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, CheckpointError, PFDSFormatError, GenerationError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
