"""Command-line entry point: search, derive, train, eval, count-space, plot.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, load_config
from .genotype import GenotypeError, count_search_space, decode, encode, enumerate_genotypes
from .genotype import random_genotype

log = logging.getLogger("branchnas")

BRUTE_FORCE_LIMIT = 10 ** 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _size(text: str) -> list[int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return [h, w]


def _config(args, flags: dict | None = None) -> RunConfig:
    return load_config(getattr(args, "config", None), flags or {}, getattr(args, "profile", None))


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- commands -----------------------------------------------------------------------

def cmd_search(args) -> int:
    from .search import search

    flags: dict = {"search": {}}
    if args.mode:
        flags["search"]["mode"] = args.mode
    if args.seed is not None:
        flags["search"]["seed"] = args.seed
    if args.search_size:
        flags["supernet"] = {"input_size": args.search_size}
        flags["data"] = {"image_size": args.search_size}
    cfg = _config(args, flags)
    out = Path(args.out)
    state = search(cfg, out_dir=out, resume=args.resume)
    last = state.history[-1] if state.history else {}
    print(f"search finished: {state.epoch} epochs, fingerprint {state.config.fingerprint()}")
    print(f"history: {out / 'history.jsonl'}")
    print(f"checkpoint: {out / 'checkpoints' / 'last.pt'}")
    if last:
        print(f"final val AP {last['val_ap']:.4f}, greedy scales {last['greedy_betas']}")
    return 0


def cmd_derive(args) -> int:
    from .data import build_datasets
    from .derive import derive_genotype
    from .search import load_state

    state = load_state(args.ckpt)
    cfg = state.config
    _, val = build_datasets(cfg.data, cfg.supernet.input_size, cfg.supernet.num_keypoints)
    genotype, trajectories = derive_genotype(state, args.n_samples, args.seed, val)
    print(f"N = {args.n_samples}")
    print("sample  AP      log_prob  scales")
    for i, t in enumerate(trajectories):
        print(f"{i:>6}  {t.ap:.4f}  {t.log_prob:8.3f}  {[list(s) for s in t.scales]}")
    print(f"selected scales: {[list(s) for s in genotype.scales]}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(encode(genotype))
    print(f"genotype {genotype.fingerprint} written to {out}")
    return 0


def cmd_train(args) -> int:
    from .data import build_datasets
    from .derive import build_standalone, count_parameters, save_weights, train_standalone
    from .metrics import count_flops

    if args.genotype:
        genotype = decode(Path(args.genotype).read_text())
    else:
        cfg = _config(args)
        genotype = random_genotype(cfg.arch, args.random_genotype)
    if args.config:
        cfg = _config(args)
        if cfg.arch.fingerprint() != genotype.fingerprint:
            raise ConfigError(f"genotype fingerprint {genotype.fingerprint} does not match "
                              f"config {cfg.arch.fingerprint()}")
    else:
        cfg = _config(args, {"arch": genotype.config.to_dict()})
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs)
    train, val = build_datasets(cfg.data, cfg.supernet.input_size,
                                cfg.supernet.num_keypoints)
    torch.manual_seed(cfg.train.seed)
    net = build_standalone(genotype, cfg.supernet, cfg.train.channel_multiplier)
    report = train_standalone(net, train, val, cfg.train)
    report["fingerprint"] = genotype.fingerprint
    report["parameters"] = count_parameters(net)
    report["flops"] = count_flops(net, cfg.supernet.input_size).as_dict()
    out = Path(args.out)
    save_weights(net, cfg, out / "weights.pt", report)
    _write_json(report, out / "report.json")
    ap = report["ap"]
    print(f"AP {ap['AP']:.4f}  AP50 {ap['AP50']:.4f}  AP75 {ap['AP75']:.4f}  AR {ap['AR']:.4f}")
    print(f"weights: {out / 'weights.pt'}")
    return 0


def cmd_eval(args) -> int:
    from .data import build_datasets, load_dataset
    from .derive import load_weights
    from .evaluate import evaluate_report

    net, cfg = load_weights(args.weights)
    if args.dataset:
        ds = load_dataset(args.dataset)
        if ds.num_keypoints != cfg.supernet.num_keypoints:
            raise ConfigError(f"{args.dataset} has {ds.num_keypoints} keypoints, the network "
                              f"predicts {cfg.supernet.num_keypoints}")
    else:
        _, ds = build_datasets(cfg.data, cfg.supernet.input_size, cfg.supernet.num_keypoints)
    flip = ds.flip_pairs if args.flip_average else None
    report = evaluate_report(net, ds, 32, flip)
    report["fingerprint"] = net.genotype.fingerprint
    report["flip_average"] = bool(args.flip_average)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        _write_json(report, Path(args.out))
    return 0


def cmd_count_space(args) -> int:
    cfg = _config(args)
    size = count_search_space(cfg.arch, args.convention)
    print(f"convention: {args.convention or 'as configured'}")
    print(f"count: {size.count}")
    print(f"approx: {size}")
    if size.count <= BRUTE_FORCE_LIMIT:
        brute = sum(1 for _ in enumerate_genotypes(cfg.arch, args.convention))
        status = "match" if brute == size.count else "MISMATCH"
        print(f"brute force: {brute} ({status})")
        if brute != size.count:
            return 2
    return 0


def cmd_plot(args) -> int:
    from .plotting import plot_history
    from .search import read_history

    history = read_history(args.history)
    for path in plot_history(history, args.out):
        print(path)
    return 0


# --- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="branchnas", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--profile", choices=["full", "desk"], help="built-in defaults profile")

    s = sub.add_parser("search", help="run the architecture search")
    with_config(s)
    s.add_argument("--resume", help="checkpoint to resume from")
    s.add_argument("--mode", choices=["full", "single-branch", "no-agg", "fixed-four"])
    s.add_argument("--search-size", type=_size, help="input size HxW")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="runs/search")
    s.set_defaults(func=cmd_search)

    d = sub.add_parser("derive", help="derive a genotype from a search checkpoint")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--n-samples", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default="genotype.yaml")
    d.set_defaults(func=cmd_derive)

    t = sub.add_parser("train", help="train a genotype from scratch")
    with_config(t)
    g = t.add_mutually_exclusive_group(required=True)
    g.add_argument("--genotype")
    g.add_argument("--random-genotype", type=int, metavar="SEED")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", default="runs/train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate trained weights")
    e.add_argument("--weights", required=True)
    e.add_argument("--dataset", help="cached dataset (.npz); default: the run's validation split")
    e.add_argument("--flip-average", action="store_true")
    e.add_argument("--out", help="also write the report as JSON")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("count-space", help="size of the search space")
    with_config(c)
    c.add_argument("--convention", choices=["default", "split-individual", "branch-shared",
                                            "branch-shared-split"])
    c.set_defaults(func=cmd_count_space)

    pl = sub.add_parser("plot", help="plot history curves")
    pl.add_argument("--history", required=True)
    pl.add_argument("--out", default="plots")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GenotypeError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
