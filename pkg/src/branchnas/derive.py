"""Turn a finished search into a discrete genotype, build the standalone network
it describes, and train it from scratch."""
from __future__ import annotations

import logging
import math
import pickle
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig, SupernetConfig, TrainConfig
from .controller import ScalePolicy
from .data import KeypointDataset, augment
from .evaluate import evaluate_ap, evaluate_report
from .genotype import (
    OPS,
    CellGenotype,
    Genotype,
    GenotypeError,
    cell_keys,
    cell_num_nodes,
    decode,
    encode,
    validate,
)
from .metrics import heatmap_mse
from .search import (
    EVAL_BATCH,
    DivergenceError,
    SearchState,
    load_state,
    reward_ap,
    rng_for,
    torch_generator,
)
from .supernet import (
    FixedOp,
    Head,
    MultiScaleModule,
    Stem,
    Supernet,
    alpha_name,
)

log = logging.getLogger(__name__)

WEIGHTS_VERSION = 1


class FingerprintMismatchError(GenotypeError):
    pass


# --- scales ---------------------------------------------------------------------

@dataclass
class Trajectory:
    scales: tuple[tuple[int, ...], ...]
    ap: float
    log_prob: float


def derive_scales(policy: ScalePolicy | None, n: int, reward_eval, seed: int = 0,
                  default=None) -> tuple[tuple, list[Trajectory]]:
    """Draw ``n`` trajectories, score each with ``reward_eval(scales) -> AP`` and return
    the best; ties go to the higher log-probability, then the lexicographically smaller
    trajectory. Without a policy (fixed scales) ``default`` is the only candidate."""
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    if policy is None:
        if default is None:
            raise ValueError("no policy and no default scale vectors")
        return tuple(default), [Trajectory(tuple(default), float(reward_eval(default)), 0.0)]
    g = torch_generator(seed, "derive", 0)
    trajectories = []
    with torch.no_grad():
        for _ in range(n):
            s = policy.sample(generator=g)
            trajectories.append(Trajectory(s.scales, float(reward_eval(s.scales)),
                                           float(s.log_prob)))
    best = min(trajectories, key=lambda t: (-t.ap, -t.log_prob, t.scales))
    return best.scales, trajectories


# --- cells ----------------------------------------------------------------------

def derive_cells(alphas, arch) -> dict:
    """Argmax op per edge (first index wins ties); every edge is kept."""
    cells = {}
    for key in cell_keys(arch):
        a = alphas[alpha_name(key)]
        a = a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)
        ops = [OPS[int(i)] for i in np.argmax(a, axis=-1)]
        cells[key] = CellGenotype.from_ops(key[1], cell_num_nodes(arch, key[1]),
                                           arch.branches, ops)
    return cells


def derive_genotype(state: SearchState, n_samples: int = 10, seed: int = 0,
                    val: KeypointDataset | None = None, eval_size: int | None = None):
    """Genotype of a search state plus the sampled trajectories and their APs."""
    net = state.supernet
    arch = state.config.arch
    tau = state.tau(state.config.search.epochs - 1)
    if val is not None:
        n_eval = min(eval_size or state.config.search.val_eval_size, len(val))
        idx = np.arange(n_eval)

        def reward_eval(scales):
            with torch.no_grad():
                return reward_ap(net, val, idx, scales, tau)
    else:
        def reward_eval(scales):
            return 0.0
    net.eval()
    scales, trajectories = derive_scales(state.policy, n_samples, reward_eval, seed,
                                         default=state.all_ones())
    g = validate(Genotype(arch, derive_cells(net.alphas, arch), scales))
    return g, trajectories


# --- standalone network -----------------------------------------------------------

class DerivedNet(nn.Module):
    """Discrete network for a genotype: one op per edge, cells only on active branches."""

    def __init__(self, genotype: Genotype, cfg: SupernetConfig, multiplier: int = 2,
                 track_stats: bool = True):
        super().__init__()
        validate(genotype)
        if genotype.fingerprint != cfg.arch.fingerprint():
            raise FingerprintMismatchError(
                f"genotype fingerprint {genotype.fingerprint} does not match config "
                f"{cfg.arch.fingerprint()}")
        self.genotype = genotype
        self.multiplier = multiplier
        arch = genotype.config
        channels = [c * multiplier for c in arch.channels]
        self.channels = channels
        self.stem = Stem(channels, cfg.stem_width, track_stats)

        def edge_factory(branch, position):
            ops = genotype.cell(branch, position).ops
            return lambda e, c: FixedOp(ops[e], c, track_stats, cfg.preactivation)

        self.scales = genotype.module_scales()
        self.cells = nn.ModuleList(
            MultiScaleModule(arch, channels, edge_factory,
                             active=[b + 1 for b, on in enumerate(beta) if on],
                             track_stats=track_stats)
            for beta in self.scales)
        self.head = Head(channels, cfg.num_keypoints, cfg.head_fusion)

    def forward(self, image):
        xs = self.stem(image)
        for module, beta in zip(self.cells, self.scales):
            xs = module(xs, beta)
        return self.head(xs)


def build_standalone(genotype: Genotype, cfg: SupernetConfig, multiplier: int = 2,
                     track_stats: bool = True) -> DerivedNet:
    return DerivedNet(genotype, cfg, multiplier, track_stats)


def transplant_weights(supernet: Supernet, net: DerivedNet) -> None:
    """Copy shared weights into a multiplier-1 standalone network: each fixed edge takes
    the weights of its op inside the supernet's mixed edge."""
    if net.multiplier != 1:
        raise ValueError("weights can only be transplanted into a multiplier-1 network")
    source = supernet.state_dict()
    target = net.state_dict()
    mapped = {}
    for name in target:
        if ".op." in name:
            prefix, rest = name.split(".op.", 1)
            # prefix ends with the edge index; FixedOp.op <- MixedOp.ops[k]
            op = _edge_op(net, prefix)
            src = f"{prefix}.ops.{OPS.index(op)}.{rest}"
        else:
            src = name
        if src not in source:
            if name.endswith(("running_mean", "running_var", "num_batches_tracked")):
                continue
            raise KeyError(f"no supernet weight for {name}")
        mapped[name] = source[src]
    net.load_state_dict(mapped, strict=False)


def _edge_op(net: nn.Module, prefix: str) -> str:
    module = net
    for part in prefix.split("."):
        module = module[int(part)] if part.isdigit() and isinstance(
            module, (nn.ModuleList, nn.Sequential)) else getattr(module, part)
    return module.name


# --- training ---------------------------------------------------------------------

def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: multiply by ``lr_decay`` at each epoch in ``lr_decay_epochs``."""
    drops = sum(1 for e in cfg.lr_decay_epochs if epoch >= e)
    return cfg.lr * cfg.lr_decay ** drops


def train_standalone(net: nn.Module, train: KeypointDataset, val: KeypointDataset,
                     cfg: TrainConfig, on_epoch=None) -> dict:
    """Heatmap-MSE training with flip/rotation augmentation and a step schedule."""
    torch.manual_seed(cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=tuple(cfg.adam_betas),
                           foreach=True)
    history = []
    for epoch in range(cfg.epochs):
        for group in opt.param_groups:
            group["lr"] = lr_at(cfg, epoch)
        net.train()
        start = time.perf_counter()
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(len(train))
        losses = []
        for it, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            if len(idx) < 2:  # batch norm needs more than one sample
                continue
            samples = None
            if cfg.augment:
                rng = rng_for(cfg.seed, "augment", epoch, it)
                samples = [augment(train.sample(int(i)), rng, train.flip_pairs,
                                   cfg.flip_prob, cfg.max_rotation) for i in idx]
            b = train.batch(idx, samples)
            loss = heatmap_mse(net(b["image"]), b["target"], b["visibility"])
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch + 1}, "
                                      f"iteration {it}; recent losses {losses[-10:]}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        net.eval()
        ap = evaluate_ap(net, val, batch_size=EVAL_BATCH).AP
        record = {"epoch": epoch + 1, "lr": lr_at(cfg, epoch), "train_loss": float(np.mean(losses)),
                  "val_ap": ap, "wall_seconds": time.perf_counter() - start}
        history.append(record)
        log.info("train epoch %d loss %.5f val AP %.4f", epoch + 1, record["train_loss"], ap)
        if on_epoch is not None:
            on_epoch(record)
    net.eval()
    flip = train.flip_pairs if cfg.flip_test else None
    report = evaluate_report(net, val, EVAL_BATCH, flip)
    report["history"] = history
    return report


# --- files ------------------------------------------------------------------------

def save_weights(net: DerivedNet, cfg: RunConfig, path: str | Path, report: dict | None = None):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": WEIGHTS_VERSION,
        "genotype": encode(net.genotype),
        "fingerprint": net.genotype.fingerprint,
        "config": cfg.to_dict(),
        "multiplier": net.multiplier,
        "state_dict": net.state_dict(),
        "report": report,
    }, path)


def load_weights(path: str | Path) -> tuple[DerivedNet, RunConfig]:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise ValueError(f"cannot read weights {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format_version") != WEIGHTS_VERSION:
        raise ValueError(f"{path}: not a trained-weights archive")
    genotype = decode(blob["genotype"])
    if genotype.fingerprint != blob["fingerprint"]:
        raise FingerprintMismatchError(f"{path}: genotype does not match stored fingerprint")
    cfg = RunConfig.from_dict(blob["config"])
    net = build_standalone(genotype, replace(cfg.supernet, arch=genotype.config),
                           blob["multiplier"])
    net.load_state_dict(blob["state_dict"])
    net.eval()
    return net, cfg


def derive_from_checkpoint(path, n_samples: int = 10, seed: int = 0,
                           val: KeypointDataset | None = None):
    state = load_state(path)
    return derive_genotype(state, n_samples, seed, val)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def is_finite_report(report: dict) -> bool:
    return all(math.isfinite(v) for v in report["ap"].values())
