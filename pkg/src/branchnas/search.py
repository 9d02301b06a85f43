"""Bi-level search loop: supernet weights and cell logits by gradient descent,
scale vectors by a REINFORCE controller, with per-epoch checkpoints and history."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .controller import PolicySample, Reinforce, ScalePolicy
from .data import KeypointDataset, build_datasets
from .evaluate import evaluate_ap
from .metrics import heatmap_mse
from .supernet import Supernet, alpha_entropy, temperature

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
HISTORY_FIELDS = ("epoch", "val_ap", "reward_mean", "alpha_entropy_nats",
                  "policy_entropy_nats", "wall_seconds")
EVAL_BATCH = 32

# Independent random streams; every draw is keyed by (seed, stream, epoch, iter, ...)
# so a resumed run needs no saved generator state.
_STREAMS = {"init": 0, "beta": 1, "train": 2, "val": 3, "gumbel": 4, "reward": 5,
            "controller": 6, "entropy": 7, "derive": 8,
            "shuffle": 9, "augment": 10}


class SearchError(RuntimeError):
    pass


class DivergenceError(SearchError):
    pass


class ResumeMismatchError(SearchError):
    pass


def _seed_seq(seed: int, stream: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, _STREAMS[stream], *keys])


def rng_for(seed: int, stream: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(_seed_seq(seed, stream, *keys))


def torch_generator(seed: int, stream: str, *keys: int) -> torch.Generator:
    value = int(_seed_seq(seed, stream, *keys).generate_state(1, np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(value)


def apply_mode(cfg: RunConfig) -> RunConfig:
    """Config with the ablation mode's structural constraint applied."""
    cfg = RunConfig.from_dict(cfg.to_dict())
    if cfg.search.mode == "no-agg":
        cfg.arch.aggregation = False
    return cfg


@dataclass
class SearchState:
    config: RunConfig
    supernet: Supernet
    policy: ScalePolicy | None
    reinforce: Reinforce | None
    weight_optimizer: torch.optim.Optimizer
    alpha_optimizer: torch.optim.Optimizer
    epoch: int = 0                      # completed epochs
    history: list = field(default_factory=list)
    last_scales: tuple | None = None
    loss_curve: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.search.seed

    def tau(self, epoch: int | None = None) -> float:
        epoch = self.epoch if epoch is None else epoch
        return temperature(self.config.supernet, min(epoch, self.config.search.epochs - 1),
                           self.config.search.epochs)

    def all_ones(self) -> tuple:
        arch = self.config.arch
        return tuple((1,) * arch.branches for _ in range(arch.num_scale_vectors))

    def sample_scales(self, generator: torch.Generator) -> PolicySample | None:
        if self.policy is None:
            return None
        with torch.no_grad():
            return self.policy.sample(generator=generator)

    def greedy_scales(self) -> tuple:
        return self.all_ones() if self.policy is None else self.policy.greedy()


def init_state(cfg: RunConfig) -> SearchState:
    cfg = apply_mode(cfg)
    cfg.validate()
    s = cfg.search
    torch.manual_seed(int(_seed_seq(s.seed, "init").generate_state(1)[0]))
    supernet = Supernet(cfg.supernet)
    policy = reinforce = None
    if s.mode != "fixed-four":
        policy = ScalePolicy(cfg.arch.branches, cfg.arch.num_scale_vectors, s.controller_hidden,
                             single_branch=s.mode == "single-branch")
        reinforce = Reinforce(policy, s.controller_lr, s.baseline_decay, s.entropy_bonus)
    return SearchState(
        config=cfg,
        supernet=supernet,
        policy=policy,
        reinforce=reinforce,
        weight_optimizer=torch.optim.Adam(supernet.weight_parameters(), lr=s.weight_lr,
                                          foreach=True),
        alpha_optimizer=torch.optim.Adam(supernet.arch_parameters(), lr=s.alpha_lr,
                                         foreach=True),
    )


def _check_finite(state: SearchState, loss: torch.Tensor, what: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(
            f"non-finite {what} loss at epoch {state.epoch}; last scales {state.last_scales}; "
            f"recent losses {state.loss_curve[-10:]}")


def cell_update(state: SearchState, scales, train_batch: dict, val_batch: dict,
                tau: float | None = None, generator: torch.Generator | None = None) -> dict:
    """One weight step on the training batch, then one logit step on the validation
    batch, both under ``scales`` (first-order: the logit step uses the updated weights)."""
    net = state.supernet
    tau = state.tau() if tau is None else tau
    state.last_scales = scales
    weights, alphas = net.weight_parameters(), net.arch_parameters()

    state.weight_optimizer.zero_grad(set_to_none=True)
    pred = net(train_batch["image"], scales, "gumbel", tau, generator)
    train_loss = heatmap_mse(pred, train_batch["target"], train_batch["visibility"])
    _check_finite(state, train_loss, "training")
    train_loss.backward(inputs=weights)
    state.weight_optimizer.step()

    state.alpha_optimizer.zero_grad(set_to_none=True)
    pred = net(val_batch["image"], scales, "gumbel", tau, generator)
    val_loss = heatmap_mse(pred, val_batch["target"], val_batch["visibility"])
    _check_finite(state, val_loss, "validation")
    val_loss.backward(inputs=alphas)
    state.alpha_optimizer.step()

    out = {"train_loss": float(train_loss.detach()), "val_loss": float(val_loss.detach())}
    state.loss_curve.append(out["train_loss"])
    return out


def reward_ap(net: Supernet, ds: KeypointDataset, idx, scales, tau: float) -> float:
    """AP of the deterministic (softmax-mixed) supernet under ``scales`` on ``ds[idx]``."""
    def forward(images):
        return net(images, scales, "softmax", tau)
    return evaluate_ap(forward, ds, idx, EVAL_BATCH).AP


def controller_update(state: SearchState, steps: int, val: KeypointDataset,
                      epoch: int | None = None) -> dict:
    """``steps`` REINFORCE updates with AP rewards; supernet weights and logits are frozen."""
    if state.reinforce is None or steps == 0:
        return {"steps": 0, "reward_mean": None, "skipped": 0}
    s = state.config.search
    epoch = state.epoch if epoch is None else epoch
    tau = state.tau(epoch)
    rewards, skipped, done = [], 0, 0
    for step in range(steps):
        g = torch_generator(s.seed, "controller", epoch, step)
        rng = rng_for(s.seed, "reward", epoch, step)
        n = len(val) if s.reward_source == "full" else min(s.reward_batch_size, len(val))
        idx = np.sort(rng.choice(len(val), size=n, replace=False))
        samples = []
        try:
            for _ in range(s.controller_samples):
                sample = state.policy.sample(generator=g)
                with torch.no_grad():
                    r = reward_ap(state.supernet, val, idx, sample.scales, tau)
                if not math.isfinite(r):
                    raise ValueError(f"reward {r} for scales {sample.scales}")
                samples.append((sample, r))
        except Exception as exc:  # a failed reward evaluation skips the step
            log.warning("controller step %d skipped: %s", step, exc)
            skipped += 1
            continue
        state.reinforce.update(samples)
        rewards.extend(r for _, r in samples)
        done += 1
    return {"steps": done, "skipped": skipped,
            "reward_mean": float(np.mean(rewards)) if rewards else None}


def _batch_indices(seed: int, stream: str, epoch: int, it: int, n: int, size: int):
    return rng_for(seed, stream, epoch, it).choice(n, size=min(size, n), replace=False)


def run_epoch(state: SearchState, train: KeypointDataset, val: KeypointDataset) -> dict:
    s = state.config.search
    epoch = state.epoch
    tau = state.tau(epoch)
    start = time.perf_counter()
    betas, losses = [], []
    state.supernet.train()
    for it in range(s.iters_per_epoch):
        sample = state.sample_scales(torch_generator(s.seed, "beta", epoch, it))
        scales = state.all_ones() if sample is None else sample.scales
        betas.append([list(v) for v in scales])
        tb = train.batch(_batch_indices(s.seed, "train", epoch, it, len(train), s.batch_size))
        vb = val.batch(_batch_indices(s.seed, "val", epoch, it, len(val), s.batch_size))
        out = cell_update(state, scales, tb, vb, tau, torch_generator(s.seed, "gumbel", epoch, it))
        losses.append(out["train_loss"])

    ctrl = {"steps": 0, "reward_mean": None, "skipped": 0}
    if epoch >= s.warmup_epochs:
        ctrl = controller_update(state, s.controller_steps, val, epoch)

    greedy = state.greedy_scales()
    n_eval = min(s.val_eval_size, len(val))
    with torch.no_grad():
        val_ap = reward_ap(state.supernet, val, np.arange(n_eval), greedy, tau)
    policy_entropy = 0.0 if state.policy is None else state.policy.entropy_estimate(
        s.entropy_samples, int(_seed_seq(s.seed, "entropy", epoch).generate_state(1)[0]))
    record = {
        "epoch": epoch + 1,
        "val_ap": val_ap,
        "reward_mean": ctrl["reward_mean"],
        "alpha_entropy_nats": alpha_entropy(state.supernet.alphas),
        "policy_entropy_nats": policy_entropy,
        "wall_seconds": time.perf_counter() - start,
        "tau": tau,
        "train_loss": float(np.mean(losses)),
        "controller_steps": ctrl["steps"],
        "controller_skipped": ctrl["skipped"],
        "greedy_betas": [list(v) for v in greedy],
        "betas": betas,
    }
    state.history.append(record)
    state.epoch += 1
    return record


# --- persistence ---------------------------------------------------------------

def state_dict(state: SearchState) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "fingerprint": state.config.fingerprint(),
        "epoch": state.epoch,
        "supernet": state.supernet.state_dict(),
        "policy": None if state.policy is None else state.policy.state_dict(),
        "reinforce": None if state.reinforce is None else state.reinforce.state_dict(),
        "weight_optimizer": state.weight_optimizer.state_dict(),
        "alpha_optimizer": state.alpha_optimizer.state_dict(),
        "history": state.history,
        "loss_curve": state.loss_curve,
    }


def save_checkpoint(state: SearchState, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(state_dict(state), tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise SearchError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path: str | Path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise SearchError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or ckpt.get("format_version") != CHECKPOINT_VERSION:
        raise SearchError(f"{path}: not a search checkpoint (format {CHECKPOINT_VERSION})")
    return ckpt


def load_state(ckpt: dict | str | Path, cfg: RunConfig | None = None) -> SearchState:
    """Rebuild a SearchState; ``cfg`` (if given) must match the checkpoint's fingerprint."""
    if not isinstance(ckpt, dict):
        ckpt = read_checkpoint(ckpt)
    saved = RunConfig.from_dict(ckpt["config"])
    if saved.fingerprint() != ckpt["fingerprint"]:
        raise ResumeMismatchError("checkpoint config does not match its stored fingerprint")
    if cfg is not None and apply_mode(cfg).fingerprint() != ckpt["fingerprint"]:
        raise ResumeMismatchError(
            f"config fingerprint {apply_mode(cfg).fingerprint()} differs from checkpoint "
            f"{ckpt['fingerprint']}")
    state = init_state(saved)
    state.supernet.load_state_dict(ckpt["supernet"])
    if state.policy is not None:
        state.policy.load_state_dict(ckpt["policy"])
        state.reinforce.load_state_dict(ckpt["reinforce"])
    state.weight_optimizer.load_state_dict(ckpt["weight_optimizer"])
    state.alpha_optimizer.load_state_dict(ckpt["alpha_optimizer"])
    state.epoch = ckpt["epoch"]
    state.history = list(ckpt["history"])
    state.loss_curve = list(ckpt.get("loss_curve", []))
    return state


def write_history(history: list, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def append_history(record: dict, path: str | Path) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_history(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def state_checksum(state: SearchState) -> str:
    """sha256 over supernet weights and logits (bitwise)."""
    h = hashlib.sha256()
    for name, t in sorted(state.supernet.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def check_disjoint(train: KeypointDataset, val: KeypointDataset) -> None:
    shared = np.intersect1d(train.indices, val.indices)
    if len(shared):
        raise SearchError(f"{len(shared)} samples appear in both train and validation splits")


def search(cfg: RunConfig, datasets: tuple[KeypointDataset, KeypointDataset] | None = None,
           out_dir: str | Path | None = None, resume: str | Path | None = None,
           stop_after: int | None = None, deterministic: bool = True) -> SearchState:
    """Run (or resume) a search. ``stop_after`` ends the run after that many completed
    epochs, as if interrupted; checkpoints are written every epoch when ``out_dir`` is set."""
    if deterministic:
        torch.use_deterministic_algorithms(True)
    state = load_state(resume, cfg) if resume is not None else init_state(cfg)
    cfg = state.config
    if datasets is None:
        datasets = build_datasets(cfg.data, cfg.supernet.input_size,
                                  cfg.supernet.num_keypoints)
    train, val = datasets
    if not cfg.data.coco_val_annotations:  # both splits come from one pool
        check_disjoint(train, val)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        write_history(state.history, out / "history.jsonl")
    end = cfg.search.epochs if stop_after is None else min(stop_after, cfg.search.epochs)
    while state.epoch < end:
        record = run_epoch(state, train, val)
        log.info("epoch %d %s", record["epoch"], json.dumps(
            {k: record[k] for k in HISTORY_FIELDS if k != "epoch"}))
        if out is not None:
            append_history(record, out / "history.jsonl")
            save_checkpoint(state, out / "checkpoints" / f"epoch_{state.epoch:03d}.pt")
            save_checkpoint(state, out / "checkpoints" / "last.pt")
    return state


def replace_search(cfg: RunConfig, **changes) -> RunConfig:
    """Copy of ``cfg`` with fields of its search section replaced."""
    cfg = RunConfig.from_dict(cfg.to_dict())
    cfg.search = dataclasses.replace(cfg.search, **changes)
    return cfg
