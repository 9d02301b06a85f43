"""Acceptance criteria, one test each; the terminal summary prints a pass/fail line per
criterion. Criteria 6 and 7 run the desk-scale search and retraining (hours on CPU)."""
import math
import time

import numpy as np
import pytest
import torch
import yaml

from branchnas.cli import main
from branchnas.config import ArchConfig, SupernetConfig, build_config
from branchnas.controller import Reinforce, ScalePolicy
from branchnas.data import build_datasets
from branchnas.derive import (build_standalone, derive_cells, derive_genotype, train_standalone,
                              transplant_weights)
from branchnas.genotype import (AGGREGATION, Genotype, count_search_space, decode,
                                enumerate_genotypes, random_genotype)
from branchnas.metrics import (average_precision, count_flops, flip_average_inference,
                               heatmap_mse, oks)
from branchnas.search import read_history, search, state_checksum
from branchnas.supernet import MultiScaleModule, Supernet, sample_gumbel
from conftest import tiny_arch, tiny_layer, tiny_run_config, write_toml
from test_metrics import FirstChannels, _brute_force_ap, _fixture
from test_supernet import _module_inputs, _weights_for, mixed


def detail(request, text):
    request.node.acceptance_detail = text


def relative_error(a, b):
    return float((a - b).abs().max() / b.abs().max().clamp_min(1e-30))


# --- 1 ------------------------------------------------------------------------------

@pytest.mark.acceptance(1, "gradient correctness (float64 finite differences)")
def test_gradient_correctness(request):
    start = time.perf_counter()
    torch.manual_seed(0)
    cfg = SupernetConfig(arch=tiny_arch(), input_size=(8, 6), num_keypoints=3, stem_width=4)
    net = Supernet(cfg).double()
    x = torch.randn(4, 3, 8, 6, dtype=torch.float64)
    target = torch.rand(4, 3, 2, 2, dtype=torch.float64)
    vis = torch.ones(4, 3)
    g = torch.Generator().manual_seed(1)
    noise = {n: sample_gumbel(a.shape, g, torch.float64) for n, a in net.alphas.items()}
    scales = ((1, 1),) * cfg.arch.num_scale_vectors

    def loss():
        return heatmap_mse(net(x, scales, "gumbel", 1.0, noise=noise), target, vis)

    net.zero_grad()
    loss().backward()
    coords = [(p, i) for p in net.arch_parameters() for i in range(p.numel())]
    weights = [(p, i) for p in net.weight_parameters() for i in range(p.numel())]
    rng = np.random.default_rng(0)
    coords += [weights[int(j)] for j in rng.choice(len(weights), 100, replace=False)]

    # h balances truncation (~h^2) against roundoff (~1e-16 / h); wider stencils cross
    # ReLU and max-pool kinks
    h, worst, worst_abs = 1e-5, 0.0, 0.0
    with torch.no_grad():
        for p, i in coords:
            flat = p.view(-1)
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(loss())
            flat[i] = orig - h
            down = float(loss())
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(p.grad.view(-1)[i])
            scale = max(abs(analytic), abs(numeric))
            if scale > 1e-9:  # below this both are zero up to difference noise
                worst = max(worst, abs(analytic - numeric) / scale)
            else:
                worst_abs = max(worst_abs, abs(analytic - numeric))
    elapsed = time.perf_counter() - start
    detail(request, f"{len(coords)} coordinates, max rel err {worst:.2e}, {elapsed:.0f}s")
    assert worst < 1e-5 and worst_abs < 1e-9
    assert elapsed < 120


# --- 2 ------------------------------------------------------------------------------

@pytest.mark.acceptance(2, "skip-routing exactness over 100 random scale vectors")
def test_skip_routing(request):
    start = time.perf_counter()
    torch.manual_seed(0)
    arch = ArchConfig(branches=4, nodes_individual=2, nodes_aggregation=1, channels=(2, 3, 4, 5))
    module = MultiScaleModule(arch, arch.channels, lambda b, p: mixed)
    rng = np.random.default_rng(0)
    checked = 0
    for trial in range(100):
        beta = tuple(int(v) for v in rng.integers(0, 2, 4))
        xs = [x.requires_grad_() for x in _module_inputs(arch.channels)]
        module.zero_grad(set_to_none=True)
        out = module(xs, beta, _weights_for(arch))
        for b, on in enumerate(beta):
            if not on:
                assert torch.equal(out[b], xs[b])
        total = sum(o.sum() for o in out)
        if total.requires_grad:
            total.backward()
        for b, on in enumerate(beta, start=1):
            if not on:
                for p in module.cells[str(b)].parameters():
                    assert p.grad is None or torch.count_nonzero(p.grad) == 0
                    checked += 1
    elapsed = time.perf_counter() - start
    detail(request, f"{checked} inactive parameter tensors checked, {elapsed:.0f}s")
    assert elapsed < 60


# --- 3 ------------------------------------------------------------------------------

@pytest.mark.acceptance(3, "discretization consistency over 20 saturations")
def test_discretization_consistency(request):
    start = time.perf_counter()
    arch = ArchConfig(branches=3, num_stages=2, modules_per_stage=1, nodes_individual=2,
                      nodes_aggregation=1, channels=(4, 6, 8))
    cfg = SupernetConfig(arch=arch, input_size=(32, 24), num_keypoints=5, stem_width=4)
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(20):
        torch.manual_seed(trial)
        net = Supernet(cfg)
        with torch.no_grad():
            for a in net.alphas.values():
                hot = rng.integers(0, a.shape[-1], a.shape[0])
                a.zero_()
                a[torch.arange(a.shape[0]), torch.from_numpy(hot)] = 1000.0
        scales = tuple(tuple(int(b) for b in rng.integers(0, 2, 3))
                       for _ in range(arch.num_scale_vectors))
        g = Genotype(arch, derive_cells(net.alphas, arch), scales)
        standalone = build_standalone(g, cfg, multiplier=1, track_stats=False)
        transplant_weights(net, standalone)
        x = torch.from_numpy(rng.normal(size=(4, 3, 32, 24)).astype(np.float32))
        with torch.no_grad():
            ref = net(x, scales, "argmax")
            out = standalone(x)
            soft = net(x, scales, "softmax", 1.0)
        worst = max(worst, relative_error(out, ref), relative_error(out, soft))
    elapsed = time.perf_counter() - start
    detail(request, f"max relative output error {worst:.2e}, {elapsed:.0f}s")
    assert worst < 1e-4
    assert elapsed < 300


# --- 4 ------------------------------------------------------------------------------

@pytest.mark.acceptance(4, "search-space counts vs brute force; default exponent")
def test_search_space_counts(request):
    start = time.perf_counter()
    configs = [
        (dict(branches=1, num_stages=1, nodes_individual=1, nodes_aggregation=0), None),
        (dict(branches=2, num_stages=1, nodes_individual=2, nodes_aggregation=1),
         "branch-shared"),
        (dict(branches=1, num_stages=2, nodes_individual=1, nodes_aggregation=1),
         "split-individual"),
        (dict(branches=2, num_stages=1, modules_per_stage=2, nodes_individual=1,
              nodes_aggregation=0, scale_granularity="module"), None),
    ]
    counts = []
    for kw, convention in configs:
        arch = ArchConfig(channels=(8,) * kw["branches"], **kw)
        size = count_search_space(arch, convention).count
        assert size <= 10 ** 5
        brute = len({(tuple(sorted((k, tuple(c.ops)) for k, c in g.cells.items())), g.scales)
                     for g in enumerate_genotypes(arch, convention)})
        assert brute == size
        counts.append(size)
    default = count_search_space(ArchConfig())
    elapsed = time.perf_counter() - start
    detail(request, f"brute-force counts {counts}; default {default} (exponent "
                    f"{default.exponent}), {elapsed:.0f}s")
    assert 56 <= default.exponent <= 65
    assert elapsed < 60


# --- 5 ------------------------------------------------------------------------------

@pytest.mark.acceptance(5, "controller learning on the active-bits bandit")
def test_controller_bandit(request):
    start = time.perf_counter()
    s = build_config().search
    torch.manual_seed(0)
    policy = ScalePolicy(4, 3, s.controller_hidden)
    trainer = Reinforce(policy, s.controller_lr, s.baseline_decay, s.entropy_bonus)
    g = torch.Generator().manual_seed(0)

    def mean_reward(n=1000):
        with torch.no_grad():
            return float(np.mean([np.mean(policy.sample(generator=g).scales) for _ in range(n)]))

    before = mean_reward()
    for _ in range(200):
        sample = policy.sample(generator=g)
        trainer.update([(sample, float(np.mean(sample.scales)))])
    after = mean_reward()

    # zero advantage: reward equal to the baseline leaves every parameter bit-identical
    params = [p.detach().clone() for p in policy.parameters()]
    sample = policy.sample(generator=g)
    trainer.entropy_bonus = 0.0
    trainer.update([(sample, trainer.baseline)])
    unchanged = all(torch.equal(a, b) for a, b in zip(params, policy.parameters()))
    elapsed = time.perf_counter() - start
    detail(request, f"mean reward {before:.3f} -> {after:.3f}, zero-advantage update "
                    f"{'exact' if unchanged else 'NOT zero'}, {elapsed:.0f}s")
    assert abs(before - 0.5) < 0.05
    assert after > 0.9 and unchanged
    assert elapsed < 60


# --- 6 and 7: desk-scale search and retraining --------------------------------------

@pytest.fixture(scope="module")
def desk_search(tmp_path_factory):
    cfg = build_config(profile="desk")
    out = tmp_path_factory.mktemp("desk_search")
    start = time.perf_counter()
    state = search(cfg, out_dir=out)
    return cfg, state, out, time.perf_counter() - start


@pytest.mark.slow
@pytest.mark.acceptance(6, "end-to-end desk search: entropy and AP trends")
def test_desk_search(request, desk_search):
    cfg, state, out, elapsed = desk_search
    s = cfg.search
    assert (cfg.arch.branches, cfg.arch.num_stages, cfg.supernet.input_size) == (4, 3, (64, 48))
    assert (s.epochs, s.iters_per_epoch, s.warmup_epochs, s.controller_steps) == (8, 100, 2, 5)
    hist = read_history(out / "history.jsonl")
    assert [r["epoch"] for r in hist] == list(range(1, 9))
    first, last, warm = hist[0], hist[-1], hist[s.warmup_epochs - 1]
    detail(request, (
        f"alpha entropy {first['alpha_entropy_nats']:.3f} -> {last['alpha_entropy_nats']:.3f}; "
        f"policy entropy {warm['policy_entropy_nats']:.3f} (warmup end) -> "
        f"{last['policy_entropy_nats']:.3f}; val AP {first['val_ap']:.4f} -> "
        f"{last['val_ap']:.4f}; {elapsed / 3600:.2f} h"))
    assert elapsed < 12 * 3600
    assert last["alpha_entropy_nats"] < first["alpha_entropy_nats"]
    assert last["policy_entropy_nats"] < warm["policy_entropy_nats"]
    assert last["val_ap"] > first["val_ap"]


@pytest.mark.slow
@pytest.mark.acceptance(7, "derived genotype vs 5 random genotypes (20 epochs each)")
def test_derived_beats_random(request, desk_search):
    cfg, state, _, _ = desk_search
    start = time.perf_counter()
    train, val = build_datasets(cfg.data, cfg.supernet.input_size)
    derived, _ = derive_genotype(state, 10, seed=0, val=val)

    def train_ap(genotype):
        torch.manual_seed(cfg.train.seed)
        net = build_standalone(genotype, cfg.supernet, cfg.train.channel_multiplier)
        return train_standalone(net, train, val, cfg.train)["ap"]["AP"]

    derived_ap = train_ap(derived)
    random_aps = [train_ap(random_genotype(cfg.arch, seed)) for seed in range(5)]
    mean, std = float(np.mean(random_aps)), float(np.std(random_aps, ddof=1))
    elapsed = time.perf_counter() - start
    detail(request, f"derived {derived_ap:.4f} vs random {mean:.4f} +/- {std:.4f} "
                    f"({', '.join(f'{a:.3f}' for a in random_aps)}); {elapsed / 3600:.2f} h")
    assert derived_ap >= mean and derived_ap - mean > std
    assert elapsed < 3 * 3600


# --- 8 ------------------------------------------------------------------------------

@pytest.mark.acceptance(8, "ablation modes verified from history and genotype files")
def test_ablation_modes(request, tmp_path, capsys):
    layer = tiny_layer(
        arch={"branches": 4, "channels": [4, 4, 4, 4]},
        supernet={"input_size": [32, 24]},
        data={"image_size": [32, 24]},
        search={"epochs": 2, "warmup_epochs": 1, "iters_per_epoch": 3})
    cfg = write_toml(layer, tmp_path / "ablation.toml")
    files = {}
    for mode in ("single-branch", "fixed-four", "no-agg"):
        out = tmp_path / mode
        assert main(["search", "--config", cfg, "--mode", mode, "--out", str(out)]) == 0
        assert main(["derive", "--ckpt", str(out / "checkpoints" / "last.pt"),
                     "--out", str(out / "genotype.yaml")]) == 0
        files[mode] = (read_history(out / "history.jsonl"), out / "genotype.yaml")
    capsys.readouterr()

    hist, geno = files["single-branch"]
    vectors = [v for r in hist for betas in r["betas"] for v in betas]
    vectors += [v for r in hist for v in r["greedy_betas"]]
    assert vectors and all(sum(v) <= 1 for v in vectors)
    assert all(sum(v) <= 1 for v in yaml.safe_load(geno.read_text())["scales"])

    hist, geno = files["fixed-four"]
    assert all(b == 1 for r in hist for betas in r["betas"] for v in betas for b in v)
    assert all(r["controller_steps"] == 0 and r["reward_mean"] is None for r in hist)
    assert yaml.safe_load(geno.read_text())["scales"] == [[1, 1, 1, 1]] * 2

    _, geno = files["no-agg"]
    doc = yaml.safe_load(geno.read_text())
    agg_cells = [roles[AGGREGATION] for roles in doc["cells"].values() if AGGREGATION in roles]
    assert all(not c["edges"] for c in agg_cells)
    assert all(role != AGGREGATION or not c.ops
               for (_, role), c in decode(geno.read_text()).cells.items())
    detail(request, f"{len(vectors)} single-branch vectors; fixed-four and no-agg files checked")


# --- 9 ------------------------------------------------------------------------------

@pytest.mark.acceptance(9, "metrics oracles")
def test_metric_oracles(request):
    gt = np.array([[10.0, 20.0]])
    s, k = 30.0, 0.07
    pred = np.array([[10.0 + s * k * math.sqrt(2), 20.0]])
    oks_err = abs(oks(pred, gt, [2], s, k) - math.exp(-1))
    assert oks(gt, gt, [2], s, k) == 1.0 and oks_err < 1e-12

    preds, gts = _fixture()
    assert sum(len(g) for g in gts) == 5
    r = average_precision(preds, gts, 0.1)
    ap, _, _ = _brute_force_ap(preds, gts, 0.1)
    assert r.AP == pytest.approx(ap, abs=1e-12)

    conv = torch.nn.Conv2d(16, 32, 3, padding=1, bias=False)
    macs = count_flops(conv, (64, 48), lambda x: conv(torch.zeros(1, 16, 64, 48))).macs
    assert macs == 14_155_776

    torch.manual_seed(0)
    sym = torch.nn.Conv2d(3, 3, 3, padding=1, bias=False)
    with torch.no_grad():
        sym.weight.copy_((sym.weight + sym.weight.flip(-1)) / 2)
        img = torch.randn(2, 3, 6, 8)
        img = (img + img.flip(-1)) / 2
        fixed = float((flip_average_inference(sym, img, ()) - sym(img)).abs().max())
        x = torch.randn(1, 2, 4, 6)
        x = 0.5 * (x + x[:, [1, 0]])
        fixed = max(fixed, float((flip_average_inference(FirstChannels(2), x, ((0, 1),))
                                  - x).abs().max()))
    assert fixed < 1e-6
    detail(request, f"OKS e^-1 err {oks_err:.1e}; AP {r.AP:.6f} = brute force; MACs {macs}; "
                    f"flip fixed-point err {fixed:.1e}")


# --- 10 -----------------------------------------------------------------------------

def _records(path):
    return [{k: v for k, v in r.items() if k != "wall_seconds"} for r in read_history(path)]


@pytest.mark.acceptance(10, "determinism and resume from every epoch checkpoint")
def test_determinism_and_resume(request, tmp_path):
    cfg = tiny_run_config(search={"epochs": 3, "warmup_epochs": 1})
    a = search(cfg, out_dir=tmp_path / "a")
    b = search(cfg, out_dir=tmp_path / "b")
    assert _records(tmp_path / "a/history.jsonl") == _records(tmp_path / "b/history.jsonl")
    assert state_checksum(a) == state_checksum(b)
    for epoch in (1, 2):
        out = tmp_path / f"resume{epoch}"
        resumed = search(cfg, out_dir=out,
                         resume=tmp_path / f"a/checkpoints/epoch_{epoch:03d}.pt")
        assert state_checksum(resumed) == state_checksum(a)
        assert all(torch.equal(p, q) for p, q in zip(resumed.policy.parameters(),
                                                     a.policy.parameters()))
        assert _records(out / "history.jsonl") == _records(tmp_path / "a/history.jsonl")
    detail(request, "2 identical runs; resume from epochs 1 and 2 bitwise-equal")
