"""Recurrent policy over per-stage scale vectors, trained with REINFORCE."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class PolicySample:
    scales: tuple[tuple[int, ...], ...]
    log_prob: torch.Tensor
    entropy: torch.Tensor


class ScalePolicy(nn.Module):
    """LSTM policy emitting one B-bit scale vector per step.

    Each step's bits are independent Bernoullis given the hidden state; the sampled
    vector is embedded and fed to the next step. With ``single_branch`` each step is
    a (B+1)-way categorical instead: category 0 activates nothing, category b
    activates branch b only. The output layer starts at zero, so a fresh policy is
    uniform.
    """

    def __init__(self, branches: int, steps: int, hidden: int = 64,
                 single_branch: bool = False):
        super().__init__()
        self.branches = branches
        self.steps = steps
        self.single_branch = single_branch
        self.start = nn.Parameter(torch.zeros(hidden))
        self.h0 = nn.Parameter(torch.zeros(hidden))
        self.c0 = nn.Parameter(torch.zeros(hidden))
        self.cell = nn.LSTMCell(hidden, hidden)
        self.embed = nn.Linear(branches, hidden)
        self.head = nn.Linear(hidden, branches + 1 if single_branch else branches)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _step_logprob(self, logits, bits):
        if self.single_branch:
            logp = F.log_softmax(logits, -1)
            cat = int(bits.argmax()) + 1 if bits.sum() > 0 else 0
            return logp[cat], -(logp.exp() * logp).sum()
        logp = -F.binary_cross_entropy_with_logits(logits, bits, reduction="sum")
        ent = (torch.sigmoid(logits) * F.softplus(-logits)
               + torch.sigmoid(-logits) * F.softplus(logits)).sum()
        return logp, ent

    def _draw(self, logits, generator):
        if self.single_branch:
            probs = F.softmax(logits.detach(), -1)
            cat = int(torch.multinomial(probs, 1, generator=generator))
            bits = torch.zeros(self.branches)
            if cat > 0:
                bits[cat - 1] = 1.0
            return bits
        u = torch.rand(self.branches, generator=generator)
        return (u < torch.sigmoid(logits.detach())).float()

    def _greedy(self, logits):
        bits = torch.zeros(self.branches)
        if self.single_branch:
            cat = int(logits.argmax())
            if cat > 0:
                bits[cat - 1] = 1.0
            return bits
        return (logits.detach() >= 0).float()

    def rollout(self, scales=None, generator=None, greedy: bool = False) -> PolicySample:
        h, c = self.h0[None], self.c0[None]
        inp = self.start[None]
        log_prob = self.start.new_zeros(())
        entropy = self.start.new_zeros(())
        out = []
        for t in range(self.steps):
            h, c = self.cell(inp, (h, c))
            logits = self.head(h)[0]
            if scales is not None:
                bits = torch.tensor([float(b) for b in scales[t]])
            elif greedy:
                bits = self._greedy(logits)
            else:
                bits = self._draw(logits, generator)
            lp, ent = self._step_logprob(logits, bits)
            log_prob = log_prob + lp
            entropy = entropy + ent
            out.append(tuple(int(b) for b in bits.tolist()))
            inp = self.embed(bits[None])
        return PolicySample(tuple(out), log_prob, entropy)

    def sample(self, seed: int | None = None, generator: torch.Generator | None = None):
        if generator is None and seed is not None:
            generator = torch.Generator().manual_seed(seed)
        return self.rollout(generator=generator)

    def log_prob_of(self, scales) -> torch.Tensor:
        scales = [tuple(s) for s in scales]
        if len(scales) != self.steps or any(len(s) != self.branches for s in scales):
            raise ValueError(f"expected {self.steps} scale vectors of length {self.branches}")
        if self.single_branch and any(sum(s) > 1 for s in scales):
            return torch.tensor(-math.inf)
        with torch.no_grad():
            return self.rollout(scales=scales).log_prob

    def greedy(self) -> tuple[tuple[int, ...], ...]:
        with torch.no_grad():
            return self.rollout(greedy=True).scales

    def entropy_estimate(self, num_samples: int = 64, seed: int = 0) -> float:
        """Monte Carlo trajectory entropy (nats): mean of per-step conditional entropies."""
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            return float(sum(self.rollout(generator=g).entropy for _ in range(num_samples))
                         / num_samples)


class Reinforce:
    """REINFORCE with an exponential-moving-average reward baseline.

    The baseline starts at the first batch's mean reward and is updated after every
    gradient step.
    """

    def __init__(self, policy: ScalePolicy, lr: float = 3.5e-3, baseline_decay: float = 0.95,
                 entropy_bonus: float = 1e-4):
        self.policy = policy
        self.optimizer = torch.optim.Adam(policy.parameters(), lr=lr)
        self.baseline_decay = baseline_decay
        self.entropy_bonus = entropy_bonus
        self.baseline: float | None = None

    def update(self, samples: list[tuple[PolicySample, float]]) -> dict:
        if not samples:
            raise ValueError("REINFORCE update needs at least one sample")
        rewards = [float(r) for _, r in samples]
        if any(not math.isfinite(r) for r in rewards):
            raise ValueError(f"non-finite reward in {rewards}")
        mean_reward = sum(rewards) / len(rewards)
        baseline = mean_reward if self.baseline is None else self.baseline
        loss = 0
        for (s, r) in samples:
            loss = loss - (r - baseline) * s.log_prob - self.entropy_bonus * s.entropy
        loss = loss / len(samples)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        # no signal, no step: Adam momentum would otherwise still move the policy
        if any(p.grad is not None and p.grad.any() for p in self.policy.parameters()):
            self.optimizer.step()
        self.baseline = (mean_reward if self.baseline is None else
                         self.baseline_decay * self.baseline
                         + (1 - self.baseline_decay) * mean_reward)
        return {"loss": float(loss.detach()), "reward_mean": mean_reward, "baseline": baseline}

    def state_dict(self) -> dict:
        return {"optimizer": copy.deepcopy(self.optimizer.state_dict()), "baseline": self.baseline}

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.baseline = state["baseline"]
