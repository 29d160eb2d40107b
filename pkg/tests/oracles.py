"""Independent reference implementations used to check the package.

Each oracle is written from the metric or model definition without sharing
code with ``crashchat``, and deliberately uses a different computation
strategy (enumeration, explicit dense matrices, table lookups).
"""

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np
import torch


def precrash_piecewise(t_hat: float, t_ar: float, t_ai: float, delta: float) -> tuple[float, str]:
    """Pre-crash onset score and which branch produced it.

    Branches: "plateau" on the closed tolerance window ending at the
    annotated onset, "ramp" on the open pre-crash phase, "zero" elsewhere.
    """
    lo = t_ar - delta
    if not (t_hat < lo or t_hat > t_ar):
        return 1.0, "plateau"
    if t_hat > t_ar and t_hat < t_ai:
        # same expression shape as the definition: (t - t_ai) / (t_ar - t_ai)
        return (t_hat - t_ai) / (t_ar - t_ai), "ramp"
    return 0.0, "zero"


def lcs_brute(a: tuple, b: tuple) -> int:
    """Longest common subsequence by enumerating every subsequence of ``a``."""
    best = 0
    for k in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), k):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(any(x == y for y in it) for x in sub):
                return k
    return best


def bleu_by_hand(cand: list[str], ref: list[str], epsilon: float = 0.1) -> float:
    """Sentence BLEU-4 with epsilon smoothing for zero counts at n >= 2."""
    precisions = []
    for n in range(1, 5):
        c = Counter(tuple(cand[i:i + n]) for i in range(len(cand) - n + 1))
        r = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        clipped = sum(min(v, r[g]) for g, v in c.items())
        total = sum(c.values())
        if clipped == 0:
            if n == 1:
                return 0.0
            clipped = epsilon
        # a candidate shorter than n has no n-grams: treat the order as one smoothed miss
        precisions.append(clipped / total if total else epsilon)
    bp = 1.0 if len(cand) > len(ref) else math.exp(1 - len(ref) / len(cand))
    return bp * math.prod(precisions) ** 0.25


def classification_by_hand(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    recall = tp / (tp + fn)
    precision = tp / (tp + fp)
    return recall, precision, 2 * precision * recall / (precision + recall)


def change_point(x: np.ndarray) -> int:
    """Least-squares single mean-shift change point of a series of vectors.

    Returns the first index of the second segment.
    """
    n = len(x)
    best, arg = math.inf, 0
    for k in range(1, n):
        left, right = x[:k], x[k:]
        cost = ((left - left.mean(0)) ** 2).sum() + ((right - right.mean(0)) ** 2).sum()
        if cost < best:
            best, arg = cost, k
    return arg


def sinusoid_table(n: int, d: int) -> np.ndarray:
    table = np.zeros((n, d))
    for pos in range(n):
        for i in range(0, d, 2):
            angle = pos / 10000 ** (i / d)
            table[pos, i] = math.sin(angle)
            table[pos, i + 1] = math.cos(angle)
    return table


def dense_adapted_forward(model, z: torch.Tensor, group) -> torch.Tensor:
    """Recompute one unpadded sequence's logits with explicit merged weights W + B A.

    Uses plain matrix products and a hand-built causal softmax, so it shares
    only parameter tensors with the module under test.
    """
    cfg = model.cfg
    n, d = z.shape
    h = cfg.heads
    hd = d // h
    causal = torch.full((n, n), float("-inf"), dtype=z.dtype).triu(1)

    def lin(mod, inp):
        if hasattr(mod, "lora_A"):
            w = mod.base.weight
            if group is not None:
                w = w + mod.lora_B[group.value] @ mod.lora_A[group.value]
            return inp @ w.T + mod.base.bias
        return inp @ mod.weight.T + mod.bias

    def norm(mod, inp):
        return torch.nn.functional.layer_norm(inp, (d,), mod.weight, mod.bias, mod.eps)

    x = z + torch.as_tensor(sinusoid_table(n, d), dtype=z.dtype)
    for block in model.blocks:
        a = norm(block.ln1, x)
        q, k, v = (lin(m, a).view(n, h, hd).transpose(0, 1) for m in (block.q, block.k, block.v))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd) + causal, dim=-1)
        x = x + lin(block.o, (att @ v).transpose(0, 1).reshape(n, d))
        x = x + lin(block.fc2, torch.nn.functional.gelu(lin(block.fc1, norm(block.ln2, x))))
    return norm(model.ln_f, x) @ model.embed.weight.T
