"""Small model factories and a finite-difference gradient checker shared by the LM tests."""

import numpy as np

from nacanon import lm
from nacanon.codec import AcousticTokens
from nacanon.semantic import SemanticTokens

NS, NQ = 10, 6


def small_coarse(seed=1, **kw):
    shape = dict(n_s=NS, n_q=NQ, q_coarse=2, width=16, heads=2, blocks=2, positions=64, window=8)
    shape.update(kw)
    return lm.init_coarse(lm.CoarseShape(**shape), seed)


def small_fine(level=2, q=4, seed=1, **kw):
    shape = dict(n_q=NQ, q=q, level=level, width=16, heads=2, blocks=2, positions=64, window=8)
    shape.update(kw)
    return lm.init_fine(lm.FineShape(**shape), seed)


def random_seq(rng, t=5, tp=3, q=3):
    s = SemanticTokens(rng.integers(0, NS, t), NS)
    p = AcousticTokens(rng.integers(0, NQ, (q, tp)), NQ)
    a = AcousticTokens(rng.integers(0, NQ, (q, t)), NQ)
    return lm.flatten_coarse(s, p, a, 2)


def finite_difference_check(model, loss_fn, batch, rng, per_tensor=6, eps=1e-4):
    """Largest relative error between analytic and central-difference gradients per tensor."""
    _, grads = loss_fn(model, batch)
    worst = {}
    for name, value in model.params.items():
        errs = [0.0]
        for _ in range(per_tensor):
            idx = tuple(int(rng.integers(d)) for d in value.shape)
            orig = value[idx]
            value[idx] = orig + eps
            up, _ = loss_fn(model, batch)
            value[idx] = orig - eps
            down, _ = loss_fn(model, batch)
            value[idx] = orig
            num = (up - down) / (2 * eps)
            ana = grads[name][idx]
            scale = abs(num) + abs(ana)
            if scale > 1e-7:
                errs.append(abs(num - ana) / scale)
        worst[name] = max(errs)
    return worst


def brute_force_eer(targets, nontargets):
    """Independent oracle: explicit loop over every candidate threshold."""
    best = None
    for t in sorted(set(targets) | set(nontargets)):
        miss = sum(1 for x in targets if x < t) / len(targets)
        fa = sum(1 for x in nontargets if x >= t) / len(nontargets)
        gap = abs(miss - fa)
        if best is None or gap < best[0]:
            best = (gap, (miss + fa) / 2)
    return best[1]
