"""Finite-difference check of the full training loss on a miniature episode."""

import math
from dataclasses import dataclass

import numpy as np

from faith import tensor as T
from faith.data import gen_planted_motif
from faith.trainer import TrainConfig, episode_forward, init_model, plan_tasks, rng_for


@dataclass
class GradReport:
    per_tensor: dict  # name -> (coordinates checked, max relative error)
    errors: np.ndarray  # relative error of every checked coordinate
    tol: float
    min_fraction: float
    resolution: float = 0.0
    unresolved: int = 0

    @property
    def fraction_ok(self):
        return float(np.mean(self.errors < self.tol)) if len(self.errors) else 0.0

    @property
    def passed(self):
        return len(self.errors) > 0 and self.fraction_ok >= self.min_fraction

    def lines(self):
        out = [f"{name:28s} n={n:3d} max_rel_err={err:.3e}"
               for name, (n, err) in self.per_tensor.items()]
        out.append(f"fd resolution={self.resolution:.3e}, coordinates below it={self.unresolved}")
        out.append(f"coordinates={len(self.errors)} below {self.tol:g}: "
                   f"{self.fraction_ok:.4f} -> {'PASS' if self.passed else 'FAIL'}")
        return out


def _rel(a, b, floor):
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradcheck(seed=0, coords=256, step=1e-6, tol=1e-4, min_fraction=0.99, config=None):
    """Compare tape gradients of the total loss with central differences.

    The episode is N=2, K=2, Q=2, P=1 at default widths.  Dropout stays on;
    every forward pass redraws the same masks from a fixed substream, so the
    loss is a deterministic function of the parameters.
    """
    ds = gen_planted_motif(4, 12, seed=seed)
    cfg = config or TrainConfig(n=2, k=2, q=2, p=1, seed=seed)
    state = init_model(cfg, ds.num_features, len(ds.base_classes))
    tasks = plan_tasks(state, ds, "base", rng_for(seed, "gradcheck"))

    def forward():
        return episode_forward(state, ds, tasks, True, rng_for(seed, "gradcheck-dropout"))

    state.zero_grad()
    with T.Tape() as tape:
        res = forward()
    T.backward(res.loss, tape)
    # smallest derivative a central difference can see at this loss size;
    # below it both sides are round-off and only their gap is compared
    resolution = max(np.finfo(np.float64).eps * max(abs(res.loss.item()), 1.0) / step, 1e-8)

    rng = rng_for(seed, "gradcheck-coords")
    names = sorted(state.params)
    per = max(1, math.ceil(coords / len(names)))
    per_tensor, errors, unresolved = {}, [], 0
    for name in names:
        p = state.params[name]
        grad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = rng.choice(p.data.size, size=min(per, p.data.size), replace=False)
        errs = []
        for f in flat:
            i = np.unravel_index(f, p.data.shape)
            old = p.data[i]
            p.data[i] = old + step
            hi = forward().loss.item()
            p.data[i] = old - step
            lo = forward().loss.item()
            p.data[i] = old
            num = (hi - lo) / (2 * step)
            unresolved += max(abs(grad[i]), abs(num)) < resolution
            errs.append(_rel(grad[i], num, resolution))
        per_tensor[name] = (len(errs), max(errs))
        errors += errs
    state.zero_grad()
    return GradReport(per_tensor, np.array(errors), tol, min_fraction, resolution, int(unresolved))
