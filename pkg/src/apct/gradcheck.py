"""End-to-end gradient check of the full training loss against central differences."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .geometry import gen_shape
from .model import ModelConfig, cast_params, forward_groups, init_params, prepare_batch
from .rng import keyed_rng
from .training import loss_for


@dataclass
class GradcheckResult:
    checked: int
    max_rel_error: float
    tolerance: float
    seconds: float
    worst: list[tuple[str, int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: {self.checked} entries, max relative error "
            f"{self.max_rel_error:.3e} (tolerance {self.tolerance:.0e}), {self.seconds:.1f}s"
        )


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _pick_entries(params, count, rng):
    """One entry from every tensor, the rest uniformly over all entries."""
    names = list(params)
    picks = [(name, int(rng.integers(params[name].data.size))) for name in names]
    sizes = np.array([params[n].data.size for n in names], dtype=float)
    while len(picks) < count:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        picks.append((name, int(rng.integers(params[name].data.size))))
    return picks


def run_gradcheck(
    cfg: ModelConfig | None = None,
    n_entries: int = 200,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    floor: float = 1e-8,
    batch: int = 2,
    seed: int = 0,
) -> GradcheckResult:
    """Compare autodiff gradients of the train-mode loss with finite differences.

    Runs in float64. The key masks sampled by the first forward pass are
    replayed for every perturbed evaluation so the loss is a deterministic
    function of the parameters.
    """
    t0 = time.perf_counter()
    cfg = cfg or ModelConfig()
    rng = keyed_rng("gradcheck", seed)
    params = cast_params(init_params(cfg, seed), np.float64)
    for p in params.values():
        p.data += rng.normal(0.0, 0.02, p.data.shape)
    labels = np.arange(batch) % cfg.num_classes
    clouds = [gen_shape(int(c), seed * 1000 + i, 128) for i, c in enumerate(labels)]
    centers, rel = prepare_batch(clouds, cfg)

    with tn.Tape() as tape:
        out = forward_groups(centers, rel, cfg, params, train=True, rng=rng)
        loss = loss_for(out, labels, cfg)
    grads = tn.backward(tape, loss, params.values())
    masks = out.masks

    def loss_value() -> float:
        o = forward_groups(centers, rel, cfg, params, train=True, masks=masks)
        return float(loss_for(o, labels, cfg).data)

    worst, max_err = [], 0.0
    for name, flat in _pick_entries(params, n_entries, rng):
        arr = params[name].data.reshape(-1)
        orig = arr[flat]
        arr[flat] = orig + step
        up = loss_value()
        arr[flat] = orig - step
        down = loss_value()
        arr[flat] = orig
        numeric = (up - down) / (2 * step)
        analytic = float(grads[params[name]].reshape(-1)[flat])
        err = relative_error(analytic, numeric, floor)
        worst.append((name, flat, analytic, numeric, err))
        max_err = max(max_err, err)
    worst.sort(key=lambda w: -w[-1])
    return GradcheckResult(len(worst), max_err, tolerance, time.perf_counter() - t0, worst[:5])
