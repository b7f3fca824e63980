"""Finite-difference verification of the analytic gradients.

Checks run in float64: with the h = 1e-3 central differences used here,
float32 rounding would already contribute errors of the same order as the
tolerance, so single precision cannot distinguish a correct gradient from a
broken one.  Only a sample of entries per parameter block is probed; each
probe costs two full forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError
from . import tensorops as T
from .layers import (
    Autoencoder,
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    LeakyReLU,
    Sigmoid,
    build_autoencoder,
)

_REL_FLOOR = 1e-8


@dataclass
class GradCheckEntry:
    block: str
    n_checked: int
    max_rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]

    @property
    def max_rel_err(self) -> float:
        return max(e.max_rel_err for e in self.entries)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_err < tol


def _loss_and_signs(model: Autoencoder, x: np.ndarray, target: np.ndarray):
    out = model.forward(x, training=True)
    loss, _ = T.mse_loss(out, target)
    # Training-mode LeakyReLU layers keep their sign mask until the next pass.
    signs = [l._neg.copy() for l in model.layers if isinstance(l, LeakyReLU)]
    return loss, signs


def _numeric_entry(model, x, target, arr: np.ndarray, idx: int, h: float):
    """Central difference for one entry; flags probes that cross a kink.

    If the +-h evaluations disagree on the sign of any LeakyReLU input, the
    loss is not differentiable along this direction at this step size and
    the probe is meaningless, so the caller resamples instead.
    """
    old = arr.flat[idx]
    arr.flat[idx] = old + h
    l_hi, s_hi = _loss_and_signs(model, x, target)
    arr.flat[idx] = old - h
    l_lo, s_lo = _loss_and_signs(model, x, target)
    arr.flat[idx] = old
    crossed = any((a != b).any() for a, b in zip(s_hi, s_lo))
    return (l_hi - l_lo) / (2.0 * h), crossed


def gradient_check(
    model: Autoencoder,
    x: np.ndarray,
    target: np.ndarray | None = None,
    n_samples: int = 30,
    h: float = 1e-3,
    seed: int = 0,
    check_input: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients of MSE(model(x), target) to central differences.

    Every parameter block (and the input, unless ``check_input`` is false)
    contributes up to ``n_samples`` randomly chosen entries.  The relative
    error of an entry is ``|ga - gn| / max(|ga|, |gn|, 1e-8)``.  Entries whose
    perturbation flips a LeakyReLU input sign are resampled.
    """
    x = np.asarray(x)
    if x.dtype != np.float64:
        raise InvalidInputError("gradient_check requires a float64 model and input")
    rng = np.random.default_rng(seed)
    if target is None:
        out = model.forward(x, training=True)
        target = rng.uniform(0.0, 1.0, size=out.shape)

    out = model.forward(x, training=True)
    _, dout = T.mse_loss(out, target)
    dx = model.backward(dout)

    blocks: list[tuple[str, np.ndarray, np.ndarray]] = []
    analytic = dict(model.named_grads())
    for name, param in model.named_params():
        blocks.append((name, param, analytic[name]))
    if check_input:
        blocks.append(("input", x, dx))

    entries = []
    for name, arr, ga in blocks:
        want = min(n_samples, arr.size)
        # Draw spares so kink-crossing probes can be replaced.
        idxs = rng.choice(arr.size, size=min(arr.size, 8 * want), replace=False)
        worst = 0.0
        checked = 0
        for idx in idxs:
            if checked >= want:
                break
            gn, crossed = _numeric_entry(model, x, target, arr, int(idx), h)
            if crossed:
                continue
            gai = float(ga.flat[idx])
            rel = abs(gai - gn) / max(abs(gai), abs(gn), _REL_FLOOR)
            worst = max(worst, rel)
            checked += 1
        entries.append(GradCheckEntry(name, checked, worst))
    return GradCheckReport(entries)


def _signed_uniform(rng, shape, lo=0.2, hi=1.0):
    # Keep activations away from the LeakyReLU kink so +-h stays on one side.
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def check_operator(
    kind: str,
    n_samples: int = 30,
    h: float | None = None,
    seed: int = 0,
    spatial: int = 16,
) -> GradCheckReport:
    """Gradient-check a single operator (or the full model) in isolation.

    ``kind`` is one of ``conv``, ``tconv``, ``batch_norm``, ``leaky_relu``,
    ``sigmoid`` or ``composition``.  The step defaults to 1e-3 for a single
    operator and 1e-5 for the composition, where a larger step would push
    many probes across a LeakyReLU kink deeper in the stack.
    """
    if h is None:
        h = 1e-5 if kind == "composition" else 1e-3
    rng = np.random.default_rng(seed)
    shape = (2, 3, spatial, spatial)
    if kind == "conv":
        layer = Conv2d(3, 4, 3, stride=2, padding=1, rng=rng, dtype=np.float64)
        model = Autoencoder([layer])
        x = rng.normal(0.0, 1.0, size=shape)
    elif kind == "tconv":
        layer = ConvTranspose2d(3, 4, 3, stride=2, padding=1, output_padding=1, rng=rng, dtype=np.float64)
        model = Autoencoder([layer])
        x = rng.normal(0.0, 1.0, size=shape)
    elif kind == "batch_norm":
        layer = BatchNorm2d(3, dtype=np.float64)
        layer.gamma[:] = rng.uniform(0.5, 1.5, size=3)
        layer.beta[:] = rng.normal(0.0, 0.5, size=3)
        model = Autoencoder([layer])
        x = rng.normal(0.0, 1.0, size=shape)
    elif kind == "leaky_relu":
        model = Autoencoder([LeakyReLU(0.01)])
        x = _signed_uniform(rng, shape)
    elif kind == "sigmoid":
        model = Autoencoder([Sigmoid()])
        x = rng.normal(0.0, 1.0, size=shape)
    elif kind == "composition":
        model = build_autoencoder(seed=seed, dtype=np.float64)
        x = rng.uniform(0.0, 1.0, size=shape)
    else:
        raise InvalidInputError(f"unknown operator kind {kind!r}")
    return gradient_check(model, x, n_samples=n_samples, h=h, seed=seed + 1)


OPERATOR_KINDS = ("conv", "tconv", "batch_norm", "leaky_relu", "sigmoid", "composition")
