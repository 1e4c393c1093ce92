"""Gradient-based refinement of the two normal maps.

Minimizes the two-bounce rendering error plus an anchor to the initial maps
and a quadratic neighbor-smoothness term, by projected gradient descent on
the unit sphere (tangent-plane step, renormalize) with backtracking. The
first phase freezes the first-surface map and optimizes only the second,
then both are optimized jointly; the first-surface estimate is typically the
more reliable one, so fitting the exit surface first avoids dragging both
maps around early.

Pixels currently in total internal reflection carry no photometric term and
are held near their initial values by the anchor alone. The returned pair is
the iterate with the lowest rendering loss seen, so the reported loss trace
is non-increasing by construction.
"""

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .envmap import EnvironmentMap
from .errors import DataError
from .optics import NormalMapPair, render_loss_and_grad


@dataclass(frozen=True)
class RefineConfig:
    phase1_iters: int = 500
    phase2_iters: int = 500
    step: float = 0.01
    lambda_anchor: float = 0.1
    lambda_smooth: float = 0.05
    divergence_window: int = 50
    max_backtracks: int = 20


@dataclass(frozen=True)
class RefineResult:
    pair: NormalMapPair
    trace: np.ndarray  # best-so-far rendering loss per accepted iteration
    final_render_loss: float
    initial_render_loss: float
    aborted: bool
    diagnostic: str


def _smooth_energy_grad(n, mask):
    """Quadratic neighbor smoothness sum_edges |N_p - N_q|^2 over masked pixels."""
    h, w = mask.shape
    e = 0.0
    g = np.zeros_like(n)
    mf = mask.astype(np.float64)
    for dr, dc in ((1, 0), (0, 1)):
        rs = slice(dr, h)
        rd = slice(0, h - dr)
        cs = slice(dc, w)
        cd = slice(0, w - dc)
        both = (mf[rd, cd] * mf[rs, cs])[..., None]
        diff = (n[rd, cd] - n[rs, cs]) * both
        e += float(np.sum(diff * diff))
        g[rd, cd] += 2.0 * diff
        g[rs, cs] -= 2.0 * diff
    return e, g


def _tangent(g, n):
    return g - np.einsum("...k,...k->...", g, n)[..., None] * n


def _renorm(n, valid):
    lens = np.linalg.norm(n, axis=-1, keepdims=True)
    out = n / np.where(lens > 1e-12, lens, 1.0)
    return np.where(valid[..., None], out, 0.0)


def refine_normals(image, env: EnvironmentMap, initial: NormalMapPair, camera: Camera,
                   ior, config: RefineConfig = RefineConfig()):
    """Two-phase refinement; see module docstring for the energy."""
    h, w = initial.shape
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (h, w, 3):
        raise DataError("image dimensions must match the normal maps")
    valid = initial.valid
    n1_init = initial.n_first.copy()
    n2_init = initial.n_second.copy()
    n1 = n1_init.copy()
    n2 = n2_init.copy()

    la = float(config.lambda_anchor)
    ls = float(config.lambda_smooth)

    def photometric(n1v, n2v):
        return render_loss_and_grad(image, env, initial.with_normals(n1v, n2v), camera, ior)

    def total_energy(res, n1v, n2v, smooth_mask):
        e = res.loss
        e += la * (float(np.sum((n1v - n1_init)[valid] ** 2)) + float(np.sum((n2v - n2_init)[valid] ** 2)))
        if ls > 0:
            e1, _ = _smooth_energy_grad(n1v, smooth_mask)
            e2, _ = _smooth_energy_grad(n2v, smooth_mask)
            e += ls * (e1 + e2)
        return e

    res = photometric(n1, n2)
    initial_render_loss = res.loss
    best_loss = res.loss
    best_pair = (n1.copy(), n2.copy(), res.tir.copy())
    trace = [best_loss]
    step = float(config.step)
    aborted = False
    diagnostic = ""
    since_best = 0

    def run_phase(iters, freeze_first):
        nonlocal n1, n2, res, best_loss, best_pair, step, aborted, diagnostic, since_best
        for it in range(int(iters)):
            smooth_mask = valid & ~res.tir
            e_cur = total_energy(res, n1, n2, smooth_mask)
            g1 = res.grad_first + 2.0 * la * np.where(valid[..., None], n1 - n1_init, 0.0)
            g2 = res.grad_second + 2.0 * la * np.where(valid[..., None], n2 - n2_init, 0.0)
            if ls > 0:
                _, sg1 = _smooth_energy_grad(n1, smooth_mask)
                _, sg2 = _smooth_energy_grad(n2, smooth_mask)
                g1 = g1 + ls * sg1
                g2 = g2 + ls * sg2
            g1 = np.where(valid[..., None], _tangent(g1, n1), 0.0)
            g2 = np.where(valid[..., None], _tangent(g2, n2), 0.0)
            if freeze_first:
                g1 = np.zeros_like(g1)
            # per-pixel normalization: bilinear kinks make raw gradient
            # magnitudes vary wildly, which stalls a single global step size
            norms = np.sqrt(np.sum(g1 * g1, axis=-1) + np.sum(g2 * g2, axis=-1))
            scale = float(np.mean(norms[valid])) if np.any(valid) else 1.0
            if scale <= 0:
                return "converged"
            denom = (norms + scale + 1e-30)[..., None]
            g1 = g1 / denom
            g2 = g2 / denom

            accepted = False
            s = step
            for _ in range(int(config.max_backtracks)):
                c1 = _renorm(n1 - s * g1, valid)
                c2 = _renorm(n2 - s * g2, valid)
                cres = photometric(c1, c2)
                e_new = total_energy(cres, c1, c2, smooth_mask)
                if e_new <= e_cur:
                    accepted = True
                    break
                s *= 0.5
            if not accepted:
                return "converged"
            n1, n2, res = c1, c2, cres
            step = min(s * 1.2, config.step)
            if res.loss < best_loss:
                best_loss = res.loss
                best_pair = (n1.copy(), n2.copy(), res.tir.copy())
                since_best = 0
            elif res.loss > best_loss:
                since_best += 1
            else:
                since_best = 0
            trace.append(best_loss)
            if since_best >= int(config.divergence_window):
                return "diverged"
        return "iterations"

    outcome = run_phase(config.phase1_iters, True)
    if outcome != "diverged":
        step = float(config.step)
        since_best = 0
        outcome = run_phase(config.phase2_iters, False)
    if outcome == "diverged":
        aborted = True
        diagnostic = (
            f"rendering loss failed to improve for {config.divergence_window} accepted steps"
        )

    bn1, bn2, btir = best_pair
    pair = NormalMapPair(bn1, bn2, valid, btir & valid)
    return RefineResult(
        pair=pair,
        trace=np.asarray(trace),
        final_render_loss=best_loss,
        initial_render_loss=initial_render_loss,
        aborted=aborted,
        diagnostic=diagnostic,
    )
