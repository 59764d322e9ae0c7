"""Intensity-based affine registration.

Mean-squared-difference cost, minimized by coordinate descent with a
bracketing line search per parameter over a coarse-to-fine Gaussian pyramid.
A rigid pass (6 parameters) runs through the whole pyramid first; the full
12-parameter affine is then refined at the finest level.  Optimizing all 12
from the start lets shear trade off against rotation and stalls in shallow
valleys on small volumes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .transform import IDENTITY_PARAMS, N_PARAMS, AffineTransform
from .volume import Volume3D, VolumeError, resample_coords, trilinear_sample, voxel_map

log = logging.getLogger(__name__)


class RegistrationError(ValueError):
    pass


@dataclass(frozen=True)
class RegistrationConfig:
    levels: int = 3
    max_iterations: int = 40
    # Initial line-search steps: mm, degrees, scale fraction, shear.
    translation_step: float = 2.0
    rotation_step_deg: float = 2.0
    scale_step: float = 0.02
    shear_step: float = 0.02
    min_step_fraction: float = 1e-3
    # Gaussian pre-smoothing (voxels) of both images; damps the bias that
    # trilinear interpolation blur puts on sharp edges.
    smoothing_sigma: float = 1.0
    optimize_scale_shear: bool = True
    rigid_first: bool = True
    match_intensity: bool = False

    def __post_init__(self):
        if self.levels < 1 or self.max_iterations < 1:
            raise RegistrationError("levels and max_iterations must be >= 1")
        steps = (self.translation_step, self.rotation_step_deg, self.scale_step, self.shear_step)
        if min(steps) <= 0 or not 0 < self.min_step_fraction < 1:
            raise RegistrationError("initial steps must be positive and min_step_fraction in (0, 1)")
        if self.smoothing_sigma < 0:
            raise RegistrationError("smoothing_sigma must be >= 0")

    def steps(self) -> np.ndarray:
        return np.array([self.translation_step] * 3
                        + [np.deg2rad(self.rotation_step_deg)] * 3
                        + [self.scale_step] * 3 + [self.shear_step] * 3)


class _Level:
    """Cost evaluator on one pyramid level."""

    def __init__(self, moving: np.ndarray, fixed: np.ndarray, spacing: np.ndarray, center: np.ndarray):
        self.moving = moving
        self.fixed = fixed.astype(np.float64)
        self.spacing = spacing
        self.center = center
        self.n_evals = 0

    def cost(self, params: np.ndarray) -> float:
        self.n_evals += 1
        try:
            T = AffineTransform.from_params(params, self.center)
            M, off = voxel_map(T, self.spacing, self.spacing)
        except np.linalg.LinAlgError:
            return np.inf
        except ValueError:
            return np.inf
        values, inside = trilinear_sample(self.moving, resample_coords(self.fixed.shape, M, off))
        n = int(inside.sum())
        if n == 0:
            return np.inf
        diff = values[inside] - self.fixed[inside]
        return float(diff @ diff / n)


def _pyramid_level(data: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return data.astype(np.float64)
    smoothed = ndimage.gaussian_filter(data.astype(np.float64), factor / 2.0, mode="constant")
    return smoothed[::factor, ::factor, ::factor]


def _intensity_scaled(data: np.ndarray) -> np.ndarray:
    fg = data[data > 0]
    return data / fg.mean() if fg.size else data


def _line_search(f, p: np.ndarray, d: np.ndarray, f0: float, max_expand: int = 8):
    """Bracket a minimum of ``f`` along ``p + t*d`` and refine with a parabola."""
    def at(t):
        return f(p + t * d)

    fp, fm = at(1.0), at(-1.0)
    if fp >= f0 and fm >= f0:
        if np.isfinite(fp) and np.isfinite(fm):
            denom = fp - 2.0 * f0 + fm
            if denom > 0:
                t = 0.5 * (fm - fp) / denom
                ft = at(t)
                if ft < f0:
                    return p + t * d, ft
        return p, f0
    step = 1.0 if fp < fm else -1.0
    ts, fs = [0.0, step], [f0, min(fp, fm)]
    for _ in range(max_expand):
        step *= 2.0
        t_next = ts[-1] + step
        ts.append(t_next)
        fs.append(at(t_next))
        if fs[-1] >= fs[-2]:
            break
    best = int(np.argmin(fs))
    t_best, f_best = ts[best], fs[best]
    if 0 < best < len(ts) - 1:
        (ta, tb, tc), (fa, fb, fc) = ts[best - 1:best + 2], fs[best - 1:best + 2]
        denom = (tb - ta) * (fb - fc) - (tb - tc) * (fb - fa)
        if denom != 0 and np.isfinite(denom):
            t = tb - 0.5 * ((tb - ta) ** 2 * (fb - fc) - (tb - tc) ** 2 * (fb - fa)) / denom
            ft = at(t)
            if ft < f_best:
                t_best, f_best = t, ft
    return p + t_best * d, f_best


def _optimize_level(cost, x0: np.ndarray, steps: np.ndarray, active: np.ndarray,
                    max_iterations: int, min_steps: np.ndarray, rtol: float = 1e-7):
    """Coordinate descent with a Hooke-Jeeves pattern move after each sweep."""
    x = x0.copy()
    fx = cost(x)
    h = steps.copy()
    for _ in range(max_iterations):
        base, f_base = x.copy(), fx
        for i in np.flatnonzero(active):
            e = np.zeros_like(x)
            e[i] = h[i]
            x, fx = _line_search(cost, x, e, fx)
        if f_base - fx > rtol * f_base:
            x, fx = _line_search(cost, x, x - base, fx)
        else:
            h *= 0.5
            if np.all(h[active] < min_steps[active]):
                break
    return x, fx


def register_affine(moving: Volume3D, fixed: Volume3D, config: RegistrationConfig | None = None
                    ) -> tuple[AffineTransform, float]:
    """Find ``T`` so that ``resample_affine(moving, T, reference=fixed)`` matches ``fixed``.

    Returns the transform (with its 12 parameters and rotation center set)
    and the final mean-squared cost at full resolution, which never exceeds
    the identity cost.
    """
    config = config or RegistrationConfig()
    if moving.size == 0 or fixed.size == 0:
        raise RegistrationError("registration needs nonempty volumes")
    if not np.allclose(moving.spacing, fixed.spacing):
        raise VolumeError("moving and fixed must share voxel spacing")
    mov, fix = moving.data, fixed.data
    if config.match_intensity:
        mov, fix = _intensity_scaled(mov.astype(np.float64)), _intensity_scaled(fix.astype(np.float64))
    if config.smoothing_sigma > 0:
        mov = ndimage.gaussian_filter(mov.astype(np.float64), config.smoothing_sigma, mode="constant")
        fix = ndimage.gaussian_filter(fix.astype(np.float64), config.smoothing_sigma, mode="constant")
    spacing = np.asarray(fixed.spacing, dtype=np.float64)
    center = (np.array(fixed.dims) - 1) / 2.0 * spacing

    full = _Level(mov.astype(np.float64), fix, spacing, center)
    identity_cost = full.cost(IDENTITY_PARAMS)
    if not np.isfinite(identity_cost):
        raise RegistrationError("moving and fixed fields of view do not overlap")

    rigid = np.zeros(N_PARAMS, dtype=bool)
    rigid[:6] = True
    full_set = np.ones(N_PARAMS, dtype=bool) if config.optimize_scale_shear else rigid
    # Search in millimetre-equivalent units: non-translation parameters are
    # multiplied by the field radius so equal steps move the edge equally.
    radius = 0.5 * float(np.max(np.array(fixed.dims) * spacing))
    unit = np.array([1.0] * 3 + [radius] * 9)
    steps = config.steps() * unit
    min_steps = steps * config.min_step_fraction
    x = np.zeros(N_PARAMS)

    def to_params(x):
        return IDENTITY_PARAMS + x / unit

    pyramid_set = rigid if config.rigid_first else full_set
    for lev in range(config.levels - 1, -1, -1):
        factor = 2 ** lev
        if lev == 0:
            level = full
        else:
            m = _pyramid_level(mov, factor)
            f = _pyramid_level(fix, factor)
            if min(f.shape) < 4:
                continue
            level = _Level(m, f, spacing * factor, center)
        x, cost = _optimize_level(lambda x: level.cost(to_params(x)), x, steps * factor, pyramid_set,
                                  config.max_iterations, min_steps)
        log.debug("level %d: cost %.6g after %d evaluations", lev, cost, level.n_evals)

    if config.rigid_first and config.optimize_scale_shear:
        # Smaller steps: the rigid solution is already close.
        x_aff, cost_aff = _optimize_level(lambda x: full.cost(to_params(x)), x, steps * 0.25, full_set,
                                          config.max_iterations, min_steps)
        if cost_aff < cost:
            x = x_aff

    p = to_params(x)
    final_cost = full.cost(p)
    if not final_cost <= identity_cost:
        p, final_cost = IDENTITY_PARAMS.copy(), identity_cost
    return AffineTransform.from_params(p, center), final_cost
