"""Benchmark objectives, constraint predicates, and box normalization.

Native problem domains are mapped to the optimizer's working box [-1, 1]^n by
an exact affine bijection.  Objectives are vectorized over a leading batch
axis and pure; minimization problems are handled by negating the objective
when fitness values are requested.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

FRACTAL_DEPTH_DEFAULT = 21  # |coefficient| = 0.7^20 ~ 8e-4, below precision targets


# ---------------------------------------------------------------------------
# box normalization


@dataclass(frozen=True)
class AffineMap:
    """Per-dimension affine bijection between a native box and [-1, 1]^n."""

    scale: np.ndarray  # (upper - lower) / 2
    shift: np.ndarray  # (upper + lower) / 2

    @classmethod
    def from_box(cls, lower: np.ndarray, upper: np.ndarray) -> "AffineMap":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if not np.all(lower < upper):
            raise ValueError("box must satisfy lower < upper componentwise")
        return cls(scale=(upper - lower) / 2.0, shift=(upper + lower) / 2.0)

    def normalize(self, x_native: np.ndarray) -> np.ndarray:
        return (np.asarray(x_native, dtype=float) - self.shift) / self.scale

    def denormalize(self, x_norm: np.ndarray) -> np.ndarray:
        return np.asarray(x_norm, dtype=float) * self.scale + self.shift


# ---------------------------------------------------------------------------
# constructed 1-D objectives


def _fractal_coefficients(depth: int):
    if depth < 1:
        raise ValueError("depth must be >= 1")
    i = np.arange(depth)
    a = -((-0.7) ** i)
    b = (-0.7) ** i.astype(float)
    b[0] = 0.0
    k = (2.0**i) * np.pi
    return a, b, k


def fractal_objective(x, depth: int = FRACTAL_DEPTH_DEFAULT):
    """Truncated fractal series sum_i a_i sin(k_i x) + b_i cos(k_i x).

    Coefficients: k_i = 2^i pi, a_i = -(-0.7)^i, b_i = (-0.7)^i with b_0 = 0.
    Countless local minima on [0, 1]; global structure set by the first terms.
    """
    a, b, k = _fractal_coefficients(depth)
    x = np.asarray(x, dtype=float)
    phase = x[..., None] * k
    return np.sum(a * np.sin(phase) + b * np.cos(phase), axis=-1)


def fourier_partial_objective(x, t_real: float):
    """Low-frequency partial sum, continuous in the real-valued truncation point.

    Full terms 0..floor(t) plus the next term faded in with weight t - floor(t),
    so integer t keeps exactly t + 1 full terms and the sum grows continuously
    from the single convex base term at t = 0.
    """
    if t_real < 0:
        raise ValueError("t_real must be >= 0")
    m = int(np.floor(t_real))
    frac = t_real - m
    a, b, k = _fractal_coefficients(m + 2)
    x = np.asarray(x, dtype=float)
    phase = x[..., None] * k
    terms = a * np.sin(phase) + b * np.cos(phase)
    return np.sum(terms[..., : m + 1], axis=-1) + frac * terms[..., m + 1]


def multimodal_fractal(x, depth: int = FRACTAL_DEPTH_DEFAULT):
    """Symmetrized fractal (F(x) + F(1 - x)) / 2 with two mirrored global optima."""
    x = np.asarray(x, dtype=float)
    return 0.5 * (fractal_objective(x, depth) + fractal_objective(1.0 - x, depth))


# ---------------------------------------------------------------------------
# rotated/translated benchmark bowls


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix from QR of a Gaussian draw, sign-fixed for determinism."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    _check_rotation(q)
    return q


def _check_rotation(rotation: np.ndarray) -> None:
    err = np.max(np.abs(rotation.T @ rotation - np.eye(rotation.shape[0])))
    if err > 1e-8:
        raise ValueError(f"rotation is not orthogonal (max |Q^T Q - I| = {err:.3e})")


def _rotate_shift(x: np.ndarray, rotation, shift):
    z = np.atleast_2d(np.asarray(x, dtype=float))
    if shift is not None:
        z = z - np.asarray(shift, dtype=float)
    if rotation is not None:
        z = z @ np.asarray(rotation, dtype=float).T
    return z


def f1_2017(x, rotation=None, shift=None):
    """Severely ill-conditioned bowl: z_1^2 + 1e6 * sum_{j>=2} z_j^2."""
    z = _rotate_shift(x, rotation, shift)
    vals = z[:, 0] ** 2 + 1e6 * np.sum(z[:, 1:] ** 2, axis=1)
    return vals if np.asarray(x).ndim > 1 else vals[0]


def f4_2017(x, rotation=None, shift=None):
    """Rastrigin bowl: sum_j z_j^2 - 10 cos(2 pi z_j) + 10."""
    z = _rotate_shift(x, rotation, shift)
    vals = np.sum(z**2 - 10.0 * np.cos(2.0 * np.pi * z) + 10.0, axis=1)
    return vals if np.asarray(x).ndim > 1 else vals[0]


# ---------------------------------------------------------------------------
# circle packing in the unit square


def _simplex_maximize(A: np.ndarray, b: np.ndarray, c: np.ndarray,
                      tol: float = 1e-11, max_iter: int = 20000):
    """Dense primal simplex for max c.x s.t. A x <= b, x >= 0, with b >= 0.

    Bland's smallest-index rule on entering and leaving variables makes the
    pivot sequence deterministic and cycle-free.
    """
    m, n = A.shape
    tab = np.zeros((m + 1, n + m + 1))
    tab[:m, :n] = A
    tab[:m, n:n + m] = np.eye(m)
    tab[:m, -1] = b
    tab[m, :n] = -c
    basis = list(range(n, n + m))
    for _ in range(max_iter):
        enter = -1
        for col in range(n + m):
            if tab[m, col] < -tol:
                enter = col
                break
        if enter < 0:
            break
        col_vals = tab[:m, enter]
        pos = col_vals > tol
        if not np.any(pos):
            raise ArithmeticError("LP is unbounded")
        ratios = np.where(pos, tab[:m, -1] / np.where(pos, col_vals, 1.0), np.inf)
        rmin = ratios.min()
        leave = min(
            (i for i in range(m) if pos[i] and ratios[i] <= rmin + tol * (1.0 + rmin)),
            key=lambda i: basis[i],
        )
        pivot = tab[leave, enter]
        tab[leave] /= pivot
        col = tab[:, enter].copy()
        col[leave] = 0.0
        tab -= np.outer(col, tab[leave])
        basis[leave] = enter
    else:
        raise ArithmeticError("simplex failed to terminate")
    x = np.zeros(n)
    for i, bv in enumerate(basis):
        if bv < n:
            x[bv] = tab[i, -1]
    return float(tab[m, -1]), x


def circle_packing_radii(centers: np.ndarray) -> np.ndarray:
    """Radii maximizing the total, for fixed centers inside the unit square.

    Solves max sum r_i subject to r_i >= 0, r_i <= distance(c_i, walls) and
    r_i + r_j <= ||c_i - c_j|| for all pairs.  Coincident centers force both
    radii in the pair to zero.
    """
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    k = len(centers)
    walls = np.minimum.reduce([
        centers[:, 0], centers[:, 1], 1.0 - centers[:, 0], 1.0 - centers[:, 1]
    ])
    walls = np.maximum(walls, 0.0)
    rows = [np.eye(k)]
    bounds = [walls]
    if k > 1:
        iu, ju = np.triu_indices(k, 1)
        d = np.linalg.norm(centers[iu] - centers[ju], axis=1)
        d[d < 1e-12] = 0.0
        pair = np.zeros((len(iu), k))
        pair[np.arange(len(iu)), iu] = 1.0
        pair[np.arange(len(ju)), ju] = 1.0
        rows.append(pair)
        bounds.append(d)
    A = np.vstack(rows)
    b = np.concatenate(bounds)
    _, radii = _simplex_maximize(A, b, np.ones(k))
    return radii


def circle_packing_fitness(centers: np.ndarray) -> float:
    """Optimal sum of radii for the given centers."""
    return float(circle_packing_radii(centers).sum())


def _two_circle_fitness_batch(flat: np.ndarray) -> np.ndarray:
    """Vectorized exact LP optimum for the two-circle case: min(w1 + w2, d)."""
    flat = np.atleast_2d(flat)
    c1, c2 = flat[:, 0:2], flat[:, 2:4]
    w1 = np.minimum.reduce([c1[:, 0], c1[:, 1], 1 - c1[:, 0], 1 - c1[:, 1]])
    w2 = np.minimum.reduce([c2[:, 0], c2[:, 1], 1 - c2[:, 0], 1 - c2[:, 1]])
    w1 = np.maximum(w1, 0.0)
    w2 = np.maximum(w2, 0.0)
    d = np.hypot(c1[:, 0] - c2[:, 0], c1[:, 1] - c2[:, 1])
    return np.minimum(w1 + w2, d)


# ---------------------------------------------------------------------------
# problem container and fitness orientation


@dataclass(frozen=True)
class Problem:
    """A box-constrained objective with an optional membership constraint."""

    name: str
    dim: int
    lower: np.ndarray
    upper: np.ndarray
    objective: Callable[[np.ndarray], np.ndarray]  # native coords, batched
    sense: str = "minimize"
    constraint: Callable[[np.ndarray], np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.sense not in ("minimize", "maximize"):
            raise ValueError(f"unknown sense {self.sense!r}")
        if not np.all(self.lower < self.upper):
            raise ValueError("box must satisfy lower < upper componentwise")

    @property
    def affine(self) -> AffineMap:
        return AffineMap.from_box(self.lower, self.upper)

    def normalize(self, x_native):
        return self.affine.normalize(x_native)

    def denormalize(self, x_norm):
        return self.affine.denormalize(x_norm)


def raw_fitness(problem: Problem, x_norm: np.ndarray):
    """Fitness oriented for maximization, plus a feasibility mask.

    Points are denormalized, checked against the constraint predicate, and the
    objective is negated for minimization problems.  Infeasible entries carry
    NaN in the value array and False in the mask; the sampler assigns them
    weight zero.
    """
    x_norm = np.asarray(x_norm, dtype=float)
    single = x_norm.ndim == 1
    pts = np.atleast_2d(x_norm)
    native = problem.denormalize(pts)
    if problem.constraint is not None:
        feasible = np.asarray(problem.constraint(native), dtype=bool)
    else:
        feasible = np.ones(len(pts), dtype=bool)
    values = np.full(len(pts), np.nan)
    if np.any(feasible):
        vals = np.asarray(problem.objective(native[feasible]), dtype=float)
        values[feasible] = -vals if problem.sense == "minimize" else vals
    if single:
        return values[0], bool(feasible[0])
    return values, feasible


# ---------------------------------------------------------------------------
# registry


def _inside_unit_square(k: int):
    def constraint(native: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(native).reshape(len(np.atleast_2d(native)), k, 2)
        return np.all((pts >= 0.0) & (pts <= 1.0), axis=(1, 2))

    return constraint


def make_problem(pid: str, dim: int | None = None, depth: int = FRACTAL_DEPTH_DEFAULT,
                 rotation_seed: int | None = None,
                 lower: np.ndarray | None = None,
                 upper: np.ndarray | None = None) -> Problem:
    """Build a registered problem by id.

    Ids: "fractal", "fractal-mm", "f1-2017", "f4-2017", "circles-n<k>".
    `lower`/`upper` override the native box (used by restart refinement).
    """
    if pid == "fractal" or pid == "fractal-mm":
        fn = fractal_objective if pid == "fractal" else multimodal_fractal
        lo = np.zeros(1) if lower is None else np.asarray(lower, dtype=float)
        hi = np.ones(1) if upper is None else np.asarray(upper, dtype=float)
        return Problem(pid, 1, lo, hi,
                       lambda x, _fn=fn: _fn(x[:, 0], depth),
                       sense="minimize", meta={"depth": depth})
    if pid in ("f1-2017", "f4-2017"):
        n = dim or 2
        rotation = None
        shift = None
        meta = {}
        if rotation_seed is not None:
            rng = np.random.default_rng(np.random.SeedSequence([int(rotation_seed), n]))
            rotation = random_rotation(n, rng)
            shift = rng.uniform(-80.0, 80.0, size=n)
            meta = {"rotation_seed": rotation_seed}
        fn = f1_2017 if pid == "f1-2017" else f4_2017
        lo = np.full(n, -100.0) if lower is None else np.asarray(lower, dtype=float)
        hi = np.full(n, 100.0) if upper is None else np.asarray(upper, dtype=float)
        return Problem(pid, n, lo, hi,
                       lambda x, _fn=fn, _r=rotation, _s=shift: _fn(x, _r, _s),
                       sense="minimize", meta=meta)
    if pid.startswith("circles-n"):
        k = int(pid[len("circles-n"):])
        if k < 1:
            raise ValueError("circle count must be >= 1")
        n = 2 * k
        if k == 2:
            objective = _two_circle_fitness_batch
        else:
            def objective(x, _k=k):
                x = np.atleast_2d(x)
                return np.array([circle_packing_fitness(row.reshape(_k, 2)) for row in x])
        lo = np.zeros(n) if lower is None else np.asarray(lower, dtype=float)
        hi = np.ones(n) if upper is None else np.asarray(upper, dtype=float)
        return Problem(pid, n, lo, hi, objective, sense="maximize",
                       constraint=_inside_unit_square(k), meta={"circles": k})
    raise KeyError(f"unknown problem id {pid!r}")


def shrink_box(problem: Problem, center_native: np.ndarray, half_width) -> Problem:
    """Restart-refinement helper: same objective on a smaller box around a point.

    The shrunken box is clipped to the original domain and re-registered under
    the same id so normalization maps the new box to [-1, 1]^n.
    """
    center = np.asarray(center_native, dtype=float)
    hw = np.broadcast_to(np.asarray(half_width, dtype=float), center.shape)
    lo = np.maximum(problem.lower, center - hw)
    hi = np.minimum(problem.upper, center + hw)
    # keep a nonempty box even when the center sits on the original boundary
    span = hi - lo
    bad = span <= 0
    lo[bad] = np.maximum(problem.lower[bad], center[bad] - hw[bad])
    hi[bad] = lo[bad] + 2 * hw[bad]
    return Problem(problem.name, problem.dim, lo, hi, problem.objective,
                   sense=problem.sense, constraint=problem.constraint,
                   meta=dict(problem.meta))


def list_problems() -> list[str]:
    return ["fractal", "fractal-mm", "f1-2017", "f4-2017", "circles-n<k>"]
